"""Merged ICD/ATC knowledge graph: construction, ancestor augmentation, BFS queries."""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from kgetm.corpus import ATC, ICD, MODALITIES, CorpusFormatError, VocabEntry, Vocabulary

ICD_HIER = "icd-hier"
ATC_HIER = "atc-hier"
CROSS = "cross"
AUGMENTED = "augmented"
RELATIONS = (ICD_HIER, ATC_HIER, CROSS, AUGMENTED)

GRAPH_MAGIC = "kgetm-graph"

INF = math.inf


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class Node:
    id: int
    code: str
    modality: str
    level: int
    is_leaf: bool


class Hierarchy:
    """Rooted forest for one modality, given as child -> parent links."""

    def __init__(self, modality: str, parent_of: Mapping[str, str | None]):
        if modality not in MODALITIES:
            raise GraphError(f"unknown modality {modality!r}")
        self.modality = modality
        parents: dict[str, str | None] = {}
        for child, parent in parent_of.items():
            if parent is not None and parent not in parents:
                parents[parent] = None  # placeholder until its own line (if any)
            parents[child] = parent
        self.parent: dict[str, str | None] = parents
        self.depth: dict[str, int] = {}
        for code in self.parent:
            self._depth(code)

    def _depth(self, code: str) -> int:
        path = []
        cur: str | None = code
        seen = set()
        while cur is not None and cur not in self.depth:
            if cur in seen:
                raise GraphError(f"cycle in {self.modality} hierarchy through {cur!r}")
            seen.add(cur)
            path.append(cur)
            cur = self.parent[cur]
        base = -1 if cur is None else self.depth[cur]
        for c in reversed(path):
            base += 1
            self.depth[c] = base
        return self.depth[code]

    @classmethod
    def from_pairs(cls, modality: str, pairs: Iterable[tuple[str, str | None]]) -> "Hierarchy":
        parent_of: dict[str, str | None] = {}
        for child, parent in pairs:
            if child == parent:
                raise GraphError(f"cycle in {modality} hierarchy through {child!r}")
            old = parent_of.get(child)
            if old is not None and parent is not None and old != parent:
                raise GraphError(f"{child!r} has two parents: {old!r} and {parent!r}")
            if parent is not None or child not in parent_of:
                parent_of[child] = parent
        return cls(modality, parent_of)

    @property
    def codes(self) -> list[str]:
        return list(self.parent)

    @property
    def roots(self) -> list[str]:
        return [c for c, p in self.parent.items() if p is None]

    def ancestors(self, code: str) -> list[str]:
        out = []
        cur = self.parent[code]
        while cur is not None:
            out.append(cur)
            cur = self.parent[cur]
        return out


def read_hierarchy_file(path: str | Path) -> tuple[Hierarchy, Hierarchy]:
    """Parse ``child<TAB>parent<TAB>modality`` lines; parent ``-`` marks a root."""
    pairs: dict[str, list[tuple[str, str | None]]] = {ICD: [], ATC: []}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise CorpusFormatError(f"{path}:{lineno}: expected child, parent, modality")
            child, parent, modality = parts
            if modality not in MODALITIES:
                raise CorpusFormatError(f"{path}:{lineno}: unknown modality {modality!r}")
            pairs[modality].append((child, None if parent in ("", "-") else parent))
    try:
        return Hierarchy.from_pairs(ICD, pairs[ICD]), Hierarchy.from_pairs(ATC, pairs[ATC])
    except GraphError as exc:
        raise CorpusFormatError(f"{path}: {exc}") from exc


def read_cross_links(path: str | Path) -> list[tuple[str, str]]:
    links = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise CorpusFormatError(f"{path}:{lineno}: expected icd-code, atc-code")
            links.append((parts[0], parts[1]))
    return links


def write_hierarchy_file(path: str | Path, icd: Hierarchy, atc: Hierarchy) -> None:
    from kgetm.io import atomic_write_text

    lines = []
    for h in (icd, atc):
        for child, parent in h.parent.items():
            lines.append(f"{child}\t{parent if parent is not None else '-'}\t{h.modality}\n")
    atomic_write_text(path, "".join(lines))


def write_cross_links(path: str | Path, links: Sequence[tuple[str, str]]) -> None:
    from kgetm.io import atomic_write_text

    atomic_write_text(path, "".join(f"{a}\t{b}\n" for a, b in links))


class KnowledgeGraph:
    """Undirected graph over ICD and ATC codes with relation-tagged edges.

    ``parent[i]`` is the hierarchy parent of node ``i`` (-1 for roots); edges
    are stored as sorted ``(u, v)`` pairs mapped to their relation tag.
    """

    def __init__(self, nodes: Sequence[Node], parent: Sequence[int],
                 edges: Mapping[tuple[int, int], str], augmented: bool = False):
        self.nodes = tuple(nodes)
        self.parent = tuple(parent)
        self.edges = dict(edges)
        self.augmented = augmented
        self.index = {n.code: n.id for n in self.nodes}
        self._adj: list[list[int]] | None = None

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def codes(self) -> list[str]:
        return [n.code for n in self.nodes]

    def node(self, code: str) -> Node:
        return self.nodes[self.index[code]]

    def adjacency(self) -> list[list[int]]:
        """Sorted neighbor lists, cached."""
        if self._adj is None:
            adj: list[list[int]] = [[] for _ in self.nodes]
            for u, v in self.edges:
                adj[u].append(v)
                adj[v].append(u)
            self._adj = [sorted(a) for a in adj]
        return self._adj

    def neighbors(self, i: int) -> list[int]:
        return self.adjacency()[i]

    def degree(self) -> np.ndarray:
        return np.array([len(a) for a in self.adjacency()], dtype=np.int64)

    def ancestors(self, i: int) -> list[int]:
        out = []
        cur = self.parent[i]
        while cur >= 0:
            out.append(cur)
            cur = self.parent[cur]
        return out

    def edge_index(self, self_loops: bool = True) -> tuple[np.ndarray, np.ndarray]:
        """Directed ``(target, source)`` arrays covering both edge directions."""
        tgt, src = [], []
        for u, v in sorted(self.edges):
            tgt += [u, v]
            src += [v, u]
        if self_loops:
            tgt += range(len(self.nodes))
            src += range(len(self.nodes))
        return np.asarray(tgt, dtype=np.int64), np.asarray(src, dtype=np.int64)

    def relation_counts(self) -> dict[str, int]:
        counts = dict.fromkeys(RELATIONS, 0)
        for rel in self.edges.values():
            counts[rel] += 1
        return counts

    def without_augmentation(self) -> "KnowledgeGraph":
        edges = {e: r for e, r in self.edges.items() if r != AUGMENTED}
        return KnowledgeGraph(self.nodes, self.parent, edges, augmented=False)

    def leaves(self, modality: str) -> list[int]:
        return [n.id for n in self.nodes if n.modality == modality and n.is_leaf]

    def root_of(self, i: int) -> int:
        while self.parent[i] >= 0:
            i = self.parent[i]
        return i

    def vocabulary(self) -> Vocabulary:
        """Leaf codes of both modalities; category = index of the leaf's root among that modality's roots."""
        entries = []
        for modality in MODALITIES:
            roots = [n.id for n in self.nodes if n.modality == modality and self.parent[n.id] < 0]
            cat = {r: i for i, r in enumerate(roots)}
            for i in self.leaves(modality):
                entries.append(VocabEntry(self.nodes[i].code, modality, cat[self.root_of(i)]))
        return Vocabulary(entries)

    def vocab_node_ids(self, vocab: Vocabulary) -> tuple[np.ndarray, np.ndarray]:
        """Graph node ids of the ICD and ATC vocabulary entries, in vocabulary id order."""
        try:
            icd = np.array([self.index[c] for c in vocab.icd_codes], dtype=np.int64)
            atc = np.array([self.index[c] for c in vocab.atc_codes], dtype=np.int64)
        except KeyError as exc:
            raise GraphError(f"vocabulary code {exc.args[0]!r} is not a graph node") from None
        return icd, atc

    def save(self, path: str | Path) -> None:
        """Inspection/export format: ``N`` node lines then ``E`` edge lines."""
        from kgetm.io import atomic_write_text

        lines = [f"{GRAPH_MAGIC}\t1\taugmented={int(self.augmented)}\n"]
        for n in self.nodes:
            parent = self.nodes[self.parent[n.id]].code if self.parent[n.id] >= 0 else "-"
            lines.append(f"N\t{n.code}\t{n.modality}\t{parent}\n")
        for (u, v), rel in sorted(self.edges.items()):
            a, b = (v, u) if self.parent[v] == u else (u, v)
            lines.append(f"E\t{self.nodes[a].code}\t{self.nodes[b].code}\t{rel}\n")
        atomic_write_text(path, "".join(lines))

    @classmethod
    def load(cls, path: str | Path) -> "KnowledgeGraph":
        with open(path, encoding="utf-8") as fh:
            header = fh.readline().rstrip("\n").split("\t")
            if len(header) != 3 or header[0] != GRAPH_MAGIC:
                raise CorpusFormatError(f"{path}: not a graph export")
            augmented = header[2] == "augmented=1"
            pairs: dict[str, list] = {ICD: [], ATC: []}
            edge_lines = []
            for lineno, line in enumerate(fh, 2):
                parts = line.rstrip("\n").split("\t")
                if parts[0] == "N" and len(parts) == 4:
                    pairs[parts[2]].append((parts[1], None if parts[3] == "-" else parts[3]))
                elif parts[0] == "E" and len(parts) == 4:
                    edge_lines.append((lineno, parts[1], parts[2], parts[3]))
                else:
                    raise CorpusFormatError(f"{path}:{lineno}: malformed line")
        g = _from_hierarchies(Hierarchy.from_pairs(ICD, pairs[ICD]), Hierarchy.from_pairs(ATC, pairs[ATC]))
        edges = {}
        for lineno, a, b, rel in edge_lines:
            if rel not in RELATIONS or a not in g.index or b not in g.index:
                raise CorpusFormatError(f"{path}:{lineno}: bad edge")
            u, v = g.index[a], g.index[b]
            edges[(min(u, v), max(u, v))] = rel
        return cls(g.nodes, g.parent, edges, augmented)


def _from_hierarchies(icd: Hierarchy, atc: Hierarchy) -> KnowledgeGraph:
    nodes: list[Node] = []
    parent: list[int] = []
    index: dict[str, int] = {}
    for h in (icd, atc):
        has_child = {p for p in h.parent.values() if p is not None}
        for code in h.parent:
            if code in index:
                raise GraphError(f"code {code!r} appears in both hierarchies")
            index[code] = len(nodes)
            nodes.append(Node(len(nodes), code, h.modality, h.depth[code], code not in has_child))
    for h in (icd, atc):
        for code, p in h.parent.items():
            parent.append(index[p] if p is not None else -1)
    edges = {}
    for n in nodes:
        p = parent[n.id]
        if p >= 0:
            edges[(min(n.id, p), max(n.id, p))] = ICD_HIER if n.modality == ICD else ATC_HIER
    return KnowledgeGraph(nodes, parent, edges, augmented=False)


def build_graph(icd_hier: Hierarchy, atc_hier: Hierarchy,
                cross_links: Iterable[tuple[str, str]]) -> KnowledgeGraph:
    """Merge both hierarchies and the ICD-ATC links into one unaugmented graph."""
    if icd_hier.modality != ICD or atc_hier.modality != ATC:
        raise GraphError("expected an ICD hierarchy and an ATC hierarchy")
    g = _from_hierarchies(icd_hier, atc_hier)
    edges = dict(g.edges)
    for icd_code, atc_code in cross_links:
        for code in (icd_code, atc_code):
            if code not in g.index:
                raise GraphError(f"cross link references unknown code {code!r}")
        u, v = g.index[icd_code], g.index[atc_code]
        if g.nodes[u].modality != ICD or g.nodes[v].modality != ATC:
            raise GraphError(f"cross link ({icd_code!r}, {atc_code!r}) must join an ICD code to an ATC code")
        edges[(min(u, v), max(u, v))] = CROSS
    return KnowledgeGraph(g.nodes, g.parent, edges, augmented=False)


def augment_ancestors(g: KnowledgeGraph) -> KnowledgeGraph:
    """Link every node to all of its proper ancestors (beyond the parent)."""
    if g.augmented:
        raise GraphError("graph is already augmented")
    edges = dict(g.edges)
    for n in g.nodes:
        for a in g.ancestors(n.id)[1:]:
            key = (min(n.id, a), max(n.id, a))
            edges.setdefault(key, AUGMENTED)
    return KnowledgeGraph(g.nodes, g.parent, edges, augmented=True)


def shortest_distance(g: KnowledgeGraph, source: int, targets: Iterable[int]) -> float:
    """Hop count from ``source`` to the nearest node in ``targets`` (``inf`` if unreachable)."""
    targets = set(targets)
    if not targets:
        raise ValueError("target set is empty")
    n = len(g.nodes)
    for t in (source, *targets):
        if not 0 <= t < n:
            raise GraphError(f"unknown node {t}")
    if source in targets:
        return 0
    adj = g.adjacency()
    dist = {source: 0}
    queue = deque([source])
    while queue:
        u = queue.popleft()
        for v in adj[u]:
            if v not in dist:
                if v in targets:
                    return dist[u] + 1
                dist[v] = dist[u] + 1
                queue.append(v)
    return INF


def collapse_last_level(g: KnowledgeGraph, vocab: Vocabulary | None = None) -> dict[int, int]:
    """Map each leaf to its parent and every other node to itself.

    With ``vocab`` given, only leaves that are vocabulary codes are collapsed.
    """
    if g.augmented:
        raise GraphError("collapse expects the unaugmented graph")
    mapping = {}
    for n in g.nodes:
        collapse = n.is_leaf and g.parent[n.id] >= 0 and (vocab is None or n.code in vocab)
        mapping[n.id] = g.parent[n.id] if collapse else n.id
    return mapping


def collapsed_graph(g: KnowledgeGraph, mapping: Mapping[int, int]) -> KnowledgeGraph:
    """Quotient graph: nodes merged per ``mapping``; edges between merged images, self-loops dropped.

    Node ids are preserved; merged-away nodes remain as isolated placeholders.
    """
    edges: dict[tuple[int, int], str] = {}
    for (u, v), rel in sorted(g.edges.items()):
        a, b = mapping[u], mapping[v]
        if a != b:
            edges.setdefault((min(a, b), max(a, b)), rel)
    return KnowledgeGraph(g.nodes, g.parent, edges, augmented=g.augmented)
