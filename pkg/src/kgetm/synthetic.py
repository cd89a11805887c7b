"""Synthetic ICD/ATC taxonomies and EHR corpora with planted, graph-local topics."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from kgetm.corpus import ATC, ICD, PatientDocument, Vocabulary
from kgetm.graph import Hierarchy, KnowledgeGraph

ATC_GROUPS = "ABCDGHJLMNPRSV"


@dataclass(frozen=True)
class GraphGenConfig:
    n_chapters: int = 8
    icd_leaves: int = 200
    atc_leaves: int = 100
    links_per_drug: int = 2
    seed: int = 0


@dataclass(frozen=True)
class CorpusGenConfig:
    n_docs: int = 2000
    n_topics: int = 5
    min_tokens: int = 20
    max_tokens: int = 60
    icd_fraction: float = 0.6
    concentration: float = 0.3
    leaf_smoothness: float = 5.0
    background: float = 0.02
    prior_scale: float = 1.0


@dataclass
class SyntheticGroundTruth:
    beta_icd: np.ndarray   # K x V_icd, rows sum to 1
    beta_atc: np.ndarray   # K x V_atc
    theta: np.ndarray      # D x K
    topic_chapters: np.ndarray
    seed: int

    def save(self, path: str | Path) -> None:
        import io

        from kgetm.io import atomic_write_bytes

        buf = io.BytesIO()
        np.savez(buf, beta_icd=self.beta_icd, beta_atc=self.beta_atc, theta=self.theta,
                 topic_chapters=self.topic_chapters, seed=np.array(self.seed))
        atomic_write_bytes(path, buf.getvalue())

    @classmethod
    def load(cls, path: str | Path) -> "SyntheticGroundTruth":
        with np.load(path) as z:
            return cls(z["beta_icd"], z["beta_atc"], z["theta"], z["topic_chapters"], int(z["seed"]))


def _split(n: int, parts: int) -> list[int]:
    base, extra = divmod(n, parts)
    return [base + (i < extra) for i in range(parts)]


def synthetic_sources(cfg: GraphGenConfig) -> tuple[Hierarchy, Hierarchy, list[tuple[str, str]]]:
    """Four-level ICD chapters paired one-to-one with five-level ATC groups.

    Every drug is cross-linked to ``links_per_drug`` ICD leaves of its paired chapter.
    """
    if not 1 <= cfg.n_chapters <= len(ATC_GROUPS):
        raise ValueError(f"n_chapters must be in [1, {len(ATC_GROUPS)}]")
    if cfg.icd_leaves < cfg.n_chapters or cfg.atc_leaves < cfg.n_chapters:
        raise ValueError("need at least one ICD and one ATC leaf per chapter")
    rng = np.random.default_rng(cfg.seed)

    icd: dict[str, str | None] = {}
    chapter_leaves: list[list[str]] = []
    number = 1
    for c, n_leaves in enumerate(_split(cfg.icd_leaves, cfg.n_chapters)):
        chapter = f"CH{c + 1:02d}"
        icd[chapter] = None
        leaves = []
        n_cats = math.ceil(n_leaves / 4)
        n_blocks = math.ceil(n_cats / 3)
        for cats_in_block in _split(n_cats, n_blocks):
            first = number
            block = f"{first:03d}-{first + cats_in_block - 1:03d}"
            icd[block] = chapter
            for _ in range(cats_in_block):
                icd[f"{number:03d}"] = block
                number += 1
        cat_codes = [f"{first_cat:03d}" for first_cat in range(number - n_cats, number)]
        for cat, n_sub in zip(cat_codes, _split(n_leaves, n_cats)):
            for j in range(n_sub):
                icd[f"{cat}.{j}"] = cat
                leaves.append(f"{cat}.{j}")
        chapter_leaves.append(leaves)

    atc: dict[str, str | None] = {}
    group_drugs: list[list[str]] = []
    for g, n_leaves in enumerate(_split(cfg.atc_leaves, cfg.n_chapters)):
        letter = ATC_GROUPS[g]
        atc[letter] = None
        drugs = []
        n_chem = math.ceil(n_leaves / 3)
        n_pharm = math.ceil(n_chem / 2)
        n_ther = math.ceil(n_pharm / 2)
        chem_sizes = iter(_split(n_leaves, n_chem))
        pharm_sizes = iter(_split(n_chem, n_pharm))
        for t, pharm_in_ther in enumerate(_split(n_pharm, n_ther)):
            ther = f"{letter}{t + 1:02d}"
            atc[ther] = letter
            for pi in range(pharm_in_ther):
                pharm = f"{ther}{chr(ord('A') + pi)}"
                atc[pharm] = ther
                for ci in range(next(pharm_sizes)):
                    chem = f"{pharm}{chr(ord('A') + ci)}"
                    atc[chem] = pharm
                    for si in range(next(chem_sizes)):
                        atc[f"{chem}{si + 1:02d}"] = chem
                        drugs.append(f"{chem}{si + 1:02d}")
        group_drugs.append(drugs)

    links = []
    for leaves, drugs in zip(chapter_leaves, group_drugs):
        for drug in drugs:
            k = min(cfg.links_per_drug, len(leaves))
            for i in sorted(rng.choice(len(leaves), size=k, replace=False).tolist()):
                links.append((leaves[i], drug))
    return Hierarchy(ICD, icd), Hierarchy(ATC, atc), links


def _planted_topics(graph: KnowledgeGraph, vocab: Vocabulary, cfg: CorpusGenConfig, rng: np.random.Generator):
    icd_roots = [n.id for n in graph.nodes if n.modality == ICD and graph.parent[n.id] < 0]
    if cfg.n_topics > len(icd_roots):
        raise ValueError(f"K={cfg.n_topics} exceeds the {len(icd_roots)} first-level ICD subtrees")
    icd_nodes, atc_nodes = graph.vocab_node_ids(vocab)
    icd_root_of = np.array([graph.root_of(i) for i in icd_nodes])
    atc_pos = {int(n): j for j, n in enumerate(atc_nodes)}
    adj = graph.adjacency()
    chapters = rng.choice(len(icd_roots), size=cfg.n_topics, replace=False)
    conc = max(cfg.concentration, 1e-3)
    K = cfg.n_topics
    beta_icd = np.zeros((K, vocab.n_icd))
    beta_atc = np.zeros((K, vocab.n_atc))
    for k, ch in enumerate(chapters):
        local = np.flatnonzero(icd_root_of == icd_roots[ch])
        # sparse weights over parent groups, spread smoothly over each group's leaves
        groups = np.array([graph.parent[icd_nodes[i]] for i in local])
        uniq, inv = np.unique(groups, return_inverse=True)
        group_w = rng.dirichlet(np.full(len(uniq), conc))
        leaf_w = group_w[inv] * rng.dirichlet(np.full(len(local), cfg.leaf_smoothness))
        beta_icd[k, local] = leaf_w / leaf_w.sum()
        # each drug inherits the weight of the ICD codes it is linked to
        drug_w: dict[int, float] = {}
        for i in local:
            for v in adj[icd_nodes[i]]:
                if v in atc_pos:
                    drug_w[atc_pos[v]] = drug_w.get(atc_pos[v], 0.0) + beta_icd[k, i]
        if drug_w:
            ids = np.array(sorted(drug_w))
            w = np.array([drug_w[j] for j in ids])
            beta_atc[k, ids] = w / w.sum()
        else:
            beta_atc[k] = 1.0 / vocab.n_atc
    bg = cfg.background
    beta_icd = (1 - bg) * beta_icd + bg / vocab.n_icd
    beta_atc = (1 - bg) * beta_atc + bg / vocab.n_atc
    beta_icd /= beta_icd.sum(axis=1, keepdims=True)
    beta_atc /= beta_atc.sum(axis=1, keepdims=True)
    return beta_icd, beta_atc, chapters


def generate_synthetic_corpus(cfg: CorpusGenConfig, graph: KnowledgeGraph, seed: int,
                              vocab: Vocabulary | None = None) -> tuple[list[PatientDocument], SyntheticGroundTruth]:
    """Sample patients from the topic model's own generative process.

    Each topic is concentrated on the leaves of one first-level ICD subtree
    plus the drugs cross-linked to them; mixtures are logistic-normal.
    """
    if cfg.min_tokens < 1 or cfg.max_tokens < cfg.min_tokens:
        raise ValueError("need 1 <= min_tokens <= max_tokens")
    vocab = graph.vocabulary() if vocab is None else vocab
    rng = np.random.default_rng(seed)
    beta_icd, beta_atc, chapters = _planted_topics(graph, vocab, cfg, rng)
    delta = rng.normal(0.0, cfg.prior_scale, size=(cfg.n_docs, cfg.n_topics))
    theta = np.exp(delta - delta.max(axis=1, keepdims=True))
    theta /= theta.sum(axis=1, keepdims=True)
    docs = []
    width = len(str(cfg.n_docs))
    for d in range(cfg.n_docs):
        n = int(rng.integers(cfg.min_tokens, cfg.max_tokens + 1))
        n_icd = int(rng.binomial(n, cfg.icd_fraction))
        p_icd = theta[d] @ beta_icd
        p_atc = theta[d] @ beta_atc
        c_icd = rng.multinomial(n_icd, p_icd / p_icd.sum())
        c_atc = rng.multinomial(n - n_icd, p_atc / p_atc.sum())
        docs.append(PatientDocument(
            f"p{d:0{width}d}",
            {int(i): int(c_icd[i]) for i in np.flatnonzero(c_icd)},
            {int(i): int(c_atc[i]) for i in np.flatnonzero(c_atc)},
        ))
    return docs, SyntheticGroundTruth(beta_icd, beta_atc, theta, np.asarray(chapters), seed)
