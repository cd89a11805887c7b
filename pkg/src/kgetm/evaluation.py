"""Document completion, topic quality, drug imputation metrics and graph-distance profiles."""
from __future__ import annotations

import itertools
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from kgetm.corpus import ATC, ICD, PatientDocument, Vocabulary, count_matrices, halve_document, row_normalize
from kgetm.graph import INF, KnowledgeGraph, collapse_last_level, collapsed_graph, shortest_distance
from kgetm.model import PROB_FLOOR, KGETM

log = logging.getLogger(__name__)

BIN_LABELS5 = ("0-20", "20-40", "40-60", "60-80", "80-100")


def _topic_matrices(model: KGETM) -> tuple[np.ndarray, np.ndarray]:
    with torch.no_grad():
        b_icd, b_atc = model.betas()
    return b_icd.numpy(), b_atc.numpy()


def expected_mixture(model: KGETM, counts_icd: np.ndarray, counts_atc: np.ndarray) -> np.ndarray:
    """``softmax(mu)`` for each row of counts (no sampling)."""
    with torch.no_grad():
        mu, _ = model.encode(torch.from_numpy(row_normalize(counts_icd)),
                             torch.from_numpy(row_normalize(counts_atc)))
        return torch.softmax(mu, dim=-1).numpy()


# --------------------------------------------------------------------------- completion

def completion_nll(model: KGETM, docs: Sequence[PatientDocument], vocab: Vocabulary, seed: int = 0,
                   return_skipped: bool = False):
    """Mean over documents of the per-token NLL of the second half given the first.

    Each document is halved with seed ``seed + i`` (``i`` its position);
    documents with fewer than two tokens are skipped.
    """
    firsts, seconds, skipped = [], [], 0
    for i, doc in enumerate(docs):
        if doc.n_tokens < 2:
            skipped += 1
            continue
        a, b = halve_document(doc, seed + i)
        firsts.append(a)
        seconds.append(b)
    if not firsts:
        value = math.nan
    else:
        beta_icd, beta_atc = _topic_matrices(model)
        f_icd, f_atc = count_matrices(firsts, vocab)
        s_icd, s_atc = count_matrices(seconds, vocab)
        theta = expected_mixture(model, f_icd, f_atc)
        ll = (s_icd * np.log(np.maximum(theta @ beta_icd.T, PROB_FLOOR))).sum(axis=1)
        ll += (s_atc * np.log(np.maximum(theta @ beta_atc.T, PROB_FLOOR))).sum(axis=1)
        n_tok = s_icd.sum(axis=1) + s_atc.sum(axis=1)
        value = float(np.mean(-ll / n_tok))
    if skipped:
        log.info("completion NLL skipped %d document(s) with < 2 tokens", skipped)
    return (value, skipped) if return_skipped else value


# --------------------------------------------------------------------------- topic quality

def top_codes(beta: np.ndarray, n: int) -> np.ndarray:
    """``K x n`` indices of each topic column's highest-probability codes (ties by lower id)."""
    order = np.argsort(-beta, axis=0, kind="stable")
    return order[:n].T


def npmi_pair(p_i: float, p_j: float, p_ij: float) -> float:
    if p_ij == 0.0:
        return -1.0
    if p_ij == 1.0:
        return 1.0  # both codes in every document; limit of perfect association
    return math.log(p_ij / (p_i * p_j)) / -math.log(p_ij)


def topic_coherence(beta: np.ndarray, docs: Sequence[PatientDocument], modality: str, s: int = 3) -> float:
    """Average NPMI over the top-``s`` code pairs of every topic, using document frequencies."""
    if s < 2:
        raise ValueError("s must be >= 2")
    if not docs:
        raise ValueError("reference corpus is empty")
    tops = top_codes(beta, s)
    needed = np.unique(tops)
    present = np.zeros((len(docs), beta.shape[0]), dtype=bool)
    for d, doc in enumerate(docs):
        for k in doc.counts(modality):
            present[d, k] = True
    present = present[:, needed]
    col = {int(c): i for i, c in enumerate(needed)}
    n = len(docs)
    per_topic = []
    for topic in tops:
        terms = []
        for a, b in itertools.combinations(topic.tolist(), 2):
            xa, xb = present[:, col[a]], present[:, col[b]]
            terms.append(npmi_pair(xa.sum() / n, xb.sum() / n, (xa & xb).sum() / n))
        per_topic.append(np.mean(terms))
    return float(np.mean(per_topic))


def topic_diversity(beta: np.ndarray, r: int = 3) -> float:
    """Fraction of unique codes among all topics' top-``r`` codes."""
    if r < 1:
        raise ValueError("r must be >= 1")
    tops = top_codes(beta, r)
    return len(np.unique(tops)) / tops.size


def topic_quality(tc_icd: float, td_icd: float, tc_atc: float, td_atc: float) -> dict[str, float]:
    tq_icd, tq_atc = tc_icd * td_icd, tc_atc * td_atc
    return {"tq_icd": tq_icd, "tq_atc": tq_atc, "tq_average": (tq_icd + tq_atc) / 2}


# --------------------------------------------------------------------------- imputation

def rank_scores(scores: np.ndarray) -> np.ndarray:
    """Indices by descending score, ties broken by ascending index; works row-wise on 2-D input."""
    return np.argsort(-scores, axis=-1, kind="stable")


def imputation_scores(model: KGETM, docs: Sequence[PatientDocument], vocab: Vocabulary) -> np.ndarray:
    """``D x V_atc`` expected drug distribution from ICD codes alone."""
    for doc in docs:
        if not doc.icd:
            raise ValueError(f"document {doc.patient_id!r} has no ICD codes to impute from")
    icd, _ = count_matrices(docs, vocab)
    theta = expected_mixture(model, icd, np.zeros((len(docs), vocab.n_atc)))
    _, beta_atc = _topic_matrices(model)
    return theta @ beta_atc.T


def impute_drugs(doc: PatientDocument, model: KGETM, vocab: Vocabulary) -> list[tuple[int, float]]:
    """Ranked ``(atc_id, score)`` for one patient, using the ICD codes only."""
    scores = imputation_scores(model, [doc], vocab)[0]
    return [(int(i), float(scores[i])) for i in rank_scores(scores)]


def eligible(docs: Sequence[PatientDocument], min_atc: int) -> list[int]:
    """Positions of documents with ICD codes and at least ``min_atc`` distinct drugs."""
    return [i for i, d in enumerate(docs) if d.icd and len(d.atc) >= min_atc]


def patientwise_topk(rankings: Sequence[Sequence[int]], truth: Sequence[PatientDocument], k: int = 5,
                     min_atc: int | None = None) -> dict[str, float]:
    """Mean precision/recall/F1 of the top-``k`` drugs over patients with ``>= min_atc`` distinct drugs."""
    min_atc = k if min_atc is None else min_atc
    prec, rec, f1 = [], [], []
    for ranking, doc in zip(rankings, truth):
        actual = set(doc.atc)
        if len(actual) < min_atc or not actual:
            continue
        hits = len(set(list(ranking)[:k]) & actual)
        p, r = hits / k, hits / len(actual)
        prec.append(p)
        rec.append(r)
        f1.append(0.0 if hits == 0 else 2 * p * r / (p + r))
    if not prec:
        return {"precision": math.nan, "recall": math.nan, "f1": math.nan, "patients": 0}
    return {"precision": float(np.mean(prec)), "recall": float(np.mean(rec)),
            "f1": float(np.mean(f1)), "patients": len(prec)}


def frequency_bins(train_freq: np.ndarray, n_bins: int = 5) -> np.ndarray:
    """Bin index per code: codes sorted by ascending frequency (ties by id), cut into equal-count bins."""
    v = len(train_freq)
    order = np.argsort(train_freq, kind="stable")
    bins = np.empty(v, dtype=np.int64)
    bins[order] = (np.arange(v) * n_bins) // v
    return bins


def bin_labels(n_bins: int) -> list[str]:
    if n_bins == 5:
        return list(BIN_LABELS5)
    edges = [round(100 * i / n_bins) for i in range(n_bins + 1)]
    return [f"{a}-{b}" for a, b in zip(edges, edges[1:])]


def drugwise_binned_recall(rankings: Sequence[Sequence[int]], truth: Sequence[PatientDocument],
                           train_freq: np.ndarray, n_bins: int = 5, k: int = 30) -> dict[str, float]:
    """Frequency-weighted mean per-drug recall@k within each training-frequency bin.

    Per-drug recall is taken over the patients whose truth contains the drug;
    drugs absent from every truth set are left out, and a bin with no such
    drug is omitted. ``"ave"`` is the same weighted mean over all drugs. If a
    bin's weights are all zero its codes are averaged unweighted.
    """
    train_freq = np.asarray(train_freq, dtype=float)
    v = len(train_freq)
    seen = np.zeros(v)
    found = np.zeros(v)
    for ranking, doc in zip(rankings, truth):
        top = set(list(ranking)[:k])
        for code in doc.atc:
            seen[code] += 1
            found[code] += code in top
    bins = frequency_bins(train_freq, n_bins)
    labels = bin_labels(n_bins)
    recall = np.divide(found, seen, out=np.zeros(v), where=seen > 0)

    def weighted(mask):
        mask = mask & (seen > 0)
        if not mask.any():
            return None
        w = train_freq[mask]
        return float(np.average(recall[mask], weights=w)) if w.sum() > 0 else float(recall[mask].mean())

    out = {}
    for b, label in enumerate(labels):
        value = weighted(bins == b)
        if value is not None:
            out[label] = value
    overall = weighted(np.ones(v, dtype=bool))
    if overall is not None:
        out["ave"] = overall
    return out


def atc_frequencies(docs: Sequence[PatientDocument], n_atc: int) -> np.ndarray:
    freq = np.zeros(n_atc)
    for doc in docs:
        for k, c in doc.atc.items():
            freq[k] += c
    return freq


# --------------------------------------------------------------------------- distances

@dataclass
class DistanceRow:
    code: str
    prob: float
    distance: float
    correct: bool


@dataclass
class DistanceProfile:
    patient_id: str
    rows: list[DistanceRow]
    baseline: float

    def to_tsv(self) -> str:
        fmt = lambda d: "inf" if d == INF else str(int(d))
        lines = [f"# patient={self.patient_id}\tbaseline_distance={self.baseline!r}\n",
                 "rank\tatc\tprob\tdistance\tcorrect\n"]
        for i, r in enumerate(self.rows, 1):
            lines.append(f"{i}\t{r.code}\t{r.prob!r}\t{fmt(r.distance)}\t{int(r.correct)}\n")
        return "".join(lines)


class DistanceOracle:
    """BFS distances on the collapsed unaugmented graph, cached per observed set."""

    def __init__(self, graph: KnowledgeGraph, vocab: Vocabulary):
        base = graph.without_augmentation() if graph.augmented else graph
        self.mapping = collapse_last_level(base, vocab)
        self.graph = collapsed_graph(base, self.mapping)
        self.vocab = vocab
        self.index = graph.index

    def collapsed(self, code: str) -> int:
        return self.mapping[self.index[code]]

    def distance(self, code: str, observed: set[int]) -> float:
        return shortest_distance(self.graph, self.collapsed(code), observed)

    def distances_from_set(self, observed: set[int]) -> np.ndarray:
        """Multi-source BFS from ``observed``; distance of every node (inf if unreachable)."""
        from collections import deque

        dist = np.full(len(self.graph.nodes), INF)
        queue = deque()
        for o in observed:
            dist[o] = 0
            queue.append(o)
        adj = self.graph.adjacency()
        while queue:
            u = queue.popleft()
            for w in adj[u]:
                if dist[w] == INF:
                    dist[w] = dist[u] + 1
                    queue.append(w)
        return dist


def distance_profile(ranked: Sequence[tuple[int, float]], doc: PatientDocument, oracle: DistanceOracle,
                     top_m: int = 10) -> DistanceProfile:
    """Distance from each of the top-``m`` imputed drugs to the patient's observed ICD codes.

    Baseline is the mean finite distance of every ATC vocabulary code to the same set.
    """
    vocab = oracle.vocab
    observed = {oracle.collapsed(vocab.icd_codes[k]) for k in doc.icd}
    if not observed:
        raise ValueError(f"document {doc.patient_id!r} has no ICD codes")
    dist = oracle.distances_from_set(observed)
    rows = []
    for atc_id, prob in list(ranked)[:top_m]:
        code = vocab.atc_codes[atc_id]
        rows.append(DistanceRow(code, float(prob), float(dist[oracle.collapsed(code)]), atc_id in doc.atc))
    all_d = np.array([dist[oracle.collapsed(c)] for c in vocab.atc_codes])
    finite = all_d[np.isfinite(all_d)]
    baseline = float(finite.mean()) if len(finite) else INF
    return DistanceProfile(doc.patient_id, rows, baseline)


# --------------------------------------------------------------------------- reports

@dataclass
class MetricsReport:
    completion_nll: float = math.nan
    tc_icd: float = math.nan
    tc_atc: float = math.nan
    td_icd: float = math.nan
    td_atc: float = math.nan
    tq_icd: float = math.nan
    tq_atc: float = math.nan
    tq_average: float = math.nan
    prec_at_k: float = math.nan
    recall_at_k: float = math.nan
    f1_at_k: float = math.nan
    k: int = 5
    binned_recall: dict[str, float] = field(default_factory=dict)
    binned_k: int = 30
    patients: int = 0

    def check_ranges(self) -> None:
        for name in ("td_icd", "td_atc"):
            v = getattr(self, name)
            if not math.isnan(v):
                assert 0.0 <= v <= 1.0, f"{name}={v} outside [0, 1]"
        for name in ("tc_icd", "tc_atc"):
            v = getattr(self, name)
            if not math.isnan(v):
                assert -1.0 - 1e-12 <= v <= 1.0 + 1e-12, f"{name}={v} outside [-1, 1]"
        for name in ("prec_at_k", "recall_at_k", "f1_at_k"):
            v = getattr(self, name)
            if not math.isnan(v):
                assert 0.0 <= v <= 1.0, f"{name}={v} outside [0, 1]"

    def as_dict(self) -> dict:
        d = {k: v for k, v in self.__dict__.items() if k != "binned_recall"}
        for label, v in self.binned_recall.items():
            d[f"binned_recall[{label}]"] = v
        return d

    def to_kv(self) -> str:
        return "".join(f"{k}\t{v!r}\n" for k, v in self.as_dict().items())

    def to_text(self, title: str = "metrics") -> str:
        """Human-readable summary; metrics that were not computed (nan) are left out."""
        rows = [(self.completion_nll, f"completion NLL (per token)   {self.completion_nll:.4f}"),
                (self.tc_icd, f"topic coherence  ICD, ATC    {self.tc_icd:.4f}, {self.tc_atc:.4f}"),
                (self.td_icd, f"topic diversity  ICD, ATC    {self.td_icd:.4f}, {self.td_atc:.4f}"),
                (self.tq_average, f"topic quality    ICD, ATC    {self.tq_icd:.4f}, {self.tq_atc:.4f}"
                                  f"  (ave. {self.tq_average:.4f})"),
                (self.f1_at_k, f"prec@{self.k} recall@{self.k} f1@{self.k}        "
                               f"{self.prec_at_k:.4f} {self.recall_at_k:.4f} {self.f1_at_k:.4f}"
                               f"  ({self.patients} patients)")]
        lines = [f"== {title}"] + [text for value, text in rows if not math.isnan(value)]
        if self.binned_recall:
            lines.append(f"drug-wise recall@{self.binned_k} by frequency percentile:")
            for label, v in self.binned_recall.items():
                lines.append(f"  {label:>8}  {v:.4f}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_kv(cls, text: str) -> "MetricsReport":
        rep = cls()
        for line in text.splitlines():
            key, raw = line.split("\t")
            value = json.loads(raw) if raw not in ("nan", "inf") else float(raw)
            if key.startswith("binned_recall["):
                rep.binned_recall[key[len("binned_recall["):-1]] = value
            else:
                setattr(rep, key, value)
        return rep


def ranking_metrics(rankings: Sequence[Sequence[int]], test_docs: Sequence[PatientDocument],
                    train_freq: np.ndarray, k: int = 5, binned_k: int = 30, n_bins: int = 5,
                    min_atc: int = 5) -> dict:
    """Patient-wise top-k and drug-wise binned recall for one set of rankings."""
    pw = patientwise_topk(rankings, test_docs, k=k, min_atc=min_atc)
    binned = drugwise_binned_recall(rankings, test_docs, train_freq, n_bins=n_bins, k=binned_k)
    return {"patientwise": pw, "binned": binned}


def evaluate_model(model: KGETM, train_docs: Sequence[PatientDocument], test_docs: Sequence[PatientDocument],
                   vocab: Vocabulary, reference_docs: Sequence[PatientDocument] | None = None,
                   seed: int = 0, s: int = 3, r: int = 3, k: int = 5, binned_k: int = 30,
                   n_bins: int = 5, min_atc: int = 5) -> MetricsReport:
    """Every model metric on the test split; topic coherence uses ``reference_docs`` (default: test)."""
    ref = test_docs if reference_docs is None else reference_docs
    beta_icd, beta_atc = _topic_matrices(model)
    rep = MetricsReport(k=k, binned_k=binned_k)
    rep.completion_nll = completion_nll(model, test_docs, vocab, seed=seed)
    rep.tc_icd = topic_coherence(beta_icd, ref, ICD, s)
    rep.tc_atc = topic_coherence(beta_atc, ref, ATC, s)
    rep.td_icd = topic_diversity(beta_icd, r)
    rep.td_atc = topic_diversity(beta_atc, r)
    tq = topic_quality(rep.tc_icd, rep.td_icd, rep.tc_atc, rep.td_atc)
    rep.tq_icd, rep.tq_atc, rep.tq_average = tq["tq_icd"], tq["tq_atc"], tq["tq_average"]
    with_icd = [d for d in test_docs if d.icd]
    if with_icd:
        rankings = rank_scores(imputation_scores(model, with_icd, vocab))
        m = ranking_metrics(rankings, with_icd, atc_frequencies(train_docs, vocab.n_atc),
                            k=k, binned_k=binned_k, n_bins=n_bins, min_atc=min_atc)
        pw = m["patientwise"]
        rep.prec_at_k, rep.recall_at_k, rep.f1_at_k, rep.patients = pw["precision"], pw["recall"], pw["f1"], pw["patients"]
        rep.binned_recall = m["binned"]
    rep.check_ranges()
    return rep


def write_report(directory: str | Path, report: MetricsReport, title: str = "metrics", stem: str = "metrics") -> None:
    from kgetm.io import atomic_write_text

    directory = Path(directory)
    atomic_write_text(directory / f"{stem}.txt", report.to_text(title))
    atomic_write_text(directory / f"{stem}.kv", report.to_kv())
