"""Frequency and K-nearest-neighbour drug imputation baselines."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.spatial.distance import cdist

from kgetm.corpus import PatientDocument, Vocabulary, count_matrices
from kgetm.evaluation import atc_frequencies, patientwise_topk, rank_scores

log = logging.getLogger(__name__)

METRICS = ("manhattan", "minkowski")
DEFAULT_K_GRID = (100, 200, 500, 1000, 5000)


@dataclass(frozen=True)
class KnnConfig:
    k_grid: tuple[int, ...] = DEFAULT_K_GRID
    metric_grid: tuple[str, ...] = METRICS
    minkowski_p: float = 2.0
    k: int | None = None
    metric: str | None = None

    def __post_init__(self):
        if not self.k_grid or not self.metric_grid:
            raise ValueError("grids must be non-empty")
        for m in self.metric_grid:
            if m not in METRICS:
                raise ValueError(f"unknown metric {m!r}")

    def selected(self, k: int, metric: str) -> "KnnConfig":
        return KnnConfig(self.k_grid, self.metric_grid, self.minkowski_p, k, metric)


def frequency_impute(train_docs: Sequence[PatientDocument], n_atc: int) -> np.ndarray:
    """All drugs by descending training count, ties by ascending id."""
    if not train_docs:
        raise ValueError("no training documents")
    return rank_scores(atc_frequencies(train_docs, n_atc))


def _distances(query: np.ndarray, reference: np.ndarray, metric: str, p: float) -> np.ndarray:
    if metric == "manhattan":
        return cdist(query, reference, metric="cityblock")
    return cdist(query, reference, metric="minkowski", p=p)


def knn_scores(test_icd: np.ndarray, train_icd: np.ndarray, train_atc: np.ndarray, k: int,
               metric: str, p: float = 2.0) -> np.ndarray:
    """Mean drug-count vector of each test row's ``k`` nearest training rows (ICD features only).

    Neighbour ties are broken by training order.
    """
    n_train = train_icd.shape[0]
    if k > n_train:
        log.warning("k=%d exceeds %d training documents; using all", k, n_train)
        k = n_train
    dist = _distances(test_icd, train_icd, metric, p)
    nearest = np.argsort(dist, axis=1, kind="stable")[:, :k]
    return train_atc[nearest].mean(axis=1)


def knn_impute(test_docs: Sequence[PatientDocument], train_docs: Sequence[PatientDocument],
               vocab: Vocabulary, cfg: KnnConfig) -> np.ndarray:
    """Ranked drug ids per test patient (one row each)."""
    if cfg.k is None or cfg.metric is None:
        raise ValueError("KnnConfig has no selected (k, metric); run select_knn first")
    test_icd, _ = count_matrices(test_docs, vocab)
    train_icd, train_atc = count_matrices(train_docs, vocab)
    return rank_scores(knn_scores(test_icd, train_icd, train_atc, cfg.k, cfg.metric, cfg.minkowski_p))


def select_knn(valid_docs: Sequence[PatientDocument], train_docs: Sequence[PatientDocument],
               vocab: Vocabulary, cfg: KnnConfig = KnnConfig(), k_top: int = 5,
               min_atc: int = 5) -> KnnConfig:
    """Grid search maximizing validation f1@k_top; ties go to smaller k, then manhattan."""
    valid_icd, _ = count_matrices(valid_docs, vocab)
    train_icd, train_atc = count_matrices(train_docs, vocab)
    best = None
    for k in sorted(set(cfg.k_grid)):
        for metric in sorted(set(cfg.metric_grid), key=METRICS.index):
            rankings = rank_scores(knn_scores(valid_icd, train_icd, train_atc, k, metric, cfg.minkowski_p))
            f1 = patientwise_topk(rankings, valid_docs, k=k_top, min_atc=min_atc)["f1"]
            f1 = -1.0 if np.isnan(f1) else f1
            if best is None or f1 > best[0]:
                best = (f1, k, metric)
    return cfg.selected(best[1], best[2])
