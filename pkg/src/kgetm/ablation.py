"""Ablation matrix and baseline comparison on one corpus, over several seeds."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from kgetm.baselines import KnnConfig, frequency_impute, knn_impute, select_knn
from kgetm.corpus import CorpusSplit, PatientDocument, Vocabulary, select, split_corpus
from kgetm.evaluation import MetricsReport, atc_frequencies, evaluate_model, ranking_metrics, write_report
from kgetm.graph import KnowledgeGraph, augment_ancestors
from kgetm.io import atomic_write_text
from kgetm.node2vec import WalkConfig, node2vec
from kgetm.trainer import VARIANTS, TrainConfig, load_model, train, write_log

log = logging.getLogger(__name__)

REPORT_COLUMNS = ("valid_nll", "completion_nll", "tc_icd", "tc_atc", "td_icd", "td_atc", "tq_icd",
                  "tq_atc", "tq_average", "prec_at_k", "recall_at_k", "f1_at_k")
BASELINES = ("frequency", "knn")


class VariantFailed(RuntimeError):
    def __init__(self, variant: str, seed: int, cause: BaseException):
        super().__init__(f"variant {variant!r} (seed {seed}) failed: {cause}")
        self.variant = variant
        self.seed = seed


def pretrain_embeddings(graph: KnowledgeGraph, walk_cfg: WalkConfig, variants: Sequence[str]) -> dict[str, np.ndarray]:
    """node2vec on the augmented graph, and on the unaugmented one when ``no-aug`` is requested."""
    base = graph.without_augmentation() if graph.augmented else graph
    out = {}
    if any(v in ("full", "fixed-embedding") for v in variants):
        out["augmented"] = node2vec(augment_ancestors(base), walk_cfg)
    if "no-aug" in variants:
        out["unaugmented"] = node2vec(base, walk_cfg)
    return out


def rho0_for(variant: str, embeddings: dict[str, np.ndarray]) -> np.ndarray | None:
    if variant in ("free-embedding", "no-init"):
        return None
    return embeddings["unaugmented" if variant == "no-aug" else "augmented"]


@dataclass
class RunOutcome:
    variant: str
    seed: int
    metrics: dict[str, float]
    binned: dict[str, float]


def run_variant(variant: str, seed: int, docs_by_split: tuple[list, list, list], vocab: Vocabulary,
                graph: KnowledgeGraph, embeddings: dict[str, np.ndarray], base_cfg: TrainConfig,
                eval_kw: dict | None = None, out_dir: Path | None = None) -> RunOutcome:
    """Train one variant at one seed and evaluate it on the test split."""
    eval_kw = eval_kw or {}
    train_docs, valid_docs, test_docs = docs_by_split
    cfg = dataclasses.replace(base_cfg, variant=variant, seed=seed)
    result = train(train_docs, valid_docs, vocab, graph, rho0_for(variant, embeddings), cfg)
    model = load_model(result.checkpoint)
    report = evaluate_model(model, train_docs, test_docs, vocab, seed=seed, **eval_kw)
    metrics = {k: getattr(report, k) for k in REPORT_COLUMNS if k != "valid_nll"}
    metrics["valid_nll"] = result.log[-1].valid_nll
    if out_dir is not None:
        run_dir = out_dir / f"{variant}_seed{seed}"
        write_report(run_dir, report, title=f"{variant} seed {seed}")
        write_log(run_dir / "train_log.tsv", result.log)
        atomic_write_text(run_dir / "config.json", json.dumps(dataclasses.asdict(cfg), indent=2, sort_keys=True) + "\n")
    return RunOutcome(variant, seed, metrics, dict(report.binned_recall))


def run_baselines(seed: int, docs_by_split, vocab: Vocabulary, knn_cfg: KnnConfig,
                  k: int = 5, binned_k: int = 30, min_atc: int = 5) -> list[RunOutcome]:
    train_docs, valid_docs, test_docs = docs_by_split
    test = [d for d in test_docs if d.icd]
    freq = atc_frequencies(train_docs, vocab.n_atc)
    out = []
    ranking = frequency_impute(train_docs, vocab.n_atc)
    rankings = {"frequency": np.tile(ranking, (len(test), 1))}
    chosen = select_knn(valid_docs, train_docs, vocab, knn_cfg, k_top=k, min_atc=min_atc)
    log.info("seed %d: KNN selected k=%s metric=%s", seed, chosen.k, chosen.metric)
    rankings["knn"] = knn_impute(test, train_docs, vocab, chosen)
    for name in BASELINES:
        m = ranking_metrics(rankings[name], test, freq, k=k, binned_k=binned_k, min_atc=min_atc)
        pw = m["patientwise"]
        metrics = {c: math.nan for c in REPORT_COLUMNS}
        metrics.update(prec_at_k=pw["precision"], recall_at_k=pw["recall"], f1_at_k=pw["f1"], patients=pw["patients"])
        out.append(RunOutcome(name, seed, metrics, m["binned"]))
    return out


@dataclass
class AblationReport:
    outcomes: list[RunOutcome] = field(default_factory=list)

    def rows(self) -> list[str]:
        names = [v for v in (*VARIANTS, *BASELINES) if any(o.variant == v for o in self.outcomes)]
        return names

    def summary(self) -> list[dict]:
        table = []
        for name in self.rows():
            runs = [o for o in self.outcomes if o.variant == name]
            row: dict = {"model": name, "seeds": len(runs)}
            for col in REPORT_COLUMNS:
                vals = np.array([o.metrics[col] for o in runs], dtype=float)
                row[col] = _mean(vals)
                row[f"{col}_sd"] = _sd(vals)
            labels = sorted({lab for o in runs for lab in o.binned}, key=_bin_order)
            for lab in labels:
                vals = np.array([o.binned.get(lab, math.nan) for o in runs])
                row[f"recall[{lab}]"] = _mean(vals)
                row[f"recall[{lab}]_sd"] = _sd(vals)
            table.append(row)
        return table

    def to_tsv(self) -> str:
        table = self.summary()
        cols: list[str] = []
        for row in table:
            cols += [c for c in row if c not in cols]
        fmt = lambda v: v if isinstance(v, str) else (str(v) if isinstance(v, int) else f"{v:.6g}")
        lines = ["\t".join(cols)]
        for row in table:
            lines.append("\t".join(fmt(row.get(c, math.nan)) for c in cols))
        return "\n".join(lines) + "\n"

    def value(self, model: str, seed: int, column: str) -> float:
        for o in self.outcomes:
            if o.variant == model and o.seed == seed:
                return o.metrics[column] if column in o.metrics else o.binned.get(column, math.nan)
        raise KeyError((model, seed))


def _bin_order(label: str):
    return (1, 0) if label == "ave" else (0, float(label.split("-")[0]))


def _mean(vals: np.ndarray) -> float:
    vals = vals[~np.isnan(vals)]
    return float(vals.mean()) if len(vals) else math.nan


def _sd(vals: np.ndarray) -> float:
    vals = vals[~np.isnan(vals)]
    return float(vals.std(ddof=1)) if len(vals) > 1 else (0.0 if len(vals) else math.nan)


def run_ablation_suite(docs: Sequence[PatientDocument], vocab: Vocabulary, graph: KnowledgeGraph,
                       base_cfg: TrainConfig, seeds: Sequence[int], variants: Sequence[str] = VARIANTS,
                       walk_cfg: WalkConfig | None = None, embeddings: dict[str, np.ndarray] | None = None,
                       ratio=(0.6, 0.3, 0.1), baselines: bool = True, knn_cfg: KnnConfig = KnnConfig(),
                       eval_kw: dict | None = None, out_dir: str | Path | None = None,
                       parallel: int = 0) -> AblationReport:
    """Train every variant at every seed (split re-drawn per seed) and tabulate test metrics.

    node2vec embeddings are pretrained once (``walk_cfg``) unless supplied.
    ``parallel > 1`` trains the variants of a seed in that many worker processes;
    results are identical to the sequential run.
    """
    for v in variants:
        if v not in VARIANTS:
            raise ValueError(f"unknown variant {v!r}")
    if embeddings is None:
        walk_cfg = walk_cfg or WalkConfig(dim=base_cfg.dim, seed=base_cfg.seed)
        embeddings = pretrain_embeddings(graph, walk_cfg, variants)
    out_dir = Path(out_dir) if out_dir is not None else None
    report = AblationReport()
    eval_kw = eval_kw or {}
    for seed in seeds:
        split: CorpusSplit = split_corpus(docs, ratio, seed)
        parts = (select(docs, split.train), select(docs, split.valid), select(docs, split.test))
        args = [(v, seed, parts, vocab, graph, embeddings, base_cfg, eval_kw, out_dir) for v in variants]
        if parallel > 1:
            with ProcessPoolExecutor(max_workers=parallel) as pool:
                futures = [pool.submit(run_variant, *a) for a in args]
                for v, fut in zip(variants, futures):
                    try:
                        report.outcomes.append(fut.result())
                    except Exception as exc:
                        raise VariantFailed(v, seed, exc) from exc
        else:
            for v, a in zip(variants, args):
                try:
                    report.outcomes.append(run_variant(*a))
                except Exception as exc:
                    raise VariantFailed(v, seed, exc) from exc
        if baselines:
            report.outcomes += run_baselines(seed, parts, vocab, knn_cfg,
                                             k=eval_kw.get("k", 5), binned_k=eval_kw.get("binned_k", 30),
                                             min_atc=eval_kw.get("min_atc", 5))
    if out_dir is not None:
        atomic_write_text(out_dir / "ablation.tsv", report.to_tsv())
    return report
