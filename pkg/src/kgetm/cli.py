"""Command-line pipeline: synth, build-graph, pretrain, train, eval, impute, export, ablate."""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import torch

from kgetm.corpus import ATC, ICD, CorpusSplit, Vocabulary, load_corpus, save_corpus, select, split_corpus
from kgetm.config import RunConfig
from kgetm.graph import (GraphError, KnowledgeGraph, augment_ancestors, build_graph, read_cross_links,
                         read_hierarchy_file, write_cross_links, write_hierarchy_file)
from kgetm.io import atomic_write_text, load_embedding, save_embedding

log = logging.getLogger("kgetm")

# fixed names inside the run directory
DATA = Path("data")
HIERARCHY = DATA / "hierarchy.tsv"
CROSS = DATA / "cross_links.tsv"
VOCAB = DATA / "vocab.tsv"
CORPUS = DATA / "corpus.tsv"
TRUTH = DATA / "truth.npz"
GRAPH_UNAUG = Path("graph") / "unaugmented.tsv"
GRAPH_AUG = Path("graph") / "augmented.tsv"
GRAPH_STATS = Path("graph") / "stats.tsv"
EMB_AUG = Path("pretrain") / "node2vec_augmented.emb"
EMB_UNAUG = Path("pretrain") / "node2vec_unaugmented.emb"
CHECKPOINT = Path("train") / "checkpoint.ckpt"
BEST = Path("train") / "best.ckpt"
TRAIN_LOG = Path("train") / "train_log.tsv"
SPLIT = Path("train") / "split.tsv"
EVAL_DIR = Path("eval")
IMPUTE_DIR = Path("impute")
EXPORT_DIR = Path("export")
ABLATE_DIR = Path("ablate")


class UsageError(Exception):
    """Bad or missing inputs; exit status 2."""


class Run:
    def __init__(self, root: Path, cfg: RunConfig):
        self.root = root
        self.cfg = cfg

    def path(self, rel: Path | str) -> Path:
        return self.root / rel

    def input(self, key: str, default: Path) -> Path:
        value = getattr(self.cfg, key)
        p = Path(value) if value else self.path(default)
        if not p.exists():
            raise UsageError(f"missing input file: {p}")
        return p

    def need(self, rel: Path, producer: str) -> Path:
        p = self.path(rel)
        if not p.exists():
            raise UsageError(f"missing {p}; run `kgetm {producer}` first")
        return p

    def record_config(self, step_dir: Path | str) -> None:
        atomic_write_text(self.path(step_dir) / "config.json", self.cfg.to_json())

    def vocabulary(self) -> Vocabulary:
        p = Path(self.cfg.vocab) if self.cfg.vocab else self.path(VOCAB)
        if p.exists():
            return Vocabulary.load(p)
        return self.graph(augmented=False).vocabulary()

    def graph(self, augmented: bool) -> KnowledgeGraph:
        return KnowledgeGraph.load(self.need(GRAPH_AUG if augmented else GRAPH_UNAUG, "build-graph"))

    def docs(self):
        return load_corpus(self.input("corpus", CORPUS), self.vocabulary())

    def split(self) -> CorpusSplit:
        p = self.need(SPLIT, "train")
        parts: dict[str, list[str]] = {"train": [], "valid": [], "test": []}
        for line in p.read_text(encoding="utf-8").splitlines()[1:]:
            pid, which = line.split("\t")
            parts[which].append(pid)
        return CorpusSplit(tuple(parts["train"]), tuple(parts["valid"]), tuple(parts["test"]))


# --------------------------------------------------------------------------- subcommands

def cmd_synth(run: Run, args) -> None:
    from kgetm.synthetic import generate_synthetic_corpus, synthetic_sources

    cfg = run.cfg
    icd, atc, links = synthetic_sources(cfg.graph_gen_config())
    graph = build_graph(icd, atc, links)
    vocab = graph.vocabulary()
    docs, truth = generate_synthetic_corpus(cfg.corpus_gen_config(), graph, cfg.seed, vocab)
    write_hierarchy_file(run.path(HIERARCHY), icd, atc)
    write_cross_links(run.path(CROSS), links)
    vocab.save(run.path(VOCAB))
    save_corpus(run.path(CORPUS), docs, vocab)
    truth.save(run.path(TRUTH))
    run.record_config(DATA)
    print(f"synthetic corpus: {len(docs)} patients, V_icd={vocab.n_icd}, V_atc={vocab.n_atc}, "
          f"K={cfg.synth_topics} -> {run.path(DATA)}")


def cmd_build_graph(run: Run, args) -> None:
    icd, atc = read_hierarchy_file(run.input("hierarchy", HIERARCHY))
    links = read_cross_links(run.input("cross_links", CROSS))
    g = build_graph(icd, atc, links)
    ga = augment_ancestors(g)
    g.save(run.path(GRAPH_UNAUG))
    ga.save(run.path(GRAPH_AUG))
    rows = ["graph\tnodes\ticd-hier\tatc-hier\tcross\taugmented\ttotal"]
    for name, gr in (("unaugmented", g), ("augmented", ga)):
        c = gr.relation_counts()
        rows.append(f"{name}\t{len(gr.nodes)}\t{c['icd-hier']}\t{c['atc-hier']}\t{c['cross']}\t"
                    f"{c['augmented']}\t{len(gr.edges)}")
    atomic_write_text(run.path(GRAPH_STATS), "\n".join(rows) + "\n")
    run.record_config("graph")
    print("\n".join(rows))


def cmd_pretrain(run: Run, args) -> None:
    from kgetm.node2vec import node2vec

    wcfg = run.cfg.walk_config()
    targets = [(True, EMB_AUG)]
    if args.unaugmented or run.cfg.variant == "no-aug":
        targets.append((False, EMB_UNAUG))
    for augmented, rel in targets:
        g = run.graph(augmented)
        rho0 = node2vec(g, wcfg)
        save_embedding(run.path(rel), rho0, g.codes)
        print(f"node2vec ({'augmented' if augmented else 'unaugmented'}): {rho0.shape[0]} x {rho0.shape[1]} -> {run.path(rel)}")
    run.record_config("pretrain")


def _rho0_for_variant(run: Run, variant: str, graph: KnowledgeGraph):
    if variant in ("free-embedding", "no-init"):
        return None
    rel = EMB_UNAUG if variant == "no-aug" else EMB_AUG
    rho0, codes = load_embedding(run.need(rel, "pretrain" + (" --unaugmented" if variant == "no-aug" else "")))
    if codes != graph.codes:
        raise UsageError(f"{run.path(rel)} does not match the graph's node order; re-run pretrain")
    return rho0


def cmd_train(run: Run, args) -> None:
    from kgetm.trainer import EpochRecord, load_checkpoint, save_checkpoint, train, write_log

    cfg = run.cfg
    tcfg = cfg.train_config()
    vocab = run.vocabulary()
    docs = run.docs()
    split = split_corpus(docs, cfg.ratio, cfg.seed)
    lines = ["patient\tsplit"] + [f"{p}\t{name}" for name in ("train", "valid", "test") for p in getattr(split, name)]
    atomic_write_text(run.path(SPLIT), "\n".join(lines) + "\n")
    graph, rho0 = None, None
    if tcfg.variant != "free-embedding":
        graph = run.graph(augmented=tcfg.variant != "no-aug")
        rho0 = _rho0_for_variant(run, tcfg.variant, graph)
    resume = None
    if args.resume:
        resume = load_checkpoint(run.need(CHECKPOINT, "train"))
        if resume.config_hash != tcfg.digest():
            # only the epoch budget may change between runs
            if dataclasses.replace(resume.train_config(), epochs=tcfg.epochs) != tcfg:
                raise UsageError("checkpoint was trained with a different configuration")

    def on_epoch(rec, ckpt):
        save_checkpoint(run.path(CHECKPOINT), ckpt)

    result = train(select(docs, split.train), select(docs, split.valid), vocab, graph, rho0, tcfg,
                   resume=resume, on_epoch=on_epoch)
    save_checkpoint(run.path(CHECKPOINT), result.checkpoint)
    if result.best.epoch == result.best.best_epoch:
        # after a resume without improvement the earlier best.ckpt stays current
        save_checkpoint(run.path(BEST), result.best)
    records = result.log
    if resume is not None and run.path(TRAIN_LOG).exists():
        old = []
        for line in run.path(TRAIN_LOG).read_text().splitlines()[1:]:
            e, elbo, nll, sec = line.split("\t")
            if int(e) <= resume.epoch:
                old.append(EpochRecord(int(e), float(elbo), float(nll), float(sec)))
        records = old + records
    write_log(run.path(TRAIN_LOG), records)
    run.record_config("train")
    for r in records:
        print(r.line())


def _model(run: Run, which: str):
    from kgetm.trainer import load_checkpoint, load_model

    return load_model(load_checkpoint(run.need(BEST if which == "best" else CHECKPOINT, "train")))


def cmd_eval(run: Run, args) -> None:
    from kgetm.ablation import run_baselines
    from kgetm.evaluation import MetricsReport, evaluate_model, write_report

    cfg = run.cfg
    vocab = run.vocabulary()
    docs = run.docs()
    split = run.split()
    train_docs, valid_docs, test_docs = (select(docs, getattr(split, n)) for n in ("train", "valid", "test"))
    reference = {"test": test_docs, "train": train_docs, "valid": valid_docs}[cfg.tc_reference]
    model = _model(run, args.checkpoint)
    report = evaluate_model(model, train_docs, test_docs, vocab, reference, seed=cfg.seed, **cfg.eval_kwargs())
    write_report(run.path(EVAL_DIR), report, title=f"{cfg.variant} ({args.checkpoint} checkpoint)")
    print(report.to_text(cfg.variant), end="")
    if args.baselines:
        for out in run_baselines(cfg.seed, (train_docs, valid_docs, test_docs), vocab, cfg.knn_config(),
                                 k=cfg.top_k, binned_k=cfg.binned_k, min_atc=cfg.min_atc):
            rep = MetricsReport(prec_at_k=out.metrics["prec_at_k"], recall_at_k=out.metrics["recall_at_k"],
                                f1_at_k=out.metrics["f1_at_k"], k=cfg.top_k,
                                patients=out.metrics["patients"], binned_k=cfg.binned_k,
                                binned_recall=out.binned)
            write_report(run.path(EVAL_DIR), rep, title=out.variant, stem=f"baseline_{out.variant}")
            print(rep.to_text(out.variant), end="")
    run.record_config(EVAL_DIR)


def cmd_impute(run: Run, args) -> None:
    from kgetm.evaluation import DistanceOracle, distance_profile, imputation_scores, rank_scores

    cfg = run.cfg
    vocab = run.vocabulary()
    if args.input:
        docs = load_corpus(args.input, vocab)
    else:
        docs = select(run.docs(), run.split().test)
    docs = [d for d in docs if d.icd]
    model = _model(run, args.checkpoint)
    scores = imputation_scores(model, docs, vocab)
    order = rank_scores(scores)
    oracle = DistanceOracle(run.graph(augmented=False), vocab)
    lines = ["patient\trank\tatc\tscore\tobserved"]
    out_dir = run.path(IMPUTE_DIR)
    for doc, s, rk in zip(docs, scores, order):
        for r, j in enumerate(rk[: cfg.impute_top], 1):
            lines.append(f"{doc.patient_id}\t{r}\t{vocab.atc_codes[j]}\t{s[j]!r}\t{int(j in doc.atc)}")
        ranked = [(int(j), float(s[j])) for j in rk]
        prof = distance_profile(ranked, doc, oracle, top_m=cfg.distance_top)
        atomic_write_text(out_dir / "distance" / f"{doc.patient_id}.tsv", prof.to_tsv())
    atomic_write_text(out_dir / "rankings.tsv", "\n".join(lines) + "\n")
    run.record_config(IMPUTE_DIR)
    print(f"imputed drugs for {len(docs)} patients -> {out_dir}")


def cmd_export(run: Run, args) -> None:
    from kgetm.evaluation import top_codes

    cfg = run.cfg
    vocab = run.vocabulary()
    model = _model(run, args.checkpoint)
    with torch.no_grad():
        rho_icd, rho_atc = model.code_embeddings()
        beta_icd, beta_atc = model.betas()
    lines = ["code\tmodality\tcategory\t" + "\t".join(f"e{i}" for i in range(rho_icd.shape[0]))]
    for modality, rho, codes, cats in ((ICD, rho_icd, vocab.icd_codes, vocab.icd_categories),
                                       (ATC, rho_atc, vocab.atc_codes, vocab.atc_categories)):
        m = rho.numpy()
        for j, code in enumerate(codes):
            lines.append(f"{code}\t{modality}\t{cats[j]}\t" + "\t".join(repr(float(x)) for x in m[:, j]))
    atomic_write_text(run.path(EXPORT_DIR) / "code_embeddings.tsv", "\n".join(lines) + "\n")
    lines = ["topic\tmodality\trank\tcode\tcategory\tprob"]
    for modality, beta, codes, cats in ((ICD, beta_icd.numpy(), vocab.icd_codes, vocab.icd_categories),
                                        (ATC, beta_atc.numpy(), vocab.atc_codes, vocab.atc_categories)):
        tops = top_codes(beta, min(cfg.export_top, beta.shape[0]))
        for k, row in enumerate(tops):
            for r, j in enumerate(row, 1):
                lines.append(f"{k}\t{modality}\t{r}\t{codes[j]}\t{cats[j]}\t{beta[j, k]!r}")
    atomic_write_text(run.path(EXPORT_DIR) / "topics.tsv", "\n".join(lines) + "\n")
    run.record_config(EXPORT_DIR)
    print(f"exported embeddings and top-{cfg.export_top} codes per topic -> {run.path(EXPORT_DIR)}")


def cmd_ablate(run: Run, args) -> None:
    from kgetm.ablation import pretrain_embeddings, run_ablation_suite

    cfg = run.cfg
    vocab = run.vocabulary()
    docs = run.docs()
    graph = run.graph(augmented=False)
    variants = list(cfg.ablation_variants)
    embeddings = pretrain_embeddings(graph, cfg.walk_config(), variants)
    report = run_ablation_suite(docs, vocab, graph, cfg.train_config(), [int(s) for s in cfg.ablation_seeds],
                                variants, embeddings=embeddings, ratio=cfg.ratio, knn_cfg=cfg.knn_config(),
                                eval_kw=cfg.eval_kwargs(), out_dir=run.path(ABLATE_DIR),
                                parallel=args.parallel_variants)
    run.record_config(ABLATE_DIR)
    print(report.to_tsv(), end="")


COMMANDS = {
    "synth": (cmd_synth, "generate a synthetic taxonomy, cross links and corpus"),
    "build-graph": (cmd_build_graph, "build the unaugmented and augmented knowledge graphs"),
    "pretrain": (cmd_pretrain, "node2vec initial code embeddings"),
    "train": (cmd_train, "train the topic model"),
    "eval": (cmd_eval, "completion NLL, topic quality and imputation metrics"),
    "impute": (cmd_impute, "rank drugs from ICD codes and write distance profiles"),
    "export": (cmd_export, "write code embeddings and top codes per topic"),
    "ablate": (cmd_ablate, "train every variant over several seeds and tabulate"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kgetm", description=__doc__)
    parser.add_argument("--config", type=Path, help="flat JSON configuration file")
    parser.add_argument("--run-dir", type=Path, default=Path("run"), help="directory for all artifacts (default: run)")
    parser.add_argument("--seed", type=int, help="override the configured seed")
    parser.add_argument("--threads", type=int, default=None, help="torch intra-op threads")
    parser.add_argument("--deterministic", action="store_true", help="single-threaded, deterministic kernels")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a configuration key (repeatable)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        if name == "pretrain":
            p.add_argument("--unaugmented", action="store_true", help="also embed the unaugmented graph")
        if name == "train":
            p.add_argument("--resume", action="store_true", help="continue from train/checkpoint.ckpt")
        if name in ("train", "ablate"):
            p.add_argument("--beta-per-epoch", action="store_true",
                           help="compute topics once per epoch instead of once per minibatch")
        if name in ("eval", "impute", "export"):
            p.add_argument("--checkpoint", choices=("final", "best"), default="final")
        if name == "eval":
            p.add_argument("--baselines", action="store_true", help="also score frequency and KNN baselines")
        if name == "ablate":
            p.add_argument("--parallel-variants", type=int, default=0, metavar="N",
                           help="train the variants of each seed in N worker processes")
        if name == "impute":
            p.add_argument("--input", type=Path, help="corpus file of patients to impute (default: test split)")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.config is not None and not args.config.exists():
            raise UsageError(f"missing config file: {args.config}")
        cfg = RunConfig.load(args.config) if args.config else RunConfig()
        overrides = list(args.overrides)
        if args.seed is not None:
            overrides.append(f"seed={args.seed}")
        if getattr(args, "beta_per_epoch", False):
            overrides.append("beta_per_epoch=true")
        cfg = cfg.override(overrides)
        if args.deterministic:
            torch.set_num_threads(1)
            torch.use_deterministic_algorithms(True)
        elif args.threads:
            torch.set_num_threads(args.threads)
        COMMANDS[args.command][0](Run(args.run_dir, cfg), args)
    except (UsageError, ValueError, GraphError, FileNotFoundError) as exc:
        # ValueError covers malformed corpus, config, embedding and checkpoint files
        print(f"kgetm {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - top-level reporting
        log.debug("failure", exc_info=True)
        print(f"kgetm {args.command}: failed: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
