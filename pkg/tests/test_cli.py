import json
import subprocess
import sys
import time
from pathlib import Path

import pytest

from kgetm.cli import main
from kgetm.evaluation import MetricsReport

ROOT = Path(__file__).resolve().parents[1]
TOY = ROOT / "toy"


def toy_args(run_dir, *extra):
    paths = [f"--set=hierarchy={TOY / 'hierarchy.tsv'}", f"--set=cross_links={TOY / 'cross_links.tsv'}",
             f"--set=vocab={TOY / 'vocab.tsv'}", f"--set=corpus={TOY / 'corpus.tsv'}"]
    return ["--config", str(TOY / "config.json"), "--run-dir", str(run_dir), *paths, *extra]


def six_node_inputs(tmp_path):
    (tmp_path / "h.tsv").write_text("C\t-\tICD\nC1\tC\tICD\nC1.1\tC1\tICD\n"
                                    "A\t-\tATC\nA1\tA\tATC\nA1X\tA1\tATC\n")
    (tmp_path / "x.tsv").write_text("C1.1\tA1X\n")
    return [f"--set=hierarchy={tmp_path / 'h.tsv'}", f"--set=cross_links={tmp_path / 'x.tsv'}"]


def test_build_graph_stats_match_hand_count(tmp_path, capsys):
    run = tmp_path / "run"
    assert main(["--run-dir", str(run), *six_node_inputs(tmp_path), "build-graph"]) == 0
    # two ICD and two ATC parent edges, one cross link; closure adds C1.1-C and A1X-A
    assert (run / "graph" / "stats.tsv").read_text() == (
        "graph\tnodes\ticd-hier\tatc-hier\tcross\taugmented\ttotal\n"
        "unaugmented\t6\t2\t2\t1\t0\t5\n"
        "augmented\t6\t2\t2\t1\t2\t7\n")
    assert (run / "graph" / "config.json").exists()


def test_build_graph_is_idempotent(tmp_path):
    run = tmp_path / "run"
    args = ["--run-dir", str(run), *six_node_inputs(tmp_path), "build-graph"]
    assert main(args) == 0
    first = {p.name: p.read_bytes() for p in (run / "graph").iterdir()}
    assert main(args) == 0
    assert {p.name: p.read_bytes() for p in (run / "graph").iterdir()} == first


def test_missing_input_exits_2_naming_path(tmp_path, capsys):
    missing = tmp_path / "nope.tsv"
    assert main(["--run-dir", str(tmp_path), f"--set=hierarchy={missing}", "build-graph"]) == 2
    assert str(missing) in capsys.readouterr().err


def test_missing_upstream_step_is_actionable(tmp_path, capsys):
    assert main(toy_args(tmp_path / "run", "pretrain")) == 2
    assert "run `kgetm build-graph` first" in capsys.readouterr().err


def test_malformed_input_exits_2_with_line(tmp_path, capsys):
    (tmp_path / "h.tsv").write_text("C\t-\tICD\nC1\tC\n")
    (tmp_path / "x.tsv").write_text("")
    args = ["--run-dir", str(tmp_path / "run"), f"--set=hierarchy={tmp_path / 'h.tsv'}",
            f"--set=cross_links={tmp_path / 'x.tsv'}", "build-graph"]
    assert main(args) == 2
    assert "h.tsv:2:" in capsys.readouterr().err


def test_bad_override_exits_2(tmp_path, capsys):
    assert main(["--run-dir", str(tmp_path), "--set", "epochs=many", "synth"]) == 2
    assert "epochs" in capsys.readouterr().err


@pytest.mark.slow
def test_full_pipeline_on_toy_dataset(tmp_path):
    run = tmp_path / "run"
    start = time.monotonic()
    for step in (["build-graph"], ["pretrain", "--unaugmented"], ["train"], ["eval", "--baselines"],
                 ["impute"], ["export"], ["ablate", "--parallel-variants", "2"]):
        assert main(toy_args(run, *step)) == 0, step
    assert time.monotonic() - start < 300
    expected = ["graph/unaugmented.tsv", "graph/augmented.tsv", "graph/stats.tsv",
                "pretrain/node2vec_augmented.emb", "pretrain/node2vec_unaugmented.emb",
                "train/checkpoint.ckpt", "train/best.ckpt", "train/train_log.tsv", "train/split.tsv",
                "eval/metrics.txt", "eval/metrics.kv", "eval/baseline_frequency.kv", "eval/baseline_knn.kv",
                "impute/rankings.tsv", "export/code_embeddings.tsv", "export/topics.tsv", "ablate/ablation.tsv"]
    for rel in expected:
        assert (run / rel).stat().st_size > 0, rel
    for step in ("graph", "pretrain", "train", "eval", "impute", "export", "ablate"):
        assert (run / step / "config.json").exists()
    assert len(list((run / "impute" / "distance").glob("*.tsv"))) > 0
    log = (run / "train" / "train_log.tsv").read_text().splitlines()
    assert log[0] == "epoch\ttrain_elbo\tvalid_nll\tseconds" and len(log) == 5
    topics = (run / "export" / "topics.tsv").read_text().splitlines()
    assert len(topics) == 1 + 3 * 5 * 2
    report = MetricsReport.from_kv((run / "eval" / "metrics.kv").read_text())
    report.check_ranges()
    rows = (run / "ablate" / "ablation.tsv").read_text().splitlines()
    assert [r.split("\t")[0] for r in rows[1:]] == ["full", "no-init", "no-aug", "fixed-embedding",
                                                   "free-embedding", "frequency", "knn"]


def test_resume_extends_log(tmp_path):
    run = tmp_path / "run"
    assert main(toy_args(run, "build-graph")) == 0
    assert main(toy_args(run, "pretrain")) == 0
    assert main(toy_args(run, "--set", "epochs=1", "train")) == 0
    assert main(toy_args(run, "--set", "epochs=2", "train", "--resume")) == 0
    epochs = [line.split("\t")[0] for line in (run / "train" / "train_log.tsv").read_text().splitlines()[1:]]
    assert epochs == ["0", "1", "2"]
    assert main(toy_args(run, "--set", "lr=0.5", "train", "--resume")) == 2


def test_eval_on_untrained_checkpoint(tmp_path):
    run = tmp_path / "run"
    for step in (["build-graph"], ["pretrain"], ["--set", "epochs=0", "train"], ["eval"]):
        assert main(toy_args(run, *step)) == 0, step
    report = MetricsReport.from_kv((run / "eval" / "metrics.kv").read_text())
    report.check_ranges()
    assert report.patients > 0


def test_synth_writes_corpus_and_truth(tmp_path):
    run = tmp_path / "run"
    assert main(["--run-dir", str(run), "--set", "synth_docs=20", "--set", "synth_chapters=3",
                 "--set", "synth_topics=2", "synth"]) == 0
    for name in ("hierarchy.tsv", "cross_links.tsv", "vocab.tsv", "corpus.tsv", "truth.npz", "config.json"):
        assert (run / "data" / name).exists()
    assert (run / "data" / "corpus.tsv").read_text().startswith("patient\tcode\tcount\n")


def cli(*args):
    return subprocess.run([sys.executable, "-m", "kgetm", *args], capture_output=True, text=True, cwd=ROOT)


@pytest.mark.slow
def test_deterministic_mode_repeats_artifacts(tmp_path):
    outputs = []
    for name in ("a", "b"):
        run = tmp_path / name
        for step in (["build-graph"], ["pretrain"], ["train"], ["export"]):
            res = cli(*toy_args(run, "--deterministic", "--seed", "3", *step))
            assert res.returncode == 0, res.stderr
        log = [line.rsplit("\t", 1)[0] for line in (run / "train" / "train_log.tsv").read_text().splitlines()]
        outputs.append((log, (run / "train" / "checkpoint.ckpt").read_bytes(),
                        (run / "pretrain" / "node2vec_augmented.emb").read_bytes(),
                        (run / "export" / "topics.tsv").read_bytes()))
    assert outputs[0] == outputs[1]


def test_module_entry_point_help():
    res = cli("--help")
    assert res.returncode == 0
    for name in ("synth", "build-graph", "pretrain", "train", "eval", "impute", "export", "ablate"):
        assert name in res.stdout


def test_beta_per_epoch_flag_reaches_config(tmp_path):
    run = tmp_path / "run"
    for step in (["build-graph"], ["pretrain"], ["--set", "epochs=1", "train", "--beta-per-epoch"]):
        assert main(toy_args(run, *step)) == 0, step
    assert json.loads((run / "train" / "config.json").read_text())["beta_per_epoch"] is True
