import csv
import json
from pathlib import Path

import pytest

import neatread
from neatread import cli

FIXTURES = Path(neatread.__file__).parent / "fixtures"
GOLDEN = Path(__file__).parent / "data" / "eval_golden.json"

SMALL = ["corpus.n_docs=12", "corpus.doc_len=60", "corpus.heldout_windows=6",
         "lm.hidden_dim=8", "lm.emb_dim=6", "lm.epochs=2", "attn.epochs=1",
         "qa_corpus.n_train=40", "qa_corpus.n_test=12", "qa_head.hidden_dim=6",
         "qa_head.epochs=2", "qa_head.full_epochs=1", "qa_policy.epochs=1",
         "qa_policy.eval_samples=1", "sweep.grid=0,2", "sweep.runs=2"]


def run(command, out, *extra):
    argv = [command, "--out", str(out)]
    for item in SMALL + list(extra):
        argv += ["--set", item]
    return cli.main(argv)


def manifest(out, command):
    return json.loads((Path(out) / f"manifest_{command}.json").read_text())


@pytest.fixture(scope="module")
def study1_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("s1")
    for command in ("preprocess", "train-lm", "train-attn", "simulate", "export"):
        assert run(command, out) == 0, command
    return out


class TestEvaluate:
    def test_matches_golden(self, tmp_path):
        code = cli.main(["evaluate", "--config", str(FIXTURES / "eval.ini"), "--out", str(tmp_path)])
        assert code == 0
        got = json.loads((tmp_path / "metrics.json").read_text())
        assert got == json.loads(GOLDEN.read_text())

    def test_missing_gold(self, tmp_path):
        assert cli.main(["evaluate", "--out", str(tmp_path)]) == 2
        m = manifest(tmp_path, "evaluate")
        assert m["partial"] and "gold" in m["error"]

    def test_missing_prediction_is_evaluation_error(self, tmp_path):
        preds = tmp_path / "p.jsonl"
        preds.write_text('{"doc": "doc0", "position": 0, "prob": 0.5}\n')
        code = cli.main(["evaluate", "--config", str(FIXTURES / "eval.ini"),
                         "--set", f"evaluate.predictions={preds}", "--out", str(tmp_path)])
        assert code == 1


class TestConfig:
    def test_bad_value_exits_2(self, tmp_path, capsys):
        assert cli.main(["train-lm", "--set", "lm.p=1.5", "--out", str(tmp_path)]) == 2
        assert "[lm] p" in capsys.readouterr().err

    @pytest.mark.parametrize("item", ["qa_policy.alpha=-1", "lm.momentum=1.0", "lm.epochs=0",
                                      "corpus.path=/no/such/file", "nodot=3"])
    def test_rejected(self, tmp_path, item):
        assert cli.main(["preprocess", "--set", item, "--out", str(tmp_path)]) == 2

    def test_missing_config_file(self, tmp_path):
        assert cli.main(["preprocess", "--config", str(tmp_path / "x.ini"),
                         "--out", str(tmp_path)]) == 2

    def test_missing_checkpoint(self, tmp_path):
        assert run("train-attn", tmp_path) == 2
        assert manifest(tmp_path, "train-attn")["partial"]


class TestStudy1Pipeline:
    def test_outputs_and_manifests(self, study1_run):
        for name in ("vocab.json", "lm.ckpt.json", "attn.ckpt.json", "simulation.jsonl",
                     "heatmap_00.html", "pos_table.json", "analysis.csv"):
            assert (study1_run / name).is_file(), name
        m = manifest(study1_run, "train-lm")
        assert set(m) >= {"config_hash", "seed", "versions", "outputs"}
        assert "lm.ckpt.json" in m["outputs"] and not m["partial"]

    def test_deterministic(self, study1_run, tmp_path):
        assert run("train-lm", tmp_path) == 0
        assert (tmp_path / "lm.ckpt.json").read_bytes() == (study1_run / "lm.ckpt.json").read_bytes()
        assert manifest(tmp_path, "train-lm")["config_hash"] == \
            manifest(study1_run, "train-lm")["config_hash"]

    def test_seed_changes_output(self, study1_run, tmp_path):
        assert run("train-lm", tmp_path, "run.seed=7") == 0
        assert (tmp_path / "lm.ckpt.json").read_bytes() != (study1_run / "lm.ckpt.json").read_bytes()

    def test_simulation_records(self, study1_run):
        recs = [json.loads(l) for l in (study1_run / "simulation.jsonl").read_text().splitlines()]
        assert recs and all(0 < r["prob"] < 1 and r["sampled"] in (0, 1) for r in recs)

    def test_analysis_columns(self, study1_run):
        rows = list(csv.DictReader(open(study1_run / "analysis.csv")))
        assert all(int(r["WordLength"]) == len(r["token"]) for r in rows)


class TestStudy2Commands:
    def test_sweep_rows(self, tmp_path):
        assert run("sweep-alpha", tmp_path) == 0
        rows = list(csv.DictReader(open(tmp_path / "sweep.csv")))
        assert len(rows) == 2 * 2 * 2
        assert [r["alpha"] for r in rows[:4]] == ["0.0"] * 4

    def test_train_qa(self, tmp_path):
        assert run("train-qa", tmp_path) == 0
        metrics = json.loads((tmp_path / "qa_metrics.json").read_text())
        assert set(metrics["conditions"]) == {"preview", "no_preview"}
        assert (tmp_path / "qa_heatmap_preview.html").is_file()


class TestEtk:
    def test_fixture(self, tmp_path):
        code = cli.main(["etk", "--config", str(FIXTURES / "etk.ini"), "--out", str(tmp_path)])
        assert code == 0
        rows = list(csv.DictReader(open(tmp_path / "measures_t1.csv")))
        assert len(rows) == 11
        drift = json.loads((tmp_path / "drift.json").read_text())["t1"]
        assert drift["objective"] <= drift["initial_objective"]
        raw = list(csv.DictReader(open(FIXTURES / "etk_fixations.csv")))
        fixed = list(csv.DictReader(open(tmp_path / "fixations_corrected.csv")))
        assert {float(r["x"]) for r in fixed} <= {float(r["x"]) for r in raw}
