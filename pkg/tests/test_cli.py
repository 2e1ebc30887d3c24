import csv
import json
import subprocess
import sys

import pytest

from gtnrec.cli import RunManifest, main
from gtnrec.graph import write_ratings, write_trust
from gtnrec.synthetic import CIAO, generate


@pytest.fixture(scope="module")
def raw(tmp_path_factory):
    d = tmp_path_factory.mktemp("raw")
    ratings, trust = generate(CIAO.scaled(0.005), seed=1)
    write_ratings(d / "ratings.csv", ratings)
    write_trust(d / "trust.csv", trust)
    return d


@pytest.fixture(scope="module")
def ingested(raw, tmp_path_factory):
    out = tmp_path_factory.mktemp("ing")
    assert main(["ingest", str(raw / "ratings.csv"), str(raw / "trust.csv"), "--out", str(out), "--dataset", "toy"]) == 0
    return out


def write_config(path, data, **kw):
    cfg = {"data": str(data), "epochs": 2, "hidden_dim": 4, "heads": 2, **kw}
    path.write_text(json.dumps(cfg))
    return path


@pytest.fixture(scope="module")
def trained(ingested, tmp_path_factory):
    d = tmp_path_factory.mktemp("runs")
    cfg = write_config(d / "cfg.json", ingested)
    for model in ("gtn", "gcn"):
        assert main(["train", "--config", str(cfg), "--model", model, "--out", str(d / model)]) == 0
        assert main(["evaluate", str(d / model)]) == 0
    return d


class TestIngest:
    def test_artifacts_and_printed_stats(self, raw, tmp_path, capsys):
        assert main(["ingest", str(raw / "ratings.csv"), str(raw / "trust.csv"), "--out", str(tmp_path)]) == 0
        printed = capsys.readouterr().out
        stats = json.loads((tmp_path / "stats.json").read_text())
        for label in ("users", "items", "ratings", "rating density", "connections", "social density", "mean rating"):
            assert label in printed
        assert f"{stats['mean_rating']:.2f}" in printed
        splits = json.loads((tmp_path / "splits.json").read_text())
        assert splits["run_digest"] == stats["run_digest"] == RunManifest.load(tmp_path).digest
        assert len(splits["train"]) + len(splits["val"]) + len(splits["test"]) == stats["ratings"]

    def test_empty_trust(self, raw, tmp_path, capsys):
        (tmp_path / "trust.csv").write_text("trustor,trustee\n")
        assert main(["ingest", str(raw / "ratings.csv"), str(tmp_path / "trust.csv"), "--out", str(tmp_path / "o")]) == 0
        assert json.loads((tmp_path / "o" / "stats.json").read_text())["connections"] == 0

    def test_parse_error_names_line(self, raw, tmp_path, capsys):
        (tmp_path / "bad.csv").write_text("user,item,rating\nu1,i1,4\nu2,i2,four\n")
        assert main(["ingest", str(tmp_path / "bad.csv"), str(raw / "trust.csv"), "--out", str(tmp_path / "o")]) == 1
        assert "bad.csv:3" in capsys.readouterr().err

    def test_subsample_writes_used_files(self, raw, tmp_path):
        assert main(["ingest", str(raw / "ratings.csv"), str(raw / "trust.csv"), "--out", str(tmp_path), "--subsample", "0.5"]) == 0
        man = RunManifest.load(tmp_path)
        assert man.dataset_paths["ratings"].endswith("ratings.csv") and (tmp_path / "ratings.csv").exists()
        assert man.input_digests["ratings"] != man.input_digests["ratings_used"]

    def test_seed_range(self, raw, tmp_path):
        with pytest.raises(SystemExit) as exc:
            main(["ingest", str(raw / "ratings.csv"), str(raw / "trust.csv"), "--out", str(tmp_path), "--seed", str(2**64)])
        assert exc.value.code == 2


class TestTrain:
    def test_artifacts_carry_digest(self, trained):
        run = trained / "gtn"
        digest = RunManifest.load(run).digest
        for name in ("history.csv", "timing.csv"):
            rows = list(csv.DictReader((run / name).read_text().splitlines()))
            assert rows and {r["digest"] for r in rows} == {digest}
        assert json.loads((run / "model.json").read_text())["digest"] == digest

    def test_rerun_identical_history(self, ingested, trained, tmp_path):
        cfg = write_config(tmp_path / "cfg.json", ingested)
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "again")]) == 0
        assert (tmp_path / "again" / "history.csv").read_bytes() == (trained / "gtn" / "history.csv").read_bytes()

    def test_flags_override_config(self, ingested, tmp_path):
        cfg = write_config(tmp_path / "cfg.json", ingested, seed=3, model="gcn", epochs=1)
        assert main(["train", "--config", str(cfg), "--seed", "5", "--model", "pmf", "--out", str(tmp_path / "r")]) == 0
        man = RunManifest.load(tmp_path / "r")
        assert (man.seed, man.config["train"]["model"]) == (5, "pmf")

    def test_digest_tracks_config_and_inputs(self, raw, ingested, tmp_path):
        def digest_for(name, data, **kw):
            cfg = write_config(tmp_path / f"{name}.json", data, epochs=1, **kw)
            assert main(["train", "--config", str(cfg), "--model", "pmf", "--out", str(tmp_path / name)]) == 0
            return RunManifest.load(tmp_path / name).digest

        base = digest_for("a", ingested)
        assert digest_for("b", ingested) == base
        assert digest_for("c", ingested, learning_rate=0.001) != base
        lines = (raw / "ratings.csv").read_text().splitlines()
        (tmp_path / "r.csv").write_text("\n".join(lines[:-1]) + "\n")
        assert main(["ingest", str(tmp_path / "r.csv"), str(raw / "trust.csv"), "--out", str(tmp_path / "ing2")]) == 0
        assert digest_for("d", tmp_path / "ing2") != base

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_exits_nonzero_with_advice(self, ingested, tmp_path, capsys):
        cfg = write_config(tmp_path / "cfg.json", ingested, model="pmf", learning_rate=1e300, bias_init_mean=False)
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "r")]) == 1
        assert "lower learning rate" in capsys.readouterr().err

    def test_unknown_key_rejected(self, ingested, tmp_path, capsys):
        cfg = write_config(tmp_path / "cfg.json", ingested, hiden_dim=3)
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "r")]) == 1
        assert "hiden_dim" in capsys.readouterr().err

    def test_missing_out(self, ingested, tmp_path):
        assert main(["train", "--config", str(write_config(tmp_path / "cfg.json", ingested))]) == 1

    def test_changed_input_refused(self, raw, tmp_path, capsys):
        (tmp_path / "r.csv").write_text((raw / "ratings.csv").read_text())
        assert main(["ingest", str(tmp_path / "r.csv"), str(raw / "trust.csv"), "--out", str(tmp_path / "ing")]) == 0
        with (tmp_path / "r.csv").open("a") as fh:
            fh.write("zz,yy,3\n")
        cfg = write_config(tmp_path / "cfg.json", tmp_path / "ing")
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "run")]) == 1
        assert "changed since ingest" in capsys.readouterr().err


class TestEvaluateAndCompare:
    def test_report(self, trained):
        rep = json.loads((trained / "gtn" / "report.json").read_text())
        assert rep["model"] == "gtn" and rep["dataset"] == "toy" and 0 < rep["mae"] <= rep["rmse"]

    def test_dimension_mismatch_is_load_error(self, trained, tmp_path, capsys):
        run = tmp_path / "broken"
        run.mkdir()
        for f in (trained / "gcn").iterdir():
            (run / f.name).write_bytes(f.read_bytes())
        man = json.loads((run / "model.json").read_text())
        man["model"]["hidden_dim"] = 7
        (run / "model.json").write_text(json.dumps(man))
        assert main(["evaluate", str(run)]) == 1
        assert "shape" in capsys.readouterr().err

    def test_compare(self, trained, tmp_path):
        reports = [str(trained / m / "report.json") for m in ("gtn", "gcn")]
        assert main(["compare", *reports, "--out", str(tmp_path)]) == 0
        rows = list(csv.DictReader((tmp_path / "comparison.csv").read_text().splitlines()))
        assert {r["model"] for r in rows} == {"gtn", "gcn"}
        assert len({r["split_digest"] for r in rows}) == 1
        assert {r["digest"] for r in rows} == {RunManifest.load(tmp_path).digest}
        assert all(len(r["rmse"].split(".")[1]) == 6 for r in rows)

    def test_compare_refuses_mixed_splits(self, trained, tmp_path, capsys):
        other = json.loads((trained / "gcn" / "report.json").read_text())
        other["split_digest"] = "elsewhere"
        (tmp_path / "other.json").write_text(json.dumps(other))
        args = ["compare", str(trained / "gtn" / "report.json"), str(tmp_path / "other.json"), "--out", str(tmp_path / "c")]
        assert main(args) == 1
        assert "--force" in capsys.readouterr().err
        assert main(args + ["--force"]) == 0

    def test_compare_schema_mismatch(self, tmp_path, capsys):
        (tmp_path / "r.json").write_text(json.dumps({"format": "gtnrec-report", "version": 2}))
        assert main(["compare", str(tmp_path / "r.json"), "--out", str(tmp_path / "c")]) == 1
        assert "v2" in capsys.readouterr().err


class TestGridsearch:
    def test_writes_table(self, ingested, tmp_path):
        cfg = write_config(tmp_path / "cfg.json", ingested, epochs=1, grid={"heads": [1, 2]})
        assert main(["gridsearch", "--config", str(cfg), "--out", str(tmp_path / "g")]) == 0
        rows = list(csv.DictReader((tmp_path / "g" / "gridsearch.csv").read_text().splitlines()))
        assert [r["heads"] for r in rows] == ["1", "2"]
        best = json.loads((tmp_path / "g" / "best_config.json").read_text())
        assert best["best_val_rmse"] == pytest.approx(min(float(r["best_val_rmse"]) for r in rows), abs=1e-6)

    def test_needs_grid(self, ingested, tmp_path):
        cfg = write_config(tmp_path / "cfg.json", ingested)
        assert main(["gridsearch", "--config", str(cfg), "--out", str(tmp_path / "g")]) == 1


def test_module_entry_point():
    done = subprocess.run([sys.executable, "-m", "gtnrec", "--help"], capture_output=True, text=True)
    assert done.returncode == 0 and "gridsearch" in done.stdout
