import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from separisk.cli import EXIT_INVALID, EXIT_OK, main
from separisk.cohort import read_cohort_csv
from separisk.video_branch import read_svid

TINY = {
    "train": {"max_epochs": 3, "patience": 1, "batch_size": 64},
    "video": {"frames": 2, "height": 8, "width": 8, "max_epochs": 2, "patience": 1, "batch_size": 64},
}


def _tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "tiny.json").write_text(json.dumps(TINY))
    return d


@pytest.fixture(scope="module")
def synth_video(workdir):
    out = workdir / "syn"
    rc = main(["synth", "--config", str(workdir / "tiny.json"), "--modalities", "cd,edm,video",
               "--n", "240", "--seed", "4", "--out", str(out)])
    assert rc == EXIT_OK
    return out


@pytest.fixture(scope="module")
def trained(workdir, synth_video):
    out = workdir / "train"
    rc = main(["train", "--config", str(workdir / "tiny.json"), "--modalities", "cd,edm,video", "--seed", "1",
               "--cohort", str(synth_video / "cohort.csv"), "--videos", str(synth_video / "videos.svid"),
               "--schema", str(synth_video / "schema.json"), "--out", str(out)])
    assert rc == EXIT_OK
    return out


class TestSynth:
    def test_outputs(self, synth_video):
        coh = read_cohort_csv(synth_video / "cohort.csv")
        assert len(coh) == 240
        assert read_svid(synth_video / "videos.svid").shape == (240, 2, 8, 8)
        truth = json.loads((synth_video / "truth.json").read_text())
        assert truth["preset"] == "hierarchy" and truth["n"] == 240

    def test_masked_then_prep(self, tmp_path):
        assert main(["synth", "--preset", "recovery", "--n", "300", "--mask", "0.2", "--out", str(tmp_path / "s")]) == 0
        raw = read_cohort_csv(tmp_path / "s" / "cohort.csv")
        assert np.isnan(raw.X).any()
        assert main(["prep", str(tmp_path / "s" / "cohort.csv"), "--out", str(tmp_path / "p")]) == 0
        done = read_cohort_csv(tmp_path / "p" / "cohort.csv")
        assert not np.isnan(done.X).any()
        report = json.loads((tmp_path / "p" / "prep_report.json").read_text())
        assert report["missing_after"] == 0


class TestPrep:
    def test_complete_cohort_unchanged(self, tmp_path, capsys):
        assert main(["synth", "--n", "100", "--out", str(tmp_path / "s")]) == 0
        src = tmp_path / "s" / "cohort.csv"
        assert main(["prep", str(src), "--schema", str(tmp_path / "s" / "schema.json"), "--out", str(tmp_path / "p")]) == 0
        assert (tmp_path / "p" / "cohort.csv").read_bytes() == src.read_bytes()
        report = json.loads((tmp_path / "p" / "prep_report.json").read_text())
        assert all(v == 0 for v in report["stages"].values())

    def test_missing_input(self, tmp_path):
        assert main(["prep", str(tmp_path / "nope.csv"), "--out", str(tmp_path)]) == EXIT_INVALID

    def test_malformed_csv(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("a,b\n1\n")
        assert main(["prep", str(p), "--out", str(tmp_path / "o")]) == EXIT_INVALID


class TestTrain:
    def test_model_files(self, trained):
        files = sorted(trained.glob("runs/*/*/model.json"))
        assert len(files) == 5 * 4
        assert len(list(trained.glob("runs/*/video/videonet.json"))) == 5
        doc = json.loads((trained / "metrics" / "metrics.json").read_text())
        assert len(doc["runs"]) == 5
        assert (trained / "metrics" / "results_table.txt").read_text().startswith("Model input")

    def test_deterministic(self, workdir, synth_video, trained):
        out = workdir / "train2"
        rc = main(["train", "--config", str(workdir / "tiny.json"), "--modalities", "cd,edm,video", "--seed", "1",
                   "--cohort", str(synth_video / "cohort.csv"), "--videos", str(synth_video / "videos.svid"),
                   "--schema", str(synth_video / "schema.json"), "--out", str(out)])
        assert rc == EXIT_OK
        assert _tree(out) == _tree(trained)

    def test_cd_only_ignores_video_path(self, workdir, synth_video, tmp_path):
        rc = main(["train", "--config", str(workdir / "tiny.json"), "--modalities", "cd", "--runs", "2",
                   "--cohort", str(synth_video / "cohort.csv"), "--videos", str(tmp_path / "missing.svid"),
                   "--out", str(tmp_path / "o")])
        assert rc == EXIT_OK
        assert len(list((tmp_path / "o").glob("runs/*/*/model.json"))) == 2

    def test_missing_video_file(self, workdir, synth_video, tmp_path):
        rc = main(["train", "--config", str(workdir / "tiny.json"), "--modalities", "cd,video",
                   "--cohort", str(synth_video / "cohort.csv"), "--videos", str(tmp_path / "missing.svid"),
                   "--out", str(tmp_path / "o")])
        assert rc == EXIT_INVALID

    def test_unknown_config_key(self, tmp_path, synth_video):
        (tmp_path / "c.json").write_text(json.dumps({"epochs": 3}))
        rc = main(["train", "--config", str(tmp_path / "c.json"), "--cohort", str(synth_video / "cohort.csv")])
        assert rc == EXIT_INVALID

    def test_wrong_clip_shape(self, synth_video, tmp_path):
        rc = main(["train", "--modalities", "cd,video", "--cohort", str(synth_video / "cohort.csv"),
                   "--videos", str(synth_video / "videos.svid"), "--out", str(tmp_path / "o")])
        assert rc == EXIT_INVALID


class TestInterpret:
    def test_outputs(self, trained, synth_video, tmp_path):
        rc = main(["interpret", "--runs-dir", str(trained), "--cohort", str(synth_video / "cohort.csv"),
                   "--schema", str(synth_video / "schema.json"), "--out", str(tmp_path)])
        assert rc == EXIT_OK
        rows = list(csv.reader((tmp_path / "curves" / "ranking.csv").open()))
        assert rows[0] == ["feature", "all", "cd", "cd+edm", "edm"]
        assert {r[0] for r in rows[1:]} >= {"age", "smoker", "trmv", "video"}
        curve = list(csv.reader((tmp_path / "curves" / "cd" / "age.csv").open()))
        assert len(curve) == 1 + 5 * 101
        assert (tmp_path / "curves" / "cd" / "age_hist.csv").exists()
        assert (tmp_path / "curves" / "cd" / "age.svg").exists()
        assert not (tmp_path / "curves" / "cd" / "smoker.csv").exists()

    def test_feature_mismatch(self, trained, tmp_path):
        p = tmp_path / "other.csv"
        p.write_text("patient_id,study_time,label,zzz\nP1,2010-01-01T00:00:00,0,1.0\nP2,2010-01-02T00:00:00,1,2.0\n")
        rc = main(["interpret", "--runs-dir", str(trained), "--cohort", str(p), "--out", str(tmp_path)])
        assert rc == EXIT_INVALID

    def test_no_models(self, synth_video, tmp_path):
        rc = main(["interpret", "--cohort", str(synth_video / "cohort.csv"), "--out", str(tmp_path)])
        assert rc == EXIT_INVALID


class TestSelftest:
    def test_passes(self, capsys):
        assert main(["selftest"]) == EXIT_OK
        out = capsys.readouterr().out
        assert out.strip() and all(line.startswith("PASS") for line in out.strip().splitlines())

    def test_valid_model_files(self, trained):
        files = [str(next(trained.glob("runs/0/cd/model.json"))), str(trained / "runs/0/video/videonet.json")]
        assert main(["selftest", "--models", *files]) == EXIT_OK

    def test_corrupted_model(self, trained, tmp_path):
        doc = json.loads((trained / "runs/0/cd/model.json").read_text())
        doc["poly_branches"][0]["weight"] = -1.0
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps(doc))
        assert main(["selftest", "--models", str(bad)]) == EXIT_INVALID
        (tmp_path / "junk.json").write_text("not json")
        assert main(["selftest", "--models", str(tmp_path / "junk.json")]) == EXIT_INVALID


def test_module_entry():
    r = subprocess.run([sys.executable, "-m", "separisk", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "selftest" in r.stdout


def test_unknown_command():
    with pytest.raises(SystemExit):
        main(["serve"])
