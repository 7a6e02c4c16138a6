from __future__ import annotations

import json
import subprocess
import sys

import pytest

from splatfix.cli import EXIT_CONFIG, EXIT_NUMERIC, EXIT_OK, EXIT_STAGE, main, tree_checksums
from splatfix.errors import NumericAbort

CONFIG = """
[rig]
n_views = 4
width = 16
height = 16
focal = 20.0

[init]
count = 60

[coarse_fit]
iterations = 20

[refine_fit]
iterations = 20

[fixer]
patch = 4
depth = 1
dim = 32
heads = 2
mlp_ratio = 2
ref_grid = 2

[train]
steps = 3
batch_size = 2

[run]
sample_steps = 1
"""


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "small.ini").write_text(CONFIG)
    assert main(["gen-corpus", "--count", "3", "--seed", "1", "--out", str(root / "corpus")]) == EXIT_OK
    return root


def _manifest(d):
    return json.loads((d / "manifest.json").read_text())


def test_gen_corpus_count_and_determinism(tmp_path, capsys):
    assert main(["gen-corpus", "--count", "10", "--seed", "4", "--out", str(tmp_path / "a")]) == EXIT_OK
    assert len(sorted((tmp_path / "a").glob("scene_*"))) == 10
    assert capsys.readouterr().out.splitlines()[0] == "scenes,out"
    assert main(["gen-corpus", "--count", "10", "--seed", "4", "--out", str(tmp_path / "b")]) == EXIT_OK
    assert tree_checksums(tmp_path / "a") == tree_checksums(tmp_path / "b")
    assert _manifest(tmp_path / "a")["outputs"] == tree_checksums(tmp_path / "a")


def test_empty_corpus_is_input_error(tmp_path):
    assert main(["gen-corpus", "--count", "0", "--out", str(tmp_path / "x")]) == EXIT_CONFIG


def test_bad_arguments_and_missing_paths(tmp_path, work):
    assert main(["gen-corpus", "--out", str(tmp_path)]) == EXIT_CONFIG  # --count missing
    assert main(["build-dataset", "--corpus", str(tmp_path / "nope"), "--out", str(tmp_path / "d")]) == EXIT_CONFIG
    bad = tmp_path / "bad.ini"
    bad.write_text("[rig]\nn_views = x\n")
    code = main(["build-dataset", "--corpus", str(work / "corpus"), "--config", str(bad), "--out", str(tmp_path / "d")])
    assert code == EXIT_CONFIG


def test_env_out_root(tmp_path, monkeypatch):
    monkeypatch.setenv("SPLATFIX_OUT", str(tmp_path))
    assert main(["gen-corpus", "--count", "1", "--out", "rel"]) == EXIT_OK
    assert (tmp_path / "rel" / "scene_0000" / "truth.scene").exists()


@pytest.fixture(scope="module")
def dataset_dir(work):
    out = work / "dataset"
    code = main(["build-dataset", "--corpus", str(work / "corpus"), "--config", str(work / "small.ini"),
                 "--out", str(out)])
    assert code == EXIT_OK
    return out


def test_build_dataset_outputs(dataset_dir):
    assert len(json.loads((dataset_dir / "dataset.json").read_text())["samples"]) == 3
    for name in ("config.ini", "dataset_report.csv", "sample_0000.png", "manifest.json"):
        assert (dataset_dir / name).exists()


@pytest.fixture(scope="module")
def checkpoint(work, dataset_dir):
    out = work / "fixer"
    code = main(["train-fixer", "--dataset", str(dataset_dir), "--config", str(work / "small.ini"),
                 "--out", str(out)])
    assert code == EXIT_OK
    assert (out / "train_log.csv").read_text().count("\n") == 4
    return out / "fixer.ckpt"


def test_run_zero_alternations_refined_equals_coarse(work, capsys):
    out = work / "run0"
    code = main(["run", "--scene", str(work / "corpus" / "scene_0000"), "--config", str(work / "small.ini"),
                 "--alternations", "0", "--out", str(out)])
    assert code == EXIT_OK
    rep = json.loads((out / "report.json").read_text())
    assert rep["refined_psnr"] == rep["coarse_psnr"]
    assert (out / "coarse.scene").read_bytes() == (out / "refined.scene").read_bytes()
    assert "coarse_psnr,restored_psnr,refined_psnr" in capsys.readouterr().out


def test_run_eval_and_replay(work, checkpoint, tmp_path, capsys):
    out = work / "run1"
    code = main(["run", "--scene", str(work / "corpus" / "scene_0001"), "--config", str(work / "small.ini"),
                 "--checkpoint", str(checkpoint), "--out", str(out)])
    assert code == EXIT_OK
    for name in ("restored_video", "refine_fit_0.csv", "ring.png", "report.csv"):
        assert (out / name).exists()
    capsys.readouterr()
    assert main(["eval", "--run", str(out)]) == EXIT_OK
    assert "MISMATCH" not in capsys.readouterr().out
    assert main(["replay", "--manifest", str(out / "manifest.json"), "--out", str(tmp_path / "again")]) == EXIT_OK
    assert tree_checksums(tmp_path / "again") == tree_checksums(out)
    assert "True" in capsys.readouterr().out


def test_eval_detects_tampering(work, checkpoint, tmp_path):
    out = tmp_path / "run"
    assert main(["run", "--scene", str(work / "corpus" / "scene_0000"), "--config", str(work / "small.ini"),
                 "--fixer", "identity", "--out", str(out)]) == EXIT_OK
    rep = json.loads((out / "report.json").read_text())
    rep["refined_psnr"] += 1e-3
    (out / "report.json").write_text(json.dumps(rep))
    assert main(["eval", "--run", str(out)]) == EXIT_STAGE


def test_run_missing_checkpoint_is_stage_failure(work, tmp_path):
    code = main(["run", "--scene", str(work / "corpus" / "scene_0000"), "--config", str(work / "small.ini"),
                 "--out", str(tmp_path / "r")])
    assert code == EXIT_STAGE


def test_run_needs_exactly_one_source(work, tmp_path):
    assert main(["run", "--config", str(work / "small.ini"), "--out", str(tmp_path / "r")]) == EXIT_CONFIG


def test_numeric_abort_exit_code(work, dataset_dir, tmp_path, monkeypatch):
    import splatfix.restorer.train as train_mod

    def boom(*a, **k):
        raise NumericAbort("non-finite loss", step=0)

    monkeypatch.setattr(train_mod, "train_fixer", boom)
    code = main(["train-fixer", "--dataset", str(dataset_dir), "--config", str(work / "small.ini"),
                 "--out", str(tmp_path / "f")])
    assert code == EXIT_NUMERIC


def test_ablate_requires_checkpoints(work, dataset_dir, tmp_path):
    code = main(["ablate", "--dataset", str(dataset_dir), "--config", str(work / "small.ini"), "--holdout", "1",
                 "--out", str(tmp_path / "a")])
    assert code == EXIT_STAGE
    code = main(["ablate", "--dataset", str(dataset_dir), "--config", str(work / "small.ini"), "--holdout", "5",
                 "--out", str(tmp_path / "a")])
    assert code == EXIT_CONFIG


def test_ablate_trains_cells(work, dataset_dir, tmp_path):
    out = tmp_path / "abl"
    code = main(["ablate", "--dataset", str(dataset_dir), "--config", str(work / "small.ini"), "--holdout", "1",
                 "--train", "--steps", "2", "--out", str(out)])
    assert code == EXIT_OK
    assert (out / "ablation.csv").read_text().count("\n") == 5
    assert (out / "heatmap_masked-cyclic.png").exists()


def test_console_script_entry():
    res = subprocess.run([sys.executable, "-m", "splatfix.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "gen-corpus" in res.stdout
