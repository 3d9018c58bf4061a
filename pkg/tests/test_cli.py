"""End-to-end CLI pipeline on a tiny synthetic dataset."""

import json
import os

import numpy as np
import pytest

from reapkit import cli, dataset


@pytest.fixture(scope="module")
def ds_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli-ds")
    dataset.make_synthetic_dataset(root, ["octagon", "square"], 3, seed=0)
    return str(root)


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return str(tmp_path_factory.mktemp("cli-out"))


def test_cli_requires_dataset(tmp_path):
    assert cli.run(["verify", "--out", str(tmp_path)]) == 1


def test_cli_unknown_flag_returns_error():
    assert cli.run(["verify", "--no-such-flag"]) == 1


def test_cli_annotate_and_verify(ds_root, workdir, capsys):
    assert cli.run(["annotate", "--dataset", ds_root]) == 0
    assert cli.run(["verify", "--dataset", ds_root]) == 0
    err = capsys.readouterr().err
    assert "annotations" in err


def test_cli_annotate_recovers_relight(ds_root):
    rows = dataset.load_annotations(dataset.dataset_paths(ds_root)[2])
    assert len(rows) == 6
    assert all(0.3 < r.relight_params.alpha < 1.0 for r in rows)


def test_cli_train(ds_root, workdir, capsys):
    assert cli.run(["train", "--dataset", ds_root, "--out", workdir,
                    "--epochs", "150"]) == 0
    assert os.path.isfile(os.path.join(workdir, "toy-model.bin"))
    err = capsys.readouterr().err
    assert "accuracy" in err


def test_cli_attack_eval_render(ds_root, workdir):
    model_path = os.path.join(workdir, "toy-model.bin")
    assert cli.run(["attack", "--dataset", ds_root, "--out", workdir,
                    "--class", "octagon", "--model", model_path,
                    "--iters", "60"]) == 0
    patch_png = os.path.join(workdir, "patch-octagon.png")
    assert os.path.isfile(patch_png)
    assert os.path.isfile(patch_png + ".json")
    trace = json.load(open(os.path.join(workdir,
                                        "patch-octagon-trace.json")))
    assert len(trace["loss_trace"]) == 60

    assert cli.run(["eval", "--dataset", ds_root, "--out", workdir,
                    "--model", model_path, "--patch", patch_png]) == 0
    report = json.load(open(os.path.join(workdir, "eval-report.json")))
    assert "octagon" in report["per_class"]
    assert report["aggregate"]["n"] == 6

    render_out = os.path.join(workdir, "rendered")
    assert cli.run(["render", "--dataset", ds_root, "--out", render_out,
                    "--patch", patch_png]) == 0
    assert len(os.listdir(render_out)) == 6


def test_cli_eval_clean_only_omits_asr(ds_root, workdir):
    model_path = os.path.join(workdir, "toy-model.bin")
    out = os.path.join(workdir, "clean")
    assert cli.run(["eval", "--dataset", ds_root, "--out", out,
                    "--model", model_path]) == 0
    report = json.load(open(os.path.join(out, "eval-report.json")))
    assert "asr" not in report["per_class"]["octagon"]
    assert report["per_class"]["octagon"]["fnr_clean"] == 0.0


def test_cli_eval_jobs_parallel_matches_serial(ds_root, workdir):
    model_path = os.path.join(workdir, "toy-model.bin")
    out1 = os.path.join(workdir, "serial")
    out2 = os.path.join(workdir, "parallel")
    patch_png = os.path.join(workdir, "patch-octagon.png")
    assert cli.run(["eval", "--dataset", ds_root, "--out", out1,
                    "--model", model_path, "--patch", patch_png]) == 0
    assert cli.run(["eval", "--dataset", ds_root, "--out", out2,
                    "--model", model_path, "--patch", patch_png,
                    "--jobs", "3"]) == 0
    a = json.load(open(os.path.join(out1, "eval-report.json")))
    b = json.load(open(os.path.join(out2, "eval-report.json")))
    assert a["per_class"] == b["per_class"]


def test_cli_realism(workdir, capsys):
    out = os.path.join(workdir, "realism")
    assert cli.run(["realism", "--out", out, "--n", "4"]) == 0
    report = json.load(open(os.path.join(out, "realism-report.json")))
    assert set(report["corner"]) == {"perspective", "affine",
                                     "translate-scale"}
    err = capsys.readouterr().err
    assert "corner RMSE" in err


def test_cli_config_file_flags_win(ds_root, workdir, tmp_path):
    cfgfile = tmp_path / "cfg"
    cfgfile.write_text("epochs=1\nstep=0.5\n")
    out = os.path.join(workdir, "cfgtrain")
    # config file sets epochs=1; explicit --epochs wins
    assert cli.run(["train", "--dataset", ds_root, "--out", out,
                    "--config", str(cfgfile), "--epochs", "2"]) == 0
    assert os.path.isfile(os.path.join(out, "toy-model.bin"))
