import csv
import json

import numpy as np
import pytest

from nsde_bmm.cli import DEFAULTS, load_config, main, resolve_out
from nsde_bmm.inference import load_checkpoint
from nsde_bmm.exceptions import ConfigError
from smoke_config import run_all, write_config


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    return run_all(main, tmp_path_factory.mktemp("cli"), "a")


def rows(path):
    return list(csv.reader(open(path)))


def test_generate_outputs(run):
    out = run / "generate"
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 3 and manifest["channels"] == 2
    header = rows(out / "dataset.csv")[0]
    assert header == ["series_id", "split", "t", "y_1", "y_2"]
    resolved = json.loads((out / "resolved_config.json").read_text())
    assert resolved["command"] == "generate" and resolved["config"]["train"]["epochs"] == 2
    assert (out / "version.txt").read_text().startswith("nsde_bmm ")


def test_train_outputs(run):
    out = run / "train"
    hist = rows(out / "history.csv")
    assert hist[0] == ["epoch", "elbo"] and len(hist) == 3
    assert all(np.isfinite(float(r[1])) for r in hist[1:])
    result, extra = load_checkpoint(out / "checkpoint.json")
    assert len(extra["normalization"]["mean"]) == 2
    assert (out / "elbo_curve.dat").read_text().startswith("# epoch elbo")


def test_predict_outputs(run):
    files = sorted((run / "predict").glob("forecast_*.csv"))
    assert len(files) == 2
    r = rows(files[0])
    assert r[0] == ["t", "mean_1", "mean_2", "cov_11", "cov_12", "cov_22"] and len(r) == 1 + 4


def test_benchmark_outputs(run):
    out = run / "benchmark"
    assert len(rows(out / "benchmark.csv")) == 1 + 5 * 2
    summary = json.loads((out / "summary.json").read_text())
    assert [s["method"] for s in summary] == ["bmm", "cubature", "mc", "mc", "mc"]
    assert all(s["seconds"] is None for s in summary)
    for name in ("mc_ecpe_vs_particles.dat", "mc_ecpe_vs_cost.dat", "bmm_ecpe.dat", "cubature_ecpe.dat"):
        assert (out / name).exists()


def test_ablate_outputs(run):
    out = run / "ablate"
    r = rows(out / "ablation.csv")
    assert r[0] == ["method", "kind", "dim", "width", "rel_error", "seconds"]
    assert (out / "vmm_error_dim2.dat").exists() and (out / "cubature_error_dim2.dat").exists()
    assert not (out / "vmm_seconds_dim2.dat").exists()


def test_epochs_zero_checkpoint_is_initialization(tmp_path, run):
    cfg = write_config(tmp_path / "c.yaml", {"train": {"epochs": 0}})
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "t")]) == 0
    result, _ = load_checkpoint(tmp_path / "t" / "checkpoint.json")
    assert result.history == []
    from nsde_bmm.cli import build_model

    init = build_model(load_config(cfg), 2)
    assert result.model.to_dict() == init.to_dict()


def test_predict_horizon_one_and_bmm_rerun(tmp_path, run):
    ck = str(run / "train" / "checkpoint.json")
    cfg = write_config(tmp_path / "c.yaml", {"predict": {"method": "bmm", "horizon": 1}})
    for tag in ("x", "y"):
        assert main(["predict", "--config", str(cfg), "--out", str(tmp_path / tag), "--checkpoint", ck]) == 0
    for f in sorted((tmp_path / "x").glob("forecast_*.csv")):
        assert len(rows(f)) == 2
        assert f.read_bytes() == (tmp_path / "y" / f.name).read_bytes()


def test_double_well_mode_files(tmp_path):
    cfg = write_config(tmp_path / "c.yaml", {
        "data": {"source": "double_well", "double_well": {"paths": 4, "steps": 300, "label_modes": True}},
    })
    assert main(["generate", "--config", str(cfg), "--out", str(tmp_path / "g")]) == 0
    made = {p.name for p in (tmp_path / "g").glob("dataset_mode_*.csv")}
    assert made and made <= {"dataset_mode_neg.csv", "dataset_mode_pos.csv"}
    manifest = json.loads((tmp_path / "g" / "manifest.json").read_text())
    assert len(manifest["modes"]) == 4


def test_dataset_source_round_trip(tmp_path, run):
    cfg = write_config(tmp_path / "c.yaml", {"data": {"source": "dataset", "dataset": {"path": str(run / "generate")}}})
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "t")]) == 0
    # same data and seed as the generated run, so training matches bitwise
    assert (tmp_path / "t" / "history.csv").read_bytes() == (run / "train" / "history.csv").read_bytes()


def test_unknown_key_rejected_before_writing(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("train:\n  epochz: 3\n")
    out = tmp_path / "never"
    assert main(["train", "--config", str(cfg), "--out", str(out)]) == 1
    assert "train.epochz" in capsys.readouterr().err
    assert not out.exists()


def test_errors_exit_one(tmp_path):
    cfg = write_config(tmp_path / "c.yaml")
    assert main(["predict", "--config", str(cfg), "--out", str(tmp_path / "p")]) == 1
    assert main(["predict", "--config", str(cfg), "--out", str(tmp_path / "p"), "--checkpoint", str(tmp_path / "no.json")]) == 1
    assert main(["train", "--config", str(tmp_path / "missing.yaml")]) == 1
    bad = tmp_path / "bad.yaml"
    bad.write_text("train: {method: sgd}\n")
    assert main(["train", "--config", str(bad), "--out", str(tmp_path / "t")]) == 1
    assert main(["train", "--config", str(cfg), "--threads", "0", "--out", str(tmp_path / "t")]) == 1


def test_divergence_exit_two(tmp_path):
    cfg = write_config(tmp_path / "c.yaml", {"train": {"learning_rate": 1e300, "epochs": 3, "clip_norm": 1e300}})
    with np.errstate(all="ignore"):
        code = main(["train", "--config", str(cfg), "--out", str(tmp_path / "t")])
    assert code == 2


def test_config_helpers(tmp_path, monkeypatch):
    assert load_config(None) == DEFAULTS
    bad = tmp_path / "list.yaml"
    bad.write_text("- 1\n")
    with pytest.raises(ConfigError):
        load_config(bad)
    nested = tmp_path / "n.yaml"
    nested.write_text("model: 3\n")
    with pytest.raises(ConfigError, match="mapping"):
        load_config(nested)
    monkeypatch.setenv("NSDE_BMM_OUTPUT_ROOT", str(tmp_path))
    assert resolve_out(None, "train") == tmp_path / "train"
    assert resolve_out("rel", "train") == tmp_path / "rel"
    assert resolve_out("/abs", "train").as_posix() == "/abs"
