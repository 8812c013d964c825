import json
from dataclasses import replace

import pytest
import torch

import tarot.experiment as ex
from tarot.cli import main
from tarot.experiment import (ExperimentConfig, RunManifest, StageError, config_hash, emit_plots,
                              load_model, plot_table, read_plot_csv, run_dir, run_experiment,
                              sweep)
from tarot.training import TarotConfig

SMALL = TarotConfig(epochs=2, teacher_epochs=2, pretrain_epochs=2, batch_size=16,
                    hidden=8).with_epsilon(0.05)


def small_config(tmp_path, **kw):
    base = dict(source="two_moons:n=40,noise=0.1,seed=0", target="two_moons:rot=30,n=40,noise=0.1,seed=0",
                tarot=SMALL, out_dir=str(tmp_path), seeds=(0,))
    base.update(kw)
    return ExperimentConfig(**base)


def _strip(m: RunManifest) -> dict:
    obj = m.to_json()
    obj.pop("created")
    return obj


def test_config_roundtrip_and_validation(tmp_path):
    cfg = small_config(tmp_path, unseen=("two_moons:rot=50,n=20",), eval_attacks=("pgd:eps=8/255,steps=5",))
    assert ExperimentConfig.from_json(json.loads(json.dumps(cfg.to_json()))) == cfg
    with pytest.raises(ValueError):
        small_config(tmp_path, method="nope")
    with pytest.raises(ValueError):
        small_config(tmp_path, seeds=())


def test_hash_ignores_output_location_and_seeds(tmp_path):
    a = small_config(tmp_path)
    assert config_hash(a) == config_hash(replace(a, out_dir="elsewhere", seeds=(3, 4)))
    assert config_hash(a) != config_hash(replace(a, tarot=replace(SMALL, alpha=0.5)))
    assert config_hash(a) == config_hash(ExperimentConfig.from_json(a.to_json()))


def test_run_is_idempotent_and_manifest_consistent(tmp_path):
    cfg = small_config(tmp_path, unseen=("two_moons:rot=60,n=20,noise=0.1",))
    m1 = run_experiment(cfg)
    assert m1.hash_ok()
    out = run_dir(cfg, 0)
    for name in ("config.json", "metrics.jsonl", "manifest.json", "model.pt", "teacher.pt", "pretrain.pt"):
        assert (out / name).exists()
    mtime = (out / "model.pt").stat().st_mtime_ns
    m2 = run_experiment(cfg)
    assert (out / "model.pt").stat().st_mtime_ns == mtime  # skipped, nothing rewritten
    assert m2.to_json() == m1.to_json()
    m3 = run_experiment(cfg, force=True)
    assert _strip(m3) == _strip(m1)
    assert len(m1.reports["unseen"]) == 1
    assert m1.report("unseen").domain_tag == "unseen"
    assert len(m1.metrics) == SMALL.epochs
    model, ckpt = load_model(out / "model.pt")
    assert ckpt["seed"] == 0 and model.n_classes == 2


def test_tampered_manifest_fails_hash(tmp_path):
    m = run_experiment(small_config(tmp_path, robust_pt=False))
    m.config["tarot"]["alpha"] = 0.123
    assert not m.hash_ok()


def test_pl_matches_tarot_alpha_zero(tmp_path):
    pl = run_experiment(small_config(tmp_path, method="pl"))
    tz = run_experiment(small_config(tmp_path, tarot=replace(SMALL, alpha=0.0)))
    a = torch.load(pl.artifacts["model"], weights_only=False)["state_dict"]
    b = torch.load(tz.artifacts["model"], weights_only=False)["state_dict"]
    assert all(torch.equal(a[k], b[k]) for k in a)
    assert pl.reports["target"] == tz.reports["target"]


def test_other_methods_run(tmp_path):
    for method in ("mdd", "at"):
        m = run_experiment(small_config(tmp_path, method=method))
        assert 0 <= m.report("target").standard_acc <= 1
        assert "model" in m.artifacts


def test_failed_stage_leaves_marker(tmp_path, monkeypatch):
    cfg = small_config(tmp_path)

    def boom(*a, **k):
        raise RuntimeError("no teacher today")

    monkeypatch.setattr(ex, "train_teacher_mdd", boom)
    with pytest.raises(StageError) as info:
        run_experiment(cfg)
    assert info.value.stage == "teacher"
    marker = json.loads((run_dir(cfg, 0) / "failed").read_text())
    assert marker["stage"] == "teacher"
    assert not (run_dir(cfg, 0) / "manifest.json").exists()
    monkeypatch.undo()
    run_experiment(cfg)
    assert not (run_dir(cfg, 0) / "failed").exists()


def test_sweep_csv_and_plots(tmp_path):
    cfg = small_config(tmp_path, seeds=(0, 1), robust_pt=False)
    manifests, rows = sweep("alpha", [0.0, 0.5], cfg)
    assert len(manifests) == 4
    assert (tmp_path / "sweep_alpha.csv").read_text().count("\n") == len(rows) + 1
    png, csv_path = emit_plots(manifests, tmp_path / "plots")
    assert png.exists() and png.stat().st_size > 0
    assert read_plot_csv(csv_path) == [(s, str(x), y) for s, x, y in plot_table(manifests)]
    with pytest.raises(ValueError):
        emit_plots([], tmp_path / "plots")
    with pytest.raises(ValueError):
        sweep("lr", [0.1], cfg)


def test_cli_end_to_end(tmp_path, capsys):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(small_config(tmp_path / "runs").to_json()))
    common = ["--config", str(cfg_path), "--seed", "0"]
    assert main(["train", *common, "--no-robust-pt"]) == 0
    out = capsys.readouterr().out
    assert "target" in out
    model = next((tmp_path / "runs").rglob("model.pt"))
    assert main(["eval", "--model", str(model), "--data", "two_moons:rot=30,n=20", "--epsilon", "8/255"]) == 0
    assert main(["lipschitz", "--model", str(model), "--data", "two_moons:n=10", "--epsilon", "0.05",
                 "--steps", "3", "--restarts", "1"]) == 0
    assert main(["probe", "--model", str(model), "--data", "two_moons:n=10", "--epsilon", "0.05"]) == 0
    capsys.readouterr()
    assert main(["verify-theory", "--n", "20", "--out", str(tmp_path / "theory")]) == 0
    summary = json.loads((tmp_path / "theory" / "theory_summary.json").read_text())
    assert summary["checked"] == 20
    assert main(["sweep", *common, "--param", "epsilon", "--values", "0", "2/255", "--plot"]) == 0
    assert main(["plot", "--runs", str(tmp_path / "runs"), "--param", "epsilon"]) == 0
    assert list((tmp_path / "runs" / "plots").glob("*.png"))
    with pytest.raises(SystemExit):
        main(["train", "--method", "bogus"])
