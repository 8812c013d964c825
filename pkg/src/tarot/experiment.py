"""Config-driven runs: teacher, optional robust pretraining, method training,
evaluation on target / source / unseen domains, sweeps and plots.

Each (config, seed) run owns ``<out_dir>/<config hash>/seed<k>/`` and is
skipped when a finished manifest is already there.
"""
from __future__ import annotations

import csv
import hashlib
import json
import os
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .attacks import parse_attack_spec
from .core import eval_budget
from .evaluation import EvalReport, evaluate, robust_accuracy, standard_accuracy
from .synthdata import parse_dataset_spec
from .training import (TarotConfig, pretrain_robust, train_pl, train_standard_at, train_tarot,
                       train_teacher_mdd)

METHODS = ("tarot", "pl", "mdd", "at")
SWEEP_PARAMS = ("alpha", "epsilon", "robust_pt")
OUT_ENV = "TAROT_OUT"


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


def default_out_dir() -> str:
    return os.environ.get(OUT_ENV, "runs")


@dataclass(frozen=True)
class ExperimentConfig:
    source: str = "two_moons:n=400,noise=0.1,seed=0"
    target: str = "two_moons:rot=40,n=400,noise=0.1,seed=0"
    unseen: tuple = ()
    method: str = "tarot"
    tarot: TarotConfig = field(default_factory=lambda: TarotConfig().with_epsilon(16 / 255))
    robust_pt: bool = True
    eval_attacks: tuple = ()  # attack spec strings; empty means PGD-20 at the training epsilon
    lipschitz_eps: Optional[float] = None
    out_dir: str = field(default_factory=default_out_dir)
    seeds: tuple = (0, 1, 2)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        for spec in (self.source, self.target, *self.unseen):
            parse_dataset_spec(spec)  # fails early on unknown generators
        for spec in self.eval_attacks:
            parse_attack_spec(spec)
        if not self.seeds:
            raise ValueError("at least one seed is required")

    def attacks(self) -> dict:
        if not self.eval_attacks:
            return {"pgd20": eval_budget(self.tarot.epsilon)}
        return {spec: parse_attack_spec(spec) for spec in self.eval_attacks}

    def to_json(self) -> dict:
        return {"source": self.source, "target": self.target, "unseen": list(self.unseen),
                "method": self.method, "tarot": self.tarot.to_json(), "robust_pt": self.robust_pt,
                "eval_attacks": list(self.eval_attacks), "lipschitz_eps": self.lipschitz_eps,
                "out_dir": self.out_dir, "seeds": list(self.seeds)}

    @classmethod
    def from_json(cls, obj: dict) -> "ExperimentConfig":
        obj = dict(obj)
        if "tarot" in obj:
            obj["tarot"] = TarotConfig.from_json(obj["tarot"])
        for key in ("unseen", "eval_attacks", "seeds"):
            if key in obj:
                obj[key] = tuple(obj[key])
        return cls(**obj)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_json(json.loads(Path(path).read_text()))


def config_hash(config: ExperimentConfig) -> str:
    """sha256 of the canonical JSON of everything that affects results
    (the output directory and seed list are excluded)."""
    obj = config.to_json()
    obj.pop("out_dir")
    obj.pop("seeds")
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


@dataclass
class RunManifest:
    config_hash: str
    seed: int
    config: dict
    metrics: list = field(default_factory=list)
    reports: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)
    sweep: dict = field(default_factory=dict)
    created: float = 0.0

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "RunManifest":
        return cls(**obj)

    def hash_ok(self) -> bool:
        return config_hash(ExperimentConfig.from_json(self.config)) == self.config_hash

    def report(self, domain: str, index: int = 0) -> EvalReport:
        return EvalReport.from_json(self.reports[domain][index])


def run_dir(config: ExperimentConfig, seed: int) -> Path:
    return Path(config.out_dir) / config_hash(config)[:16] / f"seed{seed}"


def make_datasets(config: ExperimentConfig, seed: int):
    """Source, target and unseen datasets for one seed (the seed offsets each
    spec's sample seed, so seeds also resample the data)."""
    return (parse_dataset_spec(config.source, "source", seed),
            parse_dataset_spec(config.target, "target", seed),
            [parse_dataset_spec(s, "unseen", seed) for s in config.unseen])


def _save_model(model, path: Path, config: ExperimentConfig, seed: int, epoch: Optional[int]):
    torch.save({"state_dict": model.state_dict(), "config": config.to_json(), "seed": seed,
                "epoch": epoch, "n_classes": getattr(model, "n_classes", None)}, path)


def _stage(name: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except Exception as exc:  # re-raised with the stage attached
        raise StageError(name, exc) from exc


def _train(config: ExperimentConfig, seed: int, out: Path):
    tc = replace(config.tarot, seed=seed)
    source, target, unseen = make_datasets(config, seed)
    attacks = config.attacks()
    artifacts, history, selected = {}, [], None

    def hook(model, epoch):
        rec = {"target_standard_acc": standard_accuracy(model, target),
               "source_standard_acc": standard_accuracy(model, source)}
        if tc.selection == "pgd20-target":
            rec["target_robust_acc"] = robust_accuracy(model, target, eval_budget(tc.epsilon),
                                                       seed=seed)
        return rec

    if config.method == "at":
        state = _stage("train", train_standard_at, target, tc, None, None, hook)
        model, history, selected = state.scorer, state.history, state.selected_epoch
    else:
        teacher = _stage("teacher", train_teacher_mdd, source, target.unlabeled(), tc)
        _save_model(teacher, out / "teacher.pt", config, seed, None)
        artifacts["teacher"] = str(out / "teacher.pt")
        if config.method == "mdd":
            model = teacher
        else:
            init = None
            if config.robust_pt:
                init = _stage("pretrain", pretrain_robust, source, tc.epsilon * tc.eps_pre_ratio, tc)
                _save_model(init, out / "pretrain.pt", config, seed, None)
                artifacts["pretrain"] = str(out / "pretrain.pt")
            trainer = train_tarot if config.method == "tarot" else train_pl
            state = _stage("train", trainer, source, target.unlabeled(), teacher, init, tc, hook)
            model, history, selected = state.scorer, state.history, state.selected_epoch
    _save_model(model, out / "model.pt", config, seed, selected)
    artifacts["model"] = str(out / "model.pt")

    def ev(ds):
        return evaluate(model, ds, attacks, config.lipschitz_eps, seed=seed).to_json()

    reports = _stage("eval", lambda: {"target": [ev(target)], "source": [ev(source)],
                                      "unseen": [ev(ds) for ds in unseen]})
    return history, reports, artifacts


def run_experiment(config: ExperimentConfig, seed: Optional[int] = None,
                   force: bool = False, sweep: Optional[dict] = None) -> RunManifest:
    """Run one seed (default: the first in ``config.seeds``) and persist it."""
    seed = config.seeds[0] if seed is None else int(seed)
    out = run_dir(config, seed)
    manifest_path = out / "manifest.json"
    if manifest_path.exists() and not (out / "failed").exists() and not force:
        return RunManifest.from_json(json.loads(manifest_path.read_text()))
    out.mkdir(parents=True, exist_ok=True)
    (out / "failed").unlink(missing_ok=True)
    (out / "config.json").write_text(json.dumps(config.to_json(), indent=2, sort_keys=True))
    try:
        history, reports, artifacts = _train(config, seed, out)
    except StageError as exc:
        (out / "failed").write_text(json.dumps({"stage": exc.stage, "error": str(exc)}))
        raise
    with open(out / "metrics.jsonl", "w") as fh:
        for rec in history:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    artifacts["metrics"] = str(out / "metrics.jsonl")
    manifest = RunManifest(config_hash(config), seed, config.to_json(), history, reports,
                           artifacts, dict(sweep or {}), time.time())
    manifest_path.write_text(json.dumps(manifest.to_json(), indent=2, sort_keys=True))
    return manifest


def run_seeds(config: ExperimentConfig, force: bool = False, sweep: Optional[dict] = None):
    return [run_experiment(config, s, force, sweep) for s in config.seeds]


def _with_value(config: ExperimentConfig, param: str, value) -> ExperimentConfig:
    if param == "alpha":
        return replace(config, tarot=replace(config.tarot, alpha=float(value)))
    if param == "epsilon":
        return replace(config, tarot=config.tarot.with_epsilon(float(value)))
    if param == "robust_pt":
        return replace(config, robust_pt=bool(value))
    raise ValueError(f"sweep parameter must be one of {SWEEP_PARAMS}")


def sweep(param: str, values: Sequence, config: ExperimentConfig, force: bool = False,
          summary_path=None):
    """One run per value per seed; writes a summary CSV and returns (manifests, rows)."""
    if param not in SWEEP_PARAMS:
        raise ValueError(f"sweep parameter must be one of {SWEEP_PARAMS}")
    manifests = []
    for v in values:
        manifests += run_seeds(_with_value(config, param, v), force, {param: v})
    rows = summary_rows(manifests)
    path = Path(summary_path) if summary_path else Path(config.out_dir) / f"sweep_{param}.csv"
    _write_csv(path, rows)
    return manifests, rows


def summary_rows(manifests: Sequence[RunManifest]) -> list:
    rows = []
    for m in manifests:
        param, value = next(iter(m.sweep.items()), ("", ""))
        for domain, reps in m.reports.items():
            for rep in reps:
                for attack, rob in (rep["robust_acc"] or {"": None}).items():
                    rows.append({"param": param, "value": value, "method": m.config["method"],
                                 "robust_pt": m.config["robust_pt"], "seed": m.seed,
                                 "domain": domain, "name": rep["name"], "attack": attack,
                                 "standard_acc": rep["standard_acc"], "robust_acc": rob})
    return rows


def _write_csv(path: Path, rows: list):
    path.parent.mkdir(parents=True, exist_ok=True)
    fields = ["param", "value", "method", "robust_pt", "seed", "domain", "name", "attack",
              "standard_acc", "robust_acc"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        w.writerows(rows)


def plot_table(manifests: Sequence[RunManifest], metric: str = "robust_acc",
               domain: str = "target") -> list:
    """(series, x, y) triples: y is the median over seeds of ``metric`` on ``domain``."""
    groups: dict = {}
    for row in summary_rows(manifests):
        if row["domain"] != domain:
            continue
        series = f"{row['method']}{'+robust-pt' if row['robust_pt'] else ''}"
        x = row["value"] if row["param"] else 0
        groups.setdefault((series, x), []).append(row[metric])
    return [(s, x, float(np.median(v))) for (s, x), v in sorted(groups.items(), key=lambda t: (t[0][0], float(t[0][1])))]


def emit_plots(manifests: Sequence[RunManifest], out_dir, metric: str = "robust_acc",
               domain: str = "target") -> list:
    """Line plot of ``metric`` against the swept value, one series per method and
    init, plus a CSV next to the image holding exactly the plotted numbers."""
    if not manifests:
        raise ValueError("emit_plots needs at least one manifest")
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    table = plot_table(manifests, metric, domain)
    param = next(iter(manifests[0].sweep), "run")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = out / f"{metric}_vs_{param}_{domain}"
    with open(stem.with_suffix(".csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["series", param, metric])
        w.writerows(table)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for series in sorted({s for s, _, _ in table}):
        pts = [(float(x), y) for s, x, y in table if s == series]
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=series)
    ax.set_xlabel(param)
    ax.set_ylabel(f"{domain} {metric.replace('_', ' ')}")
    ax.legend()
    fig.tight_layout()
    fig.savefig(stem.with_suffix(".png"), dpi=120)
    plt.close(fig)
    return [stem.with_suffix(".png"), stem.with_suffix(".csv")]


def read_plot_csv(path) -> list:
    with open(path) as fh:
        rows = list(csv.reader(fh))
    return [(r[0], r[1], float(r[2])) for r in rows[1:]]


def load_model(path):
    """Rebuild a scorer saved by a run (architecture is read off the state dict)."""
    from .core import make_mlp_scorer

    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    sd = ckpt["state_dict"]
    d = sd["psi.1.weight"].shape[1]
    hidden = sd["psi.1.weight"].shape[0]
    n_classes = sd["pi.weight"].shape[0]
    model = make_mlp_scorer(d, n_classes, hidden, with_aux="pi_aux.weight" in sd)
    model.load_state_dict(sd)
    return model, ckpt
