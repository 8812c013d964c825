"""Command line entry point: ``tarot <subcommand> ...``.

Run commands accept ``--config`` (JSON, see ``ExperimentConfig.to_json``),
``--seed`` and ``--out``; explicit flags override config-file fields. The
output root defaults to ``$TAROT_OUT`` or ``./runs``.
"""
from __future__ import annotations

import argparse
import glob
import json
import sys
from dataclasses import replace
from fractions import Fraction
from pathlib import Path

from .attacks import parse_attack_spec
from .core import ComposedScorer, eval_budget
from .disparity import disparity_report
from .evaluation import evaluate, format_reports, local_lipschitz_estimate
from .experiment import (METHODS, SWEEP_PARAMS, ExperimentConfig, RunManifest, emit_plots,
                         load_model, make_datasets, run_dir, run_experiment, sweep, _save_model)
from .synthdata import parse_dataset_spec
from .theory import check_instances
from .training import pretrain_robust, train_teacher_mdd


def _num(text: str) -> float:
    return float(Fraction(text))


def _config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    over = {}
    for key in ("source", "target", "method"):
        if getattr(args, key, None) is not None:
            over[key] = getattr(args, key)
    if getattr(args, "unseen", None):
        over["unseen"] = tuple(args.unseen)
    if args.out is not None:
        over["out_dir"] = args.out
    if args.seed is not None:
        over["seeds"] = (args.seed,)
    if getattr(args, "no_robust_pt", False):
        over["robust_pt"] = False
    if getattr(args, "attack", None):
        over["eval_attacks"] = tuple(args.attack)
    cfg = replace(cfg, **over)
    tarot = cfg.tarot
    if getattr(args, "alpha", None) is not None:
        tarot = replace(tarot, alpha=args.alpha)
    if getattr(args, "epochs", None) is not None:
        tarot = replace(tarot, epochs=args.epochs)
    if getattr(args, "epsilon", None) is not None:
        tarot = tarot.with_epsilon(args.epsilon)
    return replace(cfg, tarot=tarot)


def _common(p, data: bool = True):
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output root (default $TAROT_OUT or ./runs)")
    if data:
        p.add_argument("--source")
        p.add_argument("--target")
        p.add_argument("--epsilon", type=_num, help="training epsilon, e.g. 16/255")
        p.add_argument("--epochs", type=int)


def _out_for(cfg: ExperimentConfig, seed: int) -> Path:
    out = run_dir(cfg, seed)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_teacher(args):
    cfg = _config(args)
    seed = cfg.seeds[0]
    source, target, _ = make_datasets(cfg, seed)
    model = train_teacher_mdd(source, target.unlabeled(), replace(cfg.tarot, seed=seed))
    path = _out_for(cfg, seed) / "teacher.pt"
    _save_model(model, path, cfg, seed, None)
    print(format_reports([evaluate(model, target, {}, seed=seed)]))
    print(f"saved {path}")


def cmd_pretrain(args):
    cfg = _config(args)
    seed = cfg.seeds[0]
    source, _, _ = make_datasets(cfg, seed)
    eps_pre = args.eps_pre if args.eps_pre is not None else cfg.tarot.epsilon * cfg.tarot.eps_pre_ratio
    model = pretrain_robust(source, eps_pre, replace(cfg.tarot, seed=seed))
    path = _out_for(cfg, seed) / "pretrain.pt"
    _save_model(model, path, cfg, seed, None)
    print(f"robust pretraining at eps={eps_pre:.5f}; saved {path}")


def cmd_train(args):
    cfg = _config(args)
    reports = []
    for seed in cfg.seeds:
        m = run_experiment(cfg, seed, force=args.force)
        print(f"seed {seed}: {run_dir(cfg, seed)}")
        reports += [m.report("target"), m.report("source")]
        reports += [m.report("unseen", i) for i in range(len(m.reports["unseen"]))]
    print(format_reports(reports))


def cmd_eval(args):
    model, ckpt = load_model(args.model)
    seed = args.seed if args.seed is not None else 0
    attacks = {spec: parse_attack_spec(spec) for spec in (args.attack or [])}
    if not attacks and args.epsilon:
        attacks = {"pgd20": eval_budget(args.epsilon)}
    reports = [evaluate(model, parse_dataset_spec(spec, args.domain, seed), attacks,
                        args.lipschitz_eps, seed=seed) for spec in args.data]
    print(format_reports(reports))
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "eval.json").write_text(json.dumps([r.to_json() for r in reports], indent=2))


def cmd_lipschitz(args):
    model, _ = load_model(args.model)
    ds = parse_dataset_spec(args.data, "target", args.seed or 0)
    value = local_lipschitz_estimate(model, ds.inputs, args.epsilon, steps=args.steps,
                                     restarts=args.restarts, seed=args.seed or 0)
    print(json.dumps({"local_lipschitz": value, "epsilon": args.epsilon, "n": len(ds)}))


def cmd_probe(args):
    f, ckpt = load_model(args.model)
    if args.model_prime:
        f_prime, _ = load_model(args.model_prime)
    else:
        f_prime = ComposedScorer(f.psi, f.pi_aux)
    ds = parse_dataset_spec(args.data, "target", args.seed or 0)
    rho = args.rho if args.rho is not None else ExperimentConfig.from_json(ckpt["config"]).tarot.margin.rho
    rep = disparity_report(f_prime, f, ds.inputs, rho, args.epsilon, seed=args.seed or 0)
    obj = rep.to_json()
    if not args.per_sample:
        obj.pop("per_sample", None)
    print(json.dumps(obj, indent=2))


def cmd_verify_theory(args):
    summary = check_instances(args.n, args.seed or 0, all_members=not args.first_only)
    text = json.dumps(summary, indent=2)
    print(text)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "theory_summary.json").write_text(text)
    return 1 if summary["failures"] and args.strict else 0


def cmd_sweep(args):
    cfg = _config(args)
    values = [(_num(v) if args.param != "robust_pt" else v.lower() in ("1", "true", "yes"))
              for v in args.values]
    manifests, rows = sweep(args.param, values, cfg, force=args.force)
    print(f"{len(manifests)} runs; summary at {Path(cfg.out_dir) / f'sweep_{args.param}.csv'}")
    if args.plot:
        for p in emit_plots(manifests, Path(cfg.out_dir) / "plots"):
            print(p)


def cmd_plot(args):
    root = args.runs or ExperimentConfig().out_dir
    paths = sorted(glob.glob(str(Path(root) / "**" / "manifest.json"), recursive=True))
    manifests = [RunManifest.from_json(json.loads(Path(p).read_text())) for p in paths]
    if args.param:
        manifests = [m for m in manifests if args.param in m.sweep]
    for p in emit_plots(manifests, args.out or Path(root) / "plots", args.metric, args.domain):
        print(p)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tarot", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("teacher", help="train the non-robust MDD teacher")
    _common(p)
    p.set_defaults(fn=cmd_teacher)

    p = sub.add_parser("pretrain", help="robust pretraining on the source domain")
    _common(p)
    p.add_argument("--eps-pre", type=_num)
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("train", help="full run: teacher, pretrain, method, evaluation")
    _common(p)
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--alpha", type=float)
    p.add_argument("--unseen", action="append")
    p.add_argument("--attack", action="append", help="evaluation attack spec")
    p.add_argument("--no-robust-pt", action="store_true")
    p.add_argument("--force", action="store_true", help="rerun even if a manifest exists")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="standard / robust accuracy of a saved model")
    _common(p, data=False)
    p.add_argument("--model", required=True)
    p.add_argument("--data", action="append", required=True, help="dataset spec")
    p.add_argument("--domain", default="target")
    p.add_argument("--attack", action="append")
    p.add_argument("--epsilon", type=_num)
    p.add_argument("--lipschitz-eps", type=_num)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("lipschitz", help="empirical local Lipschitz constant")
    _common(p, data=False)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--epsilon", type=_num, required=True)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--restarts", type=int, default=3)
    p.set_defaults(fn=cmd_lipschitz)

    p = sub.add_parser("probe", help="disparity report between two scorers")
    _common(p, data=False)
    p.add_argument("--model", required=True)
    p.add_argument("--model-prime", help="defaults to the model's auxiliary head")
    p.add_argument("--data", required=True)
    p.add_argument("--epsilon", type=_num, required=True)
    p.add_argument("--rho", type=float)
    p.add_argument("--per-sample", action="store_true")
    p.set_defaults(fn=cmd_probe)

    p = sub.add_parser("verify-theory", help="exact inequality checks on random finite instances")
    _common(p, data=False)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--first-only", action="store_true", help="check one hypothesis per instance")
    p.add_argument("--strict", action="store_true", help="exit 1 if any inequality fails")
    p.set_defaults(fn=cmd_verify_theory)

    p = sub.add_parser("sweep", help="sweep alpha, epsilon or robust_pt")
    _common(p)
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--param", choices=SWEEP_PARAMS, required=True)
    p.add_argument("--values", nargs="+", required=True)
    p.add_argument("--force", action="store_true")
    p.add_argument("--plot", action="store_true")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("plot", help="plot manifests found under a run root")
    p.add_argument("--runs")
    p.add_argument("--out")
    p.add_argument("--param", choices=SWEEP_PARAMS)
    p.add_argument("--metric", default="robust_acc", choices=("robust_acc", "standard_acc"))
    p.add_argument("--domain", default="target")
    p.set_defaults(fn=cmd_plot)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return int(args.fn(args) or 0)


if __name__ == "__main__":
    sys.exit(main())
