"""Trainers: MDD teacher, robust pretraining, PGD-AT, pseudo-label AT (PL) and TAROT.

All trainers are deterministic given ``config.seed``. Parameters are float64.
"""
from __future__ import annotations

import copy
import hashlib
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn as nn

from .attacks import pgd
from .core import ComposedScorer, DomainDataset, MarginConfig, PerturbationBudget, as_tensor, make_mlp_scorer
from .disparity import GradientReversal, PairingError, grl_coefficient
from .losses import ce_loss, ce_rob_loss, mod_ce_rob_loss


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TarotConfig:
    alpha: float = 1.0
    margin: MarginConfig = field(default_factory=lambda: MarginConfig.from_gamma(4.0))
    attack: PerturbationBudget = field(
        default_factory=lambda: PerturbationBudget(8 / 255, 2 / 255, 10, True))
    eta1: float = 0.05
    eta2: Optional[float] = None
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 20
    batch_size: int = 32
    lr_gamma: float = 10.0
    lr_decay: float = 0.75
    grl_high: float = 0.1
    grl_sharpness: float = 10.0
    grl_schedule: bool = True
    hidden: int = 64
    teacher_alpha: float = 0.3
    teacher_grl_high: float = 1.0
    teacher_epochs: Optional[int] = 40
    pretrain_epochs: Optional[int] = 40
    eps_pre_ratio: float = 1 / 8
    selection: str = "last"
    seed: int = 0

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")

    @property
    def epsilon(self) -> float:
        return self.attack.epsilon

    @property
    def lr_aux(self) -> float:
        return self.eta1 if self.eta2 is None else self.eta2

    def with_epsilon(self, epsilon: float) -> "TarotConfig":
        return replace(self, attack=self.attack.with_epsilon(epsilon))

    def to_json(self) -> dict:
        d = asdict(self)
        d["attack"]["box"] = None if self.attack.box is None else list(self.attack.box)
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "TarotConfig":
        obj = dict(obj)
        if "margin" in obj:
            m = obj["margin"]
            obj["margin"] = MarginConfig(rho=m["rho"], gamma=m.get("gamma"))
        if "attack" in obj:
            a = dict(obj["attack"])
            if a.get("box") is not None:
                a["box"] = tuple(a["box"])
            obj["attack"] = PerturbationBudget(**a)
        return cls(**obj)


@dataclass
class TrainState:
    scorer: ComposedScorer
    teacher: Optional[nn.Module] = None
    epoch: int = 0
    step: int = 0
    history: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    selected_epoch: Optional[int] = None
    optimizer: Optional[torch.optim.Optimizer] = None
    scheduler: Optional[object] = None
    last_x_adv: Optional[torch.Tensor] = None


def param_checksum(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def freeze(model: nn.Module) -> nn.Module:
    frozen = copy.deepcopy(model)
    for p in frozen.parameters():
        p.requires_grad_(False)
    return frozen


def _check(name: str, value: torch.Tensor):
    if not torch.isfinite(value):
        raise TrainingDivergedError(f"non-finite {name} loss ({float(value.detach())})")


def _new_scorer(d: int, n_classes: int, config: TarotConfig, init_psi=None) -> ComposedScorer:
    model = make_mlp_scorer(d, n_classes, config.hidden, with_aux=True, seed=config.seed)
    if init_psi is not None:
        if isinstance(init_psi, ComposedScorer):
            init_psi = init_psi.psi
        state = init_psi.state_dict() if isinstance(init_psi, nn.Module) else init_psi
        model.psi.load_state_dict(copy.deepcopy(state))
    return model


def _n_classes(*datasets: DomainDataset) -> int:
    return int(max(ds.labels.max() for ds in datasets if ds.labels is not None)) + 1


def _optimizer(model: ComposedScorer, config: TarotConfig, total_steps: int):
    groups = [{"params": list(model.psi.parameters()) + list(model.pi.parameters()),
               "lr": config.eta1}]
    if model.pi_aux is not None:
        groups.append({"params": list(model.pi_aux.parameters()), "lr": config.lr_aux})
    opt = torch.optim.SGD(groups, lr=config.eta1, momentum=config.momentum,
                          weight_decay=config.weight_decay)
    decay = lambda step: (1.0 + config.lr_gamma * step / total_steps) ** (-config.lr_decay)
    return opt, torch.optim.lr_scheduler.LambdaLR(opt, decay)


def _stream(n: int, length: int, gen: torch.Generator) -> torch.Tensor:
    parts, have = [], 0
    while have < length:
        parts.append(torch.randperm(n, generator=gen))
        have += n
    return torch.cat(parts)[:length]


def paired_batches(n_source: int, n_target: int, batch_size: int, gen: torch.Generator):
    """One epoch of equal-size (source, target) index batches; the shorter
    stream is cycled. Both streams are reshuffled independently."""
    steps = max(math.ceil(n_source / batch_size), math.ceil(n_target / batch_size))
    s = _stream(n_source, steps * batch_size, gen)
    t = _stream(n_target, steps * batch_size, gen)
    return [(s[i * batch_size:(i + 1) * batch_size], t[i * batch_size:(i + 1) * batch_size])
            for i in range(steps)]


def _attack_seed(config: TarotConfig, step: int) -> int:
    return (config.seed * 1_000_003 + step) % (2 ** 63)


def mdd_parts(model: ComposedScorer, xs: torch.Tensor, x_t_adv: torch.Tensor,
              x_t_clean: torch.Tensor, grl: GradientReversal):
    """(target modified-CE term, source CE term) of the auxiliary-head disparity block."""
    if x_t_adv.shape != x_t_clean.shape:
        raise PairingError("adversarial and clean target batches differ in shape")
    with torch.no_grad():
        y_t = model(x_t_clean).argmax(dim=1)
        y_s = model(xs).argmax(dim=1)
    target_term = mod_ce_rob_loss(model.pi_aux(grl(model.psi(x_t_adv))), y_t).mean()
    source_term = ce_loss(model.pi_aux(grl(model.psi(xs))), y_s).mean()
    return target_term, source_term


def tarot_objective(model: ComposedScorer, xs, ys, xt, x_t_adv, y_tilde, alpha: float,
                    gamma: float, grl: Optional[GradientReversal] = None, alpha_block: bool = True):
    """Components and total of the TAROT objective on one batch.

    Returns a dict with tensors ``ce_src``, ``mod_ce_tgt``, ``ce_aux_src``,
    ``ce_rob`` and ``total`` (the objective value), plus ``surrogate``: the
    quantity an optimizer should descend. The surrogate equals ``total``
    with the disparity block sign-flipped; together with a gradient
    reversal ``grl`` in front of the auxiliary head it yields descent on the
    objective for (psi, pi) and ascent for the auxiliary head. Without
    ``grl`` the features feed the head directly, so ``total`` differentiates
    to the plain objective gradient.
    """
    grl = grl if grl is not None else nn.Identity()
    ce_rob = ce_rob_loss(model(x_t_adv), y_tilde).mean()
    out = {"ce_rob": ce_rob}
    if not alpha_block:
        out["total"] = ce_rob
        out["surrogate"] = ce_rob
        return out
    ce_src = ce_loss(model(xs), ys).mean()
    mod_t, ce_aux = mdd_parts(model, xs, x_t_adv, xt, grl)
    disparity = mod_t - gamma * ce_aux
    out.update(ce_src=ce_src, mod_ce_tgt=mod_t, ce_aux_src=ce_aux,
               total=alpha * (ce_src + disparity) + ce_rob,
               surrogate=alpha * (ce_src - disparity) + ce_rob)
    return out


def tarot_step(state: TrainState, batch_s, batch_t, config: TarotConfig, progress: float = 0.0,
               alpha_block: bool = True) -> dict:
    """One TAROT update: attack, then a joint step on both players; returns float loss components."""
    model, teacher = state.scorer, state.teacher
    # with alpha = 0 the block is dropped rather than zero-weighted, so weight
    # decay never touches the auxiliary head and the run is exactly PL
    alpha_block = alpha_block and config.alpha > 0
    xs, ys = batch_s
    xs, xt = as_tensor(xs), as_tensor(batch_t)
    ys = torch.as_tensor(ys, dtype=torch.long)
    with torch.no_grad():
        y_tilde = teacher(xt).argmax(dim=1)
    x_adv = as_tensor(pgd(model, ce_loss, xt, y_tilde, config.attack,
                          seed=_attack_seed(config, state.step)).x_adv)
    state.last_x_adv = x_adv
    coef = grl_coefficient(progress, config.grl_high, config.grl_sharpness) \
        if config.grl_schedule else config.grl_high
    parts = tarot_objective(model, xs, ys, xt, x_adv, y_tilde, config.alpha,
                            config.margin.gamma, GradientReversal(coef), alpha_block)
    for name, v in parts.items():
        _check(name, v)
    state.optimizer.zero_grad(set_to_none=True)
    parts["surrogate"].backward()
    state.optimizer.step()
    state.scheduler.step()
    state.step += 1
    out = {k: float(v.detach()) for k, v in parts.items() if k != "surrogate"}
    out["grl_coef"] = coef
    return out


def _epoch_record(epoch: int, logs: list, extra: dict) -> dict:
    rec = {"epoch": epoch}
    for key in logs[0]:
        rec[key] = float(np.mean([l[key] for l in logs]))
    rec.update(extra)
    return rec


EpochHook = Callable[[ComposedScorer, int], dict]


def _run_uda(source: DomainDataset, target: DomainDataset, teacher: nn.Module, init_psi,
             config: TarotConfig, alpha_block: bool, epoch_hook: Optional[EpochHook] = None) -> TrainState:
    ys_all = source.require_labels()
    n_classes = _n_classes(source) if not getattr(teacher, "n_classes", None) else teacher.n_classes
    model = _new_scorer(source.dim, n_classes, config, init_psi)
    gen = torch.Generator().manual_seed(config.seed)
    steps_per_epoch = len(paired_batches(len(source), len(target), config.batch_size,
                                         torch.Generator().manual_seed(0)))
    total = config.epochs * steps_per_epoch
    opt, sched = _optimizer(model, config, total)
    state = TrainState(model, freeze(teacher), optimizer=opt, scheduler=sched)
    Xs, Xt = as_tensor(source.inputs), as_tensor(target.inputs)
    Ys = torch.as_tensor(ys_all)
    for epoch in range(1, config.epochs + 1):
        logs = []
        for si, ti in paired_batches(len(source), len(target), config.batch_size, gen):
            logs.append(tarot_step(state, (Xs[si], Ys[si]), Xt[ti], config,
                                   progress=state.step / total, alpha_block=alpha_block))
        state.epoch = epoch
        extra = epoch_hook(model, epoch) if epoch_hook else {}
        state.history.append(_epoch_record(epoch, logs, extra))
        state.checkpoints.append(copy.deepcopy(model.state_dict()))
    _select(state, config)
    return state


def _select(state: TrainState, config: TarotConfig):
    from .evaluation import select_checkpoint

    chosen = select_checkpoint(state.history, config.selection)
    state.selected_epoch = chosen
    state.scorer.load_state_dict(state.checkpoints[chosen - 1])


def train_tarot(source: DomainDataset, target: DomainDataset, teacher: nn.Module, init_psi=None,
                config: TarotConfig = TarotConfig(), epoch_hook: Optional[EpochHook] = None) -> TrainState:
    return _run_uda(source, target, teacher, init_psi, config, True, epoch_hook)


def train_pl(source: DomainDataset, target: DomainDataset, teacher: nn.Module, init_psi=None,
             config: TarotConfig = TarotConfig(), epoch_hook: Optional[EpochHook] = None) -> TrainState:
    """Pseudo-label PGD-AT on the target with a frozen teacher (TAROT without the alpha block)."""
    return _run_uda(source, target, teacher, init_psi, config, False, epoch_hook)


def train_teacher_mdd(source: DomainDataset, target: DomainDataset,
                      config: TarotConfig = TarotConfig(), alpha: Optional[float] = None) -> ComposedScorer:
    """Non-robust MDD: source CE plus ``alpha`` times the clean disparity block."""
    alpha = config.teacher_alpha if alpha is None else alpha
    config = replace(config, grl_high=config.teacher_grl_high,
                     epochs=config.teacher_epochs or config.epochs)
    ys_all = source.require_labels()
    model = _new_scorer(source.dim, _n_classes(source), config)
    gen = torch.Generator().manual_seed(config.seed)
    steps_per_epoch = len(paired_batches(len(source), len(target), config.batch_size,
                                         torch.Generator().manual_seed(0)))
    total = config.epochs * steps_per_epoch
    opt, sched = _optimizer(model, config, total)
    Xs, Xt, Ys = as_tensor(source.inputs), as_tensor(target.inputs), torch.as_tensor(ys_all)
    gamma = config.margin.gamma
    step = 0
    for _ in range(config.epochs):
        for si, ti in paired_batches(len(source), len(target), config.batch_size, gen):
            xs, xt = Xs[si], Xt[ti]
            ce_src = ce_loss(model(xs), Ys[si]).mean()
            coef = grl_coefficient(step / total, config.grl_high, config.grl_sharpness) \
                if config.grl_schedule else config.grl_high
            mod_t, ce_aux = mdd_parts(model, xs, xt, xt, GradientReversal(coef))
            loss = ce_src - alpha * (mod_t - gamma * ce_aux)
            _check("teacher", loss)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sched.step()
            step += 1
    return model


def _supervised_at(dataset: DomainDataset, epsilon: float, config: TarotConfig, init=None,
                   epoch_hook: Optional[EpochHook] = None) -> TrainState:
    y_all = dataset.require_labels()
    model = _new_scorer(dataset.dim, _n_classes(dataset), config, init)
    gen = torch.Generator().manual_seed(config.seed)
    steps_per_epoch = math.ceil(len(dataset) / config.batch_size)
    total = config.epochs * steps_per_epoch
    opt, sched = _optimizer(model, config, total)
    state = TrainState(model, optimizer=opt, scheduler=sched)
    budget = config.attack.with_epsilon(epsilon)
    X, Y = as_tensor(dataset.inputs), torch.as_tensor(y_all)
    for epoch in range(1, config.epochs + 1):
        logs = []
        perm = torch.randperm(len(dataset), generator=gen)
        for b in range(steps_per_epoch):
            idx = perm[b * config.batch_size:(b + 1) * config.batch_size]
            x, y = X[idx], Y[idx]
            if epsilon > 0:
                x = as_tensor(pgd(model, ce_loss, x, y, budget,
                                  seed=_attack_seed(config, state.step)).x_adv)
            loss = ce_rob_loss(model(x), y).mean()
            _check("ce_rob", loss)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sched.step()
            state.step += 1
            logs.append({"ce_rob": float(loss.detach())})
        state.epoch = epoch
        extra = epoch_hook(model, epoch) if epoch_hook else {}
        state.history.append(_epoch_record(epoch, logs, extra))
        state.checkpoints.append(copy.deepcopy(model.state_dict()))
    return state


def train_standard_at(dataset: DomainDataset, config: TarotConfig = TarotConfig(),
                      init=None, epsilon: Optional[float] = None,
                      epoch_hook: Optional[EpochHook] = None) -> TrainState:
    """Supervised PGD adversarial training (epsilon = 0 gives standard training)."""
    eps = config.epsilon if epsilon is None else epsilon
    return _supervised_at(dataset, eps, config, init, epoch_hook)


def pretrain_robust(dataset: DomainDataset, eps_pre: float,
                    config: TarotConfig = TarotConfig()) -> ComposedScorer:
    """PGD-AT at ``eps_pre``; the returned scorer's ``psi`` is the initialisation
    for later training (its ``pi`` is the probe head)."""
    if eps_pre < 0:
        raise ValueError("eps_pre must be >= 0")
    config = replace(config, epochs=config.pretrain_epochs or config.epochs)
    return _supervised_at(dataset, eps_pre, config).scorer
