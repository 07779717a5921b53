"""Normal, standard adversarial (SAT) and adaptive adversarial (AAT) training."""
from __future__ import annotations

import itertools
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .attacks import AttackBudget, AttackedDataset, attack_batch, sample_seed
from .autodiff import ParameterStore
from .data import Dataset, SampleBatch
from .io import save_checkpoint, store_digest, write_json
from .losses import LossWeights, batch_objective, fusion_loss, saliency_pair
from .model import Composite, grads_finite, is_fusion, is_seg, make_optimizer

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, msg, curves=None):
        super().__init__(msg)
        self.curves = curves


@dataclass
class AATConfig:
    levels: tuple = ("1/255", "2/255", "4/255")
    level_steps: int = 5  # PGD iterations for the offline sets
    inner_steps: int = 10
    inner_lr: float = 1e-4
    outer_lr: float = 1e-3
    outer_steps: int = 50
    outer_tol: float = 1e-3  # relative change over `outer_window` iterations
    outer_window: int = 5
    pretext_batch: int = 4
    warm_steps: int = 20
    warm_lr: float = 1e-3
    warm_batch: int | None = None  # None = full pooled set
    # joint phase
    joint_steps: int = 300
    joint_lr: float = 1e-3
    batch_size: int = 4
    adv_fraction: float = 0.5
    joint_eps: str = "8/255"
    joint_attack_steps: int = 5
    lam: float = 1.0
    reuse_seg: bool = False
    seed: int = 0

    def __post_init__(self):
        if len(self.levels) < 1:
            raise ValueError("at least one attack level is required")
        for name in ("inner_lr", "outer_lr", "warm_lr", "joint_lr"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0 <= self.adv_fraction <= 1:
            raise ValueError("adv_fraction must lie in [0, 1]")

    @property
    def joint_budget(self) -> AttackBudget:
        return AttackBudget(self.joint_eps, steps=self.joint_attack_steps)

    def to_json(self) -> dict:
        d = asdict(self)
        d["levels"] = list(self.levels)
        return d


@dataclass
class TrainingRun:
    strategy: str  # "normal" | "SAT" | "AAT"
    params: ParameterStore
    curves: dict = field(default_factory=dict)
    checkpoints: dict = field(default_factory=dict)  # phase -> ParameterStore
    config: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def save(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        files = {}
        for phase, store in sorted(self.checkpoints.items()):
            fname = f"{self.strategy.lower()}_{phase}.ckpt"
            save_checkpoint(directory / fname, store, {"strategy": self.strategy, "phase": phase})
            files[phase] = {"file": fname, "digest": store_digest(store)}
        manifest = {
            "strategy": self.strategy,
            "config": self.config,
            "checkpoints": files,
            "curves": self.curves,
            "extra": self.extra,
        }
        write_json(directory / f"{self.strategy.lower()}_run.json", manifest)
        return directory / f"{self.strategy.lower()}_run.json"


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------


def batch_stream(n: int, batch_size: int, seed: int):
    """Endless deterministic stream of index batches (fresh permutation per epoch)."""
    rng = np.random.default_rng(seed)
    while True:
        perm = rng.permutation(n)
        for i in range(0, n - batch_size + 1, batch_size):
            yield perm[i:i + batch_size]


def grad_of(store: ParameterStore, trainable, fn) -> tuple[float, dict]:
    """Evaluate ``fn(tape, p) -> scalar`` and return its value and gradients for
    parameters selected by ``trainable(name)``."""
    tape = ad.Tape()
    p = {}
    for k, v in store.items():
        p[k] = tape.leaf(k, v) if trainable(k) else tape.const(v)
    loss = fn(tape, p)
    return float(loss.value), tape.backward(loss)


def fusion_only_loss(model: Composite, w: LossWeights = LossWeights()):
    def fn(tape, p, b: SampleBatch):
        u = model.fusion(p, tape.const(b.x), tape.const(b.y))
        return fusion_loss(u, b.x, b.y, saliency_pair(b.x, b.y), w)
    return fn


def evaluate_fusion_loss(model, store, data: Dataset, w: LossWeights = LossWeights(), chunk: int = 16) -> float:
    """Sample-weighted mean L_F over a dataset."""
    fn = fusion_only_loss(model, w)
    total = 0.0
    for b in data.batches(chunk):
        tape = ad.Tape()
        p = tape.bind(store, trainable=False)
        total += float(fn(tape, p, b).value) * len(b)
    return total / len(data)


def _check(value: float, grads: dict, what: str, curves: dict):
    if not np.isfinite(value) or not grads_finite(grads):
        raise TrainingDiverged(f"{what}: non-finite loss or gradient", curves)


# --------------------------------------------------------------------------
# joint training of N o T (normal / SAT / final AAT phase)
# --------------------------------------------------------------------------


def joint_train(model: Composite, store: ParameterStore, data: Dataset, steps: int, lr: float,
                batch_size: int, adv_fraction: float, budget: AttackBudget, lam: float, seed: int,
                w: LossWeights = LossWeights(), trainable=None, curves: dict | None = None) -> ParameterStore:
    """Minimize L_tr (clean part) + lam * L_tr_at (attacked part) over a shared data stream.

    Each batch is split into a clean part and an adversarial part of
    round(adv_fraction * batch_size) samples, attacked on the fly against the
    current parameters.
    """
    store = store.copy()
    trainable = trainable or (lambda k: is_fusion(k) or is_seg(k))
    opt = make_optimizer("adam", lr)
    curves = curves if curves is not None else {}
    curves.setdefault("loss", [])
    n_adv = int(round(adv_fraction * batch_size))
    stream = batch_stream(len(data), batch_size, seed)
    for step in range(steps):
        idx = next(stream)
        clean = data.batch(idx[:batch_size - n_adv]) if n_adv < batch_size else None
        adv = None
        if n_adv:
            src = data.batch(idx[batch_size - n_adv:])
            b = AttackBudget(budget.epsilon, budget.eta, budget.steps, sample_seed(seed, step), budget.random_start)
            adv = attack_batch(model, store, src, b)

        def fn(tape, p):
            total = None
            if clean is not None:
                total = batch_objective(model, p, tape.const(clean.x), tape.const(clean.y), clean.z, w)[0]
            if adv is not None and lam > 0:
                l_at = batch_objective(model, p, tape.const(adv.x), tape.const(adv.y), adv.z, w)[0]
                total = lam * l_at if total is None else total + lam * l_at
            return total

        if clean is None and (adv is None or lam == 0):
            raise ValueError("nothing to train on: no clean samples and lam == 0")
        value, grads = grad_of(store, trainable, fn)
        _check(value, grads, f"joint step {step}", curves)
        opt.step(store, grads, [k for k in grads if trainable(k)])
        curves["loss"].append(value)
    return store


def normal_train(model, store, data, cfg: AATConfig, curves=None):
    return joint_train(model, store, data, cfg.joint_steps, cfg.joint_lr, cfg.batch_size, 0.0,
                       cfg.joint_budget, 0.0, cfg.seed, curves=curves)


def standard_adversarial_train(model: Composite, data: Dataset, cfg: AATConfig, init_seed: int | None = None,
                               adv_fraction: float | None = None) -> TrainingRun:
    """SAT baseline: joint adversarial training from random parameters."""
    store = model.init(cfg.seed if init_seed is None else init_seed)
    curves: dict = {}
    frac = cfg.adv_fraction if adv_fraction is None else adv_fraction
    out = joint_train(model, store, data, cfg.joint_steps, cfg.joint_lr, cfg.batch_size, frac,
                      cfg.joint_budget, cfg.lam, cfg.seed, curves=curves)
    return TrainingRun("SAT", out, {"joint": curves}, {"init": store, "final": out}, cfg.to_json())


def normal_training(model: Composite, data: Dataset, cfg: AATConfig, init_seed: int | None = None) -> TrainingRun:
    store = model.init(cfg.seed if init_seed is None else init_seed)
    curves: dict = {}
    out = normal_train(model, store, data, cfg, curves)
    return TrainingRun("normal", out, {"joint": curves}, {"init": store, "final": out}, cfg.to_json())


# --------------------------------------------------------------------------
# AAT phases
# --------------------------------------------------------------------------


def _level_pairs(attacked) -> list:
    if isinstance(attacked, dict):
        pairs = [attacked[k] for k in sorted(attacked)]
    else:
        pairs = list(attacked)
    for tr, va in pairs:
        if tr is None or va is None:
            raise ValueError("every attack level needs both a train and a val set")
    return pairs


def _data(s) -> Dataset:
    return s.data if isinstance(s, AttackedDataset) else s


def adapt(model: Composite, theta: ParameterStore, data: Dataset, steps: int, lr: float, batch_size: int,
          seed: int, w: LossWeights = LossWeights()) -> ParameterStore:
    """``steps`` plain gradient steps on L_F from a copy of ``theta`` (theta is untouched)."""
    theta_i = theta.copy()
    fn = fusion_only_loss(model, w)
    stream = batch_stream(len(data), min(batch_size, len(data)), seed)
    for _ in range(steps):
        b = data.batch(next(stream))
        value, grads = grad_of(theta_i, is_fusion, lambda tape, p: fn(tape, p, b))
        _check(value, grads, "inner adaptation", {})
        for k in grads:
            if is_fusion(k):
                theta_i[k] = (theta_i[k] - lr * grads[k]).astype(theta_i[k].dtype)
    return theta_i


def pretext_initialize(model: Composite, theta0: ParameterStore, attacked, cfg: AATConfig,
                       w: LossWeights = LossWeights()) -> tuple[ParameterStore, dict]:
    """Multi-attack meta-initialization of the fusion parameters (first-order).

    For every level: adapt a clone of theta on that level's train set, then take
    the L_F gradient on the level's val set at the adapted parameters. The
    level gradients are summed in level order and applied to theta.
    """
    pairs = _level_pairs(attacked)
    theta = theta0.copy()
    opt = make_optimizer("adam", cfg.outer_lr)
    fn = fusion_only_loss(model, w)
    outer_curve, per_level = [], []
    for it in range(cfg.outer_steps):
        total_grad: dict = {}
        outer_loss = 0.0
        level_losses = []
        for li, (tr, va) in enumerate(pairs):
            s = sample_seed(cfg.seed, it * 1000 + li)
            theta_i = adapt(model, theta, _data(tr), cfg.inner_steps, cfg.inner_lr, cfg.pretext_batch, s, w)
            vdata = _data(va)
            vb = vdata.batch(np.random.default_rng(s).permutation(len(vdata))[:cfg.pretext_batch])
            value, grads = grad_of(theta_i, is_fusion, lambda tape, p: fn(tape, p, vb))
            _check(value, grads, "pretext outer", {"outer": outer_curve})
            for k, g in grads.items():
                if is_fusion(k):
                    total_grad[k] = total_grad[k] + g if k in total_grad else g
            outer_loss += value
            level_losses.append(value)
        opt.step(theta, total_grad, sorted(total_grad))
        outer_curve.append(outer_loss)
        per_level.append(level_losses)
        if len(outer_curve) > cfg.outer_window:
            prev = outer_curve[-1 - cfg.outer_window]
            if abs(outer_curve[-1] - prev) / max(abs(prev), 1e-12) < cfg.outer_tol:
                break
    return theta, {"outer": outer_curve, "per_level": per_level, "iterations": len(outer_curve)}


def adaptation_report(model: Composite, theta: ParameterStore, attacked, cfg: AATConfig,
                      w: LossWeights = LossWeights()) -> list:
    """Per level: L_F on the val set at theta and after ``inner_steps`` adaptation steps."""
    out = []
    for li, (tr, va) in enumerate(_level_pairs(attacked)):
        theta_i = adapt(model, theta, _data(tr), cfg.inner_steps, cfg.inner_lr, cfg.pretext_batch,
                        sample_seed(cfg.seed, 10 ** 6 + li), w)
        pre = evaluate_fusion_loss(model, theta, _data(va), w)
        post = evaluate_fusion_loss(model, theta_i, _data(va), w)
        out.append({"level": li + 1, "pre": pre, "post": post})
    return out


def warm_start_fusion(model: Composite, theta: ParameterStore, pooled: Dataset, cfg: AATConfig,
                      w: LossWeights = LossWeights(), lr: float | None = None,
                      optimizer: str = "adam") -> tuple[ParameterStore, list]:
    """Gradient descent on L_F over the pooled attacked train sets."""
    theta = theta.copy()
    opt = make_optimizer(optimizer, cfg.warm_lr if lr is None else lr)
    fn = fusion_only_loss(model, w)
    curve = []
    if cfg.warm_batch is None:
        batches = itertools.repeat(np.arange(len(pooled)))
    else:
        batches = batch_stream(len(pooled), min(cfg.warm_batch, len(pooled)), cfg.seed)
    for _ in range(cfg.warm_steps):
        b = pooled.batch(next(batches))
        value, grads = grad_of(theta, is_fusion, lambda tape, p: fn(tape, p, b))
        _check(value, grads, "warm start", {"warm": curve})
        opt.step(theta, grads, [k for k in grads if is_fusion(k)])
        curve.append(value)
    return theta, curve


def pooled_train(attacked) -> Dataset:
    return Dataset.concat([_data(tr) for tr, _ in _level_pairs(attacked)])


def joint_adversarial_train(model: Composite, theta: ParameterStore, omega: ParameterStore | None, data: Dataset,
                            cfg: AATConfig, curves: dict | None = None) -> ParameterStore:
    """Final AAT phase: joint L_tr + lam * L_tr_at from the warm-started fusion parameters."""
    store = model.init(cfg.seed)
    for k, v in theta.items():
        if is_fusion(k):
            store[k] = v.copy()
    if omega is not None:
        for k, v in omega.items():
            if is_seg(k):
                store[k] = v.copy()
    return joint_train(model, store, data, cfg.joint_steps, cfg.joint_lr, cfg.batch_size, cfg.adv_fraction,
                       cfg.joint_budget, cfg.lam, cfg.seed, curves=curves)


def adaptive_adversarial_train(model: Composite, data: Dataset, attacked, cfg: AATConfig,
                               init_seed: int | None = None, omega: ParameterStore | None = None) -> TrainingRun:
    """Pretext initialization, warm start on pooled attacked data, then joint adversarial training."""
    theta0 = model.init(cfg.seed if init_seed is None else init_seed)
    theta1, pre_report = pretext_initialize(model, theta0, attacked, cfg)
    theta2, warm_curve = warm_start_fusion(model, theta1, pooled_train(attacked), cfg)
    curves = {"pretext": pre_report, "warm": warm_curve}
    joint_curves: dict = {}
    final = joint_adversarial_train(model, theta2, omega if cfg.reuse_seg else None, data, cfg, joint_curves)
    curves["joint"] = joint_curves
    return TrainingRun("AAT", final, curves,
                       {"init": theta0, "pretext": theta1, "warm": theta2, "final": final}, cfg.to_json())


def with_overrides(cfg: AATConfig, **kw) -> AATConfig:
    return replace(cfg, **kw)
