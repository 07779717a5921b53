"""Differentiable search over slot operations with robust lower-level training."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .attacks import AttackBudget, attack_batch, sample_seed
from .autodiff import ParamSpec, ShapeError, Var
from .data import Dataset
from .fusion import SEARCH_SPACE, SLOT_ROLES, ArchSpec, Block, FusionNet, FusionRule, OpCode, build_block, \
    slot_in_channels, slot_prefix
from .losses import LossWeights, batch_objective
from .model import Composite, is_fusion, is_seg, make_optimizer
from .seg import SegHead
from .training import TrainingDiverged, batch_stream, grad_of

ALPHA = "arch.alpha"
ZERO = "ZERO"  # output-zeroing candidate, used by the rigged search space


class SearchDiverged(TrainingDiverged):
    pass


class ZeroBlock(Block):
    """Maps every input to zeros of the output width; has no parameters."""

    def param_specs(self):
        return {}

    def __call__(self, p, x):
        B, _, H, W = x.shape
        return x.tape.const(np.zeros((B, self.out_ch, H, W)))


def candidate_name(c) -> str:
    return c.name if isinstance(c, OpCode) else str(c)


def build_candidate(c, in_ch: int, out_ch: int, slot: int) -> Block:
    if c == ZERO:
        return ZeroBlock(f"{FusionNet.prefix}.s{slot}.{ZERO}", in_ch, out_ch)
    code = OpCode.parse(c) if isinstance(c, str) else c
    return build_block(code, in_ch, out_ch, slot_prefix(slot, code))


@dataclass
class Relaxation:
    alpha: np.ndarray  # (slots, candidates) logits
    candidates: tuple = SEARCH_SPACE

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        if self.alpha.shape != (len(SLOT_ROLES), len(self.candidates)):
            raise ShapeError(f"alpha must be {(len(SLOT_ROLES), len(self.candidates))}, got {self.alpha.shape}")

    @classmethod
    def zeros(cls, candidates=SEARCH_SPACE) -> "Relaxation":
        return cls(np.zeros((len(SLOT_ROLES), len(candidates))), tuple(candidates))

    def weights(self) -> np.ndarray:
        a = self.alpha - self.alpha.max(axis=1, keepdims=True)
        e = np.exp(a)
        return e / e.sum(axis=1, keepdims=True)

    def choice(self) -> list[int]:
        """Argmax per slot; np.argmax returns the lowest index among ties."""
        return [int(i) for i in np.argmax(self.alpha, axis=1)]

    def to_json(self) -> dict:
        return {"alpha": self.alpha.tolist(), "candidates": [candidate_name(c) for c in self.candidates]}


def mixed_forward(alpha: Var, slot: int, blocks: list, p: dict, x: Var) -> Var:
    """sum_o softmax(alpha[slot])_o * block_o(x), reduced in candidate order."""
    if not blocks:
        raise ValueError("a mixed slot needs at least one candidate")
    if alpha.shape[1] != len(blocks):
        raise ShapeError(f"alpha has {alpha.shape[1]} columns for {len(blocks)} candidates")
    w = ad.softmax(alpha[slot:slot + 1, :], axis=1)
    outs = [b(p, x) for b in blocks]
    for o in outs[1:]:
        if o.shape != outs[0].shape:
            raise ShapeError(f"candidate outputs disagree: {outs[0].shape} vs {o.shape}")
    total = None
    for i, o in enumerate(outs):
        term = ad.broadcast_mul(o, w[:, i:i + 1])
        total = term if total is None else total + term
    return total


class MixedSlot:
    def __init__(self, slot: int, blocks: list):
        self.slot, self.blocks = slot, blocks

    def param_specs(self) -> dict:
        specs = {}
        for b in self.blocks:
            specs.update(b.param_specs())
        return specs

    def __call__(self, p, x):
        return mixed_forward(p[ALPHA], self.slot, self.blocks, p, x)


def build_supernet(candidates=SEARCH_SPACE, rule: FusionRule = FusionRule("AA"), base_channels: int = 16) -> FusionNet:
    C = base_channels
    slots = [
        MixedSlot(i, [build_candidate(c, slot_in_channels(i, rule, C), C, i) for c in candidates])
        for i in range(len(SLOT_ROLES))
    ]
    return FusionNet(slots, rule, C, {ALPHA: ParamSpec((len(SLOT_ROLES), len(candidates)), "zeros")})


def discretize(relax: Relaxation, rule: FusionRule = FusionRule("AA"), base_channels: int = 16) -> ArchSpec:
    picks = [relax.candidates[i] for i in relax.choice()]
    if any(not isinstance(c, (OpCode, str)) or c == ZERO for c in picks):
        raise ValueError(f"selected candidates {picks} are not all network operations")
    return ArchSpec(tuple(picks), rule, base_channels)


@dataclass
class SearchConfig:
    warm_start_steps: int = 200
    param_steps_per_alpha_step: int = 5
    adv_fraction: float = 0.25
    attack_eps: str = "2/255"
    attack_steps: int = 3
    theta_lr: float = 8e-5
    theta_weight_decay: float = 1e-2
    alpha_lr: float = 5e-3
    alpha_momentum: float = 0.9
    iterations: int = 50  # number of alpha steps
    batch_size: int = 4
    lam: float = 1.0
    seed: int = 0
    base_channels: int = 16
    seg_width: int = 16
    candidates: tuple = tuple(c.name for c in SEARCH_SPACE)
    rule: str = "AA"

    def __post_init__(self):
        for k in ("param_steps_per_alpha_step", "attack_steps", "iterations", "batch_size", "base_channels"):
            if getattr(self, k) <= 0:
                raise ValueError(f"{k} must be positive")
        if self.warm_start_steps < 0:
            raise ValueError("warm_start_steps must be nonnegative")
        if not 0 <= self.adv_fraction <= 1:
            raise ValueError("adv_fraction must lie in [0, 1]")
        if not self.candidates:
            raise ValueError("candidate set is empty")

    @property
    def budget(self) -> AttackBudget:
        return AttackBudget(self.attack_eps, steps=self.attack_steps)

    def candidate_ops(self) -> tuple:
        return tuple(ZERO if c == ZERO else OpCode.parse(c) for c in self.candidates)

    def to_json(self) -> dict:
        d = asdict(self)
        d["candidates"] = list(self.candidates)
        return d


def search_model(cfg: SearchConfig) -> Composite:
    net = build_supernet(cfg.candidate_ops(), FusionRule(cfg.rule), cfg.base_channels)
    return Composite(net, SegHead(4, cfg.seg_width))


def hds_search(cfg: SearchConfig, train: Dataset, val: Dataset, w: LossWeights = LossWeights()):
    """Alternate robust parameter steps with clean validation steps on alpha.

    Returns (Relaxation, history). History holds per-step losses and the alpha
    trajectory; it is attached to the raised error when a loss turns non-finite.
    """
    model = search_model(cfg)
    store = model.init(cfg.seed)
    cands = cfg.candidate_ops()
    history = {"warm": [], "train": [], "val": [], "alpha": [store[ALPHA].astype(np.float64).tolist()]}
    theta_opt = make_optimizer("adamw", cfg.theta_lr, weight_decay=cfg.theta_weight_decay)
    alpha_opt = make_optimizer("sgd", cfg.alpha_lr, momentum=cfg.alpha_momentum)
    weights = lambda k: is_fusion(k) or is_seg(k)  # noqa: E731
    bs = cfg.batch_size

    def objective(b):
        return lambda tape, p: batch_objective(model, p, tape.const(b.x), tape.const(b.y), b.z, w)[0]

    def check(v, g, what):
        if not np.isfinite(v) or not all(np.all(np.isfinite(x)) for x in g.values()):
            raise SearchDiverged(f"search diverged during {what}", history)

    stream = batch_stream(len(train), bs, cfg.seed)
    for step in range(cfg.warm_start_steps):
        b = train.batch(next(stream))
        v, g = grad_of(store, weights, objective(b))
        check(v, g, f"warm start step {step}")
        theta_opt.step(store, g, [k for k in g if weights(k)])
        history["warm"].append(v)

    n_adv = int(round(cfg.adv_fraction * bs))
    val_stream = batch_stream(len(val), min(bs, len(val)), cfg.seed + 1)
    budget = cfg.budget
    for it in range(cfg.iterations):
        for j in range(cfg.param_steps_per_alpha_step):
            idx = next(stream)
            clean = train.batch(idx[:bs - n_adv]) if n_adv < bs else None
            adv = None
            if n_adv:
                src = train.batch(idx[bs - n_adv:])
                seed = sample_seed(cfg.seed, it * cfg.param_steps_per_alpha_step + j)
                adv = attack_batch(model, store, src, AttackBudget(budget.epsilon, budget.eta, budget.steps, seed))

            def fn(tape, p):
                total = objective(clean)(tape, p) if clean is not None else None
                if adv is not None and cfg.lam > 0:
                    l_at = objective(adv)(tape, p)
                    total = cfg.lam * l_at if total is None else total + cfg.lam * l_at
                return total

            v, g = grad_of(store, weights, fn)
            check(v, g, f"parameter step {it}.{j}")
            theta_opt.step(store, g, [k for k in g if weights(k)])
            history["train"].append(v)
        vb = val.batch(next(val_stream))
        v, g = grad_of(store, lambda k: k == ALPHA, objective(vb))
        check(v, g, f"alpha step {it}")
        alpha_opt.step(store, g, [ALPHA])
        history["val"].append(v)
        history["alpha"].append(store[ALPHA].astype(np.float64).tolist())
        if not np.all(np.isfinite(store[ALPHA])):
            raise SearchDiverged("alpha became non-finite", history)
    relax = Relaxation(store[ALPHA], cands)
    history["params"] = store
    return relax, history


def search_report(relax: Relaxation, history: dict, cfg: SearchConfig) -> dict:
    report = {
        "config": cfg.to_json(),
        "relaxation": relax.to_json(),
        "weights": relax.weights().tolist(),
        "choice": [candidate_name(relax.candidates[i]) for i in relax.choice()],
        "losses": {k: history[k] for k in ("warm", "train", "val")},
        "alpha_trajectory": history["alpha"],
    }
    try:
        report["arch"] = discretize(relax, FusionRule(cfg.rule), cfg.base_channels).to_json()
    except ValueError:
        report["arch"] = None
    return report
