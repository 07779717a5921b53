"""PGD against the cascaded model, and offline multi-level attacked datasets."""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import Dataset, SampleBatch
from .fusion import ArchSpec, FusionRule
from .io import decode_tensors, encode_tensors, read_json, store_digest, write_json
from .seg import cross_entropy

# source model for transferred attacks: dense blocks joined by concatenation
SOURCE_ARCH = ArchSpec.uniform("3-DB", FusionRule("CC"))


class AttackDiverged(RuntimeError):
    pass


def parse_epsilon(value) -> float:
    """Accept floats or exact fractions such as "4/255"."""
    if isinstance(value, str):
        return float(Fraction(value))
    return float(value)


@dataclass(frozen=True)
class AttackBudget:
    epsilon: float
    eta: float | None = None  # default epsilon / 4
    steps: int = 5
    seed: int = 0
    random_start: bool = False

    def __post_init__(self):
        object.__setattr__(self, "epsilon", parse_epsilon(self.epsilon))
        if self.epsilon < 0:
            raise ValueError("epsilon must be nonnegative")
        if self.steps < 0:
            raise ValueError("steps must be nonnegative")
        if self.eta is not None and self.steps > 0 and self.eta <= 0:
            raise ValueError("step size must be positive")

    @property
    def step_size(self) -> float:
        return self.epsilon / 4 if self.eta is None else float(self.eta)

    def to_json(self) -> dict:
        return {"epsilon": self.epsilon, "eta": self.step_size, "steps": self.steps,
                "seed": self.seed, "random_start": self.random_start}

    @classmethod
    def from_json(cls, d: dict) -> "AttackBudget":
        return cls(d["epsilon"], d.get("eta"), d.get("steps", 5), d.get("seed", 0), d.get("random_start", False))


@dataclass
class AttackResult:
    x_adv: np.ndarray
    y_adv: np.ndarray
    delta_ir: np.ndarray  # exact x_adv - x, float64
    delta_vis: np.ndarray
    loss_trace: list = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.loss_trace[-1]


def project_linf(delta: np.ndarray, epsilon: float) -> np.ndarray:
    return np.clip(delta, -epsilon, epsilon)


def feasible_image(x: np.ndarray, candidate: np.ndarray, epsilon: float) -> np.ndarray:
    """Clip ``candidate`` to [0, 1] in the dtype of ``x`` and nudge by ulps until
    |x_adv - x| <= epsilon holds exactly (evaluated in float64)."""
    xa = np.clip(candidate, 0, 1).astype(x.dtype)
    x64 = x.astype(np.float64)
    for _ in range(64):
        d = xa.astype(np.float64) - x64
        hi, lo = d > epsilon, d < -epsilon
        if not (hi.any() or lo.any()):
            return xa
        xa[hi] = np.nextafter(xa[hi], x[hi])
        xa[lo] = np.nextafter(xa[lo], x[lo])
    raise AssertionError("could not satisfy the perturbation budget")


def task_loss_fn(model, store):
    """L_T(N o T(x, y), z*) with frozen parameters, as a tape function."""

    def fn(tape: ad.Tape, xv: ad.Var, yv: ad.Var, z: np.ndarray) -> ad.Var:
        p = tape.bind(store, trainable=False)
        _, logits = model.forward(p, xv, yv)
        return cross_entropy(logits, z)

    return fn


def pgd_attack(model, store, batch: SampleBatch, budget: AttackBudget, loss_fn=None,
               dtype=np.float32) -> AttackResult:
    """Joint l-inf PGD on both modalities (sign ascent, one backward pass per step).

    ``loss_fn(tape, x_var, y_var, z)`` overrides the default task loss of ``model``.
    The trace holds the attacked loss at the start and after every step.
    """
    fn = loss_fn or task_loss_fn(model, store)
    eps, eta = budget.epsilon, budget.step_size
    x, y = np.asarray(batch.x, dtype), np.asarray(batch.y, dtype)
    d_ir = np.zeros(x.shape)
    d_vis = np.zeros(y.shape)
    if budget.random_start and eps > 0:
        rng = np.random.default_rng(budget.seed)
        d_ir = rng.uniform(-eps, eps, x.shape)
        d_vis = rng.uniform(-eps, eps, y.shape)
    xa = feasible_image(x, x + d_ir, eps)
    ya = feasible_image(y, y + d_vis, eps)

    trace = []

    def evaluate(with_grad: bool):
        tape = ad.Tape(dtype)
        xv, yv = tape.leaf("x", xa), tape.leaf("y", ya)
        loss = fn(tape, xv, yv, batch.z)
        val = float(loss.value)
        if not np.isfinite(val):
            raise AttackDiverged(f"attacked loss became non-finite at step {len(trace)}")
        trace.append(val)
        return tape.backward(loss) if with_grad else None

    for _ in range(budget.steps):
        g = evaluate(True)
        d_ir = project_linf((xa.astype(np.float64) - x) + eta * np.sign(g["x"]), eps)
        d_vis = project_linf((ya.astype(np.float64) - y) + eta * np.sign(g["y"]), eps)
        xa = feasible_image(x, x + d_ir, eps)
        ya = feasible_image(y, y + d_vis, eps)
    evaluate(False)
    return AttackResult(
        xa, ya, xa.astype(np.float64) - x.astype(np.float64),
        ya.astype(np.float64) - y.astype(np.float64), trace,
    )


def attack_batch(model, store, batch: SampleBatch, budget: AttackBudget) -> SampleBatch:
    if budget.epsilon == 0 or budget.steps == 0:
        return batch
    r = pgd_attack(model, store, batch, budget)
    return SampleBatch(r.x_adv, r.y_adv, batch.z)


# --------------------------------------------------------------------------
# offline attacked datasets
# --------------------------------------------------------------------------


@dataclass
class AttackedDataset:
    level: int
    budget: AttackBudget
    split: str  # "train" | "val"
    data: Dataset
    indices: np.ndarray  # source sample ids
    provenance: dict

    def manifest(self) -> dict:
        return {
            "level": self.level,
            "budget": self.budget.to_json(),
            "split": self.split,
            "count": len(self.data),
            "indices": [int(i) for i in self.indices],
            "provenance": self.provenance,
            "dataset_hash": self.data.hash(),
        }


def sample_seed(split_seed: int, index: int) -> int:
    return zlib.crc32(f"{split_seed}:{index}".encode())


def split_indices(n: int, split_seed: int, train_frac: float = 0.75) -> tuple[np.ndarray, np.ndarray]:
    perm = np.random.default_rng(split_seed).permutation(n)
    n_tr = int(round(train_frac * n))
    return np.sort(perm[:n_tr]), np.sort(perm[n_tr:])


def generate_offline_attack_set(model, store, data: Dataset, levels: list, split_seed: int,
                                train_frac: float = 0.75, chunk: int = 8,
                                source_arch: ArchSpec = SOURCE_ARCH) -> list:
    """Attack every sample against a fixed source model at each budget level.

    Samples are attacked in fixed index chunks with seeds derived from
    (split_seed, first index), so the output does not depend on scheduling.
    Returns [level1-train, level1-val, level2-train, ...].
    """
    if not levels:
        raise ValueError("at least one attack level is required")
    if model.arch != source_arch:
        raise ValueError(f"source model architecture {model.arch} does not match the declared source {source_arch}")
    model.check_params(store)
    tr_idx, va_idx = split_indices(len(data), split_seed, train_frac)
    provenance = {"source_checkpoint": store_digest(store), "source_arch": source_arch.to_json(),
                  "split_seed": split_seed}
    out = []
    for li, level in enumerate(levels, start=1):
        xs = np.empty_like(data.x)
        ys = np.empty_like(data.y)
        for start in range(0, len(data), chunk):
            idx = np.arange(start, min(start + chunk, len(data)))
            b = data.batch(idx)
            budget = AttackBudget(level.epsilon, level.eta, level.steps, sample_seed(split_seed, start),
                                  level.random_start)
            ab = attack_batch(model, store, b, budget)
            xs[idx], ys[idx] = ab.x, ab.y
        attacked = Dataset(xs, ys, data.z)
        for split, idx in (("train", tr_idx), ("val", va_idx)):
            out.append(AttackedDataset(li, level, split, attacked.subset(idx), idx, dict(provenance)))
    return out


def by_level(sets: list) -> dict:
    """{level: (train, val)} from the flat list returned by the generator."""
    out: dict = {}
    for s in sets:
        tr, va = out.get(s.level, (None, None))
        out[s.level] = (s, va) if s.split == "train" else (tr, s)
    return out


def verify_attacked(sets: list, clean: Dataset) -> bool:
    """Re-check every emitted sample against its level budget and the image range."""
    for s in sets:
        src = clean.subset(s.indices)
        for adv, ref in ((s.data.x, src.x), (s.data.y, src.y)):
            d = np.abs(adv.astype(np.float64) - ref.astype(np.float64))
            if d.max(initial=0.0) > s.budget.epsilon or adv.min() < 0 or adv.max() > 1:
                return False
    return True


def save_attacked(s: AttackedDataset, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    stem = f"level{s.level}_{s.split}"
    (directory / f"{stem}.bin").write_bytes(
        encode_tensors({"x": s.data.x, "y": s.data.y, "z": s.data.z.astype(np.float32)})
    )
    write_json(directory / f"{stem}.json", s.manifest())
    return directory / f"{stem}.json"


def load_attacked(manifest_path) -> AttackedDataset:
    manifest_path = Path(manifest_path)
    m = read_json(manifest_path)
    tensors, _ = decode_tensors(manifest_path.with_suffix(".bin").read_bytes())
    data = Dataset(tensors["x"], tensors["y"], tensors["z"].astype(np.int64))
    return AttackedDataset(m["level"], AttackBudget.from_json(m["budget"]), m["split"], data,
                           np.asarray(m["indices"]), m["provenance"])
