"""The cascaded fusion + segmentation model and the optimizers used to train it."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, init_parameters
from .fusion import ArchSpec, FusionNet, build_fusion_network
from .seg import SegHead


class Composite:
    """N o T: fused image u = N(x, y; theta), logits = T(u; omega)."""

    def __init__(self, fusion: FusionNet, head: SegHead, arch: ArchSpec | None = None):
        self.fusion, self.head, self.arch = fusion, head, arch

    @classmethod
    def from_arch(cls, arch: ArchSpec, num_classes: int = 4, seg_width: int = 16) -> "Composite":
        return cls(build_fusion_network(arch), SegHead(num_classes, seg_width), arch)

    def param_specs(self) -> dict:
        specs = dict(self.fusion.param_specs())
        specs.update(self.head.param_specs())
        return specs

    def init(self, seed: int) -> ParameterStore:
        return init_parameters(self.param_specs(), seed)

    def forward(self, p: dict, x: ad.Var, y: ad.Var):
        u = self.fusion(p, x, y)
        return u, self.head(p, u)

    def describe(self) -> dict:
        return {
            "arch": self.arch.to_json() if self.arch is not None else None,
            "seg_head": self.head.to_json(),
        }

    def check_params(self, store: ParameterStore) -> None:
        specs = self.param_specs()
        missing = sorted(set(specs) - set(store.names()))
        extra = sorted(set(store.names()) - set(specs))
        bad = [k for k in specs if k in store and tuple(store[k].shape) != tuple(specs[k].shape)]
        if missing or extra or bad:
            raise ValueError(
                f"parameters do not match the architecture (missing {missing[:3]}, "
                f"unexpected {extra[:3]}, wrong shape {bad[:3]})"
            )

    def predict(self, store: ParameterStore, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        tape = ad.Tape()
        p = tape.bind(store, trainable=False)
        _, logits = self.forward(p, tape.const(x), tape.const(y))
        return logits.value.argmax(axis=1)


FUSION_PREFIX = "fuse."
SEG_PREFIX = "seg."
ARCH_PREFIX = "arch."


def is_fusion(name: str) -> bool:
    return name.startswith(FUSION_PREFIX)


def is_seg(name: str) -> bool:
    return name.startswith(SEG_PREFIX)


@dataclass
class SGD:
    lr: float
    momentum: float = 0.0

    def __post_init__(self):
        self.velocity: dict = {}

    def step(self, store: ParameterStore, grads: dict, names=None) -> None:
        for k in sorted(names if names is not None else grads):
            g = grads[k]
            if self.momentum:
                v = self.velocity.get(k)
                v = g.copy() if v is None else self.momentum * v + g
                self.velocity[k] = v
                g = v
            store[k] = (store[k] - self.lr * g).astype(store[k].dtype)

    def state(self) -> dict:
        return {"velocity": self.velocity}


@dataclass
class Adam:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0  # decoupled (AdamW)

    def __post_init__(self):
        self.m: dict = {}
        self.v: dict = {}
        self.t: dict = {}

    def step(self, store: ParameterStore, grads: dict, names=None) -> None:
        for k in sorted(names if names is not None else grads):
            g = grads[k].astype(np.float64)
            m = self.beta1 * self.m.get(k, 0.0) + (1 - self.beta1) * g
            v = self.beta2 * self.v.get(k, 0.0) + (1 - self.beta2) * g * g
            t = self.t.get(k, 0) + 1
            self.m[k], self.v[k], self.t[k] = m, v, t
            mhat = m / (1 - self.beta1 ** t)
            vhat = v / (1 - self.beta2 ** t)
            p = store[k].astype(np.float64)
            if self.weight_decay:
                p = p * (1 - self.lr * self.weight_decay)
            store[k] = (p - self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(store[k].dtype)


def make_optimizer(kind: str, lr: float, **kw):
    if kind == "adam":
        return Adam(lr, **kw)
    if kind == "adamw":
        return Adam(lr, weight_decay=kw.pop("weight_decay", 1e-2), **kw)
    if kind == "sgd":
        return SGD(lr, **kw)
    raise ValueError(f"unknown optimizer {kind!r}")


def grads_finite(grads: dict) -> bool:
    return all(np.all(np.isfinite(g)) for g in grads.values())
