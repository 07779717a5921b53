"""Fusion network family: operation blocks, fusion rules, residual-guided decomposition."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ParamSpec, Var

FAMILIES = ("C", "DC", "RB", "DB", "SA", "CA")
RULES = ("MAX", "WA", "AA", "SUM", "CC", "DIRECT")
SLOT_ROLES = ("ir-low", "ir-high", "vis-low", "vis-high", "post-fusion-1", "post-fusion-2")
CA_REDUCTION = 4
SA_KERNEL = 7
DB_LAYERS = 3
GATE_EPS = 1e-3


@dataclass(frozen=True)
class OpCode:
    family: str
    kernel: int = 3

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown operation family {self.family!r}")
        if self.family in ("SA", "CA"):
            object.__setattr__(self, "kernel", 0)
        elif self.kernel not in (3, 5, 7):
            raise ValueError(f"kernel must be 3, 5 or 7, got {self.kernel}")

    @property
    def name(self) -> str:
        return self.family if self.family in ("SA", "CA") else f"{self.kernel}-{self.family}"

    @classmethod
    def parse(cls, text: str) -> "OpCode":
        if "-" in text:
            k, fam = text.split("-", 1)
            return cls(fam, int(k))
        return cls(text)

    def __str__(self):
        return self.name


@dataclass(frozen=True)
class FusionRule:
    kind: str = "AA"
    gamma1: float = 0.5
    gamma2: float = 0.5

    def __post_init__(self):
        if self.kind not in RULES:
            raise ValueError(f"unknown fusion rule {self.kind!r}")
        if self.gamma1 < 0 or self.gamma2 < 0:
            raise ValueError("WA weights must be nonnegative")

    @property
    def name(self) -> str:
        return self.kind

    def to_json(self) -> dict:
        return {"kind": self.kind, "gamma1": self.gamma1, "gamma2": self.gamma2}


@dataclass(frozen=True)
class ArchSpec:
    slots: tuple
    rule: FusionRule = field(default_factory=FusionRule)
    base_channels: int = 16

    def __post_init__(self):
        slots = tuple(OpCode.parse(s) if isinstance(s, str) else s for s in self.slots)
        object.__setattr__(self, "slots", slots)
        if len(slots) != len(SLOT_ROLES):
            raise ValueError(f"an architecture needs exactly {len(SLOT_ROLES)} slots, got {len(slots)}")
        if self.base_channels <= 0:
            raise ValueError("base_channels must be positive")

    def to_json(self) -> dict:
        return {
            "slots": [s.name for s in self.slots],
            "rule": self.rule.to_json(),
            "base_channels": self.base_channels,
        }

    @classmethod
    def from_json(cls, d: dict) -> "ArchSpec":
        return cls(tuple(d["slots"]), FusionRule(**d["rule"]), d["base_channels"])

    @classmethod
    def uniform(cls, op: "OpCode | str", rule: FusionRule, base_channels: int = 16) -> "ArchSpec":
        return cls((op,) * len(SLOT_ROLES), rule, base_channels)


SEARCH_SPACE = (OpCode("DC", 3), OpCode("RB", 7), OpCode("DB", 3), OpCode("CA"))
# reported final architecture; reference output format only
REPORTED_FINAL = ArchSpec(("3-DB", "3-DC", "3-DB", "3-DB", "CA", "7-RB"), FusionRule("AA"))


# --------------------------------------------------------------------------
# blocks
# --------------------------------------------------------------------------


def conv_specs(name: str, cin: int, cout: int, k: int, bias: bool = True) -> dict:
    specs = {f"{name}.w": ParamSpec((cout, cin, k, k))}
    if bias:
        specs[f"{name}.b"] = ParamSpec((cout,), "zeros")
    return specs


def conv(p: dict, name: str, x: Var, dilation: int = 1) -> Var:
    return ad.conv2d(x, p[f"{name}.w"], p.get(f"{name}.b"), dilation=dilation)


def channel_mean(x: Var) -> Var:
    c = x.shape[1]
    return ad.conv2d(x, x.tape.const(np.full((1, c, 1, 1), 1.0 / c)))


class Block:
    """Parameterized map (B, in_ch, H, W) -> (B, out_ch, H, W)."""

    def __init__(self, prefix: str, in_ch: int, out_ch: int):
        if in_ch <= 0 or out_ch <= 0:
            raise ValueError("channel counts must be positive")
        self.prefix, self.in_ch, self.out_ch = prefix, in_ch, out_ch

    def param_specs(self) -> dict:
        raise NotImplementedError

    def __call__(self, p: dict, x: Var) -> Var:
        raise NotImplementedError

    def _proj_specs(self) -> dict:
        if self.in_ch == self.out_ch:
            return {}
        return conv_specs(f"{self.prefix}.proj", self.in_ch, self.out_ch, 1)

    def _proj(self, p, x):
        return x if self.in_ch == self.out_ch else conv(p, f"{self.prefix}.proj", x)


class ConvBlock(Block):
    def __init__(self, prefix, in_ch, out_ch, k=3, dilation=1):
        super().__init__(prefix, in_ch, out_ch)
        self.k, self.dilation = k, dilation

    def param_specs(self):
        return conv_specs(f"{self.prefix}.conv", self.in_ch, self.out_ch, self.k)

    def __call__(self, p, x):
        return ad.relu(conv(p, f"{self.prefix}.conv", x, self.dilation))


class ResBlock(Block):
    # conv-relu-conv plus identity (or 1x1 projected) skip; no activation after the sum
    def __init__(self, prefix, in_ch, out_ch, k=3):
        super().__init__(prefix, in_ch, out_ch)
        self.k = k

    def param_specs(self):
        specs = conv_specs(f"{self.prefix}.conv1", self.in_ch, self.out_ch, self.k)
        specs.update(conv_specs(f"{self.prefix}.conv2", self.out_ch, self.out_ch, self.k))
        specs.update(self._proj_specs())
        return specs

    def __call__(self, p, x):
        h = ad.relu(conv(p, f"{self.prefix}.conv1", x))
        return self._proj(p, x) + conv(p, f"{self.prefix}.conv2", h)


class DenseBlock(Block):
    """Three densely connected conv layers (growth = out_ch) and a 1x1 transition."""

    def __init__(self, prefix, in_ch, out_ch, k=3, layers=DB_LAYERS):
        super().__init__(prefix, in_ch, out_ch)
        self.k, self.layers = k, layers

    def param_specs(self):
        g = self.out_ch
        specs = {}
        for i in range(self.layers):
            specs.update(conv_specs(f"{self.prefix}.layer{i}", self.in_ch + i * g, g, self.k))
        specs.update(conv_specs(f"{self.prefix}.trans", self.in_ch + self.layers * g, self.out_ch, 1))
        return specs

    def __call__(self, p, x):
        feats = [x]
        for i in range(self.layers):
            inp = feats[0] if len(feats) == 1 else ad.concat(feats)
            feats.append(ad.relu(conv(p, f"{self.prefix}.layer{i}", inp)))
        return conv(p, f"{self.prefix}.trans", ad.concat(feats))


class SpatialAttention(Block):
    # 7x7 conv over channel-mean / channel-max maps -> one sigmoid mask
    def param_specs(self):
        specs = conv_specs(f"{self.prefix}.mask", 2, 1, SA_KERNEL)
        specs.update(self._proj_specs())
        return specs

    def __call__(self, p, x):
        h = self._proj(p, x)
        maps = ad.concat([channel_mean(h), ad.channel_max(h)])
        mask = ad.sigmoid(conv(p, f"{self.prefix}.mask", maps))
        return ad.broadcast_mul(h, mask)


class ChannelAttention(Block):
    def param_specs(self):
        c = self.out_ch
        mid = max(c // CA_REDUCTION, 1)
        specs = conv_specs(f"{self.prefix}.fc1", c, mid, 1)
        specs.update(conv_specs(f"{self.prefix}.fc2", mid, c, 1))
        specs.update(self._proj_specs())
        return specs

    def __call__(self, p, x):
        h = self._proj(p, x)
        s = ad.relu(conv(p, f"{self.prefix}.fc1", ad.global_avg_pool(h)))
        s = ad.sigmoid(conv(p, f"{self.prefix}.fc2", s))
        return ad.broadcast_mul(h, s)


def build_block(code: OpCode, in_ch: int, out_ch: int, prefix: str = "block") -> Block:
    if not isinstance(code, OpCode):
        raise ValueError(f"not an operation code: {code!r}")
    fam, k = code.family, code.kernel
    if fam == "C":
        return ConvBlock(prefix, in_ch, out_ch, k)
    if fam == "DC":
        return ConvBlock(prefix, in_ch, out_ch, k, dilation=2)
    if fam == "RB":
        return ResBlock(prefix, in_ch, out_ch, k)
    if fam == "DB":
        return DenseBlock(prefix, in_ch, out_ch, k)
    if fam == "SA":
        return SpatialAttention(prefix, in_ch, out_ch)
    if fam == "CA":
        return ChannelAttention(prefix, in_ch, out_ch)
    raise ValueError(f"unknown operation {code!r}")


# --------------------------------------------------------------------------
# residual-guided decomposition
# --------------------------------------------------------------------------


def residual_feature(F: Var) -> Var:
    """Per-pixel channel max minus channel min, (B, C, H, W) -> (B, 1, H, W)."""
    return ad.channel_max(F) - ad.channel_min(F)


def decompose(E: Var, F_res: Var, a: Var, b: Var) -> tuple[Var, Var]:
    """Split E into (low, high) with a sigmoid gate on the normalized residual map.

    The residual map is divided by its per-sample spatial mean, so the gate sees
    relative salience; ``a`` sets the sharpness and ``b`` the threshold.
    """
    norm = F_res / (ad.spatial_mean(F_res) + GATE_EPS)
    gate = ad.sigmoid(a * (norm - b))
    high = ad.broadcast_mul(E, gate)
    low = ad.broadcast_mul(E, 1.0 - gate)
    return low, high


# --------------------------------------------------------------------------
# fusion rules
# --------------------------------------------------------------------------


class RuleLayer:
    """A fusion rule with whatever parameters it needs (AA masks, DIRECT conv)."""

    def __init__(self, rule: FusionRule, channels: int, prefix: str = "rule"):
        self.rule, self.channels, self.prefix = rule, channels, prefix

    @property
    def out_channels(self) -> int:
        return 2 * self.channels if self.rule.kind == "CC" else self.channels

    def param_specs(self) -> dict:
        if self.rule.kind == "AA":
            return conv_specs(f"{self.prefix}.mask", 4, 2, SA_KERNEL)
        if self.rule.kind == "DIRECT":
            return conv_specs(f"{self.prefix}.conv", 2, self.channels, 3)
        return {}

    def masks(self, p: dict, E_ir: Var, E_vis: Var) -> tuple[Var, Var]:
        maps = ad.concat([channel_mean(E_ir), ad.channel_max(E_ir), channel_mean(E_vis), ad.channel_max(E_vis)])
        w = ad.softmax(conv(p, f"{self.prefix}.mask", maps), axis=1)
        return w[:, 0:1], w[:, 1:2]

    def __call__(self, p: dict, E_ir: Var, E_vis: Var) -> Var:
        kind = self.rule.kind
        if kind != "DIRECT" and E_ir.shape != E_vis.shape:
            raise ad.ShapeError(f"fusion rule {kind}: extents {E_ir.shape} and {E_vis.shape} differ")
        if kind == "MAX":
            # max(a, b) = b + relu(a - b); ties route the gradient to E_vis
            return E_vis + ad.relu(E_ir - E_vis)
        if kind == "WA":
            return self.rule.gamma1 * E_ir + self.rule.gamma2 * E_vis
        if kind == "AA":
            m_ir, m_vis = self.masks(p, E_ir, E_vis)
            return ad.broadcast_mul(E_ir, m_ir) + ad.broadcast_mul(E_vis, m_vis)
        if kind == "SUM":
            return E_ir + E_vis
        if kind == "CC":
            return ad.concat([E_ir, E_vis])
        if kind == "DIRECT":
            if E_ir.shape[1] != 1 or E_vis.shape[1] != 1:
                raise ad.ShapeError("fusion rule DIRECT consumes single-channel source images")
            return ad.relu(conv(p, f"{self.prefix}.conv", ad.concat([E_ir, E_vis])))
        raise ValueError(kind)


def apply_rule(rule: FusionRule, E_ir: Var, E_vis: Var, params: dict | None = None, prefix: str = "rule") -> Var:
    layer = RuleLayer(rule, E_ir.shape[1], prefix)
    return layer(params or {}, E_ir, E_vis)


# --------------------------------------------------------------------------
# network
# --------------------------------------------------------------------------


class FusionNet:
    """N(x, y; theta) -> u, assembled from six slot operators and a fusion rule.

    ``slots`` holds any callables with ``param_specs()`` and ``(p, x) -> Var``;
    plain blocks for a discrete architecture, mixtures for the supernet.
    """

    prefix = "fuse"

    def __init__(self, slots: list, rule: FusionRule, base_channels: int, extra_specs: dict | None = None):
        if len(slots) != len(SLOT_ROLES):
            raise ValueError(f"expected {len(SLOT_ROLES)} slots")
        self.slots = slots
        self.rule = rule
        self.C = base_channels
        self.rule_layer = RuleLayer(rule, base_channels, f"{self.prefix}.rule")
        self.extra_specs = extra_specs or {}

    @property
    def uses_encoders(self) -> bool:
        return self.rule.kind != "DIRECT"

    def param_specs(self) -> dict:
        C, pre = self.C, self.prefix
        specs = {}
        if self.uses_encoders:
            for m in ("ir", "vis"):
                specs.update(conv_specs(f"{pre}.stem_{m}", 1, C, 3))
                specs[f"{pre}.gate_{m}.a"] = ParamSpec((1,), "const", 1.0)
                specs[f"{pre}.gate_{m}.b"] = ParamSpec((1,), "const", 1.0)
            for s in self.slots[:4]:
                specs.update(s.param_specs())
        specs.update(self.rule_layer.param_specs())
        for s in self.slots[4:]:
            specs.update(s.param_specs())
        specs.update(conv_specs(f"{pre}.head", C, 1, 3))
        specs.update(self.extra_specs)
        return specs

    def encode(self, p: dict, img: Var, m: str, low_slot, high_slot) -> Var:
        pre = self.prefix
        E = ad.relu(conv(p, f"{pre}.stem_{m}", img))
        low, high = decompose(E, residual_feature(E), p[f"{pre}.gate_{m}.a"], p[f"{pre}.gate_{m}.b"])
        return low_slot(p, low) + high_slot(p, high)

    def __call__(self, p: dict, x: Var, y: Var) -> Var:
        if self.uses_encoders:
            E_ir = self.encode(p, x, "ir", self.slots[0], self.slots[1])
            E_vis = self.encode(p, y, "vis", self.slots[2], self.slots[3])
            F = self.rule_layer(p, E_ir, E_vis)
        else:
            F = self.rule_layer(p, x, y)
        F = self.slots[5](p, self.slots[4](p, F))
        return ad.sigmoid(conv(p, f"{self.prefix}.head", F))


def slot_in_channels(i: int, rule: FusionRule, C: int) -> int:
    return 2 * C if (i == 4 and rule.kind == "CC") else C


def slot_prefix(i: int, code: OpCode) -> str:
    return f"{FusionNet.prefix}.s{i}.{code.name}"


def build_fusion_network(spec: ArchSpec) -> FusionNet:
    C = spec.base_channels
    slots = [
        build_block(code, slot_in_channels(i, spec.rule, C), C, slot_prefix(i, code))
        for i, code in enumerate(spec.slots)
    ]
    return FusionNet(slots, spec.rule, C)
