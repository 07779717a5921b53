"""Finite-difference suite over every primitive and the main composites (float64)."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import PRIMITIVES, finite_difference_check, init_parameters
from .fusion import FAMILIES, RULES, ArchSpec, FusionRule, OpCode, build_fusion_network
from .losses import fusion_loss, saliency_pair, ssim
from .search import ALPHA, MixedSlot, build_candidate
from .seg import SegHead, cross_entropy

TOLERANCE = 1e-4
STEP = 1e-6


class _Probe:
    """Scalar probe mean(v * r) with a random r fixed at first use (avoids symmetric cancellation)."""

    def __init__(self, rng):
        self.seed = int(rng.integers(1 << 30))
        self.r = None

    def __call__(self, tape, v):
        if self.r is None:
            self.r = np.random.default_rng(self.seed).standard_normal(v.shape)
        return ad.mean(v * tape.const(self.r))


def _weighted(tape, v, probe):
    return probe(tape, v)


def _away_from(x, points, margin=1e-3):
    for p in points:
        x = np.where(np.abs(x - p) < margin, p + np.sign(x - p + 1e-12) * margin, x)
    return x


def _primitive_cases(rng):
    n = rng.standard_normal
    shp = (2, 3, 5, 5)
    pos = lambda s: rng.uniform(0.5, 2.0, s)  # noqa: E731
    other = n(shp)
    key = (slice(None), slice(1, 3), slice(0, 4), slice(None))
    w3 = n((4, 3, 3, 3)) * 0.3
    return {
        "add": (lambda t, x, pr=_Probe(rng): _weighted(t, x + t.const(other), pr), n(shp)),
        "sub": (lambda t, x, pr=_Probe(rng): _weighted(t, t.const(other) - x, pr), n(shp)),
        "mul": (lambda t, x, pr=_Probe(rng): _weighted(t, x * t.const(other[:1, :, :1]), pr), n(shp)),
        "broadcast_mul": (lambda t, x, pr=_Probe(rng): _weighted(t, ad.broadcast_mul(t.const(other), x), pr),
                          n((2, 3, 1, 1))),
        "div": (lambda t, x, pr=_Probe(rng): _weighted(t, t.const(other) / x, pr), pos(shp)),
        "relu": (lambda t, x, pr=_Probe(rng): _weighted(t, ad.relu(x), pr), _away_from(n(shp), [0.0])),
        "sigmoid": (lambda t, x, pr=_Probe(rng): _weighted(t, ad.sigmoid(x), pr), n(shp)),
        "square": (lambda t, x, pr=_Probe(rng): _weighted(t, ad.square(x), pr), n(shp)),
        "sqrt": (lambda t, x, pr=_Probe(rng): _weighted(t, ad.sqrt(x), pr), pos(shp)),
        "clip": (lambda t, x, pr=_Probe(rng): _weighted(t, ad.clip(x, -0.5, 0.5), pr),
                 _away_from(n(shp), [-0.5, 0.5])),
        "softmax": (lambda t, x, pr=_Probe(rng): _weighted(t, ad.softmax(x, axis=1), pr), n(shp)),
        "log_softmax": (lambda t, x, pr=_Probe(rng): _weighted(t, ad.log_softmax(x, axis=1), pr), n(shp)),
        "concat": (lambda t, x, pr=_Probe(rng): _weighted(t, ad.concat([x, t.const(other), x]), pr), n(shp)),
        "slice": (lambda t, x, pr=_Probe(rng): _weighted(t, x[key], pr), n(shp)),
        "channel_max": (lambda t, x, pr=_Probe(rng): _weighted(t, ad.channel_max(x), pr), n(shp)),
        "channel_min": (lambda t, x, pr=_Probe(rng): _weighted(t, ad.channel_min(x), pr), n(shp)),
        "global_avg_pool": (lambda t, x, pr=_Probe(rng): _weighted(t, ad.global_avg_pool(x), pr), n(shp)),
        "spatial_mean": (lambda t, x, pr=_Probe(rng): _weighted(t, ad.spatial_mean(x), pr), n(shp)),
        "mean": (lambda t, x: ad.mean(ad.square(x)), n(shp)),
        "conv2d": (lambda t, x, pr=_Probe(rng), d=int(rng.integers(1, 3)): _weighted(t, ad.conv2d(x, t.const(w3), dilation=d), pr),
                   n(shp)),
        "conv2d_kernel": (lambda t, w, pr=_Probe(rng): _weighted(t, ad.conv2d(t.const(other), w, padding="valid"),
                                                                 pr),
                          n((4, 3, 3, 3))),
    }


def _random_arch(rng, C=3) -> ArchSpec:
    slots = tuple(OpCode(f, int(rng.choice([3, 5]))) for f in rng.choice(FAMILIES, 6))
    return ArchSpec(slots, FusionRule(str(rng.choice(RULES)), *rng.uniform(0.2, 1.0, 2)), C)


def _composite_cases(rng):
    H = 8
    img = lambda: rng.uniform(0.05, 0.95, (2, 1, H, H))  # noqa: E731
    x, y = img(), img()

    arch = _random_arch(rng)
    net = build_fusion_network(arch)
    fp = init_parameters(net.param_specs(), int(rng.integers(1 << 30)), np.float64)

    pf, pm = _Probe(rng), _Probe(rng)

    def fusion_fwd(t, xv):
        p = t.bind(fp, trainable=False)
        return _weighted(t, net(p, xv, t.const(y)), pf)

    pw = _Probe(rng)

    def fusion_param(t, wv):
        p = dict(t.bind(fp, trainable=False))
        p["fuse.head.w"] = wv
        return _weighted(t, net(p, t.const(x), t.const(y)), pw)

    head = SegHead(4, 4, depth=2)
    hp = init_parameters(head.param_specs(), int(rng.integers(1 << 30)), np.float64)
    z = rng.integers(0, 4, (2, H, H))

    def seg_ce(t, u):
        return cross_entropy(head(t.bind(hp, trainable=False), u), z)

    sal = saliency_pair(x, y)

    def floss(t, u):
        return fusion_loss(u, x, y, sal)

    b = img()

    def ssim_case(t, a):
        return ssim(a, t.const(b))

    cands = (OpCode("DC", 3), OpCode("RB", 7), OpCode("DB", 3), OpCode("CA"))
    slot = int(rng.integers(6))
    mixed = MixedSlot(slot, [build_candidate(c, 3, 3, slot) for c in cands])
    mp = init_parameters(mixed.param_specs(), int(rng.integers(1 << 30)), np.float64)
    feat = rng.standard_normal((2, 3, H, H))

    def mixed_alpha(t, a):
        p = dict(t.bind(mp, trainable=False))
        p[ALPHA] = a
        return _weighted(t, mixed(p, t.const(feat)), pm)

    return {
        f"fusion_net[{'/'.join(s.name for s in arch.slots)}|{arch.rule.kind}]": (fusion_fwd, x),
        "fusion_net_params": (fusion_param, fp["fuse.head.w"]),
        "seg_head+cross_entropy": (seg_ce, rng.uniform(0, 1, (2, 1, H, H))),
        "fusion_loss": (floss, rng.uniform(0.1, 0.9, (2, 1, H, H))),
        "ssim": (ssim_case, img()),
        "mixed_forward(alpha)": (mixed_alpha, rng.standard_normal((6, 4))),
    }


def run_suite(seeds: int = 20, max_coords: int = 24, include_composites: bool = True) -> dict:
    """{check name: worst relative error over all seeds}."""
    worst: dict = {}
    for s in range(seeds):
        rng = np.random.default_rng(s)
        cases = _primitive_cases(rng)
        if include_composites:
            cases.update(_composite_cases(rng))
        for name, (f, x) in cases.items():
            key = name.split("[")[0]
            err = finite_difference_check(f, x, step=STEP, max_coords=max_coords, seed=s)
            worst[key] = max(worst.get(key, 0.0), err)
    return worst


def covered_primitives() -> set:
    names = set(_primitive_cases(np.random.default_rng(0)))
    return {n.split("_kernel")[0] for n in names}


def uncovered_primitives() -> set:
    return set(PRIMITIVES) - covered_primitives() - {"const"}
