"""Synthetic complementary-modality scenes.

Class ids: 0 background, 1 warm object (IR only), 2 textured region (visible
only), 3 warm object inside a textured region (needs both channels).
"""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass

import numpy as np

CLASS_NAMES = ("background", "ir-blob", "vis-stripes", "joint")
IR_THRESHOLD = 0.55
VIS_THRESHOLD = 0.305


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    size: int = 32
    num_classes: int = 4
    blobs: tuple = (1, 3)
    stripes: tuple = (1, 2)
    illumination: tuple = (0.8, 1.0)
    noise: float = 0.02

    def validate(self) -> None:
        if self.size < 8:
            raise ValueError("scene size must be at least 8")
        if self.num_classes != 4:
            raise ValueError("the scene generator renders exactly 4 classes")
        for name in ("blobs", "stripes"):
            lo, hi = getattr(self, name)
            if not 1 <= lo <= hi:
                raise ValueError(f"{name} count range must satisfy 1 <= lo <= hi, got {(lo, hi)}")
        lo, hi = self.illumination
        if not 0.8 <= lo <= hi <= 1.0:
            raise ValueError("illumination range must lie within [0.8, 1.0]")
        if not 0 <= self.noise <= 0.03:
            raise ValueError("noise level must lie in [0, 0.03]")

    def to_json(self) -> dict:
        d = asdict(self)
        d["blobs"], d["stripes"], d["illumination"] = list(self.blobs), list(self.stripes), list(self.illumination)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        for k in ("blobs", "stripes", "illumination"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class SampleBatch:
    x: np.ndarray  # (B, 1, H, W) infrared
    y: np.ndarray  # (B, 1, H, W) visible
    z: np.ndarray  # (B, H, W) class ids

    def __len__(self):
        return self.x.shape[0]


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray

    def __len__(self):
        return self.x.shape[0]

    def batch(self, idx) -> SampleBatch:
        idx = np.asarray(idx)
        return SampleBatch(self.x[idx], self.y[idx], self.z[idx])

    def batches(self, batch_size: int, shuffle_seed: int | None = None):
        order = np.arange(len(self))
        if shuffle_seed is not None:
            order = np.random.default_rng(shuffle_seed).permutation(len(self))
        for i in range(0, len(self), batch_size):
            yield self.batch(order[i:i + batch_size])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.x[idx], self.y[idx], self.z[idx])

    def hash(self) -> str:
        h = hashlib.sha256()
        for a in (self.x, self.y, self.z):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()

    @classmethod
    def concat(cls, parts: list) -> "Dataset":
        return cls(*(np.concatenate([getattr(p, k) for p in parts]) for k in ("x", "y", "z")))


def _render(rng: np.random.Generator, spec: SceneSpec):
    S = spec.size
    yy, xx = np.mgrid[0:S, 0:S]
    illum = rng.uniform(*spec.illumination)

    rects = []
    for _ in range(rng.integers(spec.stripes[0], spec.stripes[1] + 1)):
        h, w = rng.integers(S // 4, S // 2 + 1, size=2)
        r0, c0 = rng.integers(0, S - h + 1), rng.integers(0, S - w + 1)
        rects.append((r0, c0, h, w, rng.integers(2), rng.integers(2, 4)))
    stripe = np.zeros((S, S), bool)
    vis = np.full((S, S), rng.uniform(0.05, 0.2)) + 0.05 * (xx / S)
    for r0, c0, h, w, vertical, period in rects:
        region = (yy >= r0) & (yy < r0 + h) & (xx >= c0) & (xx < c0 + w)
        phase = (xx if vertical else yy) % period == 0
        vis[region] = np.where(phase[region], 0.85, 0.45)
        stripe |= region
    vis = vis * illum

    blob = np.zeros((S, S), bool)
    ir = np.full((S, S), rng.uniform(0.1, 0.2)) + 0.05 * (yy / S)
    n_blobs = rng.integers(spec.blobs[0], spec.blobs[1] + 1)
    for i in range(n_blobs):
        rad = rng.uniform(S / 10, S / 5)
        if i == 0:
            # first object sits inside the first textured region so joint pixels occur
            r0, c0, h, w = rects[0][:4]
            cy, cx = rng.uniform(r0, r0 + h), rng.uniform(c0, c0 + w)
        else:
            cy, cx = rng.uniform(0, S, size=2)
        disc = (yy - cy) ** 2 + (xx - cx) ** 2 <= rad ** 2
        ir[disc] = rng.uniform(0.85, 0.95)
        blob |= disc

    if spec.noise > 0:
        ir = ir + rng.uniform(-spec.noise, spec.noise, size=ir.shape)
        vis = vis + rng.uniform(-spec.noise, spec.noise, size=vis.shape)
    z = blob.astype(np.int64) + 2 * stripe.astype(np.int64)
    return np.clip(ir, 0, 1), np.clip(vis, 0, 1), z


def generate_dataset(spec: SceneSpec, n: int) -> Dataset:
    spec.validate()
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng(spec.seed)
    xs, ys, zs = [], [], []
    while len(xs) < n:
        ir, vis, z = _render(rng, spec)
        if len(np.unique(z)) < 2:
            continue
        xs.append(ir)
        ys.append(vis)
        zs.append(z)
    x = np.stack(xs)[:, None].astype(np.float32)
    y = np.stack(ys)[:, None].astype(np.float32)
    return Dataset(x, y, np.stack(zs))


def make_splits(spec: SceneSpec, n_train: int = 256, n_val: int = 64, n_test: int = 64) -> dict:
    """Train/val/test datasets drawn from independent seeds derived from ``spec.seed``."""
    out = {}
    for i, (name, n) in enumerate((("train", n_train), ("val", n_val), ("test", n_test))):
        sub = SceneSpec(**{**asdict(spec), "seed": spec.seed * 1000 + i})
        out[name] = generate_dataset(sub, n)
    return out


def oracle_predict(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-pixel classifier built from the generator's intensity layout."""
    warm = x[:, 0] > IR_THRESHOLD
    textured = y[:, 0] > VIS_THRESHOLD
    return warm.astype(np.int64) + 2 * textured.astype(np.int64)


def best_single_channel_iou(channel: np.ndarray, z: np.ndarray, cls: int) -> float:
    """Best IoU for ``cls`` achievable by thresholding one channel per pixel (either direction)."""
    v = channel.reshape(-1).astype(np.float64)
    t = (z.reshape(-1) == cls)
    order = np.argsort(v, kind="stable")
    v, t = v[order], t[order]
    total_pos = t.sum()
    best = 0.0
    # predict positive for v > thr (suffix) or v <= thr (prefix); sweep all cut points
    cum_pos = np.concatenate([[0], np.cumsum(t)])
    n = len(v)
    cuts = np.concatenate([[0], np.nonzero(np.diff(v))[0] + 1, [n]])
    for c in cuts:
        for tp, pred in ((total_pos - cum_pos[c], n - c), (cum_pos[c], c)):
            union = pred + total_pos - tp
            if union > 0:
                best = max(best, tp / union)
    return float(best)
