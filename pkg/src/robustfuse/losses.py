"""Saliency-weighted fusion loss, SSIM and the hybrid train/val objectives."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.ndimage import uniform_filter

from . import autodiff as ad
from .autodiff import Var
from .seg import cross_entropy

SALIENCY_TAU = 1e-3
SALIENCY_BLUR = 5
SSIM_WINDOW = 7
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


@dataclass(frozen=True)
class SaliencyPair:
    M_x: np.ndarray
    M_y: np.ndarray


@dataclass(frozen=True)
class LossWeights:
    lam: float = 1.0
    w_mse: float = 1.0
    w_ssim: float = 1.0
    # "complement" minimizes 1 - SSIM; "literal" adds SSIM as written in the source objective
    ssim_mode: str = "complement"
    # "weighted_target": ||u - M*x||; "weighted_difference": ||M*(u - x)||
    target_mode: str = "weighted_target"

    def __post_init__(self):
        if min(self.lam, self.w_mse, self.w_ssim) < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.ssim_mode not in ("complement", "literal"):
            raise ValueError(f"unknown ssim_mode {self.ssim_mode!r}")
        if self.target_mode not in ("weighted_target", "weighted_difference"):
            raise ValueError(f"unknown target_mode {self.target_mode!r}")

    def to_json(self) -> dict:
        return asdict(self)


def saliency_weights(s_x: np.ndarray, s_y: np.ndarray, tau: float = SALIENCY_TAU) -> SaliencyPair:
    M_x = (s_x + tau) / (s_x + s_y + 2 * tau)
    return SaliencyPair(M_x, 1.0 - M_x)


def contrast_saliency(img: np.ndarray) -> np.ndarray:
    """Box-blurred absolute deviation from the per-image mean, for (B, C, H, W)."""
    img = np.asarray(img, dtype=np.float64)
    dev = np.abs(img - img.mean(axis=(1, 2, 3), keepdims=True))
    return uniform_filter(dev, size=(1, 1, SALIENCY_BLUR, SALIENCY_BLUR), mode="reflect")


def saliency_pair(x: np.ndarray, y: np.ndarray) -> SaliencyPair:
    x, y = np.asarray(x), np.asarray(y)
    if x.shape != y.shape:
        raise ValueError(f"saliency_pair: extents {x.shape} and {y.shape} differ")
    return saliency_weights(contrast_saliency(x), contrast_saliency(y))


def _box(tape: ad.Tape, channels: int) -> Var:
    k = np.eye(channels)[:, :, None, None] * np.full((SSIM_WINDOW, SSIM_WINDOW), 1.0 / SSIM_WINDOW ** 2)
    return tape.const(k)


def ssim_map(a: Var, b: Var) -> Var:
    if a.shape != b.shape:
        raise ad.ShapeError(f"ssim: extents {a.shape} and {b.shape} differ")
    if a.shape[2] < SSIM_WINDOW or a.shape[3] < SSIM_WINDOW:
        raise ad.ShapeError(f"ssim: {SSIM_WINDOW}x{SSIM_WINDOW} window larger than image {a.shape[2:]}")
    w = _box(a.tape, a.shape[1])

    def blur(v):
        return ad.conv2d(v, w, padding="valid")

    mu_a, mu_b = blur(a), blur(b)
    var_a = blur(ad.square(a)) - ad.square(mu_a)
    var_b = blur(ad.square(b)) - ad.square(mu_b)
    cov = blur(a * b) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2)
    den = (ad.square(mu_a) + ad.square(mu_b) + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return num / den


def ssim(a: Var, b: Var) -> Var:
    """Mean local SSIM over valid 7x7 uniform windows, dynamic range 1."""
    return ad.mean(ssim_map(a, b))


def _as_var(tape: ad.Tape, v) -> Var:
    return v if isinstance(v, Var) else tape.const(v)


def fusion_loss(u: Var, x, y, sal: SaliencyPair, w: LossWeights = LossWeights()) -> Var:
    tape = u.tape
    x, y = _as_var(tape, x), _as_var(tape, y)
    Mx, My = tape.const(sal.M_x), tape.const(sal.M_y)
    if w.target_mode == "weighted_target":
        mse = ad.mean(ad.square(u - Mx * x)) + ad.mean(ad.square(u - My * y))
    else:
        mse = ad.mean(ad.square(Mx * (u - x))) + ad.mean(ad.square(My * (u - y)))
    s = ssim(u, Mx * x + My * y)
    ssim_term = (1.0 - s) if w.ssim_mode == "complement" else s
    return w.w_mse * mse + w.w_ssim * ssim_term


def batch_objective(model, p: dict, x: Var, y: Var, z: np.ndarray, w: LossWeights = LossWeights()):
    """0.5 * L_F + 0.5 * L_T on one batch. Returns (loss, L_F, L_T, logits)."""
    u, logits = model.forward(p, x, y)
    sal = saliency_pair(x.value, y.value)
    lf = fusion_loss(u, x, y, sal, w)
    lt = cross_entropy(logits, z)
    return 0.5 * lf + 0.5 * lt, lf, lt, logits


def hybrid_losses(tape: ad.Tape, model, p: dict, batch, attacked_batch=None, val_batch=None,
                  w: LossWeights = LossWeights()) -> tuple[Var, Var, Var | None]:
    """(L_tr, L_val, L_tr_at); the training objective is L_tr + lam * L_tr_at."""

    def on(b):
        return batch_objective(model, p, tape.const(b.x), tape.const(b.y), b.z, w)[0]

    l_tr = on(batch)
    l_val = on(val_batch) if val_batch is not None else l_tr
    l_at = on(attacked_batch) if attacked_batch is not None else None
    return l_tr, l_val, l_at


def training_objective(l_tr: Var, l_at: Var | None, lam: float) -> Var:
    if l_at is None or lam == 0:
        return l_tr
    return l_tr + lam * l_at
