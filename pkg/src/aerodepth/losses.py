"""Edge, SSIM, L1 and BerHu losses plus their weighted sum, built from numcore ops.

Predictions and targets are N x 1 x H x W tensors (2-d arrays are promoted).
Targets and images never need gradients and may be plain arrays.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import numcore as nc
from .numcore import Tensor

LOSS_NAMES = ("edge", "ssim", "l1", "berhu")


@dataclass(frozen=True)
class LossWeights:
    w_edge: float = 1.0
    w_ssim: float = 1.0
    w_l1: float = 1.0
    w_berhu: float = 1.0

    def __post_init__(self):
        ws = self.as_tuple()
        if any(w < 0 for w in ws):
            raise ValueError(f"loss weights must be >= 0, got {ws}")
        if not any(w > 0 for w in ws):
            raise ValueError("at least one loss weight must be positive")

    def as_tuple(self):
        return (self.w_edge, self.w_ssim, self.w_l1, self.w_berhu)

    def scaled(self, k: float) -> "LossWeights":
        return LossWeights(*(k * w for w in self.as_tuple()))

    @classmethod
    def from_selection(cls, names: Sequence[str], weights: Optional[Sequence[float]] = None) -> "LossWeights":
        """Weights for the named components; unnamed components get 0."""
        names = [n.strip().lower() for n in names]
        unknown = [n for n in names if n not in LOSS_NAMES]
        if unknown:
            raise ValueError(f"unknown loss names {unknown}; choose from {LOSS_NAMES}")
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate loss names in {names}")
        if weights is None:
            weights = [1.0] * len(names)
        if len(weights) != len(names):
            raise ValueError(f"{len(names)} losses but {len(weights)} weights")
        table = dict.fromkeys(LOSS_NAMES, 0.0)
        table.update(zip(names, (float(w) for w in weights)))
        return cls(*(table[n] for n in LOSS_NAMES))


@dataclass(frozen=True)
class SsimConfig:
    window: int = 7
    dynamic_range: float = 4.0
    c1: Optional[float] = None
    c2: Optional[float] = None

    def __post_init__(self):
        if self.window < 1 or self.window % 2 == 0:
            raise ValueError(f"SSIM window must be a positive odd integer, got {self.window}")
        if self.k1 <= 0 or self.k2 <= 0:
            raise ValueError("SSIM constants must be positive")

    @property
    def k1(self) -> float:
        return self.c1 if self.c1 is not None else (0.01 * self.dynamic_range) ** 2

    @property
    def k2(self) -> float:
        return self.c2 if self.c2 is not None else (0.03 * self.dynamic_range) ** 2


def _as_nchw(x) -> Tensor:
    t = x if isinstance(x, Tensor) else Tensor(x)
    if t.data.ndim == 4:
        return t
    if t.requires_grad:
        raise nc.ShapeError(f"differentiable inputs must already be N x C x H x W, got {t.shape}")
    if t.data.ndim == 2:
        return Tensor(t.data[None, None])
    if t.data.ndim == 3:
        return Tensor(t.data[:, None])
    raise nc.ShapeError(f"expected a 2-d, 3-d or 4-d map, got {t.shape}")


def _same_shape(kind, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise nc.ShapeError(f"{kind}: shape mismatch {a.shape} vs {b.shape}")


def l1_loss(pred, target) -> Tensor:
    pred, target = _as_nchw(pred), _as_nchw(target)
    _same_shape("l1_loss", pred, target)
    return nc.mean(nc.absolute(pred - target))


def berhu_loss(pred, target, c_frac: float = 0.2) -> Tensor:
    """Reverse Huber: |e| up to c, (e^2 + c^2) / 2c above, c = c_frac * max|e|."""
    if c_frac <= 0:
        raise ValueError("c_frac must be positive")
    pred, target = _as_nchw(pred), _as_nchw(target)
    _same_shape("berhu_loss", pred, target)
    e = pred - target
    a = nc.absolute(e)
    c = nc.scalar_mul(nc.max_reduce(a), c_frac)
    if float(c.data) == 0.0:
        return nc.mean(a)
    linear = a.data <= c.data
    if linear.all():
        return nc.mean(a)
    quad = (nc.square(e) + nc.square(c)) / nc.scalar_mul(c, 2.0)
    keep_lin = Tensor(linear)
    keep_quad = Tensor(~linear)
    return nc.mean(a * keep_lin + quad * keep_quad)


def _diff_kernels():
    kx = Tensor(np.array([-1.0, 1.0]).reshape(1, 1, 1, 2))
    ky = Tensor(np.array([-1.0, 1.0]).reshape(1, 1, 2, 1))
    return kx, ky


def edge_smoothness(image) -> tuple:
    """Per-sample (lambda_x, lambda_y) = exp(-mean |forward difference of I|)."""
    img = np.asarray(image.data if isinstance(image, Tensor) else image, dtype=np.float64)
    if img.ndim == 2:
        img = img[None, None]
    elif img.ndim == 3:
        img = img[:, None]
    gray = img.mean(axis=1)
    gx = np.abs(np.diff(gray, axis=2)).mean(axis=(1, 2))
    gy = np.abs(np.diff(gray, axis=1)).mean(axis=(1, 2))
    return np.exp(-gx), np.exp(-gy)


def edge_loss(pred, image) -> Tensor:
    """mean|lambda_x * dx Y| + mean|lambda_y * dy Y| with image-derived scalars."""
    pred = _as_nchw(pred)
    img = np.asarray(image.data if isinstance(image, Tensor) else image)
    if img.ndim == 2:
        img = img[None, None]
    elif img.ndim == 3:
        img = img[:, None]
    if img.shape[0] != pred.shape[0] or img.shape[2:] != pred.shape[2:]:
        raise nc.ShapeError(f"edge_loss: image {img.shape} does not match prediction {pred.shape}")
    lam_x, lam_y = edge_smoothness(img)
    kx, ky = _diff_kernels()
    n = pred.shape[0]
    dx = nc.conv2d(pred, kx)
    dy = nc.conv2d(pred, ky)
    lx = Tensor(lam_x.reshape(n, 1, 1, 1))
    ly = Tensor(lam_y.reshape(n, 1, 1, 1))
    return nc.mean(nc.absolute(dx * lx)) + nc.mean(nc.absolute(dy * ly))


def ssim_loss(pred, target, cfg: SsimConfig = SsimConfig()) -> Tensor:
    """1 - mean SSIM over all valid uniform windows (no padding)."""
    pred, target = _as_nchw(pred), _as_nchw(target)
    _same_shape("ssim_loss", pred, target)
    k = cfg.window
    if pred.shape[2] < k or pred.shape[3] < k:
        raise nc.ShapeError(f"ssim_loss: image {pred.shape[2:]} smaller than window {k}")
    box = Tensor(np.full((1, 1, k, k), 1.0 / (k * k)))

    def avg(x):
        return nc.conv2d(x, box)

    mu_p = avg(pred)
    mu_t = avg(target)
    var_p = avg(nc.square(pred)) - nc.square(mu_p)
    var_t = avg(nc.square(target)) - nc.square(mu_t)
    cov = avg(pred * target) - mu_p * mu_t
    c1, c2 = cfg.k1, cfg.k2
    num = (nc.scalar_mul(mu_p * mu_t, 2.0) + c1) * (nc.scalar_mul(cov, 2.0) + c2)
    den = (nc.square(mu_p) + nc.square(mu_t) + c1) * (var_p + var_t + c2)
    return 1.0 - nc.mean(num / den)


def combined_loss(pred, target, image, weights: LossWeights = LossWeights(), cfg: SsimConfig = SsimConfig(),
                  c_frac: float = 0.2) -> Tensor:
    """Weighted sum of the four losses; zero-weight components are not evaluated."""
    total = None
    parts = (
        (weights.w_edge, lambda: edge_loss(pred, image)),
        (weights.w_ssim, lambda: ssim_loss(pred, target, cfg)),
        (weights.w_l1, lambda: l1_loss(pred, target)),
        (weights.w_berhu, lambda: berhu_loss(pred, target, c_frac)),
    )
    for w, fn in parts:
        if w == 0:
            continue
        term = nc.scalar_mul(fn(), w)
        total = term if total is None else total + term
    return total
