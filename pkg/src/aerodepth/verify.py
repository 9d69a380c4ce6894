"""Finite-difference verification suite for every primitive, loss and a tiny U-Net.

Random inputs are drawn away from non-smooth points (ReLU/abs at 0, max
ties, clamp bounds, L1 and BerHu kinks) by at least twice the step size, so
a central difference never straddles a kink.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np

from . import numcore as nc
from .losses import LossWeights, SsimConfig, berhu_loss, combined_loss, edge_loss, l1_loss, ssim_loss
from .model import ModelConfig, forward_with, unet_init
from .numcore import Tensor, grad_check

EPS = 1e-3
PRIMITIVE_TOL = 1e-3
UNET_TOL = 1e-2
UNET_EPS = 1e-5
KINK_MARGIN = 1e-4
SHAPE = (2, 4, 8, 8)


@dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.error < self.tolerance

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name} max_rel_err={self.error:.3e} tol={self.tolerance:g}"


def _away_from_zero(rng, shape, lo=0.1, hi=1.0):
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(lo, hi, size=shape)


def _distinct(rng, shape):
    # values on a shuffled grid with spacing well above 2 * EPS
    n = int(np.prod(shape))
    spacing = max(2.0 / n, 4 * EPS)
    grid = rng.permutation(n) * spacing - 1.0
    return (grid + rng.uniform(0, 0.2 * spacing, size=n)).reshape(shape)


def _projected(fn: Callable[..., Tensor], rng, out_shape_probe) -> Callable[..., Tensor]:
    """Reduce a tensor-valued op to a scalar with fixed random weights."""
    weights = {}

    def builder(*xs):
        out = fn(*xs)
        if "r" not in weights:
            weights["r"] = rng.standard_normal(out.shape)
        return nc.mean(out * Tensor(weights["r"]))

    return builder


def _primitive_cases(rng) -> Dict[str, Tuple[Callable, List[np.ndarray]]]:
    s = SHAPE
    clamp_in = rng.uniform(-1, 1, size=s)
    near = (np.abs(clamp_in - 0.5) < 2 * EPS) | (np.abs(clamp_in + 0.5) < 2 * EPS)
    clamp_in[near] += 5 * EPS
    return {
        "add": (nc.add, [rng.standard_normal(s), rng.standard_normal((1, 4, 1, 1))]),
        "sub": (nc.sub, [rng.standard_normal(s), rng.standard_normal((1, 1, 8, 8))]),
        "mul": (nc.mul, [rng.standard_normal(s), rng.standard_normal(s)]),
        "div": (nc.div, [rng.standard_normal(s), _away_from_zero(rng, s, 0.5, 1.5)]),
        "scalar_mul": (lambda a: nc.scalar_mul(a, -1.7), [rng.standard_normal(s)]),
        "relu": (nc.relu, [_away_from_zero(rng, s)]),
        "conv2d[stride1,zero]": (lambda x, w, b: nc.conv2d(x, w, b, padding=1),
                                 [rng.standard_normal(s), rng.standard_normal((3, 4, 3, 3)), rng.standard_normal(3)]),
        "conv2d[stride2,reflect]": (lambda x, w, b: nc.conv2d(x, w, b, stride=2, padding=1, pad_mode="reflect"),
                                    [rng.standard_normal(s), rng.standard_normal((3, 4, 3, 3)),
                                     rng.standard_normal(3)]),
        "conv2d[stride1,reflect,1ch]": (lambda x, w: nc.conv2d(x, w, padding=2, pad_mode="reflect"),
                                        [rng.standard_normal((2, 1, 8, 8)), rng.standard_normal((2, 1, 3, 3))]),
        "max_pool2": (nc.max_pool2, [_distinct(rng, s)]),
        "upsample2": (nc.upsample2, [rng.standard_normal((2, 4, 4, 4))]),
        "concat": (nc.concat, [rng.standard_normal((2, 1, 8, 8)), rng.standard_normal((2, 3, 8, 8))]),
        "mean": (nc.mean, [rng.standard_normal(s)]),
        "max_reduce": (nc.max_reduce, [_distinct(rng, s)]),
        "abs": (nc.absolute, [_away_from_zero(rng, s)]),
        "square": (nc.square, [rng.standard_normal(s)]),
        "sqrt": (nc.sqrt, [rng.uniform(0.2, 2.0, size=s)]),
        "exp": (nc.exp, [0.5 * rng.standard_normal(s)]),
        "clamp": (lambda a: nc.clamp(a, -0.5, 0.5), [clamp_in]),
    }


def primitive_checks(seed: int = 1, trials: int = 10) -> List[CheckResult]:
    worst: Dict[str, float] = {}
    for trial in range(trials):
        rng = np.random.default_rng([seed, trial])
        for name, (fn, inputs) in _primitive_cases(rng).items():
            builder = _projected(fn, rng, None)
            err = grad_check(builder, inputs, EPS)
            worst[name] = max(worst.get(name, 0.0), err)
    return [CheckResult(f"primitive:{k}", v, PRIMITIVE_TOL) for k, v in worst.items()]


def _loss_inputs(rng, shape=(2, 1, 8, 8), c_frac=0.2):
    """Prediction/target pair whose errors avoid the L1 and BerHu kinks."""
    margin = 3 * EPS
    for _ in range(1000):
        target = rng.uniform(0, 4, size=shape)
        err = _away_from_zero(rng, shape, 0.05, 1.0)
        a = np.sort(np.abs(err).ravel())
        c = c_frac * a[-1]
        if a[-1] - a[-2] > margin and np.min(np.abs(a - c)) > margin:
            pred = target + err
            dx = np.abs(np.diff(pred, axis=3))
            dy = np.abs(np.diff(pred, axis=2))
            if dx.min() > margin and dy.min() > margin:
                return pred, target
    raise RuntimeError("could not draw kink-free loss inputs")


def loss_checks(seed: int = 1, trials: int = 10) -> List[CheckResult]:
    cfg = SsimConfig()
    worst: Dict[str, float] = {}
    for trial in range(trials):
        rng = np.random.default_rng([seed, 100 + trial])
        pred, target = _loss_inputs(rng)
        image = rng.uniform(0, 1, size=pred.shape)
        cases = {
            "l1": lambda p: l1_loss(p, target),
            "berhu": lambda p: berhu_loss(p, target, 0.2),
            "edge": lambda p: edge_loss(p, image),
            "ssim": lambda p: ssim_loss(p, target, cfg),
            "combined": lambda p: combined_loss(p, target, image, LossWeights(0.5, 1.0, 2.0, 1.5), cfg, 0.2),
        }
        for name, builder in cases.items():
            err = grad_check(builder, [pred], EPS)
            worst[name] = max(worst.get(name, 0.0), err)
    return [CheckResult(f"loss:{k}", v, PRIMITIVE_TOL) for k, v in worst.items()]


def _kink_margin(builder, values) -> float:
    """Smallest |input| reaching a ReLU or abs node while evaluating ``builder``."""
    graph = nc.Graph()
    with nc.float64_mode(), graph.active():
        builder(*[Tensor(v, requires_grad=True) for v in values])
    margins = [np.abs(n.inputs[0].data).min() for n in graph.nodes if n.kind in ("relu", "abs")]
    return float(min(margins)) if margins else np.inf


def unet_check(seed: int = 1, eps: float = UNET_EPS, margin: float = KINK_MARGIN) -> CheckResult:
    """End-to-end check of a levels-1, base-2 U-Net on an 8 x 8 input with L1 loss.

    A few hundred ReLU units make some pre-activation land near zero for most
    draws, so biases are redrawn until every ReLU and |pred - target| input is
    at least ``margin`` from its kink, and the step is kept well below it.
    """
    cfg = ModelConfig(levels=1, base_channels=2, seed=seed)
    model = unet_init(cfg)
    names = list(model.params)
    for attempt in range(200):
        rng = np.random.default_rng([seed, 999, attempt])
        # zero biases would put every unit fed by an all-zero patch exactly on the kink
        values = [model.params[k].data.astype(np.float64) if k.endswith(".w")
                  else _away_from_zero(rng, model.params[k].shape, 0.05, 0.2) for k in names]
        image = rng.uniform(0, 1, size=(1, 1, 8, 8))
        with nc.no_grad(), nc.float64_mode():
            out = forward_with({k: Tensor(v) for k, v in zip(names, values)}, cfg, image).data
        target = out + _away_from_zero(rng, out.shape, 0.5, 1.0)

        def builder(*tensors, image=image, target=target):
            return l1_loss(forward_with(dict(zip(names, tensors)), cfg, image), target)

        if _kink_margin(builder, values) >= margin:
            break
    else:
        raise RuntimeError("could not draw a kink-free U-Net configuration")
    err = grad_check(builder, values, eps)
    return CheckResult("unet:levels1-base2-8x8-l1", err, UNET_TOL)


def run_suite(seed: int = 1, trials: int = 10) -> List[CheckResult]:
    return primitive_checks(seed, trials) + loss_checks(seed, trials) + [unet_check(seed)]
