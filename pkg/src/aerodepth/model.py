"""U-Net encoder-decoder mapping a cropped image to a depth mask in class units."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Dict, Iterator, List, Tuple

import numpy as np

from . import numcore as nc
from .numcore import Tensor


@dataclass(frozen=True)
class ModelConfig:
    levels: int = 3
    base_channels: int = 8
    in_channels: int = 1
    out_channels: int = 1
    seed: int = 0

    def validate(self) -> None:
        if self.levels < 1:
            raise ValueError(f"levels must be >= 1, got {self.levels}")
        if self.base_channels < 1 or self.in_channels < 1:
            raise ValueError("channel counts must be positive")
        if self.out_channels != 1:
            raise ValueError("only single-channel output is supported")

    def to_dict(self) -> dict:
        return asdict(self)


LARGE_PRESET = dict(levels=4, base_channels=16)


class Model:
    """Named parameter tensors plus the config that shaped them."""

    def __init__(self, config: ModelConfig, params: Dict[str, Tensor]):
        self.config = config
        self.params = params

    def __iter__(self) -> Iterator[Tuple[str, Tensor]]:
        return iter(self.params.items())

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def num_parameters(self) -> int:
        return sum(t.size for t in self.params.values())

    def __call__(self, image):
        return unet_forward(self, image)


def conv_shapes(cfg: ModelConfig) -> List[Tuple[str, Tuple[int, int, int, int]]]:
    """Kernel shapes (out, in, kh, kw) in construction order."""
    shapes = []
    base = cfg.base_channels
    c_in = cfg.in_channels
    for i in range(cfg.levels):
        c = base * 2**i
        shapes.append((f"enc{i}.conv0", (c, c_in, 3, 3)))
        shapes.append((f"enc{i}.conv1", (c, c, 3, 3)))
        c_in = c
    c = base * 2**cfg.levels
    shapes.append(("bottleneck.conv0", (c, c_in, 3, 3)))
    shapes.append(("bottleneck.conv1", (c, c, 3, 3)))
    below = c
    for i in reversed(range(cfg.levels)):
        c = base * 2**i
        shapes.append((f"dec{i}.conv0", (c, c + below, 3, 3)))
        shapes.append((f"dec{i}.conv1", (c, c, 3, 3)))
        below = c
    shapes.append(("head", (cfg.out_channels, base, 1, 1)))
    return shapes


def unet_init(cfg: ModelConfig) -> Model:
    """He-normal kernels, zero biases, drawn in a fixed order from ``cfg.seed``."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    params: Dict[str, Tensor] = {}
    for name, shape in conv_shapes(cfg):
        fan_in = shape[1] * shape[2] * shape[3]
        w = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        params[f"{name}.w"] = Tensor(w.astype(np.float32), requires_grad=True, name=f"{name}.w")
        params[f"{name}.b"] = Tensor(np.zeros(shape[0], np.float32), requires_grad=True, name=f"{name}.b")
    return Model(cfg, params)


def _block(p: Dict[str, Tensor], prefix: str, x: Tensor) -> Tensor:
    x = nc.relu(nc.conv2d(x, p[f"{prefix}.conv0.w"], p[f"{prefix}.conv0.b"], padding=1))
    return nc.relu(nc.conv2d(x, p[f"{prefix}.conv1.w"], p[f"{prefix}.conv1.b"], padding=1))


def forward_with(params: Dict[str, Tensor], cfg: ModelConfig, image, taps=None) -> Tensor:
    """Forward pass with an explicit parameter mapping.

    ``taps`` optionally maps a tensor name ("skip{i}" or "deepest") to a
    function applied to that intermediate tensor; used to probe wiring.
    """
    x = image if isinstance(image, Tensor) else Tensor(image)
    if x.data.ndim == 2:
        x = Tensor(x.data[None, None])
    elif x.data.ndim == 3:
        x = Tensor(x.data[None])
    if x.shape[1] != cfg.in_channels:
        raise nc.ShapeError(f"unet: expected {cfg.in_channels} input channels, got {x.shape[1]}")
    div = 2**cfg.levels
    h, w = x.shape[2:]
    if h % div or w % div:
        raise nc.ShapeError(f"unet: spatial extent {h}x{w} must be divisible by {div} (2**levels)")
    taps = taps or {}
    skips = []
    for i in range(cfg.levels):
        x = _block(params, f"enc{i}", x)
        skips.append(taps[f"skip{i}"](x) if f"skip{i}" in taps else x)
        x = nc.max_pool2(x)
    x = _block(params, "bottleneck", x)
    if "deepest" in taps:
        x = taps["deepest"](x)
    for i in reversed(range(cfg.levels)):
        x = nc.concat(skips[i], nc.upsample2(x))
        x = _block(params, f"dec{i}", x)
    return nc.conv2d(x, params["head.w"], params["head.b"])


def unet_forward(model: Model, image) -> Tensor:
    """Map an N x C x H x W (or H x W) image to an N x 1 x H x W depth map."""
    return forward_with(model.params, model.config, image)
