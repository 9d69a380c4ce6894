"""Training and inference loop tying preprocessing, model, losses and optimizer together."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import numcore as nc
from .datagen import (AnnotatedFrame, BBox, ClassBins, DEFAULT_BINS, bin_distance, build_mask, center_crop,
                      gaussian_smooth)
from .losses import LossWeights, SsimConfig, combined_loss
from .metrics import MetricReport, SlidingWindowCfg, evaluate
from .model import Model, ModelConfig, unet_forward, unet_init
from .optim import AdamState, WarmupSchedule, adam_step, l2_penalty, warmup_multiplier

log = logging.getLogger(__name__)


class NonFiniteLoss(FloatingPointError):
    def __init__(self, frame_ids: Sequence[str], value: float):
        super().__init__(f"non-finite loss {value} on frames {', '.join(frame_ids)}")
        self.frame_ids = list(frame_ids)


@dataclass
class Sample:
    frame_id: str
    image: np.ndarray        # crop x crop, float32
    target: np.ndarray       # smoothed class mask used for training
    class_mask: np.ndarray   # unsmoothed integer class mask used by metrics
    bbox: BBox               # in crop coordinates
    cls: int


def prepare_sample(image: np.ndarray, frame: AnnotatedFrame, crop: int = 128, sigma: float = 2.0,
                   ksize: int = 9, bins: ClassBins = DEFAULT_BINS) -> Sample:
    """Centre-crop around the bbox, build the class mask and its smoothed target."""
    img = np.asarray(image, dtype=np.float32)
    if img.ndim == 3:
        # channel-major input from read_image; grayscale by channel average
        img = img.mean(axis=0) if img.shape[0] in (1, 3) else img.mean(axis=2)
    mask = build_mask(frame, img.shape, bins)
    img_c, mask_c, box = center_crop(img, mask, frame.bbox, crop)
    box = box.clip(crop, crop)
    return Sample(frame.frame_id, img_c, gaussian_smooth(mask_c, sigma, ksize), mask_c, box,
                  bin_distance(frame.distance_m, bins))


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 4
    lr: float = 1e-3
    weight_decay: float = 0.0005
    weights: LossWeights = field(default_factory=LossWeights)
    ssim: SsimConfig = field(default_factory=SsimConfig)
    c_frac: float = 0.2
    seed: int = 0
    levels: int = 3
    base_channels: int = 8

    def model_config(self) -> ModelConfig:
        return ModelConfig(levels=self.levels, base_channels=self.base_channels, seed=self.seed)


@dataclass
class EpochLog:
    epoch: int
    iterations: int
    lr_mult: float
    loss: float
    l2_penalty: float

    HEADER = "epoch,iterations,lr_mult,loss,l2_penalty"

    def csv(self) -> str:
        return f"{self.epoch},{self.iterations},{self.lr_mult!r},{self.loss!r},{self.l2_penalty!r}"


def _batch(samples: Sequence[Sample], idx) -> Tuple[np.ndarray, np.ndarray]:
    x = np.stack([samples[i].image for i in idx])[:, None]
    t = np.stack([samples[i].target for i in idx])[:, None]
    return x, t


def train(samples: Sequence[Sample], cfg: TrainConfig, on_epoch: Optional[Callable[[EpochLog], None]] = None,
          model: Optional[Model] = None) -> Tuple[Model, AdamState, List[EpochLog]]:
    """Adam with warmup over shuffled mini-batches; deterministic given ``cfg.seed``.

    The warmup length is counted in optimizer steps and derived from the
    dataset length.
    """
    if not samples:
        raise ValueError("no training samples")
    model = model or unet_init(cfg.model_config())
    params = model.params
    state = AdamState.zeros_like(params)
    sched = WarmupSchedule.for_dataset(len(samples), base_lr=cfg.lr)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    history = []
    it = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(samples))
        lr_mult0 = warmup_multiplier(it, sched)
        total = 0.0
        steps = 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            x, t = _batch(samples, idx)
            graph = nc.Graph()
            with graph.active():
                pred = unet_forward(model, x)
                loss = combined_loss(pred, t, x, cfg.weights, cfg.ssim, cfg.c_frac)
            value = float(loss.data)
            if not math.isfinite(value):
                raise NonFiniteLoss([samples[i].frame_id for i in idx], value)
            for p in params.values():
                p.grad = None
            nc.backward(graph, loss)
            grads = {name: p.grad for name, p in params.items()}
            adam_step(params, grads, state, sched.lr(it), weight_decay=cfg.weight_decay)
            total += value
            steps += 1
            it += 1
        entry = EpochLog(epoch, it, lr_mult0, total / steps, l2_penalty(params, cfg.weight_decay))
        history.append(entry)
        log.info("epoch %d loss %.5f lr_mult %.4f", epoch, entry.loss, lr_mult0)
        if on_epoch is not None:
            on_epoch(entry)
    for p in params.values():
        p.grad = None
    return model, state, history


def predict(model: Model, images: Sequence[np.ndarray], batch_size: int = 8) -> List[np.ndarray]:
    """Continuous maps (H x W, float32) for a list of H x W images."""
    out = []
    with nc.no_grad():
        for start in range(0, len(images), batch_size):
            x = np.stack(images[start : start + batch_size])[:, None].astype(np.float32)
            y = unet_forward(model, x).data
            out.extend(y[i, 0].copy() for i in range(y.shape[0]))
    return out


def evaluate_samples(maps: Sequence[np.ndarray], samples: Sequence[Sample],
                     window: int = 5, thr: float = 1.25) -> MetricReport:
    rows = [(m, AnnotatedFrame("", s.bbox, 0.0, s.frame_id), s.cls, s.class_mask) for m, s in zip(maps, samples)]
    return evaluate(rows, SlidingWindowCfg(k=window), thr)
