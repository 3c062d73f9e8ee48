"""Shared acoustic encoder and feature augmentation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from .nn import (
    ConfigurationError,
    EmptyInputError,
    ParamStore,
    blstm_backward,
    blstm_forward,
    conv2d_backward,
    conv2d_forward,
    init_blstm,
    init_conv2d,
    init_linear,
    linear_backward,
    linear_forward,
    maxpool2d_backward,
    maxpool2d_forward,
)

VARIANTS = ("blstm", "vgg-blstm")


@dataclass
class EncoderConfig:
    variant: str = "blstm"
    num_layers: int = 4
    hidden: int = 320
    proj: Optional[int] = None  # defaults to hidden
    # layers whose (projected) output is halved before the next layer reads it
    subsample_layers: Tuple[int, ...] = (0, 1)
    vgg_channels: Tuple[int, int] = (64, 128)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown encoder variant {self.variant!r}")
        if self.num_layers < 1 or self.hidden < 1:
            raise ConfigurationError("encoder needs at least one layer and hidden >= 1")
        self.subsample_layers = tuple(sorted(set(int(i) for i in self.subsample_layers)))
        if any(i < 0 or i >= self.num_layers for i in self.subsample_layers):
            raise ConfigurationError(f"subsample layer index out of range: {self.subsample_layers}")
        if self.variant == "blstm" and len(self.subsample_layers) != 2:
            raise ConfigurationError("blstm encoder must subsample at exactly two layers")
        if self.variant == "vgg-blstm" and self.subsample_layers:
            raise ConfigurationError("vgg-blstm already downsamples by 4; subsample_layers must be empty")

    @property
    def proj_size(self) -> int:
        return self.proj or self.hidden

    @property
    def output_dim(self) -> int:
        return self.proj_size


@dataclass
class FeatureSequence:
    frames: np.ndarray  # T x D
    channels: Optional[np.ndarray] = None  # 3 x T x D: static, delta, delta-delta

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise EmptyInputError(f"feature sequence needs T >= 1 frames, got {self.frames.shape}")

    @property
    def length(self) -> int:
        return self.frames.shape[0]

    def with_deltas(self) -> "FeatureSequence":
        return FeatureSequence(self.frames, compute_deltas(self.frames))


@dataclass
class EncoderOutput:
    hidden: np.ndarray  # T' x E
    cache: object = field(default=None, repr=False)

    @property
    def length(self) -> int:
        return self.hidden.shape[0]


def subsampled_length(T: int) -> int:
    return (T + 1) // 2


def init_encoder(store: ParamStore, cfg: EncoderConfig, feat_dim: int, prefix: str = "enc") -> None:
    if cfg.variant == "vgg-blstm":
        c1, c2 = cfg.vgg_channels
        init_conv2d(store, f"{prefix}.vgg.conv0", 3, c1)
        init_conv2d(store, f"{prefix}.vgg.conv1", c1, c1)
        init_conv2d(store, f"{prefix}.vgg.conv2", c1, c2)
        init_conv2d(store, f"{prefix}.vgg.conv3", c2, c2)
        n_in = c2 * subsampled_length(subsampled_length(feat_dim))
    else:
        n_in = feat_dim
    for layer in range(cfg.num_layers):
        init_blstm(store, f"{prefix}.l{layer}", n_in, cfg.hidden)
        init_linear(store, f"{prefix}.l{layer}.proj", 2 * cfg.hidden, cfg.proj_size)
        n_in = cfg.proj_size


def _vgg_forward(store, prefix, image):
    caches = []
    x = image
    for k in range(4):
        x, c = conv2d_forward(store, f"{prefix}.vgg.conv{k}", x)
        caches.append(c)
        if k % 2 == 1:
            x, c = maxpool2d_forward(x)
            caches.append(c)
    C, T, F = x.shape
    # channel-major flattening per frame: feature index = c * F + f
    return x.transpose(1, 0, 2).reshape(T, C * F), (caches, x.shape)


def _vgg_backward(store, prefix, dflat, cache):
    caches, (C, T, F) = cache
    dx = dflat.reshape(T, C, F).transpose(1, 0, 2)
    it = iter(reversed(caches))
    for k in (3, 2, 1, 0):
        if k % 2 == 1:
            dx = maxpool2d_backward(dx, next(it))
        dx = conv2d_backward(store, f"{prefix}.vgg.conv{k}", dx, next(it))
    return dx


def encode(store: ParamStore, cfg: EncoderConfig, x: FeatureSequence, prefix: str = "enc") -> EncoderOutput:
    """Map ``T`` input frames to ``ceil(T/4)`` hidden vectors.

    Each BLSTM layer is followed by a linear projection; layers listed in
    ``subsample_layers`` keep frames 0, 2, 4, ... of their output.
    """
    if cfg.variant == "vgg-blstm":
        if x.channels is None or x.channels.ndim != 3 or x.channels.shape[0] != 3:
            raise ConfigurationError("vgg-blstm encoder requires 3-channel (static, delta, delta-delta) input")
        h, vgg_cache = _vgg_forward(store, prefix, x.channels)
    else:
        h, vgg_cache = x.frames, None
    layer_caches = []
    for layer in range(cfg.num_layers):
        y, bc = blstm_forward(store, f"{prefix}.l{layer}", h)
        p, pc = linear_forward(store, f"{prefix}.l{layer}.proj", y)
        sub = layer in cfg.subsample_layers
        if sub:
            p = p[::2]
        layer_caches.append((bc, pc, sub, y.shape[0]))
        h = p
    return EncoderOutput(h, (vgg_cache, layer_caches))


def encode_backward(store: ParamStore, cfg: EncoderConfig, dH: np.ndarray, out: EncoderOutput, prefix: str = "enc"):
    """Accumulate encoder parameter gradients given dLoss/dhidden."""
    vgg_cache, layer_caches = out.cache
    d = dH
    for layer in range(cfg.num_layers - 1, -1, -1):
        bc, pc, sub, T = layer_caches[layer]
        if sub:
            full = np.zeros((T, d.shape[1]))
            full[::2] = d
            d = full
        d = linear_backward(store, f"{prefix}.l{layer}.proj", d, pc)
        d = blstm_backward(store, f"{prefix}.l{layer}", d, bc)
    if vgg_cache is not None:
        return _vgg_backward(store, prefix, d, vgg_cache)
    return d


def compute_deltas(x: np.ndarray, window: int = 2) -> np.ndarray:
    """Stack static, delta and delta-delta features into ``3 x T x D``.

    Regression deltas over +-``window`` frames with edge replication.
    """
    x = np.asarray(x, dtype=np.float64)

    def delta(v):
        T = v.shape[0]
        padded = np.concatenate([np.repeat(v[:1], window, 0), v, np.repeat(v[-1:], window, 0)])
        num = np.zeros_like(v)
        for n in range(1, window + 1):
            num += n * (padded[window + n : window + n + T] - padded[window - n : window - n + T])
        return num / (2 * sum(n * n for n in range(1, window + 1)))

    d1 = delta(x)
    return np.stack([x, d1, delta(d1)])


def speed_perturb(x: np.ndarray, factor: float) -> np.ndarray:
    """Resample the time axis: output frame i interpolates source position i*factor."""
    if factor <= 0:
        raise ValueError(f"speed factor must be positive, got {factor}")
    x = np.asarray(x, dtype=np.float64)
    T = x.shape[0]
    # tolerate representation error in T/factor (90/0.9 = 99.999...)
    n_out = max(1, int(np.floor(T / factor + 1e-9)))
    pos = np.minimum(np.arange(n_out) * factor, T - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, T - 1)
    w = (pos - lo)[:, None]
    return (1.0 - w) * x[lo] + w * x[hi]
