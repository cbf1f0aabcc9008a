"""Normalization machinery: batch norm, instance norm, the split block that
applies each to half the channels, and the two conditional variants that
modulate a standardized activation with per-position scale/bias maps
generated from a style feature.

All ops here register hand-derived fused backward passes on the autodiff
graph; the modulation generators are compositions of existing tensor ops.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, UsageError
from .tensor import (
    LrGroup,
    Mode,
    Parameter,
    Tensor,
    _as_tensor,
    _node,
    add,
    conv2d,
    mul,
    upsample_nearest,
)

DEFAULT_EPS = 1e-5
DEFAULT_BN_MOMENTUM = 0.1
MODULATION_INIT_STD = 0.05  # small: early training stays near the plain-IN regime


class BatchNormState:
    """Learnable affine plus running statistics for batch normalization."""

    def __init__(self, channels: int, eps: float = DEFAULT_EPS,
                 momentum: float = DEFAULT_BN_MOMENTUM,
                 lr_group: LrGroup = LrGroup.BASE, dtype=np.float32):
        self.gamma = Parameter(np.ones(channels, dtype=dtype), lr_group)
        self.beta = Parameter(np.zeros(channels, dtype=dtype), lr_group)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps
        self.mode = Mode.TRAIN

    @property
    def channels(self) -> int:
        return self.gamma.data.shape[0]


class InstanceNormState:
    """Learnable affine for per-sample, per-channel standardization."""

    def __init__(self, channels: int, eps: float = DEFAULT_EPS,
                 lr_group: LrGroup = LrGroup.BASE, dtype=np.float32):
        self.gamma = Parameter(np.ones(channels, dtype=dtype), lr_group)
        self.beta = Parameter(np.zeros(channels, dtype=dtype), lr_group)
        self.eps = eps

    @property
    def channels(self) -> int:
        return self.gamma.data.shape[0]


@dataclass
class ModulationMaps:
    """Per-position scale and bias, shaped like the activation they modulate."""
    scale: Tensor
    bias: Tensor


class ResidualSpadeState:
    """The two 3x3 bias-free convolutions that turn an upsampled style
    feature into modulation maps, plus the instance norm they modulate."""

    def __init__(self, style_channels: int, modulated_channels: int,
                 inner: InstanceNormState, rng: np.random.Generator,
                 init_std: float = MODULATION_INIT_STD, dtype=np.float32):
        shape = (modulated_channels, style_channels, 3, 3)
        self.conv_w1 = Parameter(
            (rng.standard_normal(shape) * init_std).astype(dtype), LrGroup.BOOSTED)
        self.conv_b1 = Parameter(
            (rng.standard_normal(shape) * init_std).astype(dtype), LrGroup.BOOSTED)
        self.inner = inner


def _norm_axes(shape: tuple, per_instance: bool) -> tuple:
    if len(shape) == 4:
        return (2, 3) if per_instance else (0, 2, 3)
    if len(shape) == 2 and not per_instance:
        return (0,)
    raise ConfigurationError(f"normalization expects N×C×H×W or N×C input, got {shape}")


def _affine_shape(shape: tuple) -> tuple:
    return (1, shape[1], 1, 1) if len(shape) == 4 else (1, shape[1])


def _standardize_node(x: Tensor, gamma, beta, mean, var, eps, axes, op: str) -> Tensor:
    """Shared forward/backward for every normalization in this module.

    y = gamma * (x - mean) / sqrt(var + eps) + beta, with mean/var treated
    as functions of x over `axes` (pass axes=None when they are constants,
    i.e. running statistics).
    """
    xv = x.data
    ashape = _affine_shape(xv.shape)
    gv = gamma.value.data.reshape(ashape) if gamma is not None else None
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xv - mean) * inv
    out = xhat if gv is None else xhat * gv
    if beta is not None:
        out = out + beta.value.data.reshape(ashape)

    parents = [x]
    if gamma is not None:
        parents += [gamma.value, beta.value]
    red_axes = tuple(i for i in range(xv.ndim) if i not in (1,))  # per-channel reduce

    def grad_fn(go):
        gxhat = go if gv is None else go * gv
        if axes is None:
            gx = gxhat * inv  # stats are constants (running-stat path)
        else:
            gm = gxhat.mean(axis=axes, keepdims=True)
            gms = (gxhat * xhat).mean(axis=axes, keepdims=True)
            gx = inv * (gxhat - gm - xhat * gms)
        if gamma is None:
            return (gx,)
        gg = (go * xhat).sum(axis=red_axes).astype(gv.dtype, copy=False)
        gb = go.sum(axis=red_axes).astype(gv.dtype, copy=False)
        return gx, gg, gb

    return _node(out, op, tuple(parents), grad_fn)


def batch_norm(x, state: BatchNormState) -> Tensor:
    """Normalize across the batch per channel; Train updates running stats."""
    x = _as_tensor(x)
    xv = x.data
    axes = _norm_axes(xv.shape, per_instance=False)
    if xv.shape[1] != state.channels:
        raise ConfigurationError(
            f"batch_norm expects {state.channels} channels, got {xv.shape[1]}")

    if state.mode is Mode.TRAIN:
        count = int(np.prod([xv.shape[a] for a in axes]))
        if count < 2:
            raise UsageError(f"batch_norm in Train mode needs >=2 values per channel, got {count}")
        mean = xv.mean(axis=axes, keepdims=True)
        var = ((xv - mean) ** 2).mean(axis=axes, keepdims=True)
        m = state.momentum
        state.running_mean[...] = (1 - m) * state.running_mean + m * mean.reshape(-1)
        state.running_var[...] = (1 - m) * state.running_var + m * var.reshape(-1)
        return _standardize_node(x, state.gamma, state.beta, mean, var, state.eps, axes, "batch_norm")

    ashape = _affine_shape(xv.shape)
    mean = state.running_mean.reshape(ashape)
    var = state.running_var.reshape(ashape)
    return _standardize_node(x, state.gamma, state.beta, mean, var, state.eps, None, "batch_norm")


def instance_norm(x, state: InstanceNormState) -> Tensor:
    """Standardize each (sample, channel) plane, then apply the affine."""
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise ConfigurationError(f"instance_norm expects N×C×H×W input, got {x.data.shape}")
    if x.data.shape[1] != state.channels:
        raise ConfigurationError(
            f"instance_norm expects {state.channels} channels, got {x.data.shape[1]}")
    mean = x.data.mean(axis=(2, 3), keepdims=True)
    var = ((x.data - mean) ** 2).mean(axis=(2, 3), keepdims=True)
    return _standardize_node(x, state.gamma, state.beta, mean, var, state.eps, (2, 3), "instance_norm")


def instance_standardize(x, eps: float = DEFAULT_EPS) -> Tensor:
    """Affine-free per-plane standardization (the inner term of the
    non-residual conditional variant)."""
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise ConfigurationError(f"instance_standardize expects 4-D input, got {x.data.shape}")
    mean = x.data.mean(axis=(2, 3), keepdims=True)
    var = ((x.data - mean) ** 2).mean(axis=(2, 3), keepdims=True)
    return _standardize_node(x, None, None, mean, var, eps, (2, 3), "instance_standardize")


def ibn_split(x, in_state: InstanceNormState, bn_state: BatchNormState) -> Tensor:
    """Instance-normalize the first half of the channels, batch-normalize the
    rest, and concatenate in the original order."""
    from .tensor import concat_channels, slice_channels

    x = _as_tensor(x)
    c = x.data.shape[1]
    if c % 2:
        raise ConfigurationError(f"ibn_split needs an even channel count, got {c}")
    half = c // 2
    first = instance_norm(slice_channels(x, 0, half), in_state)
    second = batch_norm(slice_channels(x, half, c), bn_state)
    return concat_channels(first, second)


def compute_modulation(style_feature, state: ResidualSpadeState,
                       target_hw: tuple[int, int]) -> ModulationMaps:
    """Upsample the style feature to the activation's spatial size, then
    convolve it into per-position scale and bias maps."""
    style_feature = _as_tensor(style_feature)
    _, _, h, w = style_feature.data.shape
    th, tw = target_hw
    if th % h or tw % w or th // h != tw // w:
        raise ConfigurationError(
            f"style feature {h}x{w} does not upsample integrally to {th}x{tw}")
    up = upsample_nearest(style_feature, th // h)
    sigma = conv2d(up, state.conv_w1, stride=1, padding=1)
    mu = conv2d(up, state.conv_b1, stride=1, padding=1)
    return ModulationMaps(scale=sigma, bias=mu)


def spade(x, style_feature, state: ResidualSpadeState) -> Tensor:
    """scale(v) * standardize(u) + bias(v): the inner standardization carries
    no affine of its own."""
    x = _as_tensor(x)
    maps = compute_modulation(style_feature, state, x.data.shape[2:])
    z = instance_standardize(x, state.inner.eps)
    return add(mul(maps.scale, z), maps.bias)


def residual_spade(x, style_feature, state: ResidualSpadeState) -> Tensor:
    """IN(u) * (1 + scale(v)) + bias(v): keeps the instance norm affine and
    collapses to plain instance norm when the modulation convs are zero."""
    x = _as_tensor(x)
    maps = compute_modulation(style_feature, state, x.data.shape[2:])
    z = instance_norm(x, state.inner)
    return add(add(z, mul(z, maps.scale)), maps.bias)
