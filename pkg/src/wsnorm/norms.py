"""Activation normalizations on (B, C, H, W) feature maps.

BN uses per-channel batch statistics, channel normalization (CN) uses
per-sample statistics over groups of channels (LN is one group, IN is one
channel per group), and Batch-Channel Normalization (BCN) composes a
batch-statistics stage with a CN stage, each with its own affine pair.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .ops import standardize
from .tensor import Tensor, default_dtype

__all__ = [
    "NormKind",
    "NormState",
    "MicroBatchError",
    "default_groups",
    "bn_forward",
    "cn_forward",
    "fixed_stats_forward",
    "bcn_large_forward",
    "bcn_micro_forward",
    "norm_forward",
    "sample_fixed_stats",
]

ACT_EPS = 1e-5
BN_MOMENTUM = 0.1


class MicroBatchError(ValueError):
    """Batch statistics requested from a single value per channel."""


class NormKind(str, enum.Enum):
    NONE = "none"
    BN = "bn"
    CN = "cn"
    BCN_LARGE = "bcn_large"
    BCN_MICRO = "bcn_micro"
    FIXED = "fixed"


def default_groups(channels: int) -> int:
    """``min(32, C / 4)`` groups, at least one."""
    return max(1, min(32, channels // 4))


def _param(n: int, value: float, dtype, trainable: bool = True) -> Tensor:
    return Tensor(np.full((n,), value, dtype=dtype), requires_grad=trainable)


@dataclass
class NormState:
    kind: NormKind
    channels: int
    groups: int = 1
    eps: float = ACT_EPS
    mode: str = "train"
    momentum: float = BN_MOMENTUM
    rate: float = 0.1
    gamma: Tensor | None = None
    beta: Tensor | None = None
    gamma_c: Tensor | None = None
    beta_c: Tensor | None = None
    running_mean: np.ndarray = field(default=None)
    running_var: np.ndarray = field(default=None)
    fixed_mu: np.ndarray | None = None
    fixed_sigma: np.ndarray | None = None
    # Algorithm-faithful micro-batch BCN centers the second moment on the
    # running estimate; True switches to the batch mean instead.
    center_on_batch_mean: bool = False

    def __post_init__(self):
        self.kind = NormKind(self.kind)
        if self.groups < 1 or self.channels % self.groups:
            raise ValueError(f"{self.channels} channels cannot be split into {self.groups} groups")
        if self.running_mean is None:
            self.running_mean = np.zeros(self.channels)
        if self.running_var is None:
            self.running_var = np.ones(self.channels)

    @classmethod
    def create(cls, kind, channels: int, groups: int | None = None, dtype=None,
               affine_trainable: bool = True, **kw) -> NormState:
        kind = NormKind(kind)
        dtype = dtype or default_dtype()
        if groups is None:
            groups = default_groups(channels) if kind is not NormKind.BN else 1
        state = cls(kind=kind, channels=channels, groups=groups, **kw)
        if kind is NormKind.NONE:
            return state
        state.gamma = _param(channels, 1.0, dtype, affine_trainable)
        state.beta = _param(channels, 0.0, dtype, affine_trainable)
        if kind in (NormKind.BCN_LARGE, NormKind.BCN_MICRO):
            state.gamma_c = _param(channels, 1.0, dtype, affine_trainable)
            state.beta_c = _param(channels, 0.0, dtype, affine_trainable)
        if kind is NormKind.FIXED:
            state.fixed_mu = np.zeros(channels) if state.fixed_mu is None else np.asarray(state.fixed_mu, float)
            state.fixed_sigma = np.ones(channels) if state.fixed_sigma is None else np.asarray(state.fixed_sigma, float)
        return state

    def parameters(self) -> list[Tensor]:
        return [p for p in (self.gamma, self.beta, self.gamma_c, self.beta_c) if p is not None]

    def buffers(self) -> dict[str, np.ndarray]:
        out = {"running_mean": self.running_mean, "running_var": self.running_var}
        if self.fixed_mu is not None:
            out["fixed_mu"] = self.fixed_mu
            out["fixed_sigma"] = self.fixed_sigma
        return out


def sample_fixed_stats(channels: int, sigma_mu: float, sigma_sigma: float, rng: np.random.Generator):
    """Per-channel target mean ~ N(0, sigma_mu) and std = exp(N(0, sigma_sigma))."""
    mu = rng.normal(0.0, 1.0, size=channels) * sigma_mu
    sd = np.exp(rng.normal(0.0, 1.0, size=channels) * sigma_sigma)
    return mu, sd


def _bcast(v) -> np.ndarray | Tensor:
    if isinstance(v, Tensor):
        return v.reshape(1, -1, 1, 1)
    return np.asarray(v).reshape(1, -1, 1, 1)


def _affine(y: Tensor, gamma: Tensor | None, beta: Tensor | None) -> Tensor:
    if gamma is None:
        return y
    return y * _bcast(gamma) + _bcast(beta)


def _check_input(x: Tensor, state: NormState) -> None:
    if x.ndim != 4 or x.shape[1] != state.channels:
        raise ValueError(f"expected (B, {state.channels}, H, W) input, got {x.shape}")


def _bn_normalize(x: Tensor, state: NormState) -> Tensor:
    """Pre-affine BN output; updates running stats in train mode."""
    _check_input(x, state)
    b, c, h, w = x.shape
    if state.mode == "train":
        if b * h * w < 2:
            raise MicroBatchError(
                "batch normalization in train mode needs at least 2 values per channel "
                f"(got B*H*W = {b * h * w}); use a channel or micro-batch BCN normalization")
        y, mean, var = standardize(x, (0, 2, 3), state.eps)
        n = b * h * w
        m = state.momentum
        state.running_mean = (1 - m) * state.running_mean + m * mean.reshape(c)
        state.running_var = (1 - m) * state.running_var + m * var.reshape(c) * n / (n - 1)
        return y
    mean = state.running_mean.reshape(1, c, 1, 1).astype(x.dtype)
    inv = (1.0 / np.sqrt(state.running_var + state.eps)).reshape(1, c, 1, 1).astype(x.dtype)
    return (x - mean) * inv


def _cn_normalize(x: Tensor, groups: int, eps: float) -> Tensor:
    b, c, h, w = x.shape
    if c % groups:
        raise ValueError(f"{c} channels cannot be split into {groups} groups")
    y, _, _ = standardize(x.reshape(b, groups, (c // groups) * h * w), (2,), eps)
    return y.reshape(b, c, h, w)


def bn_forward(x: Tensor, state: NormState) -> Tensor:
    return _affine(_bn_normalize(x, state), state.gamma, state.beta)


def cn_forward(x: Tensor, state: NormState) -> Tensor:
    _check_input(x, state)
    return _affine(_cn_normalize(x, state.groups, state.eps), state.gamma, state.beta)


def fixed_stats_forward(x: Tensor, state: NormState) -> Tensor:
    """BN followed by a frozen per-channel rescale and shift, then the affine."""
    y = _bn_normalize(x, state)
    y = y * _bcast(state.fixed_sigma.astype(x.dtype)) + _bcast(state.fixed_mu.astype(x.dtype))
    return _affine(y, state.gamma, state.beta)


def bcn_large_forward(x: Tensor, state: NormState) -> Tensor:
    z = _affine(_bn_normalize(x, state), state.gamma, state.beta)
    return _affine(_cn_normalize(z, state.groups, state.eps), state.gamma_c, state.beta_c)


def bcn_micro_forward(x: Tensor, state: NormState) -> Tensor:
    """Estimate-based batch stage followed by CN; works for any batch size.

    In train mode the running estimates move toward the current batch by the
    update rate before normalizing. The estimates are plain buffers: no
    gradient flows through them.
    """
    _check_input(x, state)
    c = state.channels
    if state.mode == "train":
        xd = x.data.astype(np.float64)
        batch_mean = xd.mean(axis=(0, 2, 3))
        center = batch_mean if state.center_on_batch_mean else state.running_mean
        second = ((xd - center.reshape(1, c, 1, 1)) ** 2).mean(axis=(0, 2, 3))
        r = state.rate
        state.running_mean = state.running_mean + r * (batch_mean - state.running_mean)
        state.running_var = state.running_var + r * (second - state.running_var)
    mean = state.running_mean.reshape(1, c, 1, 1).astype(x.dtype)
    inv = (1.0 / np.sqrt(state.running_var + state.eps)).reshape(1, c, 1, 1).astype(x.dtype)
    z = _affine((x - mean) * inv, state.gamma, state.beta)
    return _affine(_cn_normalize(z, state.groups, state.eps), state.gamma_c, state.beta_c)


_DISPATCH = {
    NormKind.BN: bn_forward,
    NormKind.CN: cn_forward,
    NormKind.FIXED: fixed_stats_forward,
    NormKind.BCN_LARGE: bcn_large_forward,
    NormKind.BCN_MICRO: bcn_micro_forward,
}


def norm_forward(x: Tensor, state: NormState) -> Tensor:
    if state.kind is NormKind.NONE:
        return x
    return _DISPATCH[state.kind](x, state)
