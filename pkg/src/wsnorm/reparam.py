"""Weight reparameterizations for convolution weights viewed as O x I rows.

Weight Standardization (WS) maps each row to zero mean and unit population
variance and is trained by plain SGD on the raw weights, so gradients flow
through the row mean and standard deviation. Weight Normalization (WN) and
Centered Weight Normalization (CWN) are the comparison points; both carry a
learnable per-row gain.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, as_tensor, sqrt, square, tmean

__all__ = [
    "ReparamKind",
    "StandardizedWeight",
    "default_ws_eps",
    "ws_forward",
    "ws_parts",
    "ws_backward_analytic",
    "wn_forward",
    "cwn_forward",
    "standardize_rows",
    "pgd_step",
    "reparameterize",
]


class ReparamKind(str, enum.Enum):
    NONE = "none"
    WS = "ws"
    WN = "wn"
    CWN = "cwn"


def default_ws_eps(dtype) -> float:
    return 1e-10 if np.dtype(dtype) == np.float64 else 1e-5


def _rows(raw: Tensor) -> Tensor:
    return raw if raw.ndim == 2 else raw.reshape(raw.shape[0], -1)


@dataclass
class StandardizedWeight:
    """A weight seen as O rows of length I together with its reparameterized
    form and the per-row statistics used to produce it."""

    raw: Tensor
    row_mean: np.ndarray
    row_std: np.ndarray
    eps: float
    standardized: Tensor
    reparam_kind: ReparamKind = ReparamKind.WS
    wn_gain: Tensor | None = None
    centered: Tensor | None = None

    @property
    def out_channels(self) -> int:
        return self.standardized.shape[0]

    @property
    def fan_in(self) -> int:
        return self.standardized.shape[1]


def ws_parts(raw: Tensor, eps: float) -> StandardizedWeight:
    """WS forward keeping the centered weights and row statistics.

    The centered tensor is the tape node between mean subtraction and the
    division by the row standard deviation, so its ``grad`` can be retained.
    """
    w = _rows(raw)
    o, i = w.shape
    if i < 2:
        raise ValueError(f"weight standardization needs at least 2 entries per row, got I={i}")
    if eps < 0:
        raise ValueError("eps must be non-negative")
    mu = tmean(w, axis=1, keepdims=True)
    centered = w - mu
    sigma = sqrt(tmean(square(centered), axis=1, keepdims=True) + eps)
    w_hat = centered / sigma
    return StandardizedWeight(
        raw=raw,
        row_mean=mu.data.reshape(o).copy(),
        row_std=sigma.data.reshape(o).copy(),
        eps=eps,
        standardized=w_hat,
        reparam_kind=ReparamKind.WS,
        centered=centered,
    )


def ws_forward(raw: Tensor, eps: float) -> Tensor:
    """Standardize each output-channel row; result has the shape of ``w`` as O x I."""
    return ws_parts(as_tensor(raw), eps).standardized


def ws_backward_analytic(w_hat, grad_w_hat, row_std) -> np.ndarray:
    """Closed-form gradient with respect to the raw weights.

    First removes the component of the upstream gradient along the
    standardized row and divides by the row std, then removes the row mean.
    """
    w_hat = np.asarray(getattr(w_hat, "data", w_hat), dtype=np.float64)
    g = np.asarray(getattr(grad_w_hat, "data", grad_w_hat), dtype=np.float64)
    sigma = np.asarray(getattr(row_std, "data", row_std), dtype=np.float64).reshape(-1, 1)
    if w_hat.shape != g.shape:
        raise ValueError(f"shape mismatch: w_hat {w_hat.shape} vs grad {g.shape}")
    if sigma.shape[0] != w_hat.shape[0]:
        raise ValueError(f"row_std has {sigma.shape[0]} entries for {w_hat.shape[0]} rows")
    n = w_hat.shape[1]
    proj = (w_hat * g).sum(axis=1, keepdims=True) / n
    grad_centered = (g - proj * w_hat) / sigma
    return grad_centered - grad_centered.mean(axis=1, keepdims=True)


def wn_forward(raw: Tensor, gain) -> Tensor:
    w = _rows(as_tensor(raw))
    norms = np.sqrt((w.data.astype(np.float64) ** 2).sum(axis=1))
    if np.any(norms == 0):
        raise ValueError("weight normalization undefined for an all-zero row")
    norm = sqrt((square(w)).sum(axis=1, keepdims=True))
    g = as_tensor(gain).reshape(-1, 1)
    return g * (w / norm)


def cwn_forward(raw: Tensor, gain) -> Tensor:
    w = _rows(as_tensor(raw))
    centered = w - tmean(w, axis=1, keepdims=True)
    norms = np.sqrt((centered.data.astype(np.float64) ** 2).sum(axis=1))
    if np.any(norms <= 1e-300):
        raise ValueError("centered weight normalization undefined for a constant row")
    norm = sqrt((square(centered)).sum(axis=1, keepdims=True))
    g = as_tensor(gain).reshape(-1, 1)
    return g * (centered / norm)


def reparameterize(raw: Tensor, kind: ReparamKind | str, eps: float = 1e-10, gain=None) -> Tensor:
    """Effective conv weight (same shape as ``raw``) for the given kind."""
    kind = ReparamKind(kind)
    if kind is ReparamKind.NONE:
        return raw
    if kind is ReparamKind.WS:
        out = ws_forward(raw, eps)
    elif kind is ReparamKind.WN:
        out = wn_forward(raw, gain)
    else:
        out = cwn_forward(raw, gain)
    return out.reshape(raw.shape)


def standardize_rows(v: np.ndarray) -> np.ndarray:
    """Projection onto {row sum 0, row sum of squares = I}."""
    v = np.asarray(v, dtype=np.float64)
    c = v - v.mean(axis=1, keepdims=True)
    sd = np.sqrt((c * c).mean(axis=1, keepdims=True))
    if np.any(sd <= 1e-300):
        raise ValueError("projection undefined: a row became constant")
    return c / sd


def pgd_step(w_hat, grad_w_hat, lr: float, variant: str = "exact_project", check_tol: float = 1e-8) -> np.ndarray:
    """One projected-gradient step on standardized rows.

    ``exact_project`` takes the plain step and re-standardizes each row.
    ``lagrangian`` applies the first-order update that keeps the step in the
    tangent space of the constraint set; it agrees with ``exact_project`` up
    to O(lr^2).
    """
    w_hat = np.asarray(getattr(w_hat, "data", w_hat), dtype=np.float64)
    g = np.asarray(getattr(grad_w_hat, "data", grad_w_hat), dtype=np.float64)
    if w_hat.shape != g.shape:
        raise ValueError(f"shape mismatch: w_hat {w_hat.shape} vs grad {g.shape}")
    n = w_hat.shape[1]
    if (np.abs(w_hat.sum(axis=1)).max() > check_tol * n
            or np.abs((w_hat ** 2).sum(axis=1) - n).max() > check_tol * n):
        raise ValueError("w_hat does not satisfy the zero-mean / sum-of-squares-I constraints")
    if variant == "exact_project":
        return standardize_rows(w_hat - lr * g)
    if variant == "lagrangian":
        along_w = (w_hat * g).sum(axis=1, keepdims=True) / n
        along_one = g.sum(axis=1, keepdims=True) / n
        out = w_hat - lr * (g - along_w * w_hat - along_one)
        if np.any(np.abs(out - out.mean(axis=1, keepdims=True)).max(axis=1) <= 1e-300):
            raise ValueError("lagrangian step produced a degenerate row")
        return out
    raise ValueError(f"unknown PGD variant {variant!r}")
