"""Measurements on trained or training networks.

Everything here reads tensors and returns numbers; nothing writes to
parameters, gradients or normalization buffers, so attaching an observer to
a training run leaves its trajectory unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import ops
from .norms import NormKind, NormState
from .reparam import StandardizedWeight, ws_forward
from .tensor import Tensor, no_grad, verification_mode

__all__ = [
    "statdiff",
    "DiagnosticsRecord",
    "grad_reduction_terms",
    "GradReductionRecorder",
    "ChannelStatTracker",
    "finite_diff_hessian",
    "HessianReport",
    "hessian_checks",
    "quadratic_toy_loss",
    "tiny_net_loss",
    "channel_stat_propagation",
    "underrep_rate",
    "weight_elimination_ratio",
]


def _group_index(n_channels: int, groups) -> list[np.ndarray]:
    if isinstance(groups, (int, np.integer)):
        if groups < 1 or n_channels % groups:
            raise ValueError(f"{n_channels} channels cannot form {groups} equal groups")
        size = n_channels // groups
        return [np.arange(g * size, (g + 1) * size) for g in range(groups)]
    out = [np.asarray(g, dtype=int) for g in groups]
    if any(len(g) < 1 for g in out):
        raise ValueError("every group needs at least one channel")
    return out


def statdiff(channel_means, channel_stds, groups) -> np.ndarray:
    """Per-group std of channel means (population) over the mean channel std.

    ``groups`` is a group count (contiguous equal split) or a list of
    channel index arrays.
    """
    mu = np.asarray(channel_means, dtype=np.float64)
    sd = np.asarray(channel_stds, dtype=np.float64)
    if np.any(sd < 0):
        raise ValueError("channel stds must be non-negative")
    out = []
    for idx in _group_index(mu.size, groups):
        denom = sd[idx].mean()
        if denom <= 0:
            raise ValueError("mean of channel stds is zero in a group")
        out.append(mu[idx].std() / denom)
    return np.asarray(out)


# ---------------------------------------------------------------------------
# gradient reduction terms
# ---------------------------------------------------------------------------


@dataclass
class DiagnosticsRecord:
    layer: str
    step: int
    term_ws: float = 0.0
    term_mean: float = 0.0
    term_total: float = 0.0
    r1: float = 0.0
    r2: float = 0.0
    statdiff: list[float] = field(default_factory=list)
    underrep_rate: float | None = None

    @property
    def ws_fraction(self) -> float:
        total = self.term_ws + self.term_mean + self.term_total
        return self.term_ws / total if total > 0 else 0.0

    def as_metrics(self) -> dict[str, float]:
        out = {"term_ws": self.term_ws, "term_mean": self.term_mean, "term_total": self.term_total,
               "ws_fraction": self.ws_fraction, "r1": self.r1, "r2": self.r2}
        if self.underrep_rate is not None:
            out["underrep_rate"] = self.underrep_rate
        return out


def grad_reduction_terms(layer: StandardizedWeight, grad_w_hat=None, grad_centered=None, grad_w=None,
                         name: str = "", step: int = 0) -> DiagnosticsRecord:
    """The three gradient-norm components and the two identity residuals.

    Terms are averaged over output channels. ``r1`` and ``r2`` are the worst
    per-row residuals, relative to the squared norm of the gradient with
    respect to the standardized and the centered row respectively.
    Missing gradients are read from the tensors held by ``layer``.
    """
    def pick(explicit, t):
        if explicit is not None:
            return np.asarray(getattr(explicit, "data", explicit), dtype=np.float64)
        if t is None or t.grad is None:
            raise ValueError("gradients missing: run backward with WS tracking enabled first")
        return np.asarray(t.grad, dtype=np.float64)

    w_hat = np.asarray(layer.standardized.data, dtype=np.float64)
    o, n = w_hat.shape
    g = pick(grad_w_hat, layer.standardized).reshape(o, n)
    gd = pick(grad_centered, layer.centered).reshape(o, n)
    gw = pick(grad_w, layer.raw).reshape(o, n)
    sigma2 = np.asarray(layer.row_std, dtype=np.float64).reshape(o) ** 2

    dot_w = (w_hat * g).sum(axis=1)
    dot_1 = g.sum(axis=1)
    g2 = (g * g).sum(axis=1)
    gd2 = (gd * gd).sum(axis=1)
    gw2 = (gw * gw).sum(axis=1)
    term_ws = dot_w ** 2 / n
    term_mean = dot_1 ** 2 / n
    term_total = sigma2 * gw2
    r1 = np.abs(sigma2 * gd2 + term_ws - g2)
    r2 = np.abs(gw2 - gd2 + dot_1 ** 2 / (n * sigma2))
    with np.errstate(divide="ignore", invalid="ignore"):
        r1_rel = np.where(g2 > 0, r1 / g2, 0.0)
        r2_rel = np.where(gd2 > 0, r2 / gd2, 0.0)
    return DiagnosticsRecord(
        layer=name, step=step,
        term_ws=float(term_ws.mean()), term_mean=float(term_mean.mean()), term_total=float(term_total.mean()),
        r1=float(r1_rel.max()), r2=float(r2_rel.max()),
    )


class GradReductionRecorder:
    """Training observer logging gradient reduction terms of every WS conv.

    Needs ``iteration_size == 1`` so the raw-weight gradient belongs to the
    same forward pass as the standardized-weight gradient.
    """

    needs_ws_tracking = True

    def __init__(self, every: int = 1):
        self.every = every
        self.records: list[DiagnosticsRecord] = []

    def on_step(self, model, step: int, epoch: int, iteration_size: int = 1) -> None:
        if iteration_size != 1:
            raise ValueError("gradient reduction terms need iteration_size == 1")
        if step % self.every:
            return
        for name, conv in model.convs.items():
            if isinstance(conv.last, StandardizedWeight):
                self.records.append(grad_reduction_terms(conv.last, name=name, step=step))

    def on_epoch_end(self, model, epoch: int) -> dict[str, float]:
        return {}

    def max_residuals(self) -> tuple[float, float]:
        if not self.records:
            return 0.0, 0.0
        return max(r.r1 for r in self.records), max(r.r2 for r in self.records)

    def mean_ws_fraction(self) -> float:
        if not self.records:
            return 0.0
        return float(np.mean([r.ws_fraction for r in self.records]))


class ChannelStatTracker:
    """Running per-channel means/stds of conv outputs (EMA, momentum 0.1)
    and per-group StatDiff sampled at the end of each epoch."""

    needs_capture = True

    def __init__(self, momentum: float = 0.1):
        self.momentum = momentum
        self.mean: dict[str, np.ndarray] = {}
        self.std: dict[str, np.ndarray] = {}
        self.history: list[dict] = []

    def on_step(self, model, step: int, epoch: int, iteration_size: int = 1) -> None:
        m = self.momentum
        for name, _ in model.conv_norm_pairs():
            act = model.captured.get(f"{name}.conv")
            if act is None:
                continue
            act = act.astype(np.float64)
            bm = act.mean(axis=(0, 2, 3))
            bs = act.std(axis=(0, 2, 3))
            if name not in self.mean:
                self.mean[name], self.std[name] = bm, bs
            else:
                self.mean[name] = (1 - m) * self.mean[name] + m * bm
                self.std[name] = (1 - m) * self.std[name] + m * bs

    def layer_statdiff(self, model) -> dict[str, np.ndarray]:
        out = {}
        for name, groups in model.conv_norm_pairs():
            if name in self.mean:
                out[name] = statdiff(self.mean[name], np.maximum(self.std[name], 1e-12), groups)
        return out

    def on_epoch_end(self, model, epoch: int) -> dict[str, float]:
        per_layer = self.layer_statdiff(model)
        if not per_layer:
            return {}
        allv = np.concatenate(list(per_layer.values()))
        summary = {"statdiff_mean": float(allv.mean()), "statdiff_std": float(allv.std())}
        self.history.append({"epoch": epoch, **summary, "layers": {k: v.tolist() for k, v in per_layer.items()}})
        return summary


# ---------------------------------------------------------------------------
# Hessian checks
# ---------------------------------------------------------------------------


def finite_diff_hessian(grad_fn: Callable[[np.ndarray], np.ndarray], x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central differences of an analytic gradient, symmetrized."""
    x = np.asarray(x, dtype=np.float64)
    n = x.size
    hess = np.zeros((n, n))
    for j in range(n):
        e = np.zeros(n)
        e[j] = h
        hess[:, j] = (grad_fn(x + e) - grad_fn(x - e)) / (2 * h)
    return 0.5 * (hess + hess.T)


def _autodiff_grad(loss_fn: Callable[[Tensor], Tensor]) -> Callable[[np.ndarray], np.ndarray]:
    def grad(v: np.ndarray) -> np.ndarray:
        t = Tensor(v.copy(), requires_grad=True, dtype=np.float64)
        loss = loss_fn(t)
        if not np.isfinite(loss.data).all():
            raise FloatingPointError("non-finite loss during Hessian evaluation")
        loss.backward()
        return np.asarray(t.grad, dtype=np.float64)

    return grad


@dataclass
class HessianReport:
    fan_in: int
    hessian: np.ndarray
    hessian_centered_input: np.ndarray
    total_sum: float
    max_row_sum: float
    max_col_sum: float
    frob2: float
    frob2_bound: float
    tol: float

    @property
    def zero_sum_ok(self) -> bool:
        return max(abs(self.total_sum), self.max_row_sum, self.max_col_sum) < self.tol

    @property
    def frobenius_ok(self) -> bool:
        return self.frob2 <= self.frob2_bound + self.tol


def hessian_checks(loss_fn: Callable[[Tensor], Tensor], w_row, h: float = 1e-4, tol: float = 1e-4) -> HessianReport:
    """Compare the Hessian in the raw row (through mean subtraction) with the
    Hessian in the centered row.

    ``loss_fn`` maps a centered weight row (1-d tensor) to a scalar loss.
    """
    w_row = np.asarray(w_row, dtype=np.float64).reshape(-1)
    n = w_row.size

    def through_centering(w: Tensor) -> Tensor:
        return loss_fn(w - w.mean())

    with verification_mode():
        centered = w_row - w_row.mean()
        h_dot = finite_diff_hessian(_autodiff_grad(loss_fn), centered, h)
        h_raw = finite_diff_hessian(_autodiff_grad(through_centering), w_row, h)
    s_dot = h_dot.sum()
    return HessianReport(
        fan_in=n,
        hessian=h_raw,
        hessian_centered_input=h_dot,
        total_sum=float(h_raw.sum()),
        max_row_sum=float(np.abs(h_raw.sum(axis=1)).max()),
        max_col_sum=float(np.abs(h_raw.sum(axis=0)).max()),
        frob2=float((h_raw ** 2).sum()),
        frob2_bound=float((h_dot ** 2).sum() - s_dot ** 2 / n ** 2),
        tol=tol,
    )


def quadratic_toy_loss(v: Tensor) -> Tensor:
    return (v * v).sum() * 0.5


def tiny_net_loss(seed: int, cin: int = 1, k: int = 3, cout: int = 3, size: int = 6, batch: int = 4,
                  classes: int = 3, row: int = 0):
    """A tiny conv -> GN -> ReLU -> pool -> linear network whose loss is
    exposed as a function of one (centered) row of its conv weight.

    Returns ``(loss_fn, w_row)``.
    """
    rng = np.random.default_rng(seed)
    fan_in = cin * k * k
    w = rng.normal(0, 1.0 / np.sqrt(fan_in), size=(cout, fan_in))
    x = Tensor(rng.normal(size=(batch, cin, size, size)))
    fc = Tensor(rng.normal(0, 1.0, size=(classes, cout)))
    labels = rng.integers(0, classes, size=batch)
    gn = NormState.create(NormKind.CN, cout, groups=1, dtype=np.float64)
    gn.gamma.requires_grad = False
    gn.beta.requires_grad = False

    def loss_fn(v: Tensor) -> Tensor:
        from .norms import cn_forward

        rows = [Tensor(w[i]) if i != row else v for i in range(cout)]
        wt = _stack_rows(rows).reshape(cout, cin, k, k)
        y = ops.relu(cn_forward(ops.conv2d(x, wt, 1, 1), gn))
        return ops.softmax_cross_entropy(ops.linear(ops.global_avg_pool(y), fc), labels)

    return loss_fn, w[row].copy()


def _stack_rows(rows: list[Tensor]) -> Tensor:
    """Stack 1-d tensors into a matrix with gradient routed back to each row."""
    data = np.stack([r.data for r in rows])

    def backward(g):
        return tuple(g[i] for i in range(len(rows)))

    return Tensor._from_op(data, tuple(rows), backward, "stack_rows")


# ---------------------------------------------------------------------------
# statistics propagation and underrepresented channels
# ---------------------------------------------------------------------------


def channel_stat_propagation(seeds: int = 20, cin: int = 16, cout: int = 16, k: int = 3, size: int = 8,
                             batch: int = 32, in_mean: float = 0.5, in_std: float = 1.0,
                             groups: int = 1) -> dict:
    """Push inputs with identical per-channel statistics through one conv,
    with and without WS, and compare the StatDiff of its output channels.

    The raw weights are drawn with a per-row offset so the unstandardized
    rows have non-zero sums, as happens after training.
    """
    with_ws, without = [], []
    mean_spread = []
    for s in range(seeds):
        rng = np.random.default_rng(s)
        fan_in = cin * k * k
        raw = rng.normal(0, 1.0 / np.sqrt(fan_in), size=(cout, cin, k, k))
        raw += rng.normal(0, 0.5 / np.sqrt(fan_in), size=(cout, 1, 1, 1))
        x = Tensor(in_mean + in_std * rng.normal(size=(batch, cin, size, size)))
        with no_grad():
            wt_ws = ws_forward(Tensor(raw), 1e-10).reshape(raw.shape)
            wt_plain = Tensor(raw * np.sqrt(fan_in) / np.sqrt((raw ** 2).sum(axis=(1, 2, 3), keepdims=True)))
            for wt, bucket in ((wt_ws, with_ws), (wt_plain, without)):
                y = ops.conv2d(x, wt, 1, 0).data
                mu, sd = y.mean(axis=(0, 2, 3)), y.std(axis=(0, 2, 3))
                bucket.append(float(statdiff(mu, sd, groups).mean()))
                if bucket is with_ws:
                    mean_spread.append(float(np.abs(mu).max() / sd.mean()))
    return {
        "statdiff_ws": float(np.mean(with_ws)),
        "statdiff_plain": float(np.mean(without)),
        "ws_max_abs_mean_over_std": float(np.mean(mean_spread)),
        "per_seed_ws": with_ws,
        "per_seed_plain": without,
    }


def underrep_rate(pre_relu, groups=None, percentile: float = 95.0, threshold: float = 0.0) -> float:
    """Fraction of channels whose ``percentile``-th activation is <= ``threshold``.

    ``pre_relu`` is (N, C, H, W) or (N, C), recorded after normalization and
    before the ReLU. ``groups`` is accepted for symmetry with ``statdiff``;
    the rate is per layer.
    """
    a = np.asarray(pre_relu, dtype=np.float64)
    if a.size == 0:
        raise ValueError("empty activation sample")
    c = a.shape[1]
    per_channel = np.moveaxis(a, 1, 0).reshape(c, -1)
    q = np.percentile(per_channel, percentile, axis=1)
    return float(np.mean(q <= threshold))


def weight_elimination_ratio(model) -> float:
    """Mean over conv layers (after the first) of min/avg L1 norm of the
    weights reading each input channel."""
    ratios = []
    for i, conv in enumerate(model.convs.values()):
        if i == 0:
            continue
        w = np.abs(conv.effective_weight().data.astype(np.float64))
        per_in = w.sum(axis=(0, 2, 3))
        ratios.append(per_in.min() / per_in.mean())
    return float(np.mean(ratios)) if ratios else float("nan")

