"""Autodiff versus central finite differences for every differentiable op.

All checks run in 64-bit verification mode. The error measure is
``max|autodiff - fd| / max(|autodiff|_inf, |fd|_inf)``.
"""

from __future__ import annotations

import copy
from typing import Callable

import numpy as np

from . import ops
from .models import ModelSpec, build_model
from .norms import (NormKind, NormState, bcn_large_forward, bcn_micro_forward, bn_forward, cn_forward,
                    fixed_stats_forward)
from .reparam import cwn_forward, wn_forward, ws_forward
from .tensor import Tensor, finite_diff_grad, verification_mode

__all__ = ["rel_error", "check_tensor_fn", "check_model", "OP_CHECKS", "run_gradcheck"]


def rel_error(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0))
    if scale == 0:
        return 0.0
    return float(np.abs(a - b).max() / scale)


def check_tensor_fn(fn: Callable[..., Tensor], inputs: list[np.ndarray], rng: np.random.Generator,
                    h: float = 1e-5) -> float:
    """Relative error of the gradient of ``sum(fn(*inputs) * R)`` w.r.t. all inputs."""
    probe = fn(*[Tensor(a) for a in inputs])
    weights = rng.normal(size=probe.shape) if probe.size > 1 else np.ones(probe.shape)

    def scalar(*ts):
        return (fn(*ts) * weights).sum()

    tensors = [Tensor(a, requires_grad=True) for a in inputs]
    scalar(*tensors).backward()
    analytic, numeric = [], []
    for i, t in enumerate(tensors):
        def f(x, i=i):
            args = [Tensor(a) for a in inputs]
            args[i] = x
            return scalar(*args)

        numeric.append(finite_diff_grad(f, Tensor(inputs[i]), h).ravel())
        analytic.append(np.asarray(t.grad).ravel())
    # one scale for all inputs: some parameters have exactly zero gradient
    return rel_error(np.concatenate(analytic), np.concatenate(numeric))


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


# ---------------------------------------------------------------------------
# per-op checks, each (seed) -> max relative error
# ---------------------------------------------------------------------------


def _conv(seed):
    rng = np.random.default_rng(seed)
    b, cin, o = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 5)
    k = int(rng.choice([1, 2, 3]))
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    h = int(rng.integers(max(k, 3), 7))
    x, w = rng.normal(size=(b, cin, h, h)), rng.normal(size=(o, cin, k, k))
    return check_tensor_fn(lambda a, c: ops.conv2d(a, c, stride, pad), [x, w], rng)


def _relu(seed):
    rng = np.random.default_rng(seed)
    return check_tensor_fn(ops.relu, [_away_from_zero(rng, (2, 3, 4, 4))], rng)


def _avg_pool(seed):
    rng = np.random.default_rng(seed)
    return check_tensor_fn(ops.avg_pool2, [rng.normal(size=(2, 3, 4, 6))], rng)


def _gap(seed):
    rng = np.random.default_rng(seed)
    return check_tensor_fn(ops.global_avg_pool, [rng.normal(size=(2, 3, 3, 5))], rng)


def _linear(seed):
    rng = np.random.default_rng(seed)
    return check_tensor_fn(ops.linear, [rng.normal(size=(3, 5)), rng.normal(size=(4, 5))], rng)


def _xent(seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 4, size=5)
    return check_tensor_fn(lambda z: ops.softmax_cross_entropy(z, labels), [rng.normal(size=(5, 4))], rng)


def _shortcut(seed):
    rng = np.random.default_rng(seed)
    return check_tensor_fn(lambda a: ops.shortcut_pad(a, 6), [rng.normal(size=(2, 2, 4, 4))], rng)


def _norm_check(kind, fwd, seed, groups=None, rate=0.0, batch=3):
    rng = np.random.default_rng(seed)
    c = 4
    g = groups if groups is not None else int(rng.choice([1, 2, 4]))
    x = rng.normal(1.0, 2.0, size=(batch, c, 3, 3))
    state = NormState.create(kind, c, groups=g, dtype=np.float64, rate=rate)
    for p in state.parameters():
        p.data = rng.normal(1.0, 0.3, size=p.shape)
    if kind is NormKind.FIXED:
        state.fixed_mu = rng.normal(size=c)
        state.fixed_sigma = np.exp(rng.normal(size=c) * 0.3)
    params = [p.data.copy() for p in state.parameters()]

    def fn(xt, *ps):
        s = copy.copy(state)
        s.running_mean, s.running_var = state.running_mean.copy(), state.running_var.copy()
        for name, p in zip(("gamma", "beta", "gamma_c", "beta_c"), ps):
            setattr(s, name, p)
        return fwd(xt, s)

    return check_tensor_fn(fn, [x] + params, rng)


def _bn(seed):
    return _norm_check(NormKind.BN, bn_forward, seed)


def _bn_eval(seed):
    rng = np.random.default_rng(seed + 1000)

    def fwd(x, s):
        s.mode = "eval"
        s.running_mean = rng_mean
        s.running_var = rng_var
        return bn_forward(x, s)

    rng_mean, rng_var = rng.normal(size=4), np.exp(rng.normal(size=4))
    return _norm_check(NormKind.BN, fwd, seed)


def _cn(seed):
    return _norm_check(NormKind.CN, cn_forward, seed)


def _fixed(seed):
    return _norm_check(NormKind.FIXED, fixed_stats_forward, seed)


def _bcn_large(seed):
    return _norm_check(NormKind.BCN_LARGE, bcn_large_forward, seed)


def _bcn_micro(seed):
    # The estimate update is off-tape; the oracle differentiates the
    # post-update normalization with the estimates held fixed.
    rng = np.random.default_rng(seed)
    c = 4
    state = NormState.create(NormKind.BCN_MICRO, c, groups=2, dtype=np.float64, rate=0.3)
    x = rng.normal(2.0, 1.5, size=(1, c, 3, 3))
    bcn_micro_forward(Tensor(x), state)  # one update step
    state.mode = "eval"
    return _norm_check(NormKind.BCN_MICRO, lambda xt, s: bcn_micro_forward(xt, _frozen(s, state)), seed,
                       groups=2, batch=1)


def _frozen(s, ref):
    s.mode = "eval"
    s.running_mean, s.running_var = ref.running_mean.copy(), ref.running_var.copy()
    return s


def _ws(seed):
    rng = np.random.default_rng(seed)
    o, n = rng.integers(1, 5), rng.integers(2, 20)
    return check_tensor_fn(lambda w: ws_forward(w, 1e-10), [rng.normal(size=(o, n))], rng)


def _wn(seed):
    rng = np.random.default_rng(seed)
    o, n = rng.integers(1, 5), rng.integers(2, 20)
    return check_tensor_fn(wn_forward, [rng.normal(size=(o, n)), rng.normal(size=o)], rng)


def _cwn(seed):
    rng = np.random.default_rng(seed)
    o, n = rng.integers(1, 5), rng.integers(2, 20)
    return check_tensor_fn(cwn_forward, [rng.normal(size=(o, n)), rng.normal(size=o)], rng)


def check_model(spec: ModelSpec, seed: int, batch: int = 4, size: int | None = None, h: float = 1e-5,
                directions: int = 2, max_tries: int = 20) -> float:
    """Directional derivatives of the loss along random directions, one
    parameter tensor at a time, against central differences.

    Directions whose stencil flips any ReLU are redrawn with a smaller
    step: the loss is not differentiable across the kink, so the
    difference quotient is not an oracle there.
    """
    if size is None:
        size = 16 if spec.architecture == "convnet4" else 8  # four 2x poolings need 16
    model = build_model(spec, seed, np.float64)
    model.set_rate(0.0)
    rng = np.random.default_rng([seed, 7])
    x = rng.normal(size=(batch, spec.in_channels, size, size))
    y = rng.integers(0, spec.num_classes, size=batch)

    def loss():
        return ops.softmax_cross_entropy(model(x), y)

    model.zero_grad()
    with ops.recording_relu_masks() as base:
        loss().backward()
    analytic, numeric = [], []
    for _, p in model.named_parameters():
        orig = p.data.copy()
        grad = p.grad.copy()

        def evaluate(v, step):
            p.data = orig + step * v
            with ops.recording_relu_masks() as masks:
                value = float(loss().data)
            p.data = orig
            same = all(np.array_equal(a, b) for a, b in zip(masks, base))
            return value, same

        for _ in range(directions):
            for attempt in range(max_tries):
                step = h * 0.5 ** (attempt // 2)
                v = rng.normal(size=orig.shape)
                (up, ok_up), (down, ok_down) = evaluate(v, step), evaluate(v, -step)
                if ok_up and ok_down:
                    break
            else:
                raise RuntimeError(f"no kink-free direction found for {spec} seed {seed}")
            analytic.append(np.sum(grad * v))
            numeric.append((up - down) / (2 * step))
    return rel_error(analytic, numeric)


def _model_check(spec_kwargs):
    def run(seed):
        return check_model(ModelSpec(width=4, **spec_kwargs), seed)
    return run


OP_CHECKS: dict[str, Callable[[int], float]] = {
    "conv2d": _conv,
    "relu": _relu,
    "avg_pool2": _avg_pool,
    "global_avg_pool": _gap,
    "linear": _linear,
    "softmax_cross_entropy": _xent,
    "shortcut_pad": _shortcut,
    "bn_train": _bn,
    "bn_eval": _bn_eval,
    "cn": _cn,
    "fixed_stats": _fixed,
    "bcn_large": _bcn_large,
    "bcn_micro": _bcn_micro,
    "ws": _ws,
    "wn": _wn,
    "cwn": _cwn,
    "convnet4_bn": _model_check({"norm": "bn"}),
    "convnet4_gn_ws": _model_check({"norm": "gn", "reparam": "ws"}),
    "convnet4_bcn_micro_ws": _model_check({"norm": "bcn_micro", "reparam": "ws"}),
    "convnet4_cwn_ln": _model_check({"norm": "ln", "reparam": "cwn"}),
    "miniresnet8_gn_ws": _model_check({"architecture": "miniresnet", "depth": 8, "norm": "gn", "reparam": "ws"}),
}


def run_gradcheck(seeds=range(20), ops_subset=None, model_seeds=None) -> dict[str, float]:
    """Max relative error per op over ``seeds`` (model checks over
    ``model_seeds``, default the same seeds)."""
    out = {}
    with verification_mode():
        for name, check in OP_CHECKS.items():
            if ops_subset is not None and name not in ops_subset:
                continue
            use = model_seeds if (model_seeds is not None and "_" in name and name.split("_")[0] in
                                  ("convnet4", "miniresnet8")) else seeds
            out[name] = max(check(int(s)) for s in use)
    return out
