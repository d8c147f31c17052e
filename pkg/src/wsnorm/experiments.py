"""Experiment drivers shared by the CLI and the acceptance tests."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, load_cifar10, standardize_channels, synth_blobs
from .diagnostics import (ChannelStatTracker, GradReductionRecorder, HessianReport, hessian_checks,
                          quadratic_toy_loss, statdiff, tiny_net_loss)
from .models import ModelSpec, build_model
from .norms import sample_fixed_stats
from .tensor import Tensor, no_grad
from .train import EpochRecord, TrainConfig, TrainingDiverged, train

__all__ = [
    "make_data",
    "SingularityGrid",
    "run_singularity_grid",
    "run_statdiff_experiment",
    "initial_statdiff",
    "LipschitzResult",
    "run_lipschitz",
    "run_hessian_suite",
    "final_val_error",
]


def make_data(dataset: str = "synth", path: str = "", n_train: int = 2000, n_val: int = 1000,
              image_size: int = 16, noise: float = 2.0, classes: int = 10) -> tuple[Dataset, Dataset]:
    """Train/val split, standardized per channel with train statistics."""
    if dataset == "cifar10":
        return load_cifar10(path, n_train, n_val)
    if dataset != "synth":
        raise ValueError(f"unknown dataset {dataset!r} (expected synth or cifar10)")
    tr = synth_blobs(1, n_train, classes=classes, size=image_size, noise=noise)
    va = synth_blobs(2, n_val, classes=classes, size=image_size, noise=noise)
    return standardize_channels(tr, va)


def final_val_error(history: list[EpochRecord]) -> float:
    return history[-1].val_err if history else float("nan")


# ---------------------------------------------------------------------------
# distance to singularities
# ---------------------------------------------------------------------------


@dataclass
class SingularityGrid:
    sigma_mu: tuple
    sigma_sigma: tuple
    accuracy: np.ndarray
    failed: np.ndarray
    threshold: float
    histories: dict = field(default_factory=dict)
    aborted: dict = field(default_factory=dict)

    def cell(self, sm: float, ss: float) -> float:
        return float(self.accuracy[self.sigma_mu.index(sm), self.sigma_sigma.index(ss)])

    def rows(self) -> list[dict]:
        out = []
        for i, sm in enumerate(self.sigma_mu):
            for j, ss in enumerate(self.sigma_sigma):
                out.append({"sigma_mu": sm, "sigma_sigma": ss, "accuracy": float(self.accuracy[i, j]),
                            "failed": bool(self.failed[i, j])})
        return out


def _fixed_stats_model(spec: ModelSpec, seed: int, sm: float, ss: float, dtype):
    model = build_model(spec, seed, dtype)
    rng = np.random.default_rng([seed, 99])
    for st in model.norm_states():
        st.fixed_mu, st.fixed_sigma = sample_fixed_stats(st.channels, sm, ss, rng)
    return model


def run_singularity_grid(data: tuple[Dataset, Dataset], sigma_mu, sigma_sigma, cfg: TrainConfig,
                         spec: ModelSpec | None = None, seed: int = 0, dtype=np.float32,
                         on_cell=None) -> SingularityGrid:
    """Train one fixed-statistics model per (sigma_mu, sigma_sigma) cell.

    The perturbation is drawn once per layer from its own RNG stream and
    stays frozen. A cell fails when its final accuracy is below 1.5x chance
    or training diverges.
    """
    if spec is None:
        spec = ModelSpec(norm="fixed")
    if spec.norm != "fixed":
        spec = dataclasses.replace(spec, norm="fixed")
    sigma_mu, sigma_sigma = tuple(float(v) for v in sigma_mu), tuple(float(v) for v in sigma_sigma)
    acc = np.zeros((len(sigma_mu), len(sigma_sigma)))
    failed = np.zeros_like(acc, dtype=bool)
    threshold = 1.5 / spec.num_classes
    grid = SingularityGrid(sigma_mu, sigma_sigma, acc, failed, threshold)
    for i, sm in enumerate(sigma_mu):
        for j, ss in enumerate(sigma_sigma):
            model = _fixed_stats_model(spec, seed, sm, ss, dtype)
            try:
                hist = train(model, data, cfg)
                acc[i, j] = 1.0 - hist[-1].val_err
                if not np.isfinite(acc[i, j]):
                    acc[i, j] = 1.0 / spec.num_classes
            except TrainingDiverged as exc:
                hist = []
                acc[i, j] = 1.0 / spec.num_classes
                grid.aborted[(sm, ss)] = exc.step
            failed[i, j] = acc[i, j] < threshold
            grid.histories[(sm, ss)] = hist
            if on_cell is not None:
                on_cell(sm, ss, acc[i, j], failed[i, j], model)
    return grid


# ---------------------------------------------------------------------------
# StatDiff tracking
# ---------------------------------------------------------------------------


def initial_statdiff(model, data: Dataset, n: int = 256) -> float:
    """Mean StatDiff of conv outputs over the first ``n`` samples, untrained."""
    model.eval()
    model.capture = True
    with no_grad():
        model(Tensor(data.x[:n]))
    vals = []
    for name, groups in model.conv_norm_pairs():
        act = model.captured[f"{name}.conv"].astype(np.float64)
        vals.append(statdiff(act.mean(axis=(0, 2, 3)), np.maximum(act.std(axis=(0, 2, 3)), 1e-12), groups))
    model.capture = False
    model.train()
    return float(np.concatenate(vals).mean())


def run_statdiff_experiment(data: tuple[Dataset, Dataset], spec: ModelSpec, cfg: TrainConfig,
                            seed: int = 0, dtype=np.float32) -> dict:
    """Train ``spec`` and return the StatDiff series: index 0 is the
    untrained model, index k the value after epoch k."""
    if spec.norm not in ("gn", "ln", "in"):
        raise ValueError("StatDiff tracking needs a channel-based norm (gn, ln, in)")
    model = build_model(spec, seed, dtype)
    base = initial_statdiff(model, data[0])
    tracker = ChannelStatTracker()
    hist = train(model, data, cfg, observers=[tracker])
    return {
        "statdiff_mean": [base] + [r.diagnostics.get("statdiff_mean", float("nan")) for r in hist],
        "statdiff_std": [0.0] + [r.diagnostics.get("statdiff_std", float("nan")) for r in hist],
        "val_err": [r.val_err for r in hist],
        "layers": tracker.history,
    }


# ---------------------------------------------------------------------------
# gradient identities and Hessians
# ---------------------------------------------------------------------------


@dataclass
class LipschitzResult:
    max_r1: float
    max_r2: float
    mean_ws_fraction: float
    steps: int
    records: list
    history: list


def run_lipschitz(data: tuple[Dataset, Dataset], cfg: TrainConfig, spec: ModelSpec | None = None,
                  seed: int = 0, every: int = 1) -> LipschitzResult:
    """Train a WS model in 64-bit, logging gradient reduction terms and the
    identity residuals at every ``every``-th optimizer step."""
    spec = spec or ModelSpec(norm="gn", reparam="ws", ws_eps=1e-10)
    if spec.reparam != "ws":
        raise ValueError("gradient reduction terms need reparam=ws")
    model = build_model(spec, seed, np.float64)
    rec = GradReductionRecorder(every=every)
    hist = train(model, data, cfg, observers=[rec])
    r1, r2 = rec.max_residuals()
    steps = len({r.step for r in rec.records})
    return LipschitzResult(r1, r2, rec.mean_ws_fraction(), steps, rec.records, hist)


def run_hessian_suite(seeds=range(5), h: float = 1e-4, tol: float = 1e-4,
                      toy_fan_in: int = 9) -> list[tuple[str, HessianReport]]:
    """Quadratic toy case plus one tiny conv network per seed."""
    rng = np.random.default_rng(0)
    out = [("toy", hessian_checks(quadratic_toy_loss, rng.normal(size=toy_fan_in), h, tol))]
    for s in seeds:
        loss_fn, row = tiny_net_loss(int(s))
        out.append((f"tiny_net_seed{s}", hessian_checks(loss_fn, row, h, tol)))
    return out
