"""SGD training with momentum, weight decay and gradient accumulation."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import ops
from .data import Dataset, augment, iterate_batches
from .models import Model
from .norms import MicroBatchError, NormKind
from .reparam import ReparamKind, pgd_step, standardize_rows
from .tensor import NonFiniteError, checking_finite, no_grad

__all__ = ["TrainConfig", "EpochRecord", "TrainingDiverged", "SGD", "Trainer", "train", "evaluate"]


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, epoch: int, loss: float):
        super().__init__(f"loss became {loss} at optimizer step {step} (epoch {epoch})")
        self.step, self.epoch, self.loss = step, epoch, loss


@dataclass
class TrainConfig:
    lr: float = 0.1
    decay_epochs: tuple = ()
    decay_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 32
    iteration_size: int = 1
    epochs: int = 10
    seed: int = 0
    augment: bool = False
    aug_pad: int = 2
    ws_optimizer: str = "sgd"  # sgd | pgd_exact | pgd_lagrangian
    check_finite: bool = False
    eval_batch: int = 250

    def __post_init__(self):
        self.decay_epochs = tuple(int(e) for e in self.decay_epochs)
        if self.batch_size < 1 or self.iteration_size < 1:
            raise ValueError("batch_size and iteration_size must be >= 1")
        if self.ws_optimizer not in ("sgd", "pgd_exact", "pgd_lagrangian"):
            raise ValueError(f"unknown ws_optimizer {self.ws_optimizer!r}")

    @property
    def effective_batch(self) -> int:
        return self.batch_size * self.iteration_size

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.decay_factor ** sum(1 for e in self.decay_epochs if epoch >= e)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["decay_epochs"] = list(self.decay_epochs)
        return d


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_err: float
    val_err: float
    diagnostics: dict = field(default_factory=dict)


def _decays(name: str) -> bool:
    return name.endswith(".weight")


class SGD:
    """Momentum SGD: ``v = m v + (g + wd w)``, ``w -= lr v``.

    Weight decay applies to conv and classifier weights (raw weights for
    reparameterized convs) and skips normalization affines and WN gains.
    """

    def __init__(self, named_params, momentum: float, weight_decay: float):
        self.named = list(named_params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {name: np.zeros(p.shape) for name, p in self.named}

    def step(self, lr: float, scale: float = 1.0, skip: set | None = None) -> None:
        for name, p in self.named:
            if p.grad is None or not p.requires_grad or (skip and name in skip):
                continue
            g = p.grad * scale
            if self.weight_decay and _decays(name):
                g = g + self.weight_decay * p.data
            v = self.velocity[name]
            v *= self.momentum
            v += g
            p.data -= (lr * v).astype(p.dtype)


def evaluate(model: Model, data: Dataset, batch: int = 250) -> tuple[float, float]:
    """(mean loss, error rate) in eval mode."""
    prev = model.mode
    model.eval()
    losses, wrong = 0.0, 0
    with no_grad():
        for start in range(0, len(data), batch):
            xb, yb = data.x[start:start + batch], data.y[start:start + batch]
            logits = model(xb)
            losses += float(ops.softmax_cross_entropy(logits, yb).data) * len(yb)
            wrong += int((logits.data.argmax(axis=1) != yb).sum())
    if prev == "train":
        model.train()
    return losses / max(len(data), 1), wrong / max(len(data), 1)


class Trainer:
    """Stateful training loop; checkpointable between epochs."""

    def __init__(self, model: Model, cfg: TrainConfig, observers=()):
        self.model = model
        self.cfg = cfg
        self.observers = list(observers)
        self.opt = SGD(model.named_parameters(), cfg.momentum, cfg.weight_decay)
        self.rng = np.random.default_rng([cfg.seed, 1])
        self.epoch = 0
        self.step = 0
        self.history: list[EpochRecord] = []
        self._pgd_layers = []
        if cfg.ws_optimizer != "sgd":
            for name, conv in model.convs.items():
                if conv.reparam is ReparamKind.WS:
                    shape = conv.weight.shape
                    conv.weight.data = standardize_rows(conv.weight.data.reshape(shape[0], -1)) \
                        .reshape(shape).astype(conv.weight.dtype)
                    self._pgd_layers.append(name)

    def _uses_tracking(self) -> bool:
        return bool(self._pgd_layers) or any(getattr(o, "needs_ws_tracking", False) for o in self.observers)

    def _uses_capture(self) -> bool:
        return any(getattr(o, "needs_capture", False) for o in self.observers)

    def _pgd_update(self, lr: float, scale: float, accum: dict) -> None:
        variant = "exact_project" if self.cfg.ws_optimizer == "pgd_exact" else "lagrangian"
        for name in self._pgd_layers:
            conv = self.model.convs[name]
            shape = conv.weight.shape
            w_hat = standardize_rows(conv.weight.data.reshape(shape[0], -1))
            new = pgd_step(w_hat, accum[name] * scale, lr, variant, check_tol=1e-6)
            conv.weight.data = new.reshape(shape).astype(conv.weight.dtype)

    def run_epoch(self, train_data: Dataset, val_data: Dataset | None = None) -> EpochRecord:
        cfg, model = self.cfg, self.model
        model.train()
        model.track_ws(self._uses_tracking())
        model.capture = self._uses_capture()
        lr = cfg.lr_at(self.epoch)
        model.set_rate(lr)
        k = cfg.iteration_size
        batches = list(iterate_batches(len(train_data), cfg.batch_size, self.rng))
        n_steps = len(batches) // k
        tot_loss, tot_wrong, seen = 0.0, 0, 0
        skip = set(f"{n}.weight" for n in self._pgd_layers)
        quiet = {} if cfg.check_finite else {"over": "ignore", "invalid": "ignore", "divide": "ignore"}
        try:
            with checking_finite(cfg.check_finite), np.errstate(**quiet):
                for s in range(n_steps):
                    model.zero_grad()
                    accum = {}
                    for m in range(k):
                        idx = batches[s * k + m]
                        xb = train_data.x[idx]
                        if cfg.augment:
                            xb = augment(xb, self.rng, cfg.aug_pad)
                        yb = train_data.y[idx]
                        logits = model(xb)
                        loss = ops.softmax_cross_entropy(logits, yb)
                        lv = float(loss.data)
                        if not math.isfinite(lv):
                            raise TrainingDiverged(self.step, self.epoch, lv)
                        loss.backward()
                        for name in self._pgd_layers:
                            g = model.convs[name].last.standardized.grad
                            accum[name] = accum.get(name, 0.0) + g
                        tot_loss += lv * len(yb)
                        tot_wrong += int((logits.data.argmax(axis=1) != yb).sum())
                        seen += len(yb)
                    for obs in self.observers:
                        obs.on_step(model, self.step, self.epoch, k)
                    self.opt.step(lr, 1.0 / k, skip)
                    if self._pgd_layers:
                        self._pgd_update(lr, 1.0 / k, accum)
                    self.step += 1
        except NonFiniteError as exc:
            raise TrainingDiverged(self.step, self.epoch, float("nan")) from exc
        model.capture = False
        model.track_ws(False)
        diag = {}
        for obs in self.observers:
            diag.update(obs.on_epoch_end(model, self.epoch) or {})
        val_err = float("nan")
        if val_data is not None:
            try:
                with checking_finite(cfg.check_finite), np.errstate(**quiet):
                    val_loss, val_err = evaluate(model, val_data, cfg.eval_batch)
            except NonFiniteError:
                val_loss = float("nan")
            if not math.isfinite(val_loss):
                # parameters blew up on the last step
                raise TrainingDiverged(self.step - 1, self.epoch, val_loss)
        rec = EpochRecord(self.epoch, tot_loss / max(seen, 1), tot_wrong / max(seen, 1), val_err, diag)
        self.history.append(rec)
        self.epoch += 1
        return rec

    def fit(self, train_data: Dataset, val_data: Dataset | None = None, epochs: int | None = None,
            on_epoch=None) -> list[EpochRecord]:
        stop = self.cfg.epochs if epochs is None else epochs
        while self.epoch < stop:
            rec = self.run_epoch(train_data, val_data)
            if on_epoch is not None:
                on_epoch(self, rec)
        return self.history


def train(model: Model, data, cfg: TrainConfig, observers=()) -> list[EpochRecord]:
    """Train ``model`` on ``data`` = (train, val) or a single Dataset."""
    train_data, val_data = data if isinstance(data, tuple) else (data, None)
    _check_batch_contract(model, cfg)
    return Trainer(model, cfg, observers).fit(train_data, val_data)


def _check_batch_contract(model: Model, cfg: TrainConfig) -> None:
    # Fail before any work: BN-family layers need >1 value per channel.
    if cfg.batch_size == 1:
        for s in model.norm_states():
            if s.kind in (NormKind.BN, NormKind.BCN_LARGE, NormKind.FIXED):
                raise MicroBatchError(
                    f"{s.kind.value} cannot train with batch size 1; use gn/ln/in/bcn_micro "
                    "with --iteration-size for micro-batch training")
