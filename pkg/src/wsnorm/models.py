"""Desk-scale model zoo: a 4-layer ConvNet and CIFAR-style basic-block ResNets."""

from __future__ import annotations

import enum
from collections import OrderedDict
from dataclasses import asdict, dataclass

import numpy as np

from . import ops
from .norms import NormKind, NormState, default_groups, norm_forward
from .reparam import ReparamKind, default_ws_eps, reparameterize, ws_parts
from .tensor import Tensor, default_dtype

__all__ = ["Architecture", "ModelSpec", "Conv2d", "Norm", "Model", "ConvNet4", "MiniResNet", "build_model",
           "norm_config"]


class Architecture(str, enum.Enum):
    CONVNET4 = "convnet4"
    MINIRESNET = "miniresnet"


# user-facing norm names -> (kind, group rule)
_NORM_NAMES = {
    "none": (NormKind.NONE, None),
    "bn": (NormKind.BN, None),
    "gn": (NormKind.CN, "default"),
    "ln": (NormKind.CN, "one"),
    "in": (NormKind.CN, "all"),
    "bcn": (NormKind.BCN_LARGE, "default"),
    "bcn_micro": (NormKind.BCN_MICRO, "default"),
    "fixed": (NormKind.FIXED, None),
}


def norm_config(name: str, channels: int, groups: int | None = None) -> tuple[NormKind, int]:
    try:
        kind, rule = _NORM_NAMES[name]
    except KeyError:
        raise ValueError(f"unknown norm {name!r}; choose from {sorted(_NORM_NAMES)}") from None
    if groups is not None and rule == "default":
        g = groups
    elif rule == "default":
        g = default_groups(channels)
    elif rule == "all":
        g = channels
    else:
        g = 1
    if channels % g:
        raise ValueError(f"norm {name}: {channels} channels not divisible by {g} groups")
    return kind, g


@dataclass
class ModelSpec:
    architecture: str = "convnet4"
    norm: str = "bn"
    reparam: str = "none"
    width: int = 32
    depth: int = 8
    num_classes: int = 10
    in_channels: int = 3
    groups: int | None = None
    affine_trainable: bool = True
    ws_eps: float | None = None

    def __post_init__(self):
        self.architecture = Architecture(self.architecture).value
        self.reparam = ReparamKind(self.reparam).value
        norm_config(self.norm, max(self.width, 1) * 4, None)  # validates the name
        if self.architecture == "miniresnet" and (self.depth - 2) % 6:
            raise ValueError(f"MiniResNet depth must be 6n+2 (8, 14, 20, ...), got {self.depth}")

    def to_dict(self) -> dict:
        return asdict(self)


def _kaiming_uniform(rng, shape, fan_in, dtype):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv2d:
    def __init__(self, cin, cout, k, stride, pad, reparam, rng, dtype, eps=None):
        self.stride, self.pad = stride, pad
        self.reparam = ReparamKind(reparam)
        fan_in = cin * k * k
        self.weight = Tensor(_kaiming_uniform(rng, (cout, cin, k, k), fan_in, dtype), requires_grad=True)
        self.eps = default_ws_eps(dtype) if eps is None else eps
        self.gain = None
        if self.reparam in (ReparamKind.WN, ReparamKind.CWN):
            rows = self.weight.data.reshape(cout, -1).astype(np.float64)
            if self.reparam is ReparamKind.CWN:
                rows = rows - rows.mean(axis=1, keepdims=True)
            self.gain = Tensor(np.sqrt((rows ** 2).sum(axis=1)).astype(dtype), requires_grad=True)
        self.track = False
        self.last: object = None

    def effective_weight(self) -> Tensor:
        if self.reparam is ReparamKind.WS and self.track:
            parts = ws_parts(self.weight, self.eps)
            parts.standardized.retain_grad()
            parts.centered.retain_grad()
            self.last = parts
            return parts.standardized.reshape(self.weight.shape)
        return reparameterize(self.weight, self.reparam, self.eps, self.gain)

    def params(self):
        out = [("weight", self.weight)]
        if self.gain is not None:
            out.append(("gain", self.gain))
        return out

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.effective_weight(), self.stride, self.pad)


class Norm:
    def __init__(self, name: str, channels: int, dtype, groups=None, affine_trainable=True):
        kind, g = norm_config(name, channels, groups)
        self.state = NormState.create(kind, channels, groups=g, dtype=dtype, affine_trainable=affine_trainable)

    def params(self):
        s = self.state
        names = [("gamma", s.gamma), ("beta", s.beta), ("gamma_c", s.gamma_c), ("beta_c", s.beta_c)]
        return [(n, p) for n, p in names if p is not None]

    def __call__(self, x: Tensor) -> Tensor:
        return norm_forward(x, self.state)


class Model:
    """Container with ordered named layers; subclasses define ``forward``."""

    def __init__(self, spec: ModelSpec, seed: int, dtype=None):
        self.spec = spec
        self.seed = seed
        self.dtype = np.dtype(dtype or default_dtype()).type
        self.convs: OrderedDict[str, Conv2d] = OrderedDict()
        self.norms: OrderedDict[str, Norm] = OrderedDict()
        self.fc: Tensor | None = None
        self.capture = False
        self.captured: dict[str, np.ndarray] = {}
        self.mode = "train"
        self.rng = np.random.default_rng(seed)

    # building helpers
    def _conv(self, name, cin, cout, k=3, stride=1, pad=1):
        conv = Conv2d(cin, cout, k, stride, pad, self.spec.reparam, self.rng, self.dtype, self.spec.ws_eps)
        self.convs[name] = conv
        return conv

    def _norm(self, name, channels):
        n = Norm(self.spec.norm, channels, self.dtype, self.spec.groups, self.spec.affine_trainable)
        self.norms[name] = n
        return n

    def _fc(self, fan_in, fan_out):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        self.fc = Tensor(self.rng.uniform(-bound, bound, size=(fan_out, fan_in)).astype(self.dtype),
                         requires_grad=True)

    # ------------------------------------------------------------------
    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for name, conv in self.convs.items():
            out += [(f"{name}.{n}", p) for n, p in conv.params()]
        for name, norm in self.norms.items():
            out += [(f"{name}.{n}", p) for n, p in norm.params()]
        out.append(("fc.weight", self.fc))
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for name, norm in self.norms.items():
            out += [(f"{name}.{k}", v) for k, v in norm.state.buffers().items()]
        return out

    def norm_states(self) -> list[NormState]:
        return [n.state for n in self.norms.values()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self) -> Model:
        self.mode = "train"
        for s in self.norm_states():
            s.mode = "train"
        return self

    def eval(self) -> Model:
        self.mode = "eval"
        for s in self.norm_states():
            s.mode = "eval"
        return self

    def set_rate(self, r: float) -> None:
        for s in self.norm_states():
            s.rate = r

    def track_ws(self, enabled: bool = True) -> None:
        for c in self.convs.values():
            c.track = enabled

    def _record(self, key: str, t: Tensor) -> None:
        if self.capture:
            self.captured[key] = t.data.copy()

    def _conv_norm(self, name: str, x: Tensor, conv: Conv2d, norm: Norm) -> Tensor:
        y = conv(x)
        self._record(f"{name}.conv", y)
        z = norm(y)
        self._record(f"{name}.norm", z)
        return z

    def __call__(self, x) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        elif x.dtype != self.dtype:
            x = Tensor(x.data.astype(self.dtype))
        return self.forward(x)

    def forward(self, x: Tensor) -> Tensor:  # pragma: no cover - abstract
        raise NotImplementedError

    def conv_norm_pairs(self) -> list[tuple[str, int]]:
        """(layer name, group count) for every conv followed by a norm."""
        return [(name, n.state.groups) for name, n in self.norms.items()]


class ConvNet4(Model):
    def __init__(self, spec: ModelSpec, seed: int, dtype=None):
        super().__init__(spec, seed, dtype)
        cin = spec.in_channels
        for i in range(4):
            self._conv(f"layer{i + 1}", cin, spec.width)
            self._norm(f"layer{i + 1}", spec.width)
            cin = spec.width
        self._fc(spec.width, spec.num_classes)

    def forward(self, x: Tensor) -> Tensor:
        for name in self.convs:
            x = self._conv_norm(name, x, self.convs[name], self.norms[name])
            x = ops.avg_pool2(ops.relu(x))
        return ops.linear(ops.global_avg_pool(x), self.fc)


class MiniResNet(Model):
    def __init__(self, spec: ModelSpec, seed: int, dtype=None):
        super().__init__(spec, seed, dtype)
        n = (spec.depth - 2) // 6
        w = spec.width
        self._conv("stem", spec.in_channels, w)
        self._norm("stem", w)
        self.blocks = []
        cin = w
        for stage, cout in enumerate((w, 2 * w, 4 * w)):
            for b in range(n):
                stride = 2 if (stage > 0 and b == 0) else 1
                name = f"s{stage + 1}b{b + 1}"
                self._conv(f"{name}.a", cin, cout, stride=stride)
                self._norm(f"{name}.a", cout)
                self._conv(f"{name}.b", cout, cout)
                self._norm(f"{name}.b", cout)
                self.blocks.append((name, cin, cout, stride))
                cin = cout
        self._fc(cin, spec.num_classes)

    def forward(self, x: Tensor) -> Tensor:
        x = ops.relu(self._conv_norm("stem", x, self.convs["stem"], self.norms["stem"]))
        for name, cin, cout, stride in self.blocks:
            a, b = f"{name}.a", f"{name}.b"
            y = ops.relu(self._conv_norm(a, x, self.convs[a], self.norms[a]))
            y = self._conv_norm(b, y, self.convs[b], self.norms[b])
            short = ops.shortcut_pad(x, cout) if (stride != 1 or cin != cout) else x
            x = ops.relu(y + short)
        return ops.linear(ops.global_avg_pool(x), self.fc)


def build_model(spec: ModelSpec, seed: int, dtype=None) -> Model:
    if not isinstance(spec, ModelSpec):
        spec = ModelSpec(**spec)
    if spec.architecture == Architecture.CONVNET4.value:
        return ConvNet4(spec, seed, dtype)
    return MiniResNet(spec, seed, dtype)
