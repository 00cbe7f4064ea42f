"""Small classifiers whose batch-norm layers can be re-estimated at test time."""
from __future__ import annotations

import contextlib
import copy
import enum
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import rten
from .tensor import (
    Tensor,
    batch_norm,
    conv2d,
    cross_entropy,
    matmul,
    mean_pool2,
    no_grad,
    relu,
)


class BNMode(str, enum.Enum):
    TRAIN = "train"
    FROZEN = "frozen"
    ADAPTIVE = "adaptive"


class BatchNorm:
    """Batch normalisation with training, frozen and test-adapted statistics."""

    kind = "batchnorm"

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.mu_T = np.zeros(channels)
        self.var_T = np.ones(channels)
        self.mu_t: np.ndarray | None = None
        self.var_t: np.ndarray | None = None
        self.mu_bar: np.ndarray | None = None
        self.var_bar: np.ndarray | None = None
        self.rho: float | None = None
        self.mode = BNMode.TRAIN

    def params(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def buffers(self):
        return [("running_mean", self.mu_T), ("running_var", self.var_T)]

    def spec(self):
        return {"type": self.kind, "channels": self.channels, "momentum": self.momentum, "eps": self.eps}

    def _axes(self, x: np.ndarray):
        return (0,) if x.ndim == 2 else (0, 2, 3)

    def batch_stats(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Per-channel mean and unbiased variance of ``x``."""
        if x.shape[0] < 2:
            raise ValueError("batch statistics need a batch of at least 2")
        axes = self._axes(x)
        return x.mean(axis=axes), x.var(axis=axes, ddof=1)

    def blend(self, x: np.ndarray, rho: float, blend: str = "std") -> None:
        """Blend test-batch statistics of ``x`` with the training statistics."""
        if not 0.0 <= rho <= 1.0:
            raise ValueError(f"rho must lie in [0, 1], got {rho}")
        mu_t, var_t = self.batch_stats(x)
        self.mu_t, self.var_t, self.rho = mu_t, var_t, float(rho)
        self.mu_bar = rho * mu_t + (1.0 - rho) * self.mu_T
        if blend == "std":
            s_bar = rho * np.sqrt(var_t) + (1.0 - rho) * np.sqrt(self.var_T)
            self.var_bar = s_bar * s_bar
        elif blend == "var":
            self.var_bar = rho * var_t + (1.0 - rho) * self.var_T
        else:
            raise ValueError(f"unknown blend {blend!r}")

    def stats_for_mode(self):
        if self.mode is BNMode.FROZEN:
            return self.mu_T, self.var_T
        if self.mode is BNMode.ADAPTIVE:
            if self.mu_bar is None:
                raise RuntimeError("adaptive mode used before adapt()")
            return self.mu_bar, self.var_bar
        return None, None

    def __call__(self, x: Tensor, update_stats: bool = True) -> Tensor:
        if self.mode is BNMode.TRAIN:
            if x.shape[0] < 2:
                raise ValueError("training-mode batch norm needs a batch of at least 2")
            if update_stats:
                m, v = self.batch_stats(x.data)
                self.mu_T = (1.0 - self.momentum) * self.mu_T + self.momentum * m
                self.var_T = (1.0 - self.momentum) * self.var_T + self.momentum * v
            return batch_norm(x, self.gamma, self.beta, eps=self.eps)
        m, v = self.stats_for_mode()
        return batch_norm(x, self.gamma, self.beta, m, v, self.eps)


class Conv2d:
    kind = "conv2d"

    def __init__(self, cin: int, cout: int, k: int = 3, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.cin, self.cout, self.k = cin, cout, k
        self.weight = Tensor(rng.normal(0.0, np.sqrt(2.0 / (cin * k * k)), (cout, cin, k, k)), requires_grad=True)

    def params(self):
        return [("weight", self.weight)]

    def buffers(self):
        return []

    def spec(self):
        return {"type": self.kind, "in": self.cin, "out": self.cout, "k": self.k}

    def __call__(self, x, update_stats=True):
        return conv2d(x, self.weight, padding=self.k // 2)


class Dense:
    kind = "dense"

    def __init__(self, fin: int, fout: int, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.fin, self.fout = fin, fout
        self.weight = Tensor(rng.normal(0.0, np.sqrt(2.0 / fin), (fin, fout)), requires_grad=True)
        self.bias = Tensor(np.zeros(fout), requires_grad=True)

    def params(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def buffers(self):
        return []

    def spec(self):
        return {"type": self.kind, "in": self.fin, "out": self.fout}

    def __call__(self, x, update_stats=True):
        return matmul(x, self.weight) + self.bias


class _Stateless:
    def params(self):
        return []

    def buffers(self):
        return []

    def spec(self):
        return {"type": self.kind}


class ReLU(_Stateless):
    kind = "relu"

    def __call__(self, x, update_stats=True):
        return relu(x)


class MeanPool2(_Stateless):
    kind = "meanpool"

    def __call__(self, x, update_stats=True):
        return mean_pool2(x)


class Flatten(_Stateless):
    kind = "flatten"

    def __call__(self, x, update_stats=True):
        return x.reshape(x.shape[0], -1)


def _as_input(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


class Network:
    """An ordered stack of layers; all batch-norm layers share one mode."""

    def __init__(self, layers, num_classes: int, input_shape: tuple[int, ...]):
        self.layers = list(layers)
        self.num_classes = num_classes
        self.input_shape = tuple(input_shape)
        self._mode = BNMode.TRAIN

    # -- structure
    @property
    def bn_layers(self) -> list[BatchNorm]:
        return [l for l in self.layers if isinstance(l, BatchNorm)]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [(f"{i}.{n}", p) for i, l in enumerate(self.layers) for n, p in l.params()]

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    @contextlib.contextmanager
    def input_gradients_only(self):
        """Stop parameters from collecting gradients (attacks, saliency maps)."""
        params = self.parameters()
        flags = [p.requires_grad for p in params]
        for p in params:
            p.requires_grad = False
        try:
            yield self
        finally:
            for p, f in zip(params, flags):
                p.requires_grad = f

    def copy(self) -> "Network":
        return copy.deepcopy(self)

    # -- modes
    @property
    def mode(self) -> BNMode:
        return self._mode

    def set_mode(self, mode) -> None:
        """Switch every batch-norm layer at once."""
        mode = BNMode(mode)
        if mode is BNMode.ADAPTIVE and any(l.mu_bar is None for l in self.bn_layers):
            raise RuntimeError("adaptive mode requested before adapt()")
        for l in self.bn_layers:
            l.mode = mode
        self._mode = mode

    # -- evaluation
    def forward(self, x, update_stats: bool = True) -> Tensor:
        h = _as_input(x)
        for layer in self.layers:
            h = layer(h, update_stats=update_stats)
        return h

    __call__ = forward

    def logits(self, x, batch_size: int = 512) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if self._mode is BNMode.TRAIN:
            raise RuntimeError("logits() is for inference; set Frozen or Adaptive mode first")
        with no_grad():
            outs = [self.forward(x[i:i + batch_size]).data for i in range(0, len(x), batch_size)]
        return np.concatenate(outs) if outs else np.zeros((0, self.num_classes))

    def predict(self, x, batch_size: int = 512) -> np.ndarray:
        return self.logits(x, batch_size).argmax(axis=1)

    # -- persistence
    def describe(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "input_shape": list(self.input_shape),
            "layers": [l.spec() for l in self.layers],
        }

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        for i, l in enumerate(self.layers):
            for n, b in l.buffers():
                state[f"{i}.{n}"] = np.array(b, dtype=np.float64)
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.data.shape}")
            p.data = arr.copy()
        for i, l in enumerate(self.layers):
            if isinstance(l, BatchNorm):
                l.mu_T = np.asarray(state[f"{i}.running_mean"], dtype=np.float64).copy()
                l.var_T = np.asarray(state[f"{i}.running_var"], dtype=np.float64).copy()

    def save(self, path) -> None:
        """Write ``path`` (RTEN tensors) and ``path.json`` (architecture)."""
        path = Path(path)
        rten.write_rten(path, sorted(self.state_dict().items()))
        Path(str(path) + ".json").write_text(json.dumps(self.describe(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "Network":
        path = Path(path)
        desc = json.loads(Path(str(path) + ".json").read_text())
        net = build_network(desc)
        net.load_state_dict(rten.read_rten(path))
        net.set_mode(BNMode.FROZEN)
        return net


_LAYER_TYPES = {"relu": ReLU, "meanpool": MeanPool2, "flatten": Flatten}


def build_network(desc: dict, seed: int = 0) -> Network:
    """Instantiate a network from its ``describe()`` dictionary."""
    rng = np.random.default_rng(seed)
    layers = []
    for spec in desc["layers"]:
        t = spec["type"]
        if t == "conv2d":
            layers.append(Conv2d(spec["in"], spec["out"], spec.get("k", 3), rng))
        elif t == "dense":
            layers.append(Dense(spec["in"], spec["out"], rng))
        elif t == "batchnorm":
            layers.append(BatchNorm(spec["channels"], spec.get("momentum", 0.1), spec.get("eps", 1e-5)))
        elif t in _LAYER_TYPES:
            layers.append(_LAYER_TYPES[t]())
        else:
            raise ValueError(f"unknown layer type {t!r}")
    return Network(layers, desc["num_classes"], tuple(desc["input_shape"]))


def reference_cnn(num_classes: int, channels: int = 3, size: int = 16, widths=(16, 32),
                  hidden: int = 64, seed: int = 0, bn_momentum: float = 0.1, eps: float = 1e-5) -> Network:
    """conv-BN-ReLU-conv-BN-ReLU-meanpool2-flatten-dense-BN-ReLU-dense."""
    w1, w2 = widths
    flat = w2 * (size // 2) * (size // 2)
    desc = {
        "num_classes": num_classes,
        "input_shape": [channels, size, size],
        "layers": [
            {"type": "conv2d", "in": channels, "out": w1, "k": 3},
            {"type": "batchnorm", "channels": w1, "momentum": bn_momentum, "eps": eps},
            {"type": "relu"},
            {"type": "conv2d", "in": w1, "out": w2, "k": 3},
            {"type": "batchnorm", "channels": w2, "momentum": bn_momentum, "eps": eps},
            {"type": "relu"},
            {"type": "meanpool"},
            {"type": "flatten"},
            {"type": "dense", "in": flat, "out": hidden},
            {"type": "batchnorm", "channels": hidden, "momentum": bn_momentum, "eps": eps},
            {"type": "relu"},
            {"type": "dense", "in": hidden, "out": num_classes},
        ],
    }
    return build_network(desc, seed)


def mlp(sizes, batchnorm: bool = True, seed: int = 0, eps: float = 1e-5) -> Network:
    """Dense network ``sizes[0] -> ... -> sizes[-1]`` with optional BN before each ReLU."""
    layers = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append({"type": "dense", "in": a, "out": b})
        if i < len(sizes) - 2:
            if batchnorm:
                layers.append({"type": "batchnorm", "channels": b, "eps": eps})
            layers.append({"type": "relu"})
    return build_network({"num_classes": sizes[-1], "input_shape": [sizes[0]], "layers": layers}, seed)


# ---------------------------------------------------------------- test-time adaptation


def bn_forward(state: BatchNorm, x, update_stats: bool = True) -> Tensor:
    return state(_as_input(x), update_stats=update_stats)


def adapt(net: Network, batch, rho: float, blend: str = "std") -> None:
    """Re-estimate every BN layer's statistics from ``batch`` and enter adaptive mode.

    One sweep: each layer sees activations already normalised by the freshly
    blended statistics of the layers before it.
    """
    x = np.asarray(batch, dtype=np.float64)
    if x.shape[0] == 0:
        raise ValueError("adapt() needs a non-empty batch")
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho must lie in [0, 1], got {rho}")
    if not net.bn_layers:
        raise ValueError("network has no batch-norm layers")
    with no_grad():
        h = Tensor._wrap(x)
        for layer in net.layers:
            if isinstance(layer, BatchNorm):
                layer.blend(h.data, rho, blend)
                layer.mode = BNMode.ADAPTIVE
            h = layer(h, update_stats=False)
    net.set_mode(BNMode.ADAPTIVE)


@dataclass
class GradientMap:
    raw: np.ndarray
    display: np.ndarray


def normalize_for_display(raw: np.ndarray, span: float = 3.0) -> np.ndarray:
    """Map mean to 0.5 and mean +/- span std-devs to [0, 1], clipping outside."""
    sd = raw.std()
    if sd == 0.0:
        return np.full(raw.shape, 0.5)
    return np.clip(0.5 + (raw - raw.mean()) / (2.0 * span * sd), 0.0, 1.0)


def loss_gradient_map(net: Network, x, y: int) -> GradientMap:
    """Input gradient of the cross-entropy loss for a single image."""
    if net.mode is BNMode.TRAIN:
        raise RuntimeError("loss_gradient_map needs Frozen or Adaptive mode")
    x = np.asarray(x, dtype=np.float64)
    if x.shape != net.input_shape:
        raise ValueError(f"expected one input of shape {net.input_shape}, got {x.shape}")
    xt = Tensor(x[None], requires_grad=True)
    with net.input_gradients_only():
        loss = cross_entropy(net.forward(xt, update_stats=False), [int(y)], reduction="sum")
        loss.backward()
    raw = xt.grad[0]
    return GradientMap(raw=raw, display=normalize_for_display(raw))
