"""Feed-forward classifiers: layers, forward passes, and checkpoint I/O."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from ..errors import FormatError, NumericalError, ShapeError
from . import autodiff as ad
from .autodiff import Tensor

ACTIVATIONS = ("relu", "tanh", "linear")
NET_FORMAT = "adasmooth-net"
NET_VERSION = 1


@dataclass(frozen=True)
class Layer:
    """Affine map ``x @ weight.T + bias`` followed by an elementwise activation."""

    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(f"bias {self.bias.shape} does not match weight {self.weight.shape}")

    @property
    def fan_in(self) -> int:
        return self.weight.shape[1]

    @property
    def fan_out(self) -> int:
        return self.weight.shape[0]


def _activate(z: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return ad.relu(z)
    if kind == "tanh":
        return ad.tanh(z)
    return z


@dataclass(frozen=True)
class Net:
    """An MLP classifier producing ``c`` logits from ``d`` inputs.

    ``capture`` lists the layer indices whose post-activation outputs are
    returned alongside the logits (hidden layers by default).
    """

    layers: tuple[Layer, ...]
    capture: tuple[int, ...] | None = None

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("a Net needs at least one layer")
        for prev, nxt in zip(self.layers[:-1], self.layers[1:]):
            if prev.fan_out != nxt.fan_in:
                raise ShapeError(f"layer dims do not chain: {prev.fan_out} -> {nxt.fan_in}")
        if self.capture is None:
            object.__setattr__(self, "capture", tuple(range(len(self.layers) - 1)))
        for i in self.capture:
            if not 0 <= i < len(self.layers):
                raise ShapeError(f"capture index {i} out of range")

    @property
    def in_dim(self) -> int:
        return self.layers[0].fan_in

    @property
    def n_classes(self) -> int:
        return self.layers[-1].fan_out

    @property
    def capture_sizes(self) -> tuple[int, ...]:
        return tuple(self.layers[i].fan_out for i in self.capture)

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend((layer.weight, layer.bias))
        return out

    def with_params(self, flat: Sequence[np.ndarray]) -> "Net":
        if len(flat) != 2 * len(self.layers):
            raise ShapeError("parameter list length does not match the architecture")
        layers = tuple(
            replace(layer, weight=np.array(flat[2 * i], dtype=np.float64),
                    bias=np.array(flat[2 * i + 1], dtype=np.float64))
            for i, layer in enumerate(self.layers)
        )
        return Net(layers, self.capture)

    # -- differentiable evaluation -------------------------------------------
    def apply(self, x: Tensor, params: Sequence[Tensor] | None = None) -> tuple[Tensor, list[Tensor]]:
        """Forward a batch ``(n, d)`` tensor; returns logits and captured activations."""
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"input has dimension {x.shape[-1]}, net expects {self.in_dim}")
        acts = []
        h = x
        for i, layer in enumerate(self.layers):
            if params is None:
                w, b = layer.weight, layer.bias
                h = h @ w.T + b
            else:
                w, b = params[2 * i], params[2 * i + 1]
                h = h @ ad.transpose(w) + b
            h = _activate(h, layer.activation)
            if i in self.capture:
                acts.append(h)
        return h, acts

    def logits_t(self, x: Tensor) -> Tensor:
        return self.apply(x)[0]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return forward(self, x)[0]


def forward(net: Net, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Evaluate logits and captured activations for one input or a batch."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    if xb.ndim != 2 or xb.shape[1] != net.in_dim:
        raise ShapeError(f"input shape {x.shape} incompatible with input dimension {net.in_dim}")
    if not np.all(np.isfinite(xb)):
        raise NumericalError("non-finite input")
    logits, acts = net.apply(Tensor(xb))
    if single:
        return logits.data[0], [a.data[0] for a in acts]
    return logits.data, [a.data for a in acts]


def init_net(
    sizes: Sequence[int],
    rng: np.random.Generator,
    activation: str = "relu",
    capture: tuple[int, ...] | None = None,
) -> Net:
    """Uniform fan-in scaled initialisation: U(-sqrt(6/fan_in), sqrt(6/fan_in))."""
    layers = []
    n = len(sizes) - 1
    for i, (fi, fo) in enumerate(zip(sizes[:-1], sizes[1:])):
        lim = np.sqrt(6.0 / fi) if activation == "relu" else np.sqrt(3.0 / fi)
        w = rng.uniform(-lim, lim, size=(fo, fi))
        b = np.zeros(fo)
        layers.append(Layer(w, b, activation if i < n - 1 else "linear"))
    return Net(tuple(layers), capture)


# -- serialization ---------------------------------------------------------------
def net_to_dict(net: Net) -> dict:
    return {
        "format": NET_FORMAT,
        "version": NET_VERSION,
        "capture": list(net.capture),
        "layers": [
            {
                "activation": layer.activation,
                "shape": list(layer.weight.shape),
                # float repr round-trips float64 exactly
                "weight": layer.weight.ravel(order="C").tolist(),
                "bias": layer.bias.tolist(),
            }
            for layer in net.layers
        ],
    }


def net_from_dict(obj: dict) -> Net:
    if obj.get("format") != NET_FORMAT:
        raise FormatError(f"not a net checkpoint (format={obj.get('format')!r})")
    if obj.get("version") != NET_VERSION:
        raise FormatError(f"unsupported net checkpoint version {obj.get('version')!r}")
    try:
        layers = []
        for spec in obj["layers"]:
            rows, cols = spec["shape"]
            w = np.array(spec["weight"], dtype=np.float64)
            if w.size != rows * cols:
                raise FormatError("weight count does not match declared shape")
            layers.append(Layer(w.reshape(rows, cols), np.array(spec["bias"], dtype=np.float64),
                                spec["activation"]))
        return Net(tuple(layers), tuple(obj["capture"]))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"malformed net checkpoint: {exc}") from exc


def save_net(net: Net, path: str | Path, extra: dict | None = None) -> None:
    obj = net_to_dict(net)
    if extra:
        obj["extra"] = extra
    Path(path).write_text(json.dumps(obj))


def load_net(path: str | Path) -> Net:
    return net_from_dict(json.loads(Path(path).read_text()))
