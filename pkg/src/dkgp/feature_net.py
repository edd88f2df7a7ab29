"""Fully-connected ReLU feature extractor and the parameter checkpoint format.

Checkpoint grammar (text, UTF-8)::

    dkgp-params 1
    <block count>
    <name> <ndim> <dim_1> ... <dim_ndim>      (one line per block)
    <value>                                   (one line per float, row-major)

Values are written with ``repr(float)``, which round-trips float64 exactly.
Blank lines and lines starting with ``#`` are ignored.
"""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ParamVector
from .linalg import RandomStream

CHECKPOINT_MAGIC = "dkgp-params 1"


@dataclass(frozen=True)
class NetSpec:
    input_dim: int
    hidden: tuple[int, ...] = (100, 50)
    feature_dim: int = 2
    # ReLU on the feature layer: False hands pre-activation features to the GP
    output_activation: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.input_dim <= 0 or self.feature_dim <= 0 or any(w <= 0 for w in self.hidden):
            raise ValueError("layer widths must be positive")

    @property
    def widths(self) -> list[int]:
        return [self.input_dim, *self.hidden, self.feature_dim]


@dataclass(frozen=True)
class Layer:
    W: object  # (out, in)
    b: object  # (out,)
    relu: bool


@dataclass(frozen=True)
class FeatureNetParams:
    layers: tuple[Layer, ...] = field(default_factory=tuple)

    @property
    def input_dim(self) -> int:
        return np.shape(ad.value(self.layers[0].W))[1]

    @property
    def feature_dim(self) -> int:
        return np.shape(ad.value(self.layers[-1].W))[0]

    def named_arrays(self, prefix: str = "net.") -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            out[f"{prefix}layer{i}.W"] = layer.W
            out[f"{prefix}layer{i}.b"] = layer.b
        return out

    def replace_arrays(self, arrays: Mapping, prefix: str = "net.") -> "FeatureNetParams":
        return FeatureNetParams(
            tuple(
                Layer(arrays[f"{prefix}layer{i}.W"], arrays[f"{prefix}layer{i}.b"], layer.relu)
                for i, layer in enumerate(self.layers)
            )
        )


def init_params(spec: NetSpec, stream: RandomStream | None = None) -> FeatureNetParams:
    """Glorot-uniform weights and zero biases."""
    stream = stream if stream is not None else RandomStream(spec.seed)
    widths = spec.widths
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        W = stream.uniform(-limit, limit, size=(fan_out, fan_in))
        last = i == len(widths) - 2
        layers.append(Layer(W, np.zeros(fan_out), spec.output_activation if last else True))
    return FeatureNetParams(tuple(layers))


def linear_params(W, b=None, relu: bool = False) -> FeatureNetParams:
    W = np.asarray(W, dtype=np.float64)
    b = np.zeros(W.shape[0]) if b is None else np.asarray(b, dtype=np.float64)
    return FeatureNetParams((Layer(W, b, relu),))


def forward(params: FeatureNetParams, X):
    """Map inputs (N, D) to features (N, Q)."""
    h = X
    if np.shape(ad.value(X))[1] != params.input_dim:
        raise ValueError(f"input has {np.shape(ad.value(X))[1]} columns, network expects {params.input_dim}")
    for layer in params.layers:
        h = ad.matmul(h, ad.transpose(layer.W)) + layer.b
        if layer.relu:
            h = ad.relu(h)
    return h


# ---------------------------------------------------------------------------
# checkpoints


def save_params(path, params: ParamVector) -> None:
    lines = [CHECKPOINT_MAGIC, str(len(params.names))]
    for name in params.names:
        if any(c.isspace() for c in name):
            raise ValueError(f"block name {name!r} contains whitespace")
        shape = params.shape_of(name)
        lines.append(" ".join([name, str(len(shape)), *map(str, shape)]))
    lines.extend(repr(float(x)) for x in params.data)
    Path(path).write_text("\n".join(lines) + "\n")


def load_params(path) -> ParamVector:
    raw = [ln.strip() for ln in Path(path).read_text().splitlines()]
    lines = [ln for ln in raw if ln and not ln.startswith("#")]
    if not lines or lines[0] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a parameter checkpoint")
    count = int(lines[1])
    layout = []
    for ln in lines[2 : 2 + count]:
        parts = ln.split()
        ndim = int(parts[1])
        layout.append((parts[0], tuple(int(d) for d in parts[2 : 2 + ndim])))
    values = np.array([float(v) for v in lines[2 + count :]], dtype=np.float64)
    total = sum(int(np.prod(s, dtype=int)) for _, s in layout)
    if values.size != total:
        raise ValueError(f"{path}: expected {total} values, found {values.size}")
    blocks, off = [], 0
    for name, shape in layout:
        n = int(np.prod(shape, dtype=int))
        blocks.append((name, values[off : off + n].reshape(shape)))
        off += n
    return ParamVector(blocks)
