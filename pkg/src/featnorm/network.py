"""Small fully connected feature extractor + classifier head.

The feature extractor is a chain of linear layers with relu between them and
no activation after the last one, so feature norms are free to grow. The
classifier head is a single linear layer producing logits; probabilities are
taken inside the losses.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import ContractError, ShapeError

CHECKPOINT_MAGIC = "featnorm-checkpoint v1"


@dataclass(frozen=True)
class NetworkSpec:
    input_dim: int
    hidden_dims: tuple[int, ...]
    feature_dim: int
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        dims = (self.input_dim, self.feature_dim, self.num_classes, *self.hidden_dims)
        if any(d < 1 for d in dims):
            raise ContractError(f"all network dimensions must be >= 1, got {self}")

    def feature_widths(self) -> list[int]:
        """Widths of the feature-extractor chain, input first, feature last."""
        return [self.input_dim, *self.hidden_dims, self.feature_dim]


@dataclass
class ModelParams:
    """Ordered (weight, bias) pairs: all feature-extractor layers, then the head."""

    layers: list[tuple[ad.Tensor, ad.Tensor]]
    init_seed: int

    @property
    def n_feature_layers(self) -> int:
        return len(self.layers) - 1


def init_params(spec: NetworkSpec, seed: int) -> ModelParams:
    """Scaled-uniform init, bound sqrt(6/(fan_in+fan_out)); biases zero."""
    rng = np.random.default_rng(seed)
    widths = spec.feature_widths() + [spec.num_classes]
    layers = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weight = ad.leaf(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        bias = ad.leaf(np.zeros((1, fan_out)))
        layers.append((weight, bias))
    return ModelParams(layers=layers, init_seed=int(seed))


def forward_features(params: ModelParams, x: ad.Tensor) -> ad.Tensor:
    """Apply the feature-extractor layers; relu between layers, none after the last."""
    expected = params.layers[0][0].rows
    if x.cols != expected:
        raise ShapeError(f"input has {x.cols} columns, network expects {expected}")
    h = x
    last = params.n_feature_layers - 1
    for i, (weight, bias) in enumerate(params.layers[:-1]):
        h = ad.add_bias(ad.matmul(h, weight), bias)
        if i < last:
            h = ad.relu(h)
    return h


def forward_logits(params: ModelParams, features: ad.Tensor) -> ad.Tensor:
    weight, bias = params.layers[-1]
    if features.cols != weight.rows:
        raise ShapeError(f"features have {features.cols} columns, head expects {weight.rows}")
    return ad.add_bias(ad.matmul(features, weight), bias)


def parameters(params: ModelParams) -> list[ad.Tensor]:
    """Stable flat ordering used by the optimizer and checkpoints: W0, b0, W1, b1, ..."""
    flat = []
    for weight, bias in params.layers:
        flat.append(weight)
        flat.append(bias)
    return flat


# ---------------------------------------------------------------------------
# Checkpoint format: textual, round-trips bitwise (repr of float64)
# ---------------------------------------------------------------------------

def checkpoint_to_text(spec: NetworkSpec, params: ModelParams) -> str:
    lines = [
        CHECKPOINT_MAGIC,
        f"input_dim {spec.input_dim}",
        "hidden_dims" + "".join(f" {h}" for h in spec.hidden_dims),
        f"feature_dim {spec.feature_dim}",
        f"num_classes {spec.num_classes}",
        f"init_seed {params.init_seed}",
    ]
    for tensor in parameters(params):
        lines.append(f"tensor {tensor.rows} {tensor.cols}")
        lines.append(" ".join(repr(float(v)) for v in tensor.values.ravel()))
    return "\n".join(lines) + "\n"


def checkpoint_from_text(text: str) -> tuple[NetworkSpec, ModelParams]:
    lines = text.splitlines()
    if not lines or lines[0] != CHECKPOINT_MAGIC:
        raise ContractError("not a checkpoint file (bad header line)")

    header: dict[str, list[str]] = {}
    i = 1
    while i < len(lines) and not lines[i].startswith("tensor "):
        key, *rest = lines[i].split()
        header[key] = rest
        i += 1
    spec = NetworkSpec(
        input_dim=int(header["input_dim"][0]),
        hidden_dims=tuple(int(h) for h in header.get("hidden_dims", [])),
        feature_dim=int(header["feature_dim"][0]),
        num_classes=int(header["num_classes"][0]),
    )
    init_seed = int(header["init_seed"][0])

    tensors = []
    while i < len(lines):
        _, rows, cols = lines[i].split()
        rows, cols = int(rows), int(cols)
        values = np.fromiter((float(v) for v in lines[i + 1].split()), dtype=np.float64)
        if values.size != rows * cols:
            raise ContractError(f"checkpoint tensor expected {rows * cols} values, got {values.size}")
        tensors.append(ad.leaf(values.reshape(rows, cols)))
        i += 2

    widths = spec.feature_widths() + [spec.num_classes]
    if len(tensors) != 2 * (len(widths) - 1):
        raise ContractError("checkpoint tensor count does not match its spec header")
    layers = [(tensors[2 * k], tensors[2 * k + 1]) for k in range(len(tensors) // 2)]
    params = ModelParams(layers=layers, init_seed=init_seed)
    for (weight, bias), fan_in, fan_out in zip(layers, widths[:-1], widths[1:]):
        if weight.shape != (fan_in, fan_out) or bias.shape != (1, fan_out):
            raise ContractError("checkpoint tensor shapes do not chain with its spec header")
    return spec, params


def save_checkpoint(path: str | Path, spec: NetworkSpec, params: ModelParams) -> None:
    Path(path).write_text(checkpoint_to_text(spec, params), encoding="utf-8")


def load_checkpoint(path: str | Path) -> tuple[NetworkSpec, ModelParams]:
    return checkpoint_from_text(Path(path).read_text(encoding="utf-8"))
