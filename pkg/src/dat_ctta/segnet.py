"""Small encoder-decoder segmentation network over a flat parameter vector.

Architecture for ``depth`` stages with widths ``w_i = base_width * 2**i``::

    enc_i      conv3x3 -> norm -> relu -> conv3x3 -> norm -> relu   (skip_i)
               avg-pool 2x2
    bottleneck conv3x3 -> norm -> relu                               at H / 2**depth
    dec_i      bilinear x2 -> + skip_i -> conv3x3 -> norm -> relu    (i = depth-1 .. 0)
    head       dropout -> conv1x1 to num_classes

Norms are per-channel over the spatial dims with a learned affine, so nothing
depends on batch statistics. All scalars live in one flat vector; the layer
table maps each named tensor to an offset in it and is a pure function of the
config.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import numerics as nx
from .errors import ConfigError, ContractError, ShapeError
from .numerics import Tensor
from .seeding import make_rng

NORM_KINDS = ("norm_scale", "norm_shift")


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 3
    num_classes: int = 6
    base_width: int = 16
    depth: int = 3
    head_dropout_rate: float = 0.1
    seed: int = 0
    dtype: str = "float32"

    def validate(self) -> "ModelConfig":
        if self.num_classes < 2:
            raise ConfigError(f"model.num_classes must be >= 2, got {self.num_classes}")
        if self.base_width < 2:
            raise ConfigError(f"model.base_width must be >= 2, got {self.base_width}")
        if self.depth < 1:
            raise ConfigError(f"model.depth must be >= 1, got {self.depth}")
        if self.in_channels < 1:
            raise ConfigError(f"model.in_channels must be >= 1, got {self.in_channels}")
        if not 0.0 <= self.head_dropout_rate < 1.0:
            raise ConfigError(f"model.head_dropout_rate must lie in [0, 1), got {self.head_dropout_rate}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"model.dtype must be float32 or float64, got {self.dtype!r}")
        return self


@dataclass(frozen=True)
class Layer:
    name: str
    kind: str
    shape: tuple[int, ...]
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def fan_in(self) -> int:
        return int(np.prod(self.shape[1:])) if len(self.shape) > 1 else 0


def layer_table(cfg: ModelConfig) -> list[Layer]:
    widths = [cfg.base_width * 2 ** i for i in range(cfg.depth)]
    specs: list[tuple[str, str, tuple[int, ...]]] = []

    def conv(name, c_in, c_out, k=3):
        specs.append((f"{name}.weight", "conv_weight", (c_out, c_in, k, k)))
        specs.append((f"{name}.bias", "conv_bias", (c_out,)))

    def norm(name, c):
        specs.append((f"{name}.scale", "norm_scale", (c,)))
        specs.append((f"{name}.shift", "norm_shift", (c,)))

    c_prev = cfg.in_channels
    for i, w in enumerate(widths):
        conv(f"enc{i}.conv1", c_prev, w)
        norm(f"enc{i}.norm1", w)
        conv(f"enc{i}.conv2", w, w)
        norm(f"enc{i}.norm2", w)
        c_prev = w
    conv("bottleneck.conv", widths[-1], widths[-1])
    norm("bottleneck.norm", widths[-1])
    for i in reversed(range(cfg.depth)):
        c_out = widths[i - 1] if i > 0 else widths[0]
        conv(f"dec{i}.conv", widths[i], c_out)
        norm(f"dec{i}.norm", c_out)
    conv("head", widths[0], cfg.num_classes, k=1)

    table, offset = [], 0
    for name, kind, shape in specs:
        layer = Layer(name, kind, shape, offset)
        table.append(layer)
        offset += layer.size
    return table


@dataclass
class Model:
    cfg: ModelConfig
    layers: list[Layer]
    params: np.ndarray
    leaves: dict[str, Tensor] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._bind()

    def _bind(self) -> None:
        # Leaves are views into ``params``; in-place edits of the flat vector show through.
        self.leaves = {
            layer.name: Tensor(self.params[layer.offset:layer.offset + layer.size].reshape(layer.shape),
                               requires_grad=True, name=layer.name)
            for layer in self.layers
        }

    @property
    def num_params(self) -> int:
        return int(self.params.shape[0])

    def __getitem__(self, name: str) -> Tensor:
        return self.leaves[name]

    def layout(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(layer.name, layer.shape) for layer in self.layers]

    def indices_of_kind(self, kinds) -> np.ndarray:
        kinds = (kinds,) if isinstance(kinds, str) else tuple(kinds)
        parts = [np.arange(l.offset, l.offset + l.size) for l in self.layers if l.kind in kinds]
        return np.concatenate(parts).astype(np.int64) if parts else np.zeros(0, np.int64)

    @cached_property
    def norm_index(self) -> np.ndarray:
        """Flat indices of every normalization affine scalar."""
        return self.indices_of_kind(NORM_KINDS)

    def layer_of(self, index: int) -> Layer:
        for layer in self.layers:
            if layer.offset <= index < layer.offset + layer.size:
                return layer
        raise IndexError(index)

    def flat_grad(self, grads: nx.Gradients) -> np.ndarray:
        """Gather leaf gradients into one vector in the flat parameter layout."""
        flat = np.zeros_like(self.params)
        for layer in self.layers:
            leaf = self.leaves[layer.name]
            if leaf in grads:
                flat[layer.offset:layer.offset + layer.size] = grads[leaf].reshape(-1)
        return flat


def build_model(cfg: ModelConfig) -> Model:
    """Deterministic He-style init: conv weights ~ N(0, 2/fan_in), biases 0, norm scale 1, shift 0."""
    cfg.validate()
    table = layer_table(cfg)
    total = table[-1].offset + table[-1].size
    dtype = np.dtype(cfg.dtype)
    params = np.zeros(total, dtype=dtype)
    rng = make_rng((cfg.seed, 0))
    for layer in table:
        view = params[layer.offset:layer.offset + layer.size]
        if layer.kind == "conv_weight":
            view[:] = rng.standard_normal(layer.size) * np.sqrt(2.0 / layer.fan_in)
        elif layer.kind == "norm_scale":
            view[:] = 1.0
    return Model(cfg, table, params)


def clone_model(model: Model) -> Model:
    return Model(model.cfg, list(model.layers), model.params.copy())


def check_same_layout(a: Model, b: Model) -> None:
    if a.layout() != b.layout() or a.params.dtype != b.params.dtype:
        raise ContractError("models have different parameter layouts")


def copy_params(src: Model, dst: Model, mask: np.ndarray | None = None) -> None:
    """Copy ``src`` scalars into ``dst`` in place, only at ``mask`` indices when given."""
    check_same_layout(src, dst)
    if mask is None:
        dst.params[:] = src.params
    else:
        idx = np.asarray(mask, dtype=np.int64)
        dst.params[idx] = src.params[idx]


def _check_input(model: Model, image) -> Tensor:
    x = image if isinstance(image, Tensor) else Tensor(np.asarray(image, dtype=model.params.dtype))
    if x.data.ndim != 3 or x.shape[0] != model.cfg.in_channels:
        raise ShapeError(f"expected a {model.cfg.in_channels} x H x W image, got shape {x.shape}")
    step = 2 ** model.cfg.depth
    if x.shape[1] % step or x.shape[2] % step:
        raise ShapeError(f"image size {x.shape[1]}x{x.shape[2]} is not divisible by {step} (2**depth)")
    return x


def _conv_norm_relu(model: Model, x: Tensor, conv: str, norm: str) -> Tensor:
    x = nx.conv2d(x, model[f"{conv}.weight"], model[f"{conv}.bias"], stride=1, pad=1)
    x = nx.channel_norm(x, model[f"{norm}.scale"], model[f"{norm}.shift"])
    return nx.relu(x)


def features(model: Model, image) -> Tensor:
    """Decoder output right before the head dropout site."""
    x = _check_input(model, image)
    skips = []
    for i in range(model.cfg.depth):
        x = _conv_norm_relu(model, x, f"enc{i}.conv1", f"enc{i}.norm1")
        x = _conv_norm_relu(model, x, f"enc{i}.conv2", f"enc{i}.norm2")
        skips.append(x)
        x = nx.avg_pool2(x)
    x = _conv_norm_relu(model, x, "bottleneck.conv", "bottleneck.norm")
    for i in reversed(range(model.cfg.depth)):
        skip = skips[i]
        x = nx.bilinear_resize(x, skip.shape[1], skip.shape[2])
        x = nx.add(x, skip)
        x = _conv_norm_relu(model, x, f"dec{i}.conv", f"dec{i}.norm")
    return x


def head(model: Model, feats: Tensor, dropout_seed=None) -> Tensor:
    """Dropout (only when ``dropout_seed`` is given) followed by the 1x1 classifier."""
    rng = None if dropout_seed is None else make_rng(dropout_seed)
    x = nx.dropout(feats, model.cfg.head_dropout_rate, rng)
    return nx.conv2d(x, model["head.weight"], model["head.bias"], stride=1, pad=0)


def forward(model: Model, image, dropout_seed=None) -> Tensor:
    """Class logits ``C x H x W``.

    ``dropout_seed=None`` is deterministic mode (head dropout off). Any int,
    int tuple or Generator switches on stochastic mode with that dropout stream.
    """
    return head(model, features(model, image), dropout_seed)


def predict_probs(model: Model, image, dropout_seed=None) -> np.ndarray:
    return nx.softmax_over_channels(forward(model, image, dropout_seed)).data
