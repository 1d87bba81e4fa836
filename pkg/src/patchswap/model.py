"""Small convolutional classifier with named parameters."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .tensor import Tensor


class ConfigError(ValueError):
    """Invalid configuration value."""


@dataclass(frozen=True)
class ModelSpec:
    in_channels: int = 3
    num_classes: int = 10
    widths: tuple[int, ...] = (32, 64, 128)
    kernel: int = 3
    # 1-based block numbers followed by a 2x2 max-pool
    pool_after: tuple[int, ...] = (2, 3)

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "pool_after", tuple(sorted({int(b) for b in self.pool_after})))
        if any(b < 1 or b > len(self.widths) for b in self.pool_after):
            raise ConfigError(f"pool_after {self.pool_after} refers to blocks outside 1..{len(self.widths)}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if not self.widths or min(self.widths) < 1:
            raise ConfigError(f"widths must be a nonempty list of positive ints, got {self.widths}")
        if self.in_channels < 1 or self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError("in_channels must be positive and kernel odd")

    @property
    def num_pools(self) -> int:
        return len(self.pool_after)

    def param_count(self) -> int:
        total, c_in = 0, self.in_channels
        for w in self.widths:
            total += w * c_in * self.kernel**2 + w
            c_in = w
        return total + c_in * self.num_classes + self.num_classes


@dataclass
class Model:
    spec: ModelSpec
    params: dict[str, Tensor] = field(default_factory=dict)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self):
        return self.params.items()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def __call__(self, x) -> Tensor:
        return forward_logits(self, x)


def build_model(spec: ModelSpec, rng: np.random.Generator | int = 0, dtype=None) -> Model:
    """Allocate He-normal weights and zero biases, deterministically from ``rng``."""
    rng = np.random.default_rng(rng)
    dtype = dtype or tn.default_dtype()
    params: dict[str, Tensor] = {}
    c_in, k = spec.in_channels, spec.kernel
    for i, w in enumerate(spec.widths, start=1):
        std = np.sqrt(2.0 / (c_in * k * k))
        params[f"conv{i}.weight"] = Tensor(rng.normal(0.0, std, (w, c_in, k, k)), requires_grad=True, dtype=dtype)
        params[f"conv{i}.bias"] = Tensor(np.zeros(w), requires_grad=True, dtype=dtype)
        c_in = w
    std = np.sqrt(2.0 / c_in)
    params["fc.weight"] = Tensor(rng.normal(0.0, std, (c_in, spec.num_classes)), requires_grad=True, dtype=dtype)
    params["fc.bias"] = Tensor(np.zeros(spec.num_classes), requires_grad=True, dtype=dtype)
    for name, p in params.items():
        p.name = name
    return Model(spec, params)


def forward_logits(model: Model, x) -> Tensor:
    if not isinstance(x, Tensor):
        x = Tensor(x, dtype=model.params["fc.weight"].dtype)
    spec = model.spec
    if x.ndim != 4 or x.shape[1] != spec.in_channels:
        raise tn.DimensionError(f"expected input (n, {spec.in_channels}, h, w), got {x.shape}")
    need = 2**spec.num_pools
    h, w = x.shape[2:]
    if h < need or w < need or h % need or w % need:
        raise tn.DimensionError(f"input {h}x{w} too small or not divisible by {need} for {spec.num_pools} pools")
    pad = spec.kernel // 2
    out = x
    for i in range(1, len(spec.widths) + 1):
        out = tn.conv2d(out, model.params[f"conv{i}.weight"], stride=1, padding=pad)
        out = tn.relu(tn.bias_add(out, model.params[f"conv{i}.bias"]))
        if i in spec.pool_after:
            out = tn.max_pool2d(out)
    feats = tn.global_avg_pool(out)
    return tn.bias_add(tn.matmul(feats, model.params["fc.weight"]), model.params["fc.bias"])
