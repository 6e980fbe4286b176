"""MLP bridge from encoder features into the LM embedding space.

Linear -> GELU (repeated over the hidden layers) -> Linear, applied
token-wise. This is the only trainable component in stage 1 and is
frozen in stage 2.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import layers
from .autodiff import Tensor, gelu
from .layers import ConfigError


@dataclass
class AdapterConfig:
    d_in: int = 64        # encoder feature width
    d_hidden: int = 32
    d_out: int = 64       # LM embedding width
    n_hidden_layers: int = 1

    def __post_init__(self):
        if min(self.d_in, self.d_hidden, self.d_out) <= 0:
            raise ConfigError("adapter extents must be positive")
        if self.n_hidden_layers < 1:
            raise ConfigError("adapter needs at least one hidden layer")


def layer_dims(cfg: AdapterConfig) -> list[tuple[int, int]]:
    """(d_out, d_in) per linear layer, hidden widths uniform."""
    dims = [(cfg.d_hidden, cfg.d_in)]
    dims += [(cfg.d_hidden, cfg.d_hidden)] * (cfg.n_hidden_layers - 1)
    dims.append((cfg.d_out, cfg.d_hidden))
    return dims


def init_params(cfg: AdapterConfig, rng: np.random.Generator,
                params: dict[str, Tensor] | None = None, dtype=None) -> dict[str, Tensor]:
    params = params if params is not None else {}
    for i, (dout, din) in enumerate(layer_dims(cfg)):
        layers.init_linear(params, f"adapter.fc{i}", dout, din, rng, dtype=dtype)
    return params


def project(features: Tensor, cfg: AdapterConfig, params: dict[str, Tensor]) -> Tensor:
    """Map [P, d_in] patch features to [P, d_out] LM-space tokens."""
    if features.shape[-1] != cfg.d_in:
        raise ConfigError(f"feature width {features.shape[-1]} != adapter d_in {cfg.d_in}")
    x = features
    n_layers = cfg.n_hidden_layers + 1
    for i in range(n_layers):
        x = layers.linear(x, params, f"adapter.fc{i}")
        if i < n_layers - 1:
            x = gelu(x)
    return x


def stage_flags(stage: int, params: dict[str, Tensor]) -> dict[str, bool]:
    """Frozen-state map for the adapter: trainable in stage 1, frozen in stage 2."""
    if stage not in (1, 2):
        raise ConfigError(f"stage must be 1 or 2, got {stage}")
    frozen = stage == 2
    return {name: frozen for name in params if name.startswith("adapter.")}
