"""Low-rank adaptation of LM attention projections.

Each adapted projection keeps its frozen base weight W0 and gains a
pair (A [r, d_in], B [d_out, r]); the effective weight is
W0 + (alpha/r) * B @ A. B starts at zero so attaching never changes
behavior until training moves it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import ConfigError

DEFAULT_PROJECTIONS = ("wq", "wv")
ALL_PROJECTIONS = ("wq", "wk", "wv", "wo")


@dataclass
class LoraConfig:
    rank: int = 4
    alpha: float = 8.0
    # None -> query+value projections of every LM block, resolved at attach.
    targets: list[str] | None = None
    projections: tuple[str, ...] = DEFAULT_PROJECTIONS

    def __post_init__(self):
        if self.rank < 1:
            raise ConfigError(f"rank must be >= 1, got {self.rank}")
        if self.alpha <= 0:
            raise ConfigError(f"alpha must be positive, got {self.alpha}")
        bad = set(self.projections) - set(ALL_PROJECTIONS)
        if bad:
            raise ConfigError(f"unknown attention projections {sorted(bad)}")

    @property
    def scale(self) -> float:
        return self.alpha / self.rank


@dataclass
class LoraPair:
    a: Tensor       # [r, d_in]
    b: Tensor       # [d_out, r]
    base: Tensor    # frozen W0 [d_out, d_in]


def resolve_targets(cfg: LoraConfig, params: dict[str, Tensor]) -> list[str]:
    if cfg.targets is not None:
        return list(cfg.targets)
    names = []
    i = 0
    while f"lm.block{i}.attn.wq.weight" in params:
        names.extend(f"lm.block{i}.attn.{p}" for p in cfg.projections)
        i += 1
    return names


def attach(params: dict[str, Tensor], cfg: LoraConfig, rng: np.random.Generator) -> list[str]:
    """Add A/B pairs for every target; returns the resolved target names.

    A is normal(0, 0.02), B is zero, so the adapted forward is
    bit-identical to the base model until training. Attaching twice is
    an error (no stacking).
    """
    targets = resolve_targets(cfg, params)
    if not targets:
        raise ConfigError("no low-rank targets resolved")
    for name in targets:
        key = f"{name}.weight"
        if key not in params:
            raise ConfigError(f"unknown low-rank target {name}")
        if f"lora.A.{name}" in params:
            raise ConfigError(f"low-rank pair already attached to {name} (no stacking)")
        d_out, d_in = params[key].shape
        if cfg.rank > min(d_out, d_in):
            raise ConfigError(
                f"rank {cfg.rank} exceeds min extent of {name} {params[key].shape}")
        dtype = params[key].dtype
        params[f"lora.A.{name}"] = Tensor(
            rng.normal(0.0, 0.02, size=(cfg.rank, d_in)).astype(dtype), dtype=dtype)
        params[f"lora.B.{name}"] = Tensor(
            np.zeros((d_out, cfg.rank), dtype=dtype), dtype=dtype)
    return targets


def lora_forward(x: Tensor, pair: LoraPair, cfg: LoraConfig) -> Tensor:
    """x @ W0.T plus the scaled low-rank path, without materializing B @ A."""
    if x.shape[-1] != pair.base.shape[1]:
        raise ConfigError(f"input width {x.shape[-1]} != base d_in {pair.base.shape[1]}")
    y = ad.matmul(x, ad.transpose(pair.base))
    delta = ad.matmul(ad.matmul(x, ad.transpose(pair.a)), ad.transpose(pair.b))
    return ad.add(y, ad.mul(delta, cfg.scale))


def merge(pair: LoraPair, cfg: LoraConfig) -> Tensor:
    """Collapse the pair into one plain weight W0 + (alpha/r) * B @ A."""
    merged = pair.base.data + cfg.scale * (pair.b.data @ pair.a.data)
    return Tensor(merged.astype(pair.base.dtype), dtype=pair.base.dtype)


def pair_for(params: dict[str, Tensor], target: str) -> LoraPair:
    return LoraPair(a=params[f"lora.A.{target}"],
                    b=params[f"lora.B.{target}"],
                    base=params[f"{target}.weight"])


def merge_into_base(params: dict[str, Tensor], cfg: LoraConfig) -> dict[str, Tensor]:
    """New parameter map with every pair folded into its base weight."""
    out: dict[str, Tensor] = {}
    adapted = [k[len("lora.A."):] for k in params if k.startswith("lora.A.")]
    for name, t in params.items():
        if name.startswith("lora."):
            continue
        out[name] = Tensor(t.data.copy(), dtype=t.dtype)
    for target in adapted:
        out[f"{target}.weight"] = merge(pair_for(params, target), cfg)
    return out


def trainable_param_count(params: dict[str, Tensor]) -> int:
    return sum(t.size for name, t in params.items() if name.startswith("lora."))
