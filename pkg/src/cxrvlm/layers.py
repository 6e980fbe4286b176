"""Shared neural building blocks over the autodiff substrate.

Parameters live in a flat name -> Tensor map. Linear weights are stored
[d_out, d_in] and applied as y = x @ W.T + b; a low-rank delta is added
automatically whenever `lora.A.<name>` / `lora.B.<name>` entries exist
for the projection being applied.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

NEG_INF = -1e9


class ConfigError(ValueError):
    """Configuration inconsistent with the parameter map or contracts."""


def named_rng(seed: int, stream: str) -> np.random.Generator:
    """Deterministic per-purpose RNG derived from one seed."""
    ss = np.random.SeedSequence(entropy=seed, spawn_key=tuple(stream.encode("utf-8")))
    return np.random.default_rng(ss)


def init_linear(params: dict[str, Tensor], name: str, d_out: int, d_in: int,
                rng: np.random.Generator, bias: bool = True,
                std: float = 0.02, dtype=None) -> None:
    dtype = dtype or ad.DEFAULT_DTYPE
    params[f"{name}.weight"] = Tensor(
        rng.normal(0.0, std, size=(d_out, d_in)).astype(dtype), dtype=dtype)
    if bias:
        params[f"{name}.bias"] = Tensor(np.zeros(d_out, dtype=dtype), dtype=dtype)


def init_layer_norm(params: dict[str, Tensor], name: str, d: int, dtype=None) -> None:
    dtype = dtype or ad.DEFAULT_DTYPE
    params[f"{name}.gain"] = Tensor(np.ones(d, dtype=dtype), dtype=dtype)
    params[f"{name}.bias"] = Tensor(np.zeros(d, dtype=dtype), dtype=dtype)


def linear(x: Tensor, params: dict[str, Tensor], name: str, lora=None) -> Tensor:
    """Affine projection, plus the scaled low-rank path when attached."""
    w = params[f"{name}.weight"]
    y = ad.matmul(x, ad.transpose(w))
    b = params.get(f"{name}.bias")
    if b is not None:
        y = ad.add(y, b)
    a_mat = params.get(f"lora.A.{name}")
    if a_mat is not None:
        if lora is None:
            raise ConfigError(f"low-rank weights present for {name} but no LoraConfig given")
        b_mat = params[f"lora.B.{name}"]
        delta = ad.matmul(ad.matmul(x, ad.transpose(a_mat)), ad.transpose(b_mat))
        y = ad.add(y, ad.mul(delta, lora.alpha / lora.rank))
    return y


def layer_norm(x: Tensor, params: dict[str, Tensor], name: str, eps: float = 1e-5) -> Tensor:
    return ad.layer_norm(x, params[f"{name}.gain"], params[f"{name}.bias"], eps=eps)


def causal_mask(n: int, dtype=None) -> Tensor:
    mask = np.triu(np.full((n, n), NEG_INF, dtype=dtype or ad.DEFAULT_DTYPE), k=1)
    return ad.constant(mask, dtype=dtype)


def multi_head_attention(x: Tensor, params: dict[str, Tensor], prefix: str,
                         n_heads: int, causal: bool, lora=None) -> Tensor:
    n, d = x.shape
    if d % n_heads:
        raise ConfigError(f"width {d} not divisible by {n_heads} heads")
    dh = d // n_heads
    q = linear(x, params, f"{prefix}.wq", lora)
    k = linear(x, params, f"{prefix}.wk", lora)
    v = linear(x, params, f"{prefix}.wv", lora)
    mask = causal_mask(n, dtype=x.dtype) if causal else None
    heads = []
    for h in range(n_heads):
        qh = ad.slice_cols(q, h * dh, (h + 1) * dh)
        kh = ad.slice_cols(k, h * dh, (h + 1) * dh)
        vh = ad.slice_cols(v, h * dh, (h + 1) * dh)
        att = ad.mul(ad.matmul(qh, ad.transpose(kh)), 1.0 / np.sqrt(dh))
        if mask is not None:
            att = ad.add(att, mask)
        heads.append(ad.matmul(ad.softmax_rows(att), vh))
    merged = heads[0] if n_heads == 1 else ad.concat(heads, axis=1)
    return linear(merged, params, f"{prefix}.wo", lora)


def mlp(x: Tensor, params: dict[str, Tensor], prefix: str) -> Tensor:
    h = ad.gelu(linear(x, params, f"{prefix}.fc1"))
    return linear(h, params, f"{prefix}.fc2")


def transformer_block(x: Tensor, params: dict[str, Tensor], prefix: str,
                      n_heads: int, causal: bool, lora=None) -> Tensor:
    """Pre-norm residual block: attention then a GELU MLP."""
    x = ad.add(x, multi_head_attention(
        layer_norm(x, params, f"{prefix}.ln1"), params, f"{prefix}.attn",
        n_heads, causal, lora))
    return ad.add(x, mlp(layer_norm(x, params, f"{prefix}.ln2"), params, f"{prefix}.mlp"))


def init_block(params: dict[str, Tensor], prefix: str, d: int,
               rng: np.random.Generator, dtype=None) -> None:
    init_layer_norm(params, f"{prefix}.ln1", d, dtype)
    for proj in ("wq", "wk", "wv", "wo"):
        init_linear(params, f"{prefix}.attn.{proj}", d, d, rng, dtype=dtype)
    init_layer_norm(params, f"{prefix}.ln2", d, dtype)
    init_linear(params, f"{prefix}.mlp.fc1", 4 * d, d, rng, dtype=dtype)
    init_linear(params, f"{prefix}.mlp.fc2", d, 4 * d, rng, dtype=dtype)
