"""Decoder-only causal transformer over spliced text + image embeddings.

The single image-placeholder token in a prompt is expanded into the
full patch-feature sequence at splice time; image positions are
ordinary causal context and receive position embeddings like text.
Decoding is greedy, capped at 150 new tokens.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import layers
from . import tokenizer as tok
from .autodiff import Tensor
from .data import MAX_SEQ_LEN, Role, TokenSequence
from .layers import ConfigError

MAX_NEW_TOKENS = 150


@dataclass
class LMConfig:
    vocab_size: int = tok.VOCAB_SIZE
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    max_positions: int = MAX_SEQ_LEN + 16
    # Readout scale. The final norm pins hidden norms, so with the base
    # weights frozen this bounds how confident any prediction can get;
    # small values keep an untrained model near the uniform baseline.
    head_init_std: float = 0.02

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by {self.n_heads} heads")
        if self.max_positions < 1:
            raise ConfigError("max_positions must be positive")
        if self.head_init_std <= 0:
            raise ConfigError("head_init_std must be positive")


@dataclass
class SplicedInput:
    embeddings: Tensor        # [L, d_model]
    loss_mask: np.ndarray     # bool[L], true on response/<eos> positions
    target_ids: np.ndarray    # int[L], valid where loss_mask
    image_span: tuple[int, int]


def init_params(cfg: LMConfig, rng: np.random.Generator,
                params: dict[str, Tensor] | None = None, dtype=None) -> dict[str, Tensor]:
    params = params if params is not None else {}
    dtype = dtype or ad.DEFAULT_DTYPE
    params["lm.tok_embed"] = Tensor(
        rng.normal(0.0, 0.02, size=(cfg.vocab_size, cfg.d_model)).astype(dtype), dtype=dtype)
    params["lm.pos_embed"] = Tensor(
        rng.normal(0.0, 0.02, size=(cfg.max_positions, cfg.d_model)).astype(dtype), dtype=dtype)
    for i in range(cfg.n_layers):
        layers.init_block(params, f"lm.block{i}", cfg.d_model, rng, dtype=dtype)
    layers.init_layer_norm(params, "lm.ln_f", cfg.d_model, dtype)
    layers.init_linear(params, "lm.head", cfg.vocab_size, cfg.d_model, rng,
                       bias=False, std=cfg.head_init_std, dtype=dtype)
    return params


def splice(sequence: TokenSequence, patch_embeds: Tensor,
           params: dict[str, Tensor]) -> SplicedInput:
    """Replace the placeholder token with the patch embeddings, in order."""
    hits = [i for i, t in enumerate(sequence.ids) if t == tok.IMAGE_ID]
    if len(hits) != 1:
        raise ConfigError(
            f"sequence must contain exactly one image placeholder, found {len(hits)}")
    at = hits[0]
    p = patch_embeds.shape[0]
    table = params["lm.tok_embed"]

    ids = np.asarray(sequence.ids, dtype=np.int64)
    pre_ids, post_ids = ids[:at], ids[at + 1:]
    parts = []
    if len(pre_ids):
        parts.append(ad.embedding(table, pre_ids))
    parts.append(patch_embeds)
    if len(post_ids):
        parts.append(ad.embedding(table, post_ids))
    embeddings = ad.concat(parts, axis=0)

    length = len(ids) - 1 + p
    roles = np.asarray(sequence.roles, dtype=np.int64)
    mask = np.zeros(length, dtype=bool)
    targets = np.zeros(length, dtype=np.int64)
    resp = roles == Role.RESPONSE
    mask[:at] = resp[:at]
    mask[at + p:] = resp[at + 1:]
    targets[:at] = ids[:at]
    targets[at + p:] = ids[at + 1:]
    return SplicedInput(embeddings, mask, targets, (at, at + p))


def forward(inp: SplicedInput, cfg: LMConfig, params: dict[str, Tensor],
            lora=None) -> Tensor:
    """Logits [L, vocab] under a strict causal mask."""
    length = inp.embeddings.shape[0]
    if length > cfg.max_positions:
        raise ConfigError(
            f"spliced length {length} exceeds max_positions {cfg.max_positions}")
    x = ad.add(inp.embeddings, ad.slice_rows(params["lm.pos_embed"], 0, length))
    for i in range(cfg.n_layers):
        x = layers.transformer_block(x, params, f"lm.block{i}", cfg.n_heads,
                                     causal=True, lora=lora)
    x = layers.layer_norm(x, params, "lm.ln_f")
    return layers.linear(x, params, "lm.head", lora)


def lm_loss(inp: SplicedInput, cfg: LMConfig, params: dict[str, Tensor],
            lora=None) -> tuple[Tensor, int]:
    """(mean masked next-token cross-entropy, number of masked targets)."""
    if not inp.loss_mask.any():
        raise ad.EmptyLossError("sample has no masked response positions")
    logits = forward(inp, cfg, params, lora)
    n = inp.embeddings.shape[0]
    pred = ad.slice_rows(logits, 0, n - 1)
    loss = ad.softmax_cross_entropy(pred, inp.target_ids[1:], inp.loss_mask[1:])
    return loss, int(inp.loss_mask[1:].sum())


def generate_greedy(prompt: SplicedInput, cfg: LMConfig, params: dict[str, Tensor],
                    lora=None, max_new_tokens: int = MAX_NEW_TOKENS) -> list[int]:
    """Greedy decode from a prompt-only splice; stops at <eos> or the cap.

    Ties break toward the lowest token id (argmax picks the first max).
    """
    table = params["lm.tok_embed"]
    out: list[int] = []
    with ad.no_grad():
        emb = prompt.embeddings
        for _ in range(max_new_tokens):
            work = SplicedInput(emb, prompt.loss_mask, prompt.target_ids, prompt.image_span)
            logits = forward(work, cfg, params, lora)
            nxt = int(np.argmax(logits.data[-1]))
            if nxt == tok.EOS_ID:
                break
            out.append(nxt)
            emb = ad.concat([emb, ad.embedding(table, [nxt])], axis=0)
    return out
