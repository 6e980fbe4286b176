"""Two-stage training: adapter-only alignment, then low-rank LM tuning.

Stage 1 trains only the adapter for `stage1_epochs`; stage 2 freezes
encoder, adapter, and LM base weights and trains only the low-rank
pairs, checkpointing on the smallest validation loss. One optimizer
step is a serial transaction; everything is seeded and deterministic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import adapter as adapter_mod
from . import autodiff as ad
from . import data as data_mod
from . import lm as lm_mod
from .autodiff import Tensor
from .layers import ConfigError, named_rng
from .lora import LoraConfig
from .model import VLM


@dataclass
class TrainConfig:
    lr_max: float = 1e-5
    warmup_ratio: float = 0.03
    global_batch: int = 16
    stage1_epochs: int = 1
    stage2_epochs: int = 3
    seed: int = 17
    eval_every: int = 50
    section: str = "findings"
    weight_decay: float = 0.0
    clip_grad_norm: float | None = None  # off by default
    # Override for the stage-2 freeze: also keep tuning the adapter jointly
    # with the low-rank pairs. Default honors the staged procedure.
    stage2_train_adapter: bool = False

    def __post_init__(self):
        if not 0.0 < self.warmup_ratio < 1.0:
            raise ConfigError(f"warmup_ratio {self.warmup_ratio} outside (0, 1)")
        if self.stage1_epochs < 1 or self.stage2_epochs < 1:
            raise ConfigError("epoch counts must be >= 1")
        if self.section not in data_mod.SECTIONS:
            raise ConfigError(f"unknown section {self.section!r}")
        if self.global_batch < 1 or self.eval_every < 1:
            raise ConfigError("global_batch and eval_every must be >= 1")


@dataclass
class TrainState:
    step: int = 0
    moments_m: dict[str, np.ndarray] = field(default_factory=dict)
    moments_v: dict[str, np.ndarray] = field(default_factory=dict)
    best_eval: float = math.inf
    best_path: str | None = None


def cosine_lr(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear ramp to lr_max over the warmup steps, then a cosine decay to 0."""
    if total_steps <= 0:
        raise ConfigError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    warmup = max(1, round(cfg.warmup_ratio * total_steps))
    if step < warmup:
        return cfg.lr_max * step / warmup
    span = max(1, total_steps - warmup)
    return cfg.lr_max * 0.5 * (1.0 + math.cos(math.pi * (step - warmup) / span))


def adamw_step(model: VLM, state: TrainState, lr: float, cfg: TrainConfig,
               beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    names = model.trainable_names()
    if cfg.clip_grad_norm is not None:
        total = math.sqrt(sum(float((model.params[n].grad ** 2).sum())
                              for n in names if model.params[n].grad is not None))
        if total > cfg.clip_grad_norm and total > 0:
            scale = cfg.clip_grad_norm / total
            for n in names:
                if model.params[n].grad is not None:
                    model.params[n].grad = model.params[n].grad * scale
    t = state.step
    for name in names:
        p = model.params[name]
        if p.grad is None:
            continue
        g = p.grad
        m = state.moments_m.setdefault(name, np.zeros_like(p.data))
        v = state.moments_v.setdefault(name, np.zeros_like(p.data))
        m[...] = beta1 * m + (1.0 - beta1) * g
        v[...] = beta2 * v + (1.0 - beta2) * g * g
        mhat = m / (1.0 - beta1 ** t)
        vhat = v / (1.0 - beta2 ** t)
        new = p.data - lr * mhat / (np.sqrt(vhat) + eps)
        if cfg.weight_decay:
            new = new - lr * cfg.weight_decay * p.data
        p.data = new.astype(p.data.dtype)


@dataclass
class Prepared:
    sample: data_mod.StudySample
    sequence: data_mod.TokenSequence
    features: Tensor               # frozen encoder output [P, d_vision]
    tokens: Tensor | None = None   # projected image tokens, cached when adapter is frozen


def prepare_corpus(model: VLM, samples: list[data_mod.StudySample], section: str,
                   root=None) -> list[Prepared]:
    """Cache token sequences and (always frozen) encoder features."""
    from . import vision as vision_mod
    out = []
    for s in samples:
        if not s.has_section(section):
            continue
        seq = data_mod.build_training_sequence(s, section)
        with ad.no_grad():
            image = model.prepare_image(s, root)
            feats = vision_mod.encode(image, model.cfg.vision, model.params).tokens
        out.append(Prepared(s, seq, feats))
    return out


def _sample_loss(model: VLM, prep: Prepared) -> tuple[ad.Tensor, int]:
    tokens = prep.tokens
    if tokens is None:
        tokens = adapter_mod.project(prep.features, model.cfg.adapter, model.params)
    spliced = model.splice(prep.sequence, tokens, study_id=prep.sample.study_id)
    return lm_mod.lm_loss(spliced, model.cfg.lm, model.params, model.lora_cfg)


def batch_loss(model: VLM, batch: list[Prepared]) -> tuple[ad.Tensor, float]:
    """Token-weighted mean masked loss over the batch, as one graph."""
    totals = []
    n_total = 0
    for prep in batch:
        loss, n = _sample_loss(model, prep)
        totals.append(ad.mul(loss, float(n)))
        n_total += n
    acc = totals[0]
    for t in totals[1:]:
        acc = ad.add(acc, t)
    mean = ad.mul(acc, 1.0 / n_total)
    return mean, float(mean.data)


def evaluate_loss(model: VLM, prepared: list[Prepared]) -> float:
    """Token-weighted mean masked loss over a split; pure, consumes no RNG."""
    if not prepared:
        raise ConfigError("evaluation split is empty")
    total = 0.0
    n_total = 0
    with ad.no_grad():
        for prep in prepared:
            loss, n = _sample_loss(model, prep)
            total += float(loss.data) * n
            n_total += n
    return total / n_total


LogFn = Callable[[dict], None]


def _zero_grads(model: VLM) -> None:
    for name in model.trainable_names():
        model.params[name].grad = None


def _batches(order: list[int], batch_size: int) -> list[list[int]]:
    return [order[i:i + batch_size] for i in range(0, len(order), batch_size)]


def _run_steps(model: VLM, prepared: list[Prepared], cfg: TrainConfig, stage: int,
               epochs: int, state: TrainState, log: LogFn | None,
               eval_hook: Callable[[TrainState], None] | None) -> None:
    shuffle_rng = named_rng(cfg.seed, f"shuffle-stage{stage}")
    steps_per_epoch = math.ceil(len(prepared) / cfg.global_batch)
    total_steps = steps_per_epoch * epochs
    last_eval = -1
    for _ in range(epochs):
        order = list(shuffle_rng.permutation(len(prepared)))
        for batch_idx in _batches(order, cfg.global_batch):
            state.step += 1
            lr = cosine_lr(min(state.step, total_steps), total_steps, cfg)
            _zero_grads(model)
            loss, loss_val = batch_loss(model, [prepared[i] for i in batch_idx])
            loss.backward()
            adamw_step(model, state, lr, cfg)
            if log:
                log({"stage": stage, "step": state.step, "lr": lr, "train_loss": loss_val})
            if eval_hook and state.step % cfg.eval_every == 0:
                eval_hook(state)
                last_eval = state.step
        if eval_hook and last_eval != state.step:
            eval_hook(state)
            last_eval = state.step


def run_stage1(model: VLM, corpus: list[data_mod.StudySample], cfg: TrainConfig,
               out_dir, root=None, log: LogFn | None = None) -> str:
    """Adapter-only alignment; encoder and LM stay byte-identical."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train = [s for s in corpus if s.split == "training" and s.has_section(cfg.section)]
    if not train:
        raise ConfigError(f"no training samples with {cfg.section} text")
    prepared = prepare_corpus(model, train, cfg.section, root)
    model.set_trainable({n for n in model.params if n.startswith("adapter.")})

    state = TrainState()
    _run_steps(model, prepared, cfg, stage=1, epochs=cfg.stage1_epochs,
               state=state, log=log, eval_hook=None)

    val = [s for s in corpus if s.split == "validation" and s.has_section(cfg.section)]
    eval_loss = None
    if val:
        eval_loss = evaluate_loss(model, prepare_corpus(model, val, cfg.section, root))
        if log:
            log({"stage": 1, "step": state.step, "eval_loss": eval_loss})
    tag = f"{eval_loss:.6f}" if eval_loss is not None else "na"
    path = out_dir / f"ckpt_stage1_step{state.step:06d}_eval{tag}.cxrvlm"
    model.save(path, {"stage": 1, "step": state.step, "eval_loss": eval_loss,
                      "section": cfg.section})
    return str(path)


def run_stage2(model: VLM, corpus: list[data_mod.StudySample], cfg: TrainConfig,
               lora_cfg: LoraConfig, out_dir, root=None,
               log: LogFn | None = None) -> str:
    """Low-rank tuning of the LM; returns the smallest-validation-loss checkpoint."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train = [s for s in corpus if s.split == "training" and s.has_section(cfg.section)]
    val = [s for s in corpus if s.split == "validation" and s.has_section(cfg.section)]
    if not train:
        raise ConfigError(f"no training samples with {cfg.section} text")
    if not val:
        raise ConfigError(f"no validation samples with {cfg.section} text")

    if not any(n.startswith("lora.") for n in model.params):
        model.attach_lora(lora_cfg, cfg.seed)
    prepared = prepare_corpus(model, train, cfg.section, root)
    prepared_val = prepare_corpus(model, val, cfg.section, root)
    trainable = {n for n in model.params if n.startswith("lora.")}
    if cfg.stage2_train_adapter:
        trainable |= {n for n in model.params if n.startswith("adapter.")}
    model.set_trainable(trainable)

    if not cfg.stage2_train_adapter:
        # Encoder and adapter both frozen: image tokens are constants.
        with ad.no_grad():
            for prep in prepared + prepared_val:
                prep.tokens = adapter_mod.project(prep.features, model.cfg.adapter,
                                                  model.params)

    state = TrainState()

    def eval_hook(st: TrainState) -> None:
        loss = evaluate_loss(model, prepared_val)
        if log:
            log({"stage": 2, "step": st.step, "eval_loss": loss})
        path = out_dir / f"ckpt_stage2_step{st.step:06d}_eval{loss:.6f}.cxrvlm"
        if not path.exists():
            model.save(path, {"stage": 2, "step": st.step, "eval_loss": loss,
                              "section": cfg.section})
        if loss < st.best_eval:
            st.best_eval = loss
            st.best_path = str(path)

    _run_steps(model, prepared, cfg, stage=2, epochs=cfg.stage2_epochs,
               state=state, log=log, eval_hook=eval_hook)
    assert state.best_path is not None
    return state.best_path
