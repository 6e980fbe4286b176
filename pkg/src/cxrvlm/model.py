"""End-to-end model assembly: encoder -> adapter -> language model.

One `VLM` instance per report section. Parameters live in a flat
name -> Tensor map so training stages, checkpoints, and LoRA all
operate on names.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import adapter as adapter_mod
from . import autodiff as ad
from . import data as data_mod
from . import images as img_mod
from . import lm as lm_mod
from . import lora as lora_mod
from . import vision as vision_mod
from .autodiff import Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .data import StudySample, TokenSequence
from .layers import ConfigError, named_rng
from .lm import LMConfig, SplicedInput
from .lora import LoraConfig
from .vision import VisionConfig
from .adapter import AdapterConfig

# Recorded in checkpoint meta: encoder features are the states entering
# the final block, before any final normalization.
PENULTIMATE_CHOICE = "pre_final_block_no_norm"


@dataclass
class ModelConfig:
    vision: VisionConfig = dataclasses.field(default_factory=VisionConfig)
    adapter: AdapterConfig = dataclasses.field(default_factory=AdapterConfig)
    lm: LMConfig = dataclasses.field(default_factory=LMConfig)

    def __post_init__(self):
        if self.adapter.d_in != self.vision.d_vision:
            raise ConfigError(
                f"adapter d_in {self.adapter.d_in} != encoder width {self.vision.d_vision}")
        if self.adapter.d_out != self.lm.d_model:
            raise ConfigError(
                f"adapter d_out {self.adapter.d_out} != LM width {self.lm.d_model}")
        if self.lm.max_positions < data_mod.MAX_SEQ_LEN - 1 + self.vision.num_patches:
            raise ConfigError(
                "max_positions must cover the longest spliced sequence "
                f"({data_mod.MAX_SEQ_LEN} - 1 + {self.vision.num_patches} patches)")

    def to_json(self) -> dict:
        return {
            "vision": dataclasses.asdict(self.vision),
            "adapter": dataclasses.asdict(self.adapter),
            "lm": dataclasses.asdict(self.lm),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        return cls(vision=VisionConfig(**obj["vision"]),
                   adapter=AdapterConfig(**obj["adapter"]),
                   lm=LMConfig(**obj["lm"]))


class VLM:
    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor],
                 lora_cfg: LoraConfig | None = None):
        self.cfg = cfg
        self.params = params
        self.lora_cfg = lora_cfg

    @classmethod
    def initialize(cls, cfg: ModelConfig, seed: int, dtype=None) -> "VLM":
        rng = named_rng(seed, "init")
        params: dict[str, Tensor] = {}
        vision_mod.init_params(cfg.vision, rng, params, dtype=dtype)
        adapter_mod.init_params(cfg.adapter, rng, params, dtype=dtype)
        lm_mod.init_params(cfg.lm, rng, params, dtype=dtype)
        return cls(cfg, params)

    def attach_lora(self, lora_cfg: LoraConfig, seed: int) -> list[str]:
        targets = lora_mod.attach(self.params, lora_cfg, named_rng(seed, "lora-init"))
        self.lora_cfg = lora_cfg
        return targets

    def prepare_image(self, sample: StudySample, root=None) -> img_mod.GrayImage:
        """First-four selection, horizontal stitch, square resample."""
        from pathlib import Path
        side = self.cfg.vision.image_side
        paths = data_mod.select_images(sample)
        loaded = [img_mod.load_image(p if root is None else Path(root) / p) for p in paths]
        stitched = img_mod.stitch_horizontal(loaded, target_height=side)
        return img_mod.resize_to_encoder(stitched, side)

    def image_tokens(self, image: img_mod.GrayImage) -> Tensor:
        feats = vision_mod.encode(image, self.cfg.vision, self.params)
        return adapter_mod.project(feats.tokens, self.cfg.adapter, self.params)

    def splice(self, sequence: TokenSequence, patch_embeds: Tensor,
               study_id: str | None = None) -> SplicedInput:
        try:
            return lm_mod.splice(sequence, patch_embeds, self.params)
        except ConfigError as exc:
            if study_id is None:
                raise
            raise ConfigError(f"study {study_id}: {exc}") from exc

    def sample_loss(self, sample: StudySample, section: str,
                    root=None) -> tuple[ad.Tensor, int]:
        """(mean masked loss, masked-token count) for one study."""
        seq = data_mod.build_training_sequence(sample, section)
        spliced = self.splice(seq, self.image_tokens(self.prepare_image(sample, root)),
                              study_id=sample.study_id)
        return lm_mod.lm_loss(spliced, self.cfg.lm, self.params, self.lora_cfg)

    def generate(self, sample: StudySample, section: str, root=None,
                 max_new_tokens: int = lm_mod.MAX_NEW_TOKENS) -> list[int]:
        seq = data_mod.build_prompt_sequence(section)
        with ad.no_grad():
            spliced = self.splice(seq, self.image_tokens(self.prepare_image(sample, root)))
            return lm_mod.generate_greedy(spliced, self.cfg.lm, self.params,
                                          self.lora_cfg, max_new_tokens)

    def set_trainable(self, trainable_names: set[str]) -> None:
        unknown = trainable_names - set(self.params)
        if unknown:
            raise ConfigError(f"unknown trainable parameters {sorted(unknown)}")
        for name, t in self.params.items():
            t.requires_grad = name in trainable_names
            if not t.requires_grad:
                t.grad = None

    def trainable_names(self) -> list[str]:
        return sorted(n for n, t in self.params.items() if t.requires_grad)

    def param_hashes(self) -> dict[str, bytes]:
        import hashlib
        return {n: hashlib.sha256(t.data.tobytes()).digest() for n, t in self.params.items()}

    def save(self, path, extra_meta: dict | None = None) -> None:
        meta = {
            "model_config": self.cfg.to_json(),
            "penultimate": PENULTIMATE_CHOICE,
        }
        if self.lora_cfg is not None:
            meta["lora_config"] = dataclasses.asdict(self.lora_cfg)
        if extra_meta:
            meta.update(extra_meta)
        save_checkpoint(path, {n: t.data for n, t in self.params.items()}, meta)

    @classmethod
    def load(cls, path) -> "VLM":
        tensors, meta = load_checkpoint(path)
        if "model_config" not in meta:
            raise ConfigError(f"{path}: checkpoint carries no model config")
        cfg = ModelConfig.from_json(meta["model_config"])
        lora_cfg = None
        if "lora_config" in meta:
            lc = dict(meta["lora_config"])
            if lc.get("projections") is not None:
                lc["projections"] = tuple(lc["projections"])
            lora_cfg = LoraConfig(**lc)
        model = cls.initialize(cfg, seed=0)
        if lora_cfg is not None and any(k.startswith("lora.") for k in tensors):
            model.attach_lora(lora_cfg, seed=0)
        mismatches = []
        expected = {n: t.data.shape for n, t in model.params.items()}
        for name, shape in sorted(expected.items()):
            if name not in tensors:
                mismatches.append(f"missing {name} {shape}")
            elif tensors[name].shape != shape:
                mismatches.append(f"{name}: file {tensors[name].shape} vs model {shape}")
        for name in sorted(set(tensors) - set(expected)):
            mismatches.append(f"unexpected {name} {tensors[name].shape}")
        if mismatches:
            raise CheckpointMismatch(mismatches)
        for name, arr in tensors.items():
            model.params[name] = Tensor(arr, dtype=np.float32)
        return model


class CheckpointMismatch(ValueError):
    def __init__(self, diffs: list[str]):
        super().__init__("checkpoint/config mismatch:\n  " + "\n  ".join(diffs))
        self.diffs = diffs
