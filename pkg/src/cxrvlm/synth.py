"""Deterministic synthetic corpora for demos, self-checks, and tests."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .images import GrayImage, save_pgm
from .layers import named_rng

_WORDS = ("lungs", "clear", "pleural", "effusion", "small", "left", "right",
          "stable", "cardiac", "silhouette", "no", "acute", "process", "basilar",
          "opacity", "unchanged", "mild", "edema", "focal", "consolidation")


def _random_image(rng: np.random.Generator, out_dir: Path, name: str) -> str:
    w = int(rng.integers(12, 40))
    h = int(rng.integers(12, 40))
    px = rng.integers(0, 256, size=(h, w)).astype(np.uint8)
    path = out_dir / f"{name}.pgm"
    save_pgm(path, GrayImage(w, h, px))
    return path.name


def _sentence(rng: np.random.Generator, n_words: int) -> str:
    words = [str(_WORDS[int(rng.integers(0, len(_WORDS)))]) for _ in range(n_words)]
    return " ".join(words).capitalize() + "."


def make_toy_corpus(out_dir, n_per_split: dict[str, int], seed: int = 17,
                    max_images: int = 6, words_lo: int = 3, words_hi: int = 12) -> Path:
    """Write PGM images plus a manifest.jsonl; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = named_rng(seed, "synth")
    lines = []
    counter = 0
    for split, count in n_per_split.items():
        for _ in range(count):
            counter += 1
            sid = f"s{counter:04d}"
            n_imgs = int(rng.integers(1, max_images + 1))
            imgs = [_random_image(rng, out_dir, f"{sid}_{j}") for j in range(n_imgs)]
            record = {"study_id": sid, "images": imgs, "split": split}
            # Roughly a third findings-only, a third impressions-only, rest both.
            which = int(rng.integers(0, 3))
            if which != 1:
                record["findings"] = _sentence(rng, int(rng.integers(words_lo, words_hi + 1)))
            if which != 0:
                record["impressions"] = _sentence(rng, int(rng.integers(words_lo, words_hi + 1)))
            lines.append(json.dumps(record))
    manifest = out_dir / "manifest.jsonl"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest


def make_memorization_corpus(out_dir, section: str = "findings",
                             reports: tuple[str, ...] = ("left base.", "no change.",
                                                         "mild edema.", "all clear."),
                             seed: int = 17) -> Path:
    """Four distinct-image studies with short reports, mirrored into validation."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = named_rng(seed, "synth-memo")
    lines = []
    for i, text in enumerate(reports):
        sid = f"memo{i}"
        img = _random_image(rng, out_dir, sid)
        for split in ("training", "validation"):
            lines.append(json.dumps(
                {"study_id": sid, "images": [img], section: text, "split": split}))
    manifest = out_dir / "manifest.jsonl"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest
