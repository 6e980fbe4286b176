"""Study manifests, instruction prompts, training sequences, corpus stats.

A manifest is JSON-lines, one study per line:
    {"study_id": ..., "images": [...], "findings": ..., "impressions": ..., "split": ...}
Invalid lines are recorded as rejections instead of aborting the load.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

from . import tokenizer as tok

SPLITS = ("training", "validation", "test-public", "test-hidden")
SECTIONS = ("findings", "impressions")
MAX_SEQ_LEN = 1024
PROMPT_TEMPLATE = "Provide a description of the {section} from the radiology <image>\n image."


class ManifestError(ValueError):
    """Manifest file unusable as a whole (missing or empty)."""


class SectionMissing(LookupError):
    """Requested report section absent from the sample; skip it."""


class Role(IntEnum):
    PROMPT = 0
    IMAGE = 1
    RESPONSE = 2
    PAD = 3


@dataclass
class StudySample:
    study_id: str
    image_paths: list[str]
    findings: str | None
    impressions: str | None
    split: str

    def section_text(self, section: str) -> str:
        if section not in SECTIONS:
            raise ValueError(f"unknown section {section!r}")
        text = getattr(self, section)
        if text is None:
            raise SectionMissing(f"study {self.study_id} has no {section} text")
        return text

    def has_section(self, section: str) -> bool:
        return getattr(self, section) is not None


@dataclass
class Rejection:
    line_no: int
    study_id: str | None
    reason: str


@dataclass
class ManifestLoad:
    samples: list[StudySample]
    rejections: list[Rejection] = field(default_factory=list)


def _parse_line(line_no: int, line: str) -> StudySample:
    record = json.loads(line)
    study_id = record.get("study_id")
    if not isinstance(study_id, str) or not study_id:
        raise ValueError("missing or empty study_id")
    images = record.get("images")
    if not isinstance(images, list) or not images or not all(isinstance(p, str) for p in images):
        raise ValueError(f"study {study_id}: needs a non-empty list of image paths")
    findings = record.get("findings")
    impressions = record.get("impressions")
    if findings is None and impressions is None:
        raise ValueError(f"study {study_id}: needs at least one of findings/impressions")
    split = record.get("split")
    if split not in SPLITS:
        raise ValueError(f"study {study_id}: split {split!r} not in {SPLITS}")
    return StudySample(study_id, list(images), findings, impressions, split)


def load_manifest(path) -> ManifestLoad:
    """Order-preserving parse; bad lines become Rejection records."""
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not any(ln.strip() for ln in lines):
        raise ManifestError(f"{path}: empty corpus")
    out = ManifestLoad(samples=[])
    for i, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            out.samples.append(_parse_line(i, line))
        except json.JSONDecodeError as exc:
            out.rejections.append(Rejection(i, None, f"line {i}: malformed JSON ({exc.msg})"))
        except ValueError as exc:
            rec_id = None
            try:
                rec_id = json.loads(line).get("study_id")
            except Exception:
                pass
            out.rejections.append(Rejection(i, rec_id, f"line {i}: {exc}"))
    return out


def select_images(sample: StudySample, limit: int = 4) -> list[str]:
    """Up to the first `limit` image paths, original order preserved."""
    return sample.image_paths[:limit]


def render_prompt(section: str) -> str:
    if section not in SECTIONS:
        raise ValueError(f"unknown section {section!r}")
    return PROMPT_TEMPLATE.format(section=section)


@dataclass
class TokenSequence:
    ids: list[int]
    roles: list[Role]

    def __post_init__(self):
        if len(self.ids) != len(self.roles):
            raise ValueError("ids and roles lengths differ")
        if len(self.ids) > MAX_SEQ_LEN:
            raise ValueError(f"sequence length {len(self.ids)} exceeds {MAX_SEQ_LEN}")

    def loss_mask(self) -> list[bool]:
        return [r == Role.RESPONSE for r in self.roles]

    def placeholder_index(self) -> int:
        hits = [i for i, t in enumerate(self.ids) if t == tok.IMAGE_ID]
        if len(hits) != 1:
            raise ValueError(f"expected exactly one image placeholder, found {len(hits)}")
        return hits[0]


def build_prompt_sequence(section: str) -> TokenSequence:
    """<bos> plus the rendered instruction; used as the generation prefix."""
    ids = [tok.BOS_ID]
    roles = [Role.PROMPT]
    for t in tok.tokenize_template(render_prompt(section)):
        ids.append(t)
        roles.append(Role.IMAGE if t == tok.IMAGE_ID else Role.PROMPT)
    return TokenSequence(ids, roles)


def build_training_sequence(sample: StudySample, section: str) -> TokenSequence:
    """Prompt plus the reference report, truncated from the right to 1024.

    The loss mask (RESPONSE role) covers the report tokens and the
    closing <eos>; the prompt region never carries loss.
    """
    report = sample.section_text(section)
    seq = build_prompt_sequence(section)
    ids = list(seq.ids)
    roles = list(seq.roles)
    for t in tok.tokenize(report):
        ids.append(t)
        roles.append(Role.RESPONSE)
    ids.append(tok.EOS_ID)
    roles.append(Role.RESPONSE)
    return TokenSequence(ids[:MAX_SEQ_LEN], roles[:MAX_SEQ_LEN])


@dataclass
class StatsCell:
    count: int
    word_mean: float | None
    word_std: float | None
    img_mean: float | None
    img_std: float | None


def _mean_std(values: list[float]) -> tuple[float | None, float | None]:
    n = len(values)
    if n == 0:
        return None, None
    mean = sum(values) / n
    if n < 2:
        return mean, None
    var = sum((v - mean) ** 2 for v in values) / (n - 1)
    return mean, math.sqrt(var)


def corpus_stats(samples: list[StudySample]) -> dict[str, dict[str, StatsCell]]:
    """Per split and section: sample count, word-count and image-count stats.

    Word count is whitespace splitting of the section text; std is the
    sample (n-1) standard deviation, reported absent for n < 2.
    """
    grid: dict[str, dict[str, StatsCell]] = {}
    for split in SPLITS:
        grid[split] = {}
        in_split = [s for s in samples if s.split == split]
        for section in SECTIONS:
            have = [s for s in in_split if s.has_section(section)]
            words = [float(len(s.section_text(section).split())) for s in have]
            imgs = [float(len(s.image_paths)) for s in have]
            wm, ws = _mean_std(words)
            im, istd = _mean_std(imgs)
            grid[split][section] = StatsCell(len(have), wm, ws, im, istd)
    return grid


def stats_to_json(grid: dict[str, dict[str, StatsCell]]) -> dict:
    return {
        split: {
            section: {
                "count": cell.count,
                "word_mean": cell.word_mean,
                "word_std": cell.word_std,
                "img_mean": cell.img_mean,
                "img_std": cell.img_std,
            }
            for section, cell in by_section.items()
        }
        for split, by_section in grid.items()
    }
