"""Report-quality metrics over prediction/reference corpora.

Lexical scores (corpus BLEU-4 without smoothing, mean ROUGE-L with
beta=1.2) tokenize by lowercasing and whitespace splitting. Clinical
scores are aggregations over caller-provided side data: 14-label
micro-F1, multiset entity F1, and greedy cosine-matching embedding F1.
All scores live in [0, 100]; a metric whose inputs are missing is
reported absent rather than zero.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

NUM_LABELS = 14
ROUGE_BETA = 1.2


class AlignmentError(ValueError):
    """Prediction and reference corpora do not pair up by id/section."""

    def __init__(self, orphans: list[str]):
        super().__init__("unmatched records: " + ", ".join(orphans))
        self.orphans = orphans


@dataclass
class ScoredPair:
    prediction: str
    reference: str
    pred_labels: list[bool] | None = None
    ref_labels: list[bool] | None = None
    pred_entities: list[tuple[str, str]] | None = None
    ref_entities: list[tuple[str, str]] | None = None
    pred_embeddings: np.ndarray | None = None  # [n_tokens, width]
    ref_embeddings: np.ndarray | None = None

    def __post_init__(self):
        for side in (self.pred_labels, self.ref_labels):
            if side is not None and len(side) != NUM_LABELS:
                raise ValueError(f"label vectors must have length {NUM_LABELS}")


@dataclass
class MetricReport:
    bleu4: float | None = None
    rougel: float | None = None
    label_f1: float | None = None
    entity_f1: float | None = None
    embed_f1: float | None = None
    zero_norm_embeddings: int = 0

    def as_dict(self) -> dict:
        return {
            "bleu4": self.bleu4,
            "rougel": self.rougel,
            "label_f1": self.label_f1,
            "entity_f1": self.entity_f1,
            "embed_f1": self.embed_f1,
        }


def _tokens(text: str) -> list[str]:
    return text.lower().split()


def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu4(pairs: list[ScoredPair]) -> float:
    """Corpus BLEU-4: clipped n-gram precisions, brevity penalty, no smoothing."""
    if not pairs:
        raise ValueError("bleu4 needs a non-empty corpus")
    matched = [0] * 4
    possible = [0] * 4
    cand_len = ref_len = 0
    for pair in pairs:
        cand = _tokens(pair.prediction)
        ref = _tokens(pair.reference)
        cand_len += len(cand)
        ref_len += len(ref)
        for n in range(1, 5):
            cgrams = _ngrams(cand, n)
            rgrams = _ngrams(ref, n)
            possible[n - 1] += max(0, len(cand) - n + 1)
            matched[n - 1] += sum(min(c, rgrams[g]) for g, c in cgrams.items())
    if cand_len == 0:
        return 0.0
    # An order with no candidate n-grams at all is vacuously precise;
    # an order with slots but zero matches forces the score to 0.
    log_prec = 0.0
    for m, p in zip(matched, possible):
        if p == 0:
            continue
        if m == 0:
            return 0.0
        log_prec += math.log(m / p) / 4.0
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / max(1, cand_len))
    return 100.0 * bp * math.exp(log_prec)


def lcs_length(a: list[str], b: list[str]) -> int:
    """Longest common subsequence length by dynamic programming."""
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0] * (len(b) + 1)
        for j, y in enumerate(b, start=1):
            cur[j] = prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1])
        prev = cur
    return prev[-1]


def rouge_l(pairs: list[ScoredPair]) -> float:
    """Mean per-pair LCS F-measure with beta=1.2, times 100."""
    if not pairs:
        raise ValueError("rouge_l needs a non-empty corpus")
    beta2 = ROUGE_BETA ** 2
    total = 0.0
    for pair in pairs:
        cand = _tokens(pair.prediction)
        ref = _tokens(pair.reference)
        lcs = lcs_length(cand, ref)
        if lcs == 0 or not cand or not ref:
            continue
        p = lcs / len(cand)
        r = lcs / len(ref)
        total += ((1 + beta2) * p * r) / (r + beta2 * p)
    return 100.0 * total / len(pairs)


def label_micro_f1(pairs: list[ScoredPair]) -> float:
    """Micro-averaged F1 over all (pair, label) positive decisions."""
    tp = fp = fn = 0
    for pair in pairs:
        if pair.pred_labels is None or pair.ref_labels is None:
            raise ValueError("label vectors missing on a pair")
        for p, r in zip(pair.pred_labels, pair.ref_labels):
            if p and r:
                tp += 1
            elif p and not r:
                fp += 1
            elif r and not p:
                fn += 1
    denom = 2 * tp + fp + fn
    return 100.0 * (2 * tp / denom) if denom else 100.0


def entity_f1(pairs: list[ScoredPair]) -> float:
    """Corpus F1 over (lowercased surface form, label) multisets."""
    tp = fp = fn = 0
    for pair in pairs:
        if pair.pred_entities is None or pair.ref_entities is None:
            raise ValueError("entity lists missing on a pair")
        pred = Counter((s.lower(), lab) for s, lab in pair.pred_entities)
        ref = Counter((s.lower(), lab) for s, lab in pair.ref_entities)
        inter = sum((pred & ref).values())
        tp += inter
        fp += sum(pred.values()) - inter
        fn += sum(ref.values()) - inter
    denom = 2 * tp + fp + fn
    return 100.0 * (2 * tp / denom) if denom else 100.0


def _unit_rows(mat: np.ndarray) -> tuple[np.ndarray, int]:
    """Normalize rows to unit length, excluding zero-norm rows."""
    mat = np.asarray(mat, dtype=np.float64)
    norms = np.linalg.norm(mat, axis=1)
    keep = norms > 0
    return mat[keep] / norms[keep, None], int((~keep).sum())


def _greedy_match(src: np.ndarray, dst: np.ndarray) -> float:
    """Mean over src rows of the best cosine match among dst rows."""
    if len(src) == 0 or len(dst) == 0:
        return 0.0
    return float((src @ dst.T).max(axis=1).mean())


def embed_f1(pairs: list[ScoredPair]) -> tuple[float, int]:
    """Greedy cosine matching both ways, harmonic mean, corpus mean x100.

    Returns (score, zero-norm vector count); zero-norm vectors are
    excluded from matching. No baseline rescaling; a pair whose
    precision/recall are non-positive contributes 0.
    """
    if not pairs:
        raise ValueError("embed_f1 needs a non-empty corpus")
    total = 0.0
    dropped = 0
    for pair in pairs:
        if pair.pred_embeddings is None or pair.ref_embeddings is None:
            raise ValueError("embedding sequences missing on a pair")
        pred, d1 = _unit_rows(pair.pred_embeddings)
        ref, d2 = _unit_rows(pair.ref_embeddings)
        dropped += d1 + d2
        r = _greedy_match(ref, pred)
        p = _greedy_match(pred, ref)
        if p + r > 0:
            total += max(0.0, 2 * p * r / (p + r))
    return 100.0 * total / len(pairs), dropped


def score_pairs(pairs: list[ScoredPair]) -> MetricReport:
    """Compute every metric whose inputs are present on all pairs."""
    report = MetricReport()
    report.bleu4 = bleu4(pairs)
    report.rougel = rouge_l(pairs)
    if all(p.pred_labels is not None and p.ref_labels is not None for p in pairs):
        report.label_f1 = label_micro_f1(pairs)
    if all(p.pred_entities is not None and p.ref_entities is not None for p in pairs):
        report.entity_f1 = entity_f1(pairs)
    if all(p.pred_embeddings is not None and p.ref_embeddings is not None for p in pairs):
        report.embed_f1, report.zero_norm_embeddings = embed_f1(pairs)
    return report


@dataclass
class EvalRecord:
    study_id: str
    section: str
    text: str
    labels: list[bool] | None = None
    entities: list[tuple[str, str]] | None = None
    embeddings: np.ndarray | None = None


def align_records(predictions: list[EvalRecord],
                  references: list[EvalRecord]) -> list[ScoredPair]:
    """Pair up corpora on (study_id, section); any orphan is an error."""
    ref_by_key = {(r.study_id, r.section): r for r in references}
    pred_keys = {(p.study_id, p.section) for p in predictions}
    orphans = sorted(f"prediction {k[0]}/{k[1]}" for k in pred_keys - set(ref_by_key))
    orphans += sorted(f"reference {k[0]}/{k[1]}" for k in set(ref_by_key) - pred_keys)
    if orphans:
        raise AlignmentError(orphans)
    pairs = []
    for p in predictions:
        r = ref_by_key[(p.study_id, p.section)]
        pairs.append(ScoredPair(
            prediction=p.text, reference=r.text,
            pred_labels=p.labels, ref_labels=r.labels,
            pred_entities=p.entities, ref_entities=r.entities,
            pred_embeddings=p.embeddings, ref_embeddings=r.embeddings))
    return pairs


def evaluate_run(predictions: list[EvalRecord],
                 references: list[EvalRecord]) -> MetricReport:
    if not predictions:
        raise ValueError("no predictions to evaluate")
    return score_pairs(align_records(predictions, references))
