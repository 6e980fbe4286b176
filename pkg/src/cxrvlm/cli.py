"""Command-line entry point.

Subcommands: stats, train, generate, evaluate, selfcheck. Exit codes
are stable: 0 ok, 1 selfcheck failure, 2 data error, 3 staging error,
4 checkpoint mismatch, 5 alignment error. Config precedence is
flags > config file > defaults; every train run writes a run manifest
with the resolved snapshot and artifact hashes.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import data as data_mod
from . import lora as lora_mod
from . import metrics as metrics_mod
from . import report as report_mod
from . import tokenizer as tok
from . import trainer as trainer_mod
from .adapter import AdapterConfig
from .checkpoint import CheckpointError
from .images import ImageDecodeError, ImageFormatError
from .layers import ConfigError
from .lm import LMConfig
from .lora import LoraConfig
from .model import CheckpointMismatch, ModelConfig, VLM
from .trainer import TrainConfig
from .vision import VisionConfig

EXIT_OK = 0
EXIT_SELFCHECK = 1
EXIT_DATA = 2
EXIT_STAGING = 3
EXIT_CHECKPOINT = 4
EXIT_ALIGNMENT = 5

# Optional default for train --out; a convenience only, never required.
OUT_DIR_ENV = "CXRVLM_OUT_DIR"


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    return json.loads(Path(path).read_text(encoding="utf-8"))


def _build_configs(cfg_file: dict, args) -> tuple[ModelConfig, LoraConfig, TrainConfig]:
    model_section = cfg_file.get("model", {})
    model_cfg = ModelConfig(
        vision=VisionConfig(**model_section.get("vision", {})),
        adapter=AdapterConfig(**model_section.get("adapter", {})),
        lm=LMConfig(**model_section.get("lm", {})),
    )
    lora_kwargs = dict(cfg_file.get("lora", {}))
    if lora_kwargs.get("projections") is not None:
        lora_kwargs["projections"] = tuple(lora_kwargs["projections"])
    lora_cfg = LoraConfig(**lora_kwargs)
    train_kwargs = dict(cfg_file.get("train", {}))
    train_kwargs["section"] = args.section
    if args.seed is not None:
        train_kwargs["seed"] = args.seed
    train_cfg = TrainConfig(**train_kwargs)
    return model_cfg, lora_cfg, train_cfg


def _manifest_or_exit(path) -> data_mod.ManifestLoad:
    loaded = data_mod.load_manifest(path)
    for rej in loaded.rejections:
        print(f"rejected: {rej.reason}", file=sys.stderr)
    if not loaded.samples:
        raise data_mod.ManifestError(f"{path}: empty corpus")
    return loaded


def cmd_stats(args) -> int:
    try:
        loaded = _manifest_or_exit(args.manifest)
    except (OSError, data_mod.ManifestError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    grid = data_mod.corpus_stats(loaded.samples)
    if args.json:
        print(json.dumps(data_mod.stats_to_json(grid), indent=2))
    else:
        print(report_mod.stats_table(grid))
        if loaded.rejections:
            print(f"({len(loaded.rejections)} rejected lines)")
    if args.plot:
        report_mod.stats_figure(grid, args.plot)
    return EXIT_OK


def _run_manifest(out_dir: Path, args, model_cfg, lora_cfg, train_cfg,
                  artifacts: list[Path]) -> None:
    payload = {
        "command": "train",
        "section": args.section,
        "stage": args.stage,
        "seed": train_cfg.seed,
        "inputs": {"manifest": str(Path(args.manifest).resolve()),
                   "config": str(Path(args.config).resolve()) if args.config else None},
        "output_dir": str(out_dir.resolve()),
        "resolved_config": {
            "model": model_cfg.to_json(),
            "lora": dataclasses.asdict(lora_cfg),
            "train": dataclasses.asdict(train_cfg),
        },
        "artifact_hashes": {p.name: _sha256(p) for p in sorted(artifacts)},
    }
    (out_dir / "run_manifest.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")


def cmd_train(args) -> int:
    out = args.out or os.environ.get(OUT_DIR_ENV)
    if not out:
        print(f"error: no output directory (--out or ${OUT_DIR_ENV})", file=sys.stderr)
        return EXIT_DATA
    args.out = out
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        cfg_file = _load_config_file(args.config)
        model_cfg, lora_cfg, train_cfg = _build_configs(cfg_file, args)
        loaded = _manifest_or_exit(args.manifest)
    except (OSError, json.JSONDecodeError, data_mod.ManifestError, ConfigError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    corpus = loaded.samples
    root = Path(args.manifest).parent

    log_path = out_dir / "train_log.jsonl"
    records: list[dict] = []
    log_fh = open(log_path, "w", encoding="utf-8")

    def log(record: dict) -> None:
        records.append(record)
        log_fh.write(json.dumps(record) + "\n")

    artifacts: list[Path] = []
    try:
        if args.stage in ("1", "all"):
            model = VLM.initialize(model_cfg, train_cfg.seed)
            stage1_path = trainer_mod.run_stage1(model, corpus, train_cfg, out_dir,
                                                 root=root, log=log)
            artifacts.append(Path(stage1_path))
            print(f"stage 1 checkpoint: {stage1_path}")
        else:
            candidates = sorted(out_dir.glob("ckpt_stage1_*.cxrvlm"))
            if args.stage1_checkpoint:
                stage1_path = args.stage1_checkpoint
            elif candidates:
                stage1_path = str(candidates[-1])
            else:
                print("error: stage 2 requires a stage-1 checkpoint "
                      f"(none found in {out_dir})", file=sys.stderr)
                return EXIT_STAGING
            try:
                model = VLM.load(stage1_path)
            except (CheckpointMismatch, CheckpointError) as exc:
                print(f"error: {exc}", file=sys.stderr)
                return EXIT_CHECKPOINT

        if args.stage in ("2", "all"):
            best = trainer_mod.run_stage2(model, corpus, train_cfg, lora_cfg, out_dir,
                                          root=root, log=log)
            artifacts.extend(sorted(out_dir.glob("ckpt_stage2_*.cxrvlm")))
            best_marker = out_dir / "best_checkpoint.txt"
            best_marker.write_text(best + "\n", encoding="utf-8")
            artifacts.append(best_marker)
            print(f"stage 2 best checkpoint: {best}")
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    finally:
        log_fh.close()

    artifacts.append(log_path)
    curves = out_dir / "training_curves.png"
    report_mod.training_curves_figure(records, curves)
    artifacts.append(curves)
    _run_manifest(out_dir, args, model_cfg, lora_cfg, train_cfg, artifacts)
    return EXIT_OK


def cmd_generate(args) -> int:
    try:
        model = VLM.load(args.checkpoint)
    except (CheckpointMismatch, CheckpointError, ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    try:
        loaded = _manifest_or_exit(args.manifest)
    except (OSError, data_mod.ManifestError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    if args.split not in data_mod.SPLITS:
        print(f"error: unknown split {args.split!r}", file=sys.stderr)
        return EXIT_DATA
    root = Path(args.manifest).parent
    out_path = Path(args.out)
    count = 0
    with open(out_path, "w", encoding="utf-8") as fh:
        for sample in loaded.samples:
            if sample.split != args.split:
                continue
            ids = model.generate(sample, args.section, root=root)
            fh.write(json.dumps({"study_id": sample.study_id,
                                 "section": args.section,
                                 "prediction": tok.detokenize(ids)}) + "\n")
            count += 1
    print(f"wrote {count} predictions to {out_path}")
    return EXIT_OK


def _read_eval_records(path) -> list[metrics_mod.EvalRecord]:
    records = []
    for i, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        obj = json.loads(line)
        text = obj.get("text", obj.get("prediction"))
        if text is None:
            raise ValueError(f"{path}:{i}: record has neither 'text' nor 'prediction'")
        rec = metrics_mod.EvalRecord(
            study_id=obj["study_id"], section=obj["section"], text=text,
            labels=obj.get("labels"),
            entities=[tuple(e) for e in obj["entities"]] if "entities" in obj else None,
            embeddings=np.asarray(obj["embeddings"], dtype=np.float64)
            if "embeddings" in obj else None)
        records.append(rec)
    return records


def _apply_side_file(path, predictions, references, pred_key: str, ref_key: str,
                     field: str) -> None:
    by_key = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        obj = json.loads(line)
        by_key[(obj["study_id"], obj["section"])] = obj
    for rec_list, side in ((predictions, pred_key), (references, ref_key)):
        for rec in rec_list:
            obj = by_key.get((rec.study_id, rec.section))
            if obj is None or side not in obj:
                continue
            value = obj[side]
            if field == "entities":
                value = [tuple(e) for e in value]
            setattr(rec, field, value)


def cmd_evaluate(args) -> int:
    try:
        predictions = _read_eval_records(args.predictions)
        references = _read_eval_records(args.references)
        if args.labels:
            _apply_side_file(args.labels, predictions, references,
                             "predicted", "reference", "labels")
        if args.entities:
            _apply_side_file(args.entities, predictions, references,
                             "predicted", "reference", "entities")
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    try:
        rep = metrics_mod.evaluate_run(predictions, references)
    except metrics_mod.AlignmentError as exc:
        print("error: prediction/reference alignment failed:", file=sys.stderr)
        for orphan in exc.orphans:
            print(f"  orphan {orphan}", file=sys.stderr)
        return EXIT_ALIGNMENT
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    sections = sorted({p.section for p in predictions})
    section = sections[0] if len(sections) == 1 else "+".join(sections)
    rows = [(args.model_name, args.split_name, section, rep)]
    if args.json:
        print(json.dumps(rep.as_dict(), indent=2))
    else:
        print(report_mod.metric_table(rows))
        if rep.zero_norm_embeddings:
            print(f"warning: {rep.zero_norm_embeddings} zero-norm embedding vectors excluded")
    if args.plot:
        report_mod.metrics_figure(rows, args.plot)
    return EXIT_OK


def _selfcheck_grad(rng: np.random.Generator) -> None:
    x = ad.Tensor(rng.normal(size=(3, 4)))
    err = ad.grad_check(lambda t: ad.tensor_sum(ad.gelu(t)), x)
    if err >= 1e-3:
        raise AssertionError(f"grad_check: gelu error {err:.2e}")

    w = ad.Tensor(rng.normal(size=(4, 3)))
    err = ad.grad_check(
        lambda t: ad.tensor_sum(ad.gelu(ad.matmul(t, ad.Tensor(w.data, dtype=t.dtype)))),
        x)
    if err >= 1e-3:
        raise AssertionError(f"grad_check: matmul+gelu error {err:.2e}")

    gain = ad.Tensor(rng.normal(size=4))
    bias = ad.Tensor(rng.normal(size=4))
    err = ad.grad_check(
        lambda t: ad.tensor_sum(ad.layer_norm(
            t, ad.Tensor(gain.data, dtype=t.dtype), ad.Tensor(bias.data, dtype=t.dtype))),
        x)
    if err >= 1e-3:
        raise AssertionError(f"grad_check: layer_norm error {err:.2e}")

    logits = ad.Tensor(rng.normal(size=(5, 7)))
    targets = rng.integers(0, 7, size=5)
    mask = np.array([True, False, True, True, False])
    err = ad.grad_check(
        lambda t: ad.softmax_cross_entropy(t, targets, mask), logits)
    if err >= 1e-3:
        raise AssertionError(f"grad_check: softmax_cross_entropy error {err:.2e}")


def _selfcheck_scheduler() -> None:
    cfg = TrainConfig(section="findings")
    for total in (10, 100, 1000):
        warmup = max(1, round(cfg.warmup_ratio * total))
        if trainer_mod.cosine_lr(0, total, cfg) != 0.0:
            raise AssertionError("scheduler: lr(0) != 0")
        if trainer_mod.cosine_lr(warmup, total, cfg) != cfg.lr_max:
            raise AssertionError("scheduler: lr(warmup) != lr_max")
        if abs(trainer_mod.cosine_lr(total, total, cfg)) > 1e-12:
            raise AssertionError("scheduler: lr(total) not ~0")
        ramp_end = cfg.lr_max * warmup / warmup
        cos_start = trainer_mod.cosine_lr(warmup, total, cfg)
        if abs(ramp_end - cos_start) > 1e-12:
            raise AssertionError("scheduler: discontinuity at warmup boundary")


def _selfcheck_lora(rng: np.random.Generator) -> None:
    cfg = LoraConfig(rank=2, alpha=4.0)
    base = ad.Tensor(rng.normal(size=(4, 4)).astype(np.float32))
    a = ad.Tensor(rng.normal(size=(2, 4)).astype(np.float32))
    b = ad.Tensor(rng.normal(size=(4, 2)).astype(np.float32))
    pair = lora_mod.LoraPair(a=a, b=b, base=base)
    x = ad.Tensor(rng.normal(size=(5, 4)).astype(np.float32))
    via_pair = lora_mod.lora_forward(x, pair, cfg)
    merged = lora_mod.merge(pair, cfg)
    via_merge = ad.matmul(x, ad.transpose(merged))
    diff = float(np.abs(via_pair.data - via_merge.data).max())
    if diff >= 1e-5:
        raise AssertionError(f"lora_merge: merged/unmerged forward differ by {diff:.2e}")


def _selfcheck_freeze() -> None:
    with tempfile.TemporaryDirectory() as tmp:
        from . import synth
        manifest = synth.make_toy_corpus(
            tmp, {"training": 6, "validation": 2}, seed=5, max_images=2)
        loaded = data_mod.load_manifest(manifest)
        cfg = ModelConfig(
            vision=VisionConfig(image_side=16, patch_size=8, d_vision=16,
                                n_layers=2, n_heads=2),
            adapter=AdapterConfig(d_in=16, d_hidden=8, d_out=16),
            lm=LMConfig(d_model=16, n_layers=2, n_heads=2,
                        max_positions=data_mod.MAX_SEQ_LEN + 4))
        tcfg = TrainConfig(lr_max=1e-3, global_batch=4, seed=5, eval_every=2,
                           section="findings")
        model = VLM.initialize(cfg, seed=5)
        before = model.param_hashes()
        trainer_mod.run_stage1(model, loaded.samples, tcfg, Path(tmp) / "out",
                               root=Path(tmp))
        after = model.param_hashes()
        changed = {n for n in before if before[n] != after[n]}
        if not changed or not all(n.startswith("adapter.") for n in changed):
            raise AssertionError(f"freeze_ledger: stage 1 changed {sorted(changed)[:4]}")
        model.attach_lora(LoraConfig(rank=2, alpha=4.0), seed=5)
        before = model.param_hashes()
        trainer_mod.run_stage2(model, loaded.samples, tcfg, model.lora_cfg,
                               Path(tmp) / "out", root=Path(tmp))
        after = model.param_hashes()
        changed = {n for n in before if before[n] != after[n]}
        frozen_changed = {n for n in changed if not n.startswith("lora.")}
        if frozen_changed:
            raise AssertionError(
                f"freeze_ledger: stage 2 mutated frozen {sorted(frozen_changed)[:4]}")
        if not changed:
            raise AssertionError("freeze_ledger: stage 2 moved no low-rank parameters")


def cmd_selfcheck(args) -> int:
    if args.inject_fault:
        ad.FAULT_HOOKS.add(args.inject_fault)
    checks = [
        ("grad_check", lambda: _selfcheck_grad(np.random.default_rng(0))),
        ("scheduler", _selfcheck_scheduler),
        ("lora_merge", lambda: _selfcheck_lora(np.random.default_rng(1))),
        ("freeze_ledger", _selfcheck_freeze),
    ]
    failures = []
    started = time.time()
    for name, fn in checks:
        try:
            fn()
            print(f"PASS {name}")
        except AssertionError as exc:
            print(f"FAIL {name}: {exc}")
            failures.append(name)
    print(f"selfcheck finished in {time.time() - started:.1f}s")
    if args.inject_fault:
        ad.FAULT_HOOKS.discard(args.inject_fault)
    if failures:
        print(f"failed invariants: {', '.join(failures)}", file=sys.stderr)
        return EXIT_SELFCHECK
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cxrvlm",
        description="Chest X-ray report generation pipeline: stats, two-stage "
                    "training, greedy generation, and metric evaluation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("stats", help="corpus statistics per split and section")
    p.add_argument("--manifest", required=True)
    p.add_argument("--json", action="store_true", help="emit machine-readable JSON")
    p.add_argument("--plot", help="also render a PNG figure to this path")
    p.set_defaults(fn=cmd_stats)

    p = sub.add_parser("train", help="run the two-stage training procedure")
    p.add_argument("--section", required=True, choices=data_mod.SECTIONS)
    p.add_argument("--stage", required=True, choices=("1", "2", "all"))
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", help=f"output directory (default: ${OUT_DIR_ENV})")
    p.add_argument("--config", help="JSON config file mirroring the config types")
    p.add_argument("--seed", type=int, default=None, help="default 17")
    p.add_argument("--stage1-checkpoint", help="explicit stage-1 checkpoint for --stage 2")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("generate", help="greedy report generation for a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--section", required=True, choices=data_mod.SECTIONS)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("evaluate", help="score predictions against references")
    p.add_argument("--predictions", required=True)
    p.add_argument("--references", required=True)
    p.add_argument("--labels", help="JSONL side file with predicted/reference label vectors")
    p.add_argument("--entities", help="JSONL side file with predicted/reference entity lists")
    p.add_argument("--json", action="store_true")
    p.add_argument("--plot", help="also render a PNG figure to this path")
    p.add_argument("--model-name", default="run")
    p.add_argument("--split-name", default="-")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("selfcheck", help="numeric invariants: grads, freezes, merges, schedule")
    p.add_argument("--inject-fault", help="test hook; corrupts one backward rule")
    p.set_defaults(fn=cmd_selfcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ImageFormatError, ImageDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
