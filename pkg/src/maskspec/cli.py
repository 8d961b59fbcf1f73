"""Command-line entry point: ``maskspec <subcommand> ...``.

Exit codes: 0 success, 2 usage error or missing input file, 3 invalid
manifest/config, 4 training diverged, 10-14 checkpoint errors (bad magic,
version, CRC/truncation, shape mismatch, missing tensor).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from .audio import read_wav, spectrogram
from .checkpoint import CheckpointError, load_checkpoint, read_checkpoint, save_checkpoint
from .data import (
    ManifestError,
    load_config,
    load_manifest,
    load_waveform,
    resolve,
    stack_spectrograms,
    write_matrix_csv,
    write_pgm,
    write_report,
    write_spectrogram_bin,
)
from .finetune import FinetuneConfig, LabeledClip, channel_ensemble_eval, evaluate, finetune_run
from .model import DecoderConfig, MaskSpecModel, ModelConfig, param_count
from .patching import gather_masked, patchify, random_mask, unpatchify
from .pretrain import SWEEP_RATIOS, PretrainSettings, TrainingDivergedError, mask_ratio_sweep, pretrain, write_loss_csv

logger = logging.getLogger("maskspec")

EXIT_USAGE = 2
EXIT_INPUT = 3
EXIT_DIVERGED = 4


def model_config_from(cfg: dict) -> ModelConfig:
    overrides = {}
    if cfg.get("encoder_depth") is not None:
        overrides["depth"] = int(cfg["encoder_depth"])
    dec = cfg.get("decoder")
    decoder = DecoderConfig(**dec) if isinstance(dec, dict) else DecoderConfig()
    return ModelConfig.preset(cfg.get("scale", "tiny"), decoder=decoder, **overrides)


def pretrain_settings_from(cfg: dict) -> PretrainSettings:
    return PretrainSettings(
        alpha=float(cfg.get("alpha", 0.75)),
        epochs=int(cfg.get("epochs", 80)),
        warmup_epochs=float(cfg.get("warmup_epochs", 40)),
        batch_size=int(cfg.get("batch_size", 8)),
        lr=float(cfg.get("lr", 1e-3)),
        weight_decay=float(cfg.get("weight_decay", 0.05)),
        betas=tuple(cfg.get("betas", (0.9, 0.95))),
        seed=int(cfg.get("seed", 0)),
        max_steps=cfg.get("max_steps"),
    )


def _pretrain_data(cfg: dict) -> np.ndarray:
    manifest = resolve(cfg, "manifest")
    if manifest is None:
        raise ManifestError("config has no 'manifest' entry")
    records = load_manifest(manifest)
    if not records:
        raise ManifestError(f"{manifest}: no clips")
    return stack_spectrograms(records, cfg.get("channel", "mean"))


def cmd_pretrain(args) -> int:
    cfg = load_config(args.config)
    specs = _pretrain_data(cfg)
    settings = pretrain_settings_from(cfg)
    model = MaskSpecModel(model_config_from(cfg), seed=settings.seed)
    out_dir = resolve(cfg, "checkpoint_dir", "checkpoints")
    out_dir.mkdir(parents=True, exist_ok=True)
    every = cfg.get("checkpoint_every")

    def on_epoch(epoch, result):
        if every and (epoch + 1) % int(every) == 0:
            save_checkpoint(model, out_dir / f"epoch_{epoch + 1:04d}.msks", epoch=epoch + 1, seed=settings.seed, loss=result.loss_mean)

    history = pretrain(model, specs, settings, on_epoch=on_epoch)
    log_path = resolve(cfg, "log_csv") or out_dir / "loss.csv"
    write_loss_csv(log_path, history)
    final = save_checkpoint(model, out_dir / "final.msks", epoch=settings.epochs, seed=settings.seed, loss=history[-1].loss_mean if history else None)
    print(f"pretrained {len(history)} steps; final loss {history[-1].loss_mean:.6f}; checkpoint {final}; log {log_path}")
    return 0


def _labeled(records, channel: str) -> list[LabeledClip]:
    return [LabeledClip(load_waveform(r.path, channel), tuple(r.labels), r.fold) for r in records]


def cmd_finetune(args) -> int:
    cfg = load_config(args.config)
    num_classes = int(cfg["num_classes"])
    manifest = resolve(cfg, "manifest")
    if manifest is None:
        raise ManifestError("config has no 'manifest' entry")
    records = load_manifest(manifest, num_classes)
    fold = cfg.get("eval_fold")
    if fold is not None:
        train_rec = [r for r in records if r.fold != int(fold)]
        eval_rec = [r for r in records if r.fold == int(fold)]
    else:
        train_rec = [r for r in records if r.split == "train"]
        eval_rec = [r for r in records if r.split == "eval"]
    channel = cfg.get("channel", "mean")
    ft = FinetuneConfig(
        num_classes=num_classes,
        task_type=cfg.get("task_type", "multiclass"),
        epochs=int(cfg.get("epochs", 100)),
        warmup_epochs=int(cfg.get("warmup_epochs", 5)),
        layer_decay=float(cfg.get("layer_decay", 0.75)),
        mixup_alpha=float(cfg.get("mixup_alpha", 0.3)),
        mixup_mode=cfg.get("mixup_mode", "alternate"),
        roll=bool(cfg.get("roll", True)),
        lr=float(cfg.get("lr", 1e-4)),
        weight_decay=float(cfg.get("weight_decay", 0.05)),
        batch_size=int(cfg.get("batch_size", 8)),
        seed=int(cfg.get("seed", 0)),
        stop_at_accuracy=cfg.get("stop_at_accuracy"),
    )
    model, _ = load_checkpoint(args.checkpoint)
    result = finetune_run(model, _labeled(train_rec, channel), _labeled(eval_rec, channel), ft)
    out_dir = resolve(cfg, "output_dir", "finetuned")
    out_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.model, out_dir / "finetuned.msks", seed=ft.seed, epochs=len(result.history))
    write_report(out_dir / "report.json", result.report, out_dir / "report.csv")
    print(f"finetuned {len(result.history)} epochs; eval {({k: result.report.get(k) for k in ('accuracy', 'mAP')})}; output {out_dir}")
    return 0


def cmd_eval(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    num_classes = model.config.num_classes
    if not num_classes:
        print("checkpoint has no classification head; finetune it first", file=sys.stderr)
        return EXIT_INPUT
    records = load_manifest(args.manifest, num_classes)
    if args.split != "all":
        records = [r for r in records if r.split == args.split]
    if args.channel_ensemble:
        clips = [read_wav(r.path) for r in records]
        result = channel_ensemble_eval(model, clips, [r.labels[0] for r in records])
        report = {"num_clips": len(records), "accuracy": result.accuracy, "views": list(result.view_logits)}
    else:
        report = evaluate(model, _labeled(records, args.channel), num_classes, args.task_type)
    if args.out:
        write_report(args.out, report, Path(args.out).with_suffix(".csv"))
    print(f"mAP={report.get('mAP')} accuracy={report.get('accuracy')} clips={report['num_clips']}")
    return 0


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    specs = _pretrain_data(cfg)
    base = pretrain_settings_from(cfg)
    config = model_config_from(cfg)
    ratios = args.ratios or list(SWEEP_RATIOS)
    out = Path(args.out)
    rows = mask_ratio_sweep(ratios, args.steps, lambda: MaskSpecModel(config, seed=base.seed), specs, base, out)
    for r in rows:
        print(f"alpha={r.alpha:.2f} masked={r.n_masked} loss {r.initial_loss:.5f} -> {r.final_loss:.5f}")
    print(f"wrote {out}")
    return 0


def cmd_reconstruct(args) -> int:
    model, _ = load_checkpoint(args.checkpoint, require_decoder=True)
    spec = spectrogram(read_wav(args.wav), args.channel, np.float64)
    p = model.config.patch
    grid = patchify(spec, p)
    plan = random_mask(grid.n, args.alpha, args.seed)
    recon = model.reconstruct(grid.patches.astype(model.dtype), plan).data.astype(np.float64)
    floor = float(spec.min())
    masked_patches = grid.patches.copy()
    masked_patches[plan.masked_idx] = floor
    merged = grid.patches.copy()
    merged[plan.masked_idx] = gather_masked(recon, plan)
    views = {
        "original": spec,
        "masked": _embed(spec, unpatchify(masked_patches, grid.rows, grid.cols, p)),
        "reconstructed": _embed(spec, unpatchify(merged, grid.rows, grid.cols, p)),
    }
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lo, hi = float(spec.min()), float(spec.max())
    for name, values in views.items():
        write_matrix_csv(out / f"{name}.csv", values)
        write_spectrogram_bin(out / f"{name}.spec", values)
        write_pgm(out / f"{name}.pgm", values, lo, hi)
    write_pgm(out / "side_by_side.pgm", np.concatenate(list(views.values()), axis=0), lo, hi)
    (out / "mask_plan.json").write_text(plan.to_json())
    print(f"wrote original/masked/reconstructed {spec.shape[0]}x{spec.shape[1]} to {out}")
    return 0


def _embed(full: np.ndarray, covered: np.ndarray) -> np.ndarray:
    out = full.copy()
    out[: covered.shape[0], : covered.shape[1]] = covered
    return out


def cmd_inspect(args) -> int:
    ckpt = read_checkpoint(args.checkpoint)
    config = ckpt.config
    tensors = ckpt.model_tensors()
    width = max(len(n) for n in tensors)
    print(f"{'tensor':<{width}}  {'shape':<16} {'dtype':<8} params")
    for name, arr in tensors.items():
        print(f"{name:<{width}}  {str(tuple(arr.shape)):<16} {str(arr.dtype):<8} {arr.size}")
    total = sum(a.size for a in tensors.values())
    encoder = sum(a.size for n, a in tensors.items() if not n.startswith(("decoder.", "head.")))
    print(f"total parameters: {total}")
    print(f"encoder parameters: {encoder}")
    if config is not None:
        has_dec = any(n.startswith("decoder.") for n in tensors)
        print(f"param_count(config, with_decoder={has_dec}): {param_count(config, with_decoder=has_dec)}")
    for key in ("epoch", "seed", "loss"):
        if key in ckpt.metadata:
            print(f"{key}: {ckpt.metadata[key]}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="maskspec", description="Masked spectrogram prediction toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="self-supervised pretraining from a config file")
    p.add_argument("config")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="supervised finetuning of a pretrained checkpoint")
    p.add_argument("config")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="evaluate a finetuned checkpoint on a manifest")
    p.add_argument("checkpoint")
    p.add_argument("manifest")
    p.add_argument("--task-type", choices=("multiclass", "multilabel"), default="multiclass")
    p.add_argument("--split", choices=("train", "eval", "all"), default="eval")
    p.add_argument("--channel", choices=("left", "right", "mean"), default="mean")
    p.add_argument("--channel-ensemble", action="store_true", help="average left/right/mean channel logits")
    p.add_argument("--out", help="write the JSON report here (CSV alongside)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="short pretraining runs over mask ratios")
    p.add_argument("config")
    p.add_argument("--ratios", type=float, nargs="+")
    p.add_argument("--steps", type=int, default=20)
    p.add_argument("--out", default="sweep.csv")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("reconstruct", help="dump original/masked/reconstructed spectrograms")
    p.add_argument("checkpoint")
    p.add_argument("wav")
    p.add_argument("--out-dir", default="reconstruction")
    p.add_argument("--alpha", type=float, default=0.75)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--channel", choices=("left", "right", "mean"), default="mean")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("inspect", help="summarize a checkpoint")
    p.add_argument("checkpoint")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ManifestError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except TrainingDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
