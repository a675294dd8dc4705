"""Operator entry point.

Subcommands: prepare-data, train, eval, transmit, plot. Every randomized
command takes --seed and prints the resolved value so runs are replayable.
Configuration is file-first (YAML or JSON trees keyed by dataclass section)
with --set dotted-key overrides; unknown keys abort before any work starts.

Exit codes: 0 success, 2 usage/config, 3 data, 4 mask service, 5 numeric.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_SERVICE = 4
EXIT_NUMERIC = 5


class UsageError(ValueError):
    """Bad flags or config keys; nothing has run yet."""


def _coerce(value: str):
    """Parse a flag value: ints, floats, bools, lists ([4,4]) or bare strings."""
    import yaml

    try:
        parsed = yaml.safe_load(value)
    except yaml.YAMLError:
        return value
    return value if parsed is None and value.strip() not in ("null", "~", "") else parsed


def _load_config_tree(path: str | None, overrides: list[str]) -> dict:
    tree: dict = {}
    if path:
        import yaml

        try:
            with open(path) as fh:
                tree = yaml.safe_load(fh) or {}
        except FileNotFoundError as exc:
            raise UsageError(f"config file not found: {path}") from exc
        except yaml.YAMLError as exc:
            raise UsageError(f"cannot parse config {path}: {exc}") from exc
        if not isinstance(tree, dict):
            raise UsageError(f"config root must be a mapping, got {type(tree).__name__}")
    for item in overrides or []:
        if "=" not in item:
            raise UsageError(f"--set expects dotted.key=value, got {item!r}")
        key, value = item.split("=", 1)
        node = tree
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise UsageError(f"--set key {key!r} conflicts with a scalar")
        node[parts[-1]] = _coerce(value)
    return tree


def _strict_dataclass(cls, section: dict, name: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(section) - known)
    if unknown:
        raise UsageError(f"unknown {name} config keys: {unknown}")
    fixed = {
        k: tuple(v) if isinstance(v, list) else v for k, v in section.items()
    }
    try:
        return cls(**fixed)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid {name} config: {exc}") from exc


def _check_sections(tree: dict, allowed: set[str]) -> None:
    unknown = sorted(set(tree) - allowed)
    if unknown:
        raise UsageError(f"unknown config sections: {unknown} (allowed: {sorted(allowed)})")


def _print_seed(seed: int) -> None:
    print(f"seed: {seed}")


# ---------------------------------------------------------------------------
# Subcommands.
# ---------------------------------------------------------------------------

def cmd_prepare_data(args) -> int:
    from . import data

    if args.synth is not None:
        _print_seed(args.seed)
        n_test = args.synth_test if args.synth_test is not None else max(1, args.synth // 5)
        train = data.synth_generate(args.synth, args.size, args.seed, Path(args.out) / "train")
        test = data.synth_generate(n_test, args.size, args.seed + 1, Path(args.out) / "test")
        # Relabel held-out manifests as the evaluation split.
        test["seg"].split = "SEG-test"
        test["seg"].save(Path(args.out) / "test" / "seg.jsonl")
        for name, manifest in {**train, "test_seg": test["seg"]}.items():
            print(f"{manifest.split}: {len(manifest)} entries")
        return EXIT_OK
    if not (args.annotations and args.images):
        raise UsageError("need --synth N or both --annotations and --images")
    manifests = data.build_splits(
        args.annotations, args.images, args.out,
        val_annotation_file=args.val_annotations, val_image_dir=args.val_images,
        test_size=args.test_size, seed=args.seed,
    )
    for name, manifest in manifests.items():
        print(f"{manifest.split}: {len(manifest)} entries")
    return EXIT_OK


def cmd_train(args) -> int:
    from .codec import CodecConfig
    from .data import load_manifest as load_data_manifest
    from .training import TrainConfig, train_stage1, train_stage2

    tree = _load_config_tree(args.config, args.set)
    _check_sections(tree, {"train", "codec"})
    train_section = dict(tree.get("train", {}))
    codec_section = dict(tree.get("codec", {}))

    train_section.setdefault("stage", args.stage)
    train_section["stage"] = args.stage
    if args.channel:
        train_section["channel_kind"] = args.channel
    if args.epochs is not None:
        train_section["epochs"] = args.epochs
    if args.batch_size is not None:
        train_section["batch_size"] = args.batch_size
    if args.lr is not None:
        train_section["learning_rate"] = args.lr
    if args.image_size is not None:
        train_section["image_size"] = args.image_size
    train_section["seed"] = args.seed
    if args.fixed_snr is not None:
        # Fixed-SNR baseline: point-mass sampling and no SNR conditioning.
        train_section["fixed_snr_db"] = args.fixed_snr
        codec_section["use_cse"] = False

    config = _strict_dataclass(TrainConfig, train_section, "train")
    _print_seed(config.seed)
    manifest = load_data_manifest(args.data)

    if args.stage == 2:
        if not args.init_from:
            raise UsageError("--stage 2 requires --init-from <stage-1 checkpoint>")
        report, ckpt = train_stage2(config, args.init_from, manifest, args.out)
    else:
        codec_config = _strict_dataclass(CodecConfig, codec_section, "codec")
        report, ckpt = train_stage1(config, codec_config, manifest, args.out)
    print(f"checkpoint: {ckpt}")
    print(f"final epoch loss: {report.epoch_losses[-1]:.6f}")
    return EXIT_OK


def _parse_model_args(items: list[str]) -> dict[str, str]:
    models = {}
    for item in items:
        if "=" not in item:
            raise UsageError(f"--model expects name=checkpoint, got {item!r}")
        name, path = item.split("=", 1)
        models[name] = path
    return models


def cmd_eval(args) -> int:
    from .codec import load_checkpoint
    from .data import load_manifest as load_data_manifest
    from .evaluate import (
        SweepSpec, combination_curve, save_table, sweep, write_plot_data,
    )

    spec = SweepSpec(
        channel_kind=args.channel,
        snr_grid_db=tuple(args.snrs) if args.snrs else SweepSpec.snr_grid_db,
        realizations=args.realizations,
        seed=args.seed,
        max_images=args.max_images,
        image_size=args.image_size,
    )
    _print_seed(spec.seed)
    manifest = load_data_manifest(args.data)
    models = {}
    for name, path in _parse_model_args(args.model).items():
        if not Path(path).exists():
            raise FileNotFoundError(f"checkpoint for model {name!r} not found: {path}")
        models[name], _ = load_checkpoint(path)
    backbone = None
    if args.lpips_backbone:
        from .metrics import load_backbone

        backbone = load_backbone(args.lpips_backbone)
    rows = sweep(spec, models, manifest, backbone=backbone)
    if args.combine:
        mapping = {}
        for item in args.combine:
            if "=" not in item:
                raise UsageError(f"--combine expects snr=model_name, got {item!r}")
            snr, name = item.split("=", 1)
            if name not in models:
                raise UsageError(f"--combine references unknown model {name!r}")
            mapping[float(snr)] = name
        rows.extend(combination_curve(rows, mapping))
    out = Path(args.out)
    save_table(rows, out / "sweep.csv")
    print(f"table: {out / 'sweep.csv'} ({len(rows)} rows)")
    if args.plot:
        for region in sorted({r['region'] for r in rows}):
            for path in write_plot_data(rows, out, region=region):
                print(f"plot data: {path}")
    return EXIT_OK


def cmd_transmit(args) -> int:
    from .channel import ChannelConfig
    from .codec import load_checkpoint
    from .data import load_image
    from .evaluate import transmit_demo
    from .skb import AnnotationOracle, IntentMaskProvider, MaskCache, RemoteMaskClient

    _print_seed(args.seed)
    oracle = AnnotationOracle.from_file(args.annotations) if args.annotations else None
    remote = RemoteMaskClient(args.remote_url) if args.remote_url else None
    if args.provider == "oracle":
        remote = None
        if oracle is None:
            raise UsageError("--provider oracle requires --annotations")
    elif args.provider == "remote" and remote is None:
        raise UsageError("--provider remote requires --remote-url")
    provider = IntentMaskProvider(oracle=oracle, remote=remote, cache=MaskCache())
    codec, _ = load_checkpoint(args.checkpoint)
    image = load_image(args.image)
    image_id = _coerce(args.image_id) if args.image_id is not None else None
    backbone = None
    if args.lpips_backbone:
        from .metrics import load_backbone

        backbone = load_backbone(args.lpips_backbone)
    paths, record = transmit_demo(
        image, image_id, args.instruction, args.snr,
        ChannelConfig(kind=args.channel, snr_db=args.snr, seed=args.seed),
        codec, provider, args.out, backbone=backbone,
    )
    print(f"panel: {paths['reconstruction']}")
    print(f"masked psnr: {record.psnr_db:.2f} dB  ssim: {record.ssim:.4f}")
    return EXIT_OK


def cmd_plot(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .evaluate import load_table

    rows = load_table(args.table)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for region in sorted({r["region"] for r in rows}):
        for metric in sorted({r["metric"] for r in rows}):
            sel = [r for r in rows if r["metric"] == metric and r["region"] == region]
            if not sel:
                continue
            fig, ax = plt.subplots(figsize=(5, 4))
            for model in sorted({r["model"] for r in sel}):
                pts = sorted((r["snr_db"], r["mean"], r["stderr"]) for r in sel if r["model"] == model)
                xs, ys, es = zip(*pts)
                ax.errorbar(xs, ys, yerr=es, marker="o", capsize=2, label=model)
            ax.set_xlabel("SNR (dB)")
            ax.set_ylabel(metric.upper())
            ax.set_title(f"{metric.upper()} vs SNR ({sel[0]['channel']}, {region})")
            ax.grid(True, alpha=0.3)
            ax.legend(fontsize=8)
            path = out / f"plot_{metric}_{region}.png"
            fig.savefig(path, dpi=120, bbox_inches="tight")
            plt.close(fig)
            print(f"plot: {path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser.
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="uidsc",
        description="Intent-driven image transmission over simulated wireless links",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare-data", help="build ORI/SEG/MASK splits or a synthetic corpus")
    p.add_argument("--synth", type=int, default=None, metavar="N", help="generate N synthetic samples")
    p.add_argument("--synth-test", type=int, default=None, metavar="N", help="held-out synthetic samples")
    p.add_argument("--size", type=int, default=256, help="synthetic image size")
    p.add_argument("--annotations", help="instance-segmentation annotation file")
    p.add_argument("--images", help="directory with the original images")
    p.add_argument("--val-annotations", help="validation-pool annotation file for SEG-test")
    p.add_argument("--val-images", help="validation-pool image directory")
    p.add_argument("--test-size", type=int, default=1000)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_prepare_data)

    p = sub.add_parser("train", help="run stage-1 or stage-2 training")
    p.add_argument("--config", help="YAML/JSON config tree (sections: train, codec)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p.add_argument("--channel", choices=("awgn", "rayleigh"))
    p.add_argument("--data", required=True, help="training manifest (jsonl)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--image-size", type=int)
    p.add_argument("--fixed-snr", type=float, default=None,
                   help="train a fixed-SNR baseline (disables SNR conditioning)")
    p.add_argument("--init-from", help="stage-1 checkpoint (required for --stage 2)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="run an SNR sweep over one or more checkpoints")
    p.add_argument("--model", action="append", required=True, metavar="NAME=CKPT")
    p.add_argument("--data", required=True, help="evaluation manifest (jsonl)")
    p.add_argument("--channel", choices=("awgn", "rayleigh"), default="awgn")
    p.add_argument("--snrs", type=float, nargs="+", help="evaluation SNR grid in dB")
    p.add_argument("--realizations", type=int, default=10)
    p.add_argument("--max-images", type=int)
    p.add_argument("--image-size", type=int)
    p.add_argument("--combine", action="append", default=[], metavar="SNR=MODEL",
                   help="fixed-baseline map for the combination curve")
    p.add_argument("--lpips-backbone", help="perceptual backbone weight archive (.npz)")
    p.add_argument("--plot", action="store_true", help="also write per-metric curve files")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("transmit", help="single-image transmission demo panel")
    p.add_argument("--image", required=True)
    p.add_argument("--image-id", default=None, help="annotation id for the oracle provider")
    p.add_argument("--instruction", required=True)
    p.add_argument("--snr", type=float, default=10.0)
    p.add_argument("--channel", choices=("awgn", "rayleigh"), default="awgn")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--provider", choices=("oracle", "remote"), default="oracle")
    p.add_argument("--annotations", help="annotation file for the oracle")
    p.add_argument("--remote-url", help="mask service endpoint")
    p.add_argument("--lpips-backbone")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_transmit)

    p = sub.add_parser("plot", help="render curve plots from a sweep table")
    p.add_argument("--table", required=True, help="sweep.csv from the eval command")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)

    return parser


def main(argv: list[str] | None = None) -> int:
    from .channel import DegenerateSignalError, DeepFadeError
    from .codec import CheckpointError
    from .data import DataError
    from .metrics import MetricUnavailableError
    from .skb import IntentResolutionError, MaskServiceError
    from .training import NumericError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, FileNotFoundError, IntentResolutionError,
            MetricUnavailableError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except MaskServiceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SERVICE
    except (NumericError, DegenerateSignalError, DeepFadeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
