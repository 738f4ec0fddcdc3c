"""Command-line entry point: ``attnconv <command> [--config FILE] [flags]``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import config as cfgmod
from .backbone import ConfigError, build_model, layer_table
from .checkpoint import load_checkpoint, load_into
from .data import SPLITS, BatchLoader, augment, index_dataset, sample_rng, write_ppm
from .evaluation import benchmark_throughput
from .train import evaluate_split, fit, run_protocol

COMMANDS = ("train", "evaluate", "bench", "inspect", "dataset-stats", "augment-preview")
log = logging.getLogger("attnconv")


class CommandError(RuntimeError):
    pass


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="attnconv", description="CBAM + MBConv image classification experiments")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="TOML or JSON experiment file")
    p.add_argument("--root", help="dataset root (data.root)")
    p.add_argument("--out", help="output directory (output_dir)")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int, help="train.epochs")
    p.add_argument("--lr", type=float, help="optim.lr")
    p.add_argument("--runs", type=int, help="train.runs (k-run protocol when > 1)")
    p.add_argument("--checkpoint", help="eval.checkpoint / train.init_checkpoint for evaluate / bench")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any dotted key, e.g. --set batch.train=8")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def overrides_from_args(args) -> dict:
    out = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = cfgmod.parse_value(value.strip())
    flags = {"data.root": args.root, "output_dir": args.out, "seed": args.seed, "train.epochs": args.epochs,
             "optim.lr": args.lr, "train.runs": args.runs, "eval.checkpoint": args.checkpoint}
    out.update({k: v for k, v in flags.items() if v is not None})
    return out


def _require_root(cfg) -> str:
    if not cfg.data.root:
        raise ConfigError("data.root: required for this command")
    return cfg.data.root


def _write_resolved(cfg, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2))


def _model_from_checkpoint(cfg):
    model = build_model(cfgmod.network_config(cfg), seed=cfg.seed)
    if cfg.eval.checkpoint:
        load_into(model, load_checkpoint(cfg.eval.checkpoint), strict=True)
    return model


def cmd_train(cfg, out: Path) -> None:
    _require_root(cfg)
    tc = cfgmod.train_config(cfg)
    if cfg.train.runs > 1:
        result = run_protocol(tc, cfg.train.runs, out)
        (out / "protocol.json").write_text(json.dumps(result.to_json(), indent=2))
        if not result.complete:
            raise CommandError("protocol incomplete: " + "; ".join(result.errors))
        print(f"mean accuracy {result.display(4)} over {len(result.accuracies)} runs")
        return
    res = fit(tc, out)
    (out / "run_result.json").write_text(json.dumps(res.to_json(), indent=2))
    print(f"best val accuracy {res.best_val_accuracy:.4f} at epoch {res.best_epoch}")


def cmd_evaluate(cfg, out: Path) -> None:
    _require_root(cfg)
    if not cfg.eval.checkpoint:
        raise ConfigError("eval.checkpoint: required for evaluate")
    model = _model_from_checkpoint(cfg)
    res = evaluate_split(model, cfgmod.train_config(cfg), cfg.eval.split)
    res.write(out, heatmap=cfg.eval.heatmap)
    print(f"accuracy {res.accuracy:.4f}")


def cmd_bench(cfg, out: Path) -> None:
    model = _model_from_checkpoint(cfg)
    rep = benchmark_throughput(model, cfg.bench.batch_size, cfg.bench.warmup, cfg.bench.timed, seed=cfg.seed)
    (out / "bench.json").write_text(json.dumps(rep.to_json(), indent=2))
    print(f"{rep.images_per_second:.2f} images/s ({rep.batches_per_second:.3f} batches/s)")


def cmd_inspect(cfg, out: Path) -> None:
    net = cfgmod.network_config(cfg)
    rows = layer_table(net)
    with open(out / "layers.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["name", "kind", "output_shape", "params", "macs"])
        for r in rows:
            w.writerow([r.name, r.kind, "x".join(map(str, r.out_shape)), r.params, r.macs])
        total_p, total_m = sum(r.params for r in rows), sum(r.macs for r in rows)
        w.writerow(["TOTAL", "", "", total_p, total_m])
    print(f"params {total_p} macs {total_m}")


def cmd_dataset_stats(cfg, out: Path) -> None:
    root = _require_root(cfg)
    with open(out / "dataset_stats.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["split", "class", "count"])
        for split in SPLITS:
            if not (Path(root) / split).is_dir():
                continue
            idx = index_dataset(root, split)
            for name, n in zip(idx.class_names, idx.class_counts()):
                w.writerow([split, name, n])
            w.writerow([split, "TOTAL", len(idx)])


def cmd_augment_preview(cfg, out: Path) -> None:
    root = _require_root(cfg)
    policy = cfgmod.augment_policy(cfg)
    idx = index_dataset(root, cfg.preview.split)
    loader = BatchLoader(idx, 1, size=cfgmod.network_config(cfg).input_resolution)
    n = min(cfg.preview.count, len(idx))
    for i in range(n):
        img = loader._raw(i)
        if policy is not None:
            img = augment(img, policy, sample_rng(cfg.seed, 0, i))
        write_ppm(out / f"preview_{i:03d}.ppm", img)


HANDLERS = {
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "bench": cmd_bench,
    "inspect": cmd_inspect,
    "dataset-stats": cmd_dataset_stats,
    "augment-preview": cmd_augment_preview,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = cfgmod.parse_config(args.config, overrides_from_args(args))
        out = Path(cfg.output_dir)
        _write_resolved(cfg, out)
        HANDLERS[args.command](cfg, out)
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - one-line machine-parsable failure
        if args.verbose:
            log.exception("command failed")
        print(f"error: {type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
