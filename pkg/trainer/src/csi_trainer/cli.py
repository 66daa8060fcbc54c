"""csi-train: train and evaluate on token exports, JSON report to stdout."""

import argparse
import json
import sys

from .data import ExportError, NormStats, TokenExport
from .evaluate import evaluate, predict_mean_baseline
from .model import ModelConfig
from .train import load_checkpoint, train


def cmd_train(args) -> int:
    stats = NormStats.load(args.stats)
    cfg = ModelConfig(batch_size=args.batch_size,
                      learning_rate=args.lr, seed=args.seed)
    exports = [TokenExport(d, stats) for d in args.export]

    def progress(step, epoch, loss):
        print(f"step {step} epoch {epoch} loss {loss:.4f}",
              file=sys.stderr, flush=True)

    summary = train(exports, stats, cfg, args.out, epochs=args.epochs,
                    max_steps=args.max_steps,
                    progress=progress if args.verbose else None)
    print(json.dumps({"command": "train", **summary}, indent=1))
    return 0


def cmd_eval(args) -> int:
    model, blob = load_checkpoint(args.checkpoint)
    stats = NormStats.load(args.stats) if args.stats else None
    export = TokenExport(args.export, stats)
    if export.schema_digest != blob["schema_digest"]:
        raise ExportError("export schema does not match the checkpoint")
    report = {
        "command": "eval",
        "mode": export.mode,
        "feature": export.feature,
        "n_sequences": export.n_sequences,
        "model_mse": evaluate(model, export, batch_size=args.batch_size),
        "baseline_mse": predict_mean_baseline(export),
    }
    print(json.dumps(report, indent=1))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="csi-train")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="pretrain on one or more exports")
    t.add_argument("--export", action="append", required=True,
                   help="pretrain export dir; repeat for per-epoch masks")
    t.add_argument("--stats", required=True,
                   help="normalization statistics JSON")
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int, default=2)
    t.add_argument("--max-steps", type=int, default=None)
    t.add_argument("--batch-size", type=int, default=64)
    t.add_argument("--lr", type=float, default=1e-4)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--verbose", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="per-feature MSE on an eval export")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--export", required=True)
    e.add_argument("--stats", default=None)
    e.add_argument("--batch-size", type=int, default=64)
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ExportError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except (FileNotFoundError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
