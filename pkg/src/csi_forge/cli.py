"""csi-forge command line: generate datasets, tokenize, report baselines.

Every subcommand prints a single JSON object to stdout whose
``effective_config`` member is sufficient to reproduce the output
bit-exactly. Exit codes: 0 success, 2 usage error, 3 data or format error.
``CSI_FORGE_THREADS`` caps the numerical thread pools (the pipeline itself
is single-threaded; shard and sequence processing are independent, so
external sharding by config range is the way to scale out).
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import next_pow2
from .dataset import (GENIE_NAME, NORM_STATS_NAME, NormStats, SPLIT_NAMES,
                      finish_dataset, load_genie, load_manifest,
                      manifest_digest, run_campaign)
from .estimators import doppler_grid
from .shard import ShardError, read_shard
from .tokenstream import (MODES, TARGET_FEATURES, apply_mask_plan,
                          build_token_sequence, default_schema,
                          write_token_export)


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


def thread_cap() -> int:
    raw = os.environ.get("CSI_FORGE_THREADS", "")
    try:
        return max(1, int(raw)) if raw else 1
    except ValueError:
        raise UsageError(f"CSI_FORGE_THREADS must be an integer, got {raw!r}")


def _emit(obj) -> None:
    json.dump(obj, sys.stdout, indent=1, sort_keys=True)
    sys.stdout.write("\n")


# ---------------------------------------------------------------------------
# gen
# ---------------------------------------------------------------------------

def cmd_gen(args) -> int:
    if args.num_configs < 1:
        raise UsageError("--num-configs must be >= 1")
    if args.snr_draws < 1 or args.snr_draws > 255:
        raise UsageError("--snr-draws must lie in 1..255")
    if args.slots < args.seq_len or args.slots % args.seq_len:
        raise UsageError("--slots must be a positive multiple of --seq-len")
    out = Path(args.out)

    def progress(done, total):
        print(f"config {done}/{total}", file=sys.stderr, flush=True)

    manifest = run_campaign(out, args.seed, args.num_configs,
                            snr_draws_per_config=args.snr_draws,
                            slots_per_run=args.slots, seq_len=args.seq_len,
                            progress=progress)
    manifest, splits, stats = finish_dataset(out, manifest,
                                             split_seed=args.seed)
    _emit({
        "effective_config": _config_block("gen", args),
        "n_sequences": manifest["n_sequences"],
        "splits": manifest["splits"],
        "manifest_digest": manifest_digest(out),
        "norm_stats_digest": stats.digest(),
    })
    return 0


# ---------------------------------------------------------------------------
# tokenize
# ---------------------------------------------------------------------------

def _iter_tokenized(root, manifest, refs, schema, stats, mode, mask_seed,
                    feature):
    paths = {s["config_id"]: s["path"] for s in manifest["shards"]}
    by_config: dict[int, list[tuple[int, int]]] = {}
    for sid, (config_id, idx) in enumerate(refs):
        by_config.setdefault(config_id, []).append((idx, sid))
    for config_id in sorted(by_config):
        shard = read_shard(root / paths[config_id])
        for idx, sid in sorted(by_config[config_id]):
            tseq = build_token_sequence(shard[idx], schema, stats,
                                        sequence_id=sid)
            yield apply_mask_plan(tseq, schema, mode, mask_seed,
                                  feature=feature)


def cmd_tokenize(args) -> int:
    if args.mode not in MODES:
        raise UsageError(f"--mode must be one of {', '.join(MODES)}")
    if args.mode != "pretrain" and not args.feature:
        raise UsageError(f"--mode {args.mode} requires --feature")
    if args.feature and args.feature not in TARGET_FEATURES:
        raise UsageError(
            f"--feature must be one of {', '.join(TARGET_FEATURES)}")
    root = Path(args.dataset)
    try:
        manifest = load_manifest(root)
    except FileNotFoundError as e:
        raise DataError(f"not a dataset directory: {e}")
    stats_path = Path(args.stats) if args.stats else root / NORM_STATS_NAME
    try:
        stats = NormStats.load(stats_path)
    except FileNotFoundError as e:
        raise DataError(f"missing normalization stats: {e}")
    except ValueError as e:
        raise DataError(str(e))
    if manifest.get("norm_stats_digest") not in (None, stats.digest()):
        raise DataError("normalization stats do not match the dataset manifest")
    splits = json.loads((root / "splits.json").read_text())
    split = args.split or ("train" if args.mode == "pretrain" else "test")
    if split not in SPLIT_NAMES:
        raise UsageError(f"--split must be one of {', '.join(SPLIT_NAMES)}")

    schema = default_schema()
    seqs = _iter_tokenized(root, manifest, splits[split], schema, stats,
                           args.mode, args.mask_seed, args.feature)
    index = write_token_export(args.out, seqs, schema, stats, args.mode,
                               args.mask_seed, feature=args.feature)
    _emit({
        "effective_config": _config_block("tokenize", args, split=split),
        "n_sequences": index["n_sequences"],
        "tokens_per_sequence": index["tokens_per_sequence"],
        "n_masked_per_sequence": len(index["sequences"][0]["masked"])
        if index["sequences"] else 0,
        "schema_digest": index["schema_digest"],
    })
    return 0


# ---------------------------------------------------------------------------
# baseline
# ---------------------------------------------------------------------------

def cmd_baseline(args) -> int:
    root = Path(args.dataset)
    try:
        manifest = load_manifest(root)
    except FileNotFoundError as e:
        raise DataError(f"not a dataset directory: {e}")
    try:
        genie = load_genie(root)
    except FileNotFoundError as e:
        raise DataError(str(e))
    if not manifest["shards"]:
        raise DataError("dataset has no shards")

    runs = {g["run_id"]: g for g in genie["runs"]}
    grid = doppler_grid()
    per_run = []
    rank_hist: dict[int, int] = {}
    for entry in manifest["shards"]:
        by_run: dict[int, list] = {}
        for seq in read_shard(root / entry["path"]):
            by_run.setdefault(seq.run_id, []).extend(seq.records)
        for run_id, records in sorted(by_run.items()):
            g = runs[run_id]
            bin_s = 1.0 / (entry["config"]["group_size"]
                           * entry["config"]["f_sc"]
                           * next_pow2(entry["config"]["n_groups"]
                                       * entry["config"]["group_size"]))
            mu = np.array([r.delay_center for r in records])
            ln = np.array([r.delay_len for r in records])
            w = np.array([r.doppler_width for r in records])
            w_near = grid[np.argmin(np.abs(grid - g["genie_doppler"]))]
            for r in records:
                rank_hist[r.rank] = rank_hist.get(r.rank, 0) + 1
            per_run.append({
                "run_id": run_id,
                "snr_db": g["snr_db"],
                "mu_mae_s": float(np.abs(mu - g["genie_center"]).mean()),
                "mu_mae_bins": float(np.abs(mu - g["genie_center"]).mean() / bin_s),
                "len_mae_s": float(np.abs(ln - g["genie_len"]).mean()),
                "len_mae_bins": float(np.abs(ln - g["genie_len"]).mean() / bin_s),
                "w_mae_hz": float(np.abs(w - g["genie_doppler"]).mean()),
                "w_nearest_grid_rate": float(np.mean(np.abs(w - w_near) < 1e-9)),
                "denoise_ratio": g["mse_denoised"] / g["mse_raw"],
            })

    high = [r for r in per_run if r["snr_db"] >= 20.0]
    def agg(rows, key):
        return float(np.mean([r[key] for r in rows])) if rows else None
    _emit({
        "effective_config": _config_block("baseline", args),
        "n_runs": len(per_run),
        "features": {
            "delay_center": {"mae_s": agg(per_run, "mu_mae_s"),
                             "mae_bins": agg(per_run, "mu_mae_bins"),
                             "high_snr_mae_bins": agg(high, "mu_mae_bins")},
            "delay_len": {"mae_s": agg(per_run, "len_mae_s"),
                          "mae_bins": agg(per_run, "len_mae_bins"),
                          "high_snr_mae_bins": agg(high, "len_mae_bins")},
            "doppler_width": {"mae_hz": agg(per_run, "w_mae_hz"),
                              "nearest_grid_rate": agg(per_run, "w_nearest_grid_rate")},
        },
        "denoising": {
            "mean_mse_ratio": agg(per_run, "denoise_ratio"),
            "win_rate": float(np.mean([r["denoise_ratio"] < 1.0
                                       for r in per_run])),
        },
        "rank_hist": {str(k): rank_hist[k] for k in sorted(rank_hist)},
        "per_run": per_run if args.per_run else None,
    })
    return 0


# ---------------------------------------------------------------------------
# plumbing
# ---------------------------------------------------------------------------

def _config_block(command: str, args, **extra) -> dict:
    block = {"command": command, "version": __version__,
             "csi_forge_threads": thread_cap()}
    skip = {"func"}
    block.update({k: v for k, v in vars(args).items() if k not in skip})
    block.update(extra)
    return block


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="csi-forge",
        description="MIMO-OFDM link simulation, CSI estimation and token export")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="run a simulation campaign")
    gen.add_argument("--num-configs", type=int, required=True)
    gen.add_argument("--snr-draws", type=int, default=8)
    gen.add_argument("--slots", type=int, default=100)
    gen.add_argument("--seq-len", type=int, default=5)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", required=True)
    gen.set_defaults(func=cmd_gen)

    tok = sub.add_parser("tokenize", help="export token sequences")
    tok.add_argument("--dataset", required=True)
    tok.add_argument("--stats", default=None,
                     help="normalization stats JSON (default: from dataset)")
    tok.add_argument("--mode", required=True)
    tok.add_argument("--feature", default=None)
    tok.add_argument("--mask-seed", type=int, default=0)
    tok.add_argument("--split", default=None,
                     help="train/val/test (default: train for pretrain, else test)")
    tok.add_argument("--out", required=True)
    tok.set_defaults(func=cmd_tokenize)

    base = sub.add_parser("baseline", help="classical-pipeline sanity report")
    base.add_argument("--dataset", required=True)
    base.add_argument("--per-run", action="store_true",
                      help="include the per-run table in the report")
    base.set_defaults(func=cmd_baseline)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cap = thread_cap()
        try:
            from threadpoolctl import threadpool_limits
        except ImportError:
            return args.func(args)
        with threadpool_limits(limits=cap):
            return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (DataError, ShardError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
