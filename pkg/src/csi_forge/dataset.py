"""Campaign orchestration: simulate runs, persist shards, split, normalize.

A campaign draws ``n_configs`` configurations, runs each one
``snr_draws_per_config`` times with a freshly drawn SNR and fresh channel
and noise realizations, pushes every slot through the estimation pipeline
and slices the per-slot records into non-overlapping 5-slot sequences.
One shard file per configuration, plus JSON artifacts alongside:

    manifest.json   dataset-level metadata and shard list
    splits.json     sequence-level train/val/test partition
    norm_stats.json scalar means/stds from the training split
    genie.csfd      per-run ground-truth parameters and channel-MSE
                    summaries (JSON content; kept out of the shards so the
                    model-visible schema carries estimates only)

Everything is reproducible bit-exactly from (master_seed, counts): per-run
seeds are SplitMix64 mixes of (master_seed, config_index, run_index, lane)
with one lane each for the SNR draw, the channel and the noise.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .channel import generate_channel, transmit_pilot_run
from .config import SNR_RANGE_DB, SimConfig, mix_seed, sample_config
from .estimators import FeatureRecord, run_pipeline
from .shard import SequenceRecord, read_shard, write_shard

SEQ_LEN = 5
RUNS_PER_CONFIG = 8
SLOTS_PER_RUN = 100

# scalar features normalized by global statistics; matrices are handled
# per-sequence in tokenstream
SCALAR_FEATURES = ("n_subcarriers", "delay_center", "delay_len",
                   "doppler_width", "rank", "spectral_eff")

MANIFEST_NAME = "manifest.json"
SPLITS_NAME = "splits.json"
NORM_STATS_NAME = "norm_stats.json"
GENIE_NAME = "genie.csfd"


def _dump_json(path: Path, obj) -> None:
    # sorted keys and fixed separators keep reruns byte-identical
    path.write_text(json.dumps(obj, sort_keys=True, separators=(",", ": "),
                               indent=1) + "\n")


def _digest(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def universe_digest() -> str:
    """Digest of the configuration universe the campaign samples from."""
    return _digest({
        "channel_types": list(cfgmod.CHANNEL_TYPES),
        "delay_len_ranges": {k: list(v) for k, v in cfgmod.DELAY_LEN_RANGES.items()},
        "carrier_scs": [list(p) for p in cfgmod.CARRIER_SCS_PAIRS],
        "snr_range_db": list(SNR_RANGE_DB),
        "speeds_kmh": list(cfgmod.SPEEDS_KMH),
        "antenna_pairs": [list(p) for p in cfgmod.ANTENNA_PAIRS],
        "group_counts": list(cfgmod.GROUP_COUNTS),
        "group_sizes": list(cfgmod.GROUP_SIZES),
        "pilot_symbol_sets": [list(p) for p in cfgmod.PILOT_SYMBOL_SETS],
    })


# ---------------------------------------------------------------------------
# normalization statistics
# ---------------------------------------------------------------------------

@dataclass
class NormStats:
    """Per-scalar-feature mean and population std over the training split."""

    means: dict
    stds: dict

    STD_FLOOR = 1e-9

    def normalize(self, name: str, value):
        return (np.asarray(value) - self.means[name]) / self.stds[name]

    def denormalize(self, name: str, value):
        return np.asarray(value) * self.stds[name] + self.means[name]

    def digest(self) -> str:
        return _digest({"means": self.means, "stds": self.stds})

    def to_dict(self) -> dict:
        return {"convention": "population-std", "means": self.means,
                "stds": self.stds, "digest": self.digest()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        stats = cls(means=dict(d["means"]), stds=dict(d["stds"]))
        if "digest" in d and d["digest"] != stats.digest():
            raise ValueError("normalization stats digest mismatch")
        return stats

    @classmethod
    def load(cls, path) -> "NormStats":
        return cls.from_dict(json.loads(Path(path).read_text()))


def compute_norm_stats(sequences) -> NormStats:
    """Mean and population std of every scalar feature over all records."""
    values = {name: [] for name in SCALAR_FEATURES}
    n = 0
    for seq in sequences:
        for rec in seq.records:
            n += 1
            for name in SCALAR_FEATURES:
                values[name].append(float(getattr(rec, name)))
    if n == 0:
        raise ValueError("cannot compute normalization stats on an empty split")
    means, stds = {}, {}
    for name in SCALAR_FEATURES:
        arr = np.asarray(values[name])
        means[name] = float(arr.mean())
        stds[name] = float(max(arr.std(), NormStats.STD_FLOOR))
    return NormStats(means=means, stds=stds)


# ---------------------------------------------------------------------------
# simulation
# ---------------------------------------------------------------------------

def run_streams(master_seed: int, config_id: int, run_index: int):
    """Independent 64-bit seeds for the SNR draw, channel and noise lanes."""
    return tuple(mix_seed(master_seed, config_id, run_index, lane)
                 for lane in range(3))


def simulate_run(cfg: SimConfig, config_id: int, run_index: int,
                 channel_seed: int, noise_seed: int,
                 n_slots: int = SLOTS_PER_RUN, seq_len: int = SEQ_LEN):
    """Simulate one run and return (sequences, genie summary)."""
    chan = generate_channel(cfg, n_slots, channel_seed)
    run_id = (config_id << 8) | run_index
    records = []
    mse_raw = []
    mse_den = []
    for obs, h_true in transmit_pilot_run(cfg, chan, range(n_slots), noise_seed):
        rec, est = run_pipeline(obs, config_id=config_id, with_estimate=True)
        records.append(rec)
        # h_true is [n_tx, B, |S|, n_rx] like h_tilde; align h_hat to it
        h_hat = est.h_hat.transpose(3, 0, 1, 2)
        raw = obs.h_tilde / np.sqrt(est.p_hat)
        mse_den.append(float(np.mean(np.abs(h_hat - h_true) ** 2)))
        mse_raw.append(float(np.mean(np.abs(raw - h_true) ** 2)))
    sequences = [
        SequenceRecord(run_id=run_id, start_slot=s * seq_len,
                       records=records[s * seq_len:(s + 1) * seq_len])
        for s in range(n_slots // seq_len)
    ]
    genie = {
        "run_id": run_id,
        "config_id": config_id,
        "run_index": run_index,
        "snr_db": cfg.snr_db,
        "genie_center": chan.genie_center,
        "genie_len": chan.genie_len,
        "genie_doppler": chan.genie_doppler,
        "mse_raw": float(np.mean(mse_raw)),
        "mse_denoised": float(np.mean(mse_den)),
    }
    return sequences, genie


def _config_entry(cfg: SimConfig) -> dict:
    return {
        "channel_type": cfg.channel_type,
        "f_carrier": cfg.f_carrier,
        "f_sc": cfg.f_sc,
        "speed_kmh": cfg.speed_kmh,
        "n_tx": cfg.n_tx,
        "n_rx": cfg.n_rx,
        "n_groups": cfg.n_groups,
        "group_size": cfg.group_size,
        "pilot_symbols": list(cfg.pilot_symbols),
        "noise_rho": cfg.noise_rho,
    }


def shard_name(config_id: int) -> str:
    return f"shard_{config_id:05d}.csfd"


def run_campaign(out_dir, master_seed: int, n_configs: int,
                 snr_draws_per_config: int = RUNS_PER_CONFIG,
                 slots_per_run: int = SLOTS_PER_RUN, seq_len: int = SEQ_LEN,
                 progress=None) -> dict:
    """Simulate the whole campaign and write shards plus the genie sidecar.

    Returns the manifest dict; the manifest file itself is finalized by
    ``finish_dataset`` once splits and normalization stats exist.
    """
    if n_configs < 1:
        raise ValueError("n_configs must be >= 1")
    if snr_draws_per_config < 1 or snr_draws_per_config > 255:
        raise ValueError("snr_draws_per_config must lie in 1..255")
    if slots_per_run % seq_len:
        raise ValueError("slots_per_run must be a multiple of seq_len")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    shards = []
    genie_runs = []
    for c in range(n_configs):
        base = sample_config(master_seed, c)
        sequences = []
        for r in range(snr_draws_per_config):
            snr_seed, chan_seed, noise_seed = run_streams(master_seed, c, r)
            snr = float(np.random.default_rng(snr_seed).uniform(*SNR_RANGE_DB))
            seqs, genie = simulate_run(base.with_snr(snr), c, r, chan_seed,
                                       noise_seed, slots_per_run, seq_len)
            sequences.extend(seqs)
            genie_runs.append(genie)
        path = out / shard_name(c)
        try:
            write_shard(path, sequences)
        except OSError as e:
            raise OSError(f"writing shard {path}: {e}") from e
        shards.append({
            "path": shard_name(c),
            "config_id": c,
            "n_sequences": len(sequences),
            "config": _config_entry(base),
        })
        if progress is not None:
            progress(c + 1, n_configs)

    _dump_json(out / GENIE_NAME,
               {"format": "genie-sidecar", "version": 1, "runs": genie_runs})
    manifest = {
        "format": "csfd-dataset",
        "version": 1,
        "master_seed": master_seed,
        "n_configs": n_configs,
        "snr_draws_per_config": snr_draws_per_config,
        "slots_per_run": slots_per_run,
        "seq_len": seq_len,
        "std_convention": "population",
        "universe_digest": universe_digest(),
        "n_sequences": sum(s["n_sequences"] for s in shards),
        "shards": shards,
    }
    return manifest


# ---------------------------------------------------------------------------
# splits and dataset assembly
# ---------------------------------------------------------------------------

SPLIT_NAMES = ("train", "val", "test")


def split_dataset(manifest: dict, ratios=(80, 10, 10), seed: int = 0) -> dict:
    """Random sequence-level partition into train/val/test.

    Sequences are addressed as (config_id, index within shard). Sizes are
    floor(n * ratio / 100) for train and val, the remainder goes to test,
    so 160 sequences at 80/10/10 give exactly 128/16/16.
    """
    if sum(ratios) != 100:
        raise ValueError("split ratios must sum to 100")
    refs = [(s["config_id"], i) for s in manifest["shards"]
            for i in range(s["n_sequences"])]
    if not refs:
        raise ValueError("cannot split an empty dataset")
    order = np.random.default_rng(seed).permutation(len(refs))
    n_train = len(refs) * ratios[0] // 100
    n_val = len(refs) * ratios[1] // 100
    cut = {"train": order[:n_train], "val": order[n_train:n_train + n_val],
           "test": order[n_train + n_val:]}
    return {
        "seed": seed,
        "ratios": list(ratios),
        **{name: sorted([list(refs[i]) for i in cut[name]])
           for name in SPLIT_NAMES},
    }


def load_split(dataset_dir, splits: dict, name: str):
    """Load one split's sequences, reading each shard at most once."""
    root = Path(dataset_dir)
    manifest = load_manifest(dataset_dir)
    paths = {s["config_id"]: s["path"] for s in manifest["shards"]}
    wanted: dict[int, list[int]] = {}
    for config_id, idx in splits[name]:
        wanted.setdefault(config_id, []).append(idx)
    out = []
    for config_id in sorted(wanted):
        shard = read_shard(root / paths[config_id])
        out.extend(shard[i] for i in sorted(wanted[config_id]))
    return out


def finish_dataset(out_dir, manifest: dict, ratios=(80, 10, 10),
                   split_seed: int = 0) -> tuple:
    """Split, compute training-split stats, and write the JSON artifacts."""
    out = Path(out_dir)
    splits = split_dataset(manifest, ratios=ratios, seed=split_seed)
    _dump_json(out / SPLITS_NAME, splits)
    # stats come from the training split only (the other splits are scaled
    # with them, never the other way round)
    paths = {s["config_id"]: s["path"] for s in manifest["shards"]}
    wanted: dict[int, list[int]] = {}
    for config_id, idx in splits["train"]:
        wanted.setdefault(config_id, []).append(idx)
    train_seqs = []
    for config_id in sorted(wanted):
        shard = read_shard(out / paths[config_id])
        train_seqs.extend(shard[i] for i in sorted(wanted[config_id]))
    stats = compute_norm_stats(train_seqs)
    _dump_json(out / NORM_STATS_NAME, stats.to_dict())
    manifest = dict(manifest)
    manifest["splits"] = {name: len(splits[name]) for name in SPLIT_NAMES}
    manifest["norm_stats_digest"] = stats.digest()
    _dump_json(out / MANIFEST_NAME, manifest)
    return manifest, splits, stats


def load_manifest(dataset_dir) -> dict:
    return json.loads((Path(dataset_dir) / MANIFEST_NAME).read_text())


def load_genie(dataset_dir) -> dict:
    path = Path(dataset_dir) / GENIE_NAME
    if not path.exists():
        raise FileNotFoundError(f"dataset has no genie sidecar: {path}")
    return json.loads(path.read_text())


def manifest_digest(dataset_dir) -> str:
    """SHA-256 of the manifest file bytes; the campaign determinism probe."""
    blob = (Path(dataset_dir) / MANIFEST_NAME).read_bytes()
    return hashlib.sha256(blob).hexdigest()
