"""Feature records -> model-ready token sequences.

Every 5-slot sequence becomes a fixed-layout list of tokens: one token per
scalar or categorical feature per slot, one per matrix patch. All payload
lengths are uniform across sequences because matrices are zero-padded to
the schema maxima (the config universe maxima) before patching; pad masks
mark the fill. Scalars are standardized with training-split stats and then
Fourier-encoded; covariance matrices are scaled by their mean diagonal
magnitude across the sequence; correlation matrices and the precoder pass
through untouched.

Masking replaces a target feature's payload with zeros on the wire and
stores the reconstruction target alongside: the standardized scalar itself
for scalar targets, the patch payload for the precoder. The learnable mask
embedding lives in the consumer, not here.

Export layout (directory):
    tokens.bin   float32 little-endian; per sequence the 300 token payloads
                 concatenated in token order, then the masked tokens'
                 target payloads in token order
    masks.bin    per sequence: payload pad bits then per-token masked bits,
                 both packed with numpy bitorder "little"
    index.json   schema (with digest), the per-token template arrays, and
                 per-sequence offsets/ids/masked-token tables
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import CHANNEL_TYPES, mix_seed
from .dataset import NormStats
from .estimators import FeatureRecord

N_SLOTS = 5

# schema pad targets: the config-universe maxima
PAD_RX = 4
PAD_TX = 8
PAD_RANK = 4
PAD_GROUPS = 100
PAD_SYMBOLS = 4

FOURIER_DIM = 64
FOURIER_RANGE = (1e-3, 1e3)

KIND_SCALAR = 0        # Fourier-encoded standardized scalar
KIND_VECTOR = 1        # reserved; no vector features in the current schema
KIND_MATRIX = 2        # one patch of a complex matrix, re then im
KIND_CATEGORICAL = 3   # one-hot category

TARGET_FEATURES = FeatureRecord.TARGETS

MIN_PATCH = 8
MAX_TOKENS_PER_MATRIX = 64


def choose_patch_size(d1: int, d2: int) -> int:
    """Smallest square power-of-two patch >= 8 needing at most 64 tokens."""
    p = MIN_PATCH
    while -(d1 // -p) * -(d2 // -p) > MAX_TOKENS_PER_MATRIX:
        p *= 2
    return p


def fourier_grid(d_f: int = FOURIER_DIM, lam_range=FOURIER_RANGE) -> np.ndarray:
    if d_f % 2:
        raise ValueError("Fourier dimension must be even")
    return np.logspace(np.log10(lam_range[0]), np.log10(lam_range[1]), d_f // 2)


def fourier_encode(x: float, grid: np.ndarray) -> np.ndarray:
    """Interleaved [cos(2pi x/lam), sin(2pi x/lam)] over the lambda grid."""
    ang = 2.0 * np.pi * x / grid
    out = np.empty(2 * grid.size)
    out[0::2] = np.cos(ang)
    out[1::2] = np.sin(ang)
    return out


def pad_matrix(m: np.ndarray, shape) -> tuple:
    """Zero-pad to ``shape``; returns (padded, pad flags) with flags True on fill."""
    r, c = m.shape
    if r > shape[0] or c > shape[1]:
        raise ValueError(f"matrix {m.shape} exceeds pad target {tuple(shape)}")
    out = np.zeros(shape, dtype=complex)
    out[:r, :c] = m
    pad = np.ones(shape, dtype=bool)
    pad[:r, :c] = False
    return out, pad


def patchify(m: np.ndarray, p: int):
    """Split into raster-order p x p patches; payload = re parts then im parts.

    Returns (payloads [n, 2p^2], pad flags [n, 2p^2], patch grid rows, cols).
    The matrix must already be padded to multiples of p.
    """
    r, c = m.shape
    if r % p or c % p:
        raise ValueError(f"matrix {m.shape} is not a multiple of patch size {p}")
    gr, gc = r // p, c // p
    tiles = m.reshape(gr, p, gc, p).transpose(0, 2, 1, 3).reshape(gr * gc, p * p)
    payloads = np.concatenate([tiles.real, tiles.imag], axis=1)
    return payloads, gr, gc


def _patch_flags(pad: np.ndarray, p: int) -> np.ndarray:
    gr, gc = pad.shape[0] // p, pad.shape[1] // p
    tiles = pad.reshape(gr, p, gc, p).transpose(0, 2, 1, 3).reshape(gr * gc, p * p)
    return np.concatenate([tiles, tiles], axis=1)


def depatchify(payloads: np.ndarray, gr: int, gc: int, p: int,
               shape=None) -> np.ndarray:
    """Inverse of :func:`patchify`; optionally crop to the original shape."""
    half = p * p
    tiles = payloads[:, :half] + 1j * payloads[:, half:]
    m = tiles.reshape(gr, gc, p, p).transpose(0, 2, 1, 3).reshape(gr * p, gc * p)
    if shape is not None:
        m = m[:shape[0], :shape[1]]
    return m


# ---------------------------------------------------------------------------
# schema
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FeatureSpec:
    name: str              # FeatureRecord field name, or "channel_type"
    kind: int
    payload_len: int
    tokens_per_slot: int
    pad_shape: tuple = ()      # matrix features: padded dims before patching
    patch: int = 0             # matrix features: patch edge
    stats_key: str = ""        # scalar features: NormStats key
    is_target: bool = False
    target_len: int = 0        # reconstruction target length when maskable


def _matrix_spec(name, d1, d2, is_target=False):
    p = choose_patch_size(d1, d2)
    pads = (-(d1 // -p) * p, -(d2 // -p) * p)
    n = (pads[0] // p) * (pads[1] // p)
    return FeatureSpec(name=name, kind=KIND_MATRIX, payload_len=2 * p * p,
                       tokens_per_slot=n, pad_shape=pads, patch=p,
                       is_target=is_target,
                       target_len=2 * p * p if is_target else 0)


def _scalar_spec(name, stats_key, is_target=False):
    return FeatureSpec(name=name, kind=KIND_SCALAR, payload_len=FOURIER_DIM,
                       tokens_per_slot=1, stats_key=stats_key,
                       is_target=is_target, target_len=1 if is_target else 0)


@dataclass(frozen=True)
class Schema:
    features: tuple
    d_f: int = FOURIER_DIM
    lam_range: tuple = FOURIER_RANGE

    @property
    def tokens_per_slot(self) -> int:
        return sum(f.tokens_per_slot for f in self.features)

    @property
    def tokens_per_sequence(self) -> int:
        return N_SLOTS * self.tokens_per_slot

    @property
    def floats_per_sequence(self) -> int:
        return N_SLOTS * sum(f.tokens_per_slot * f.payload_len
                             for f in self.features)

    def feature_id(self, name: str) -> int:
        for i, f in enumerate(self.features):
            if f.name == name:
                return i
        raise KeyError(name)

    def describe(self) -> dict:
        return {
            "slots": N_SLOTS,
            "fourier_dim": self.d_f,
            "fourier_lambda_range": list(self.lam_range),
            "pad_targets": {"n_rx": PAD_RX, "n_tx": PAD_TX, "rank": PAD_RANK,
                            "n_groups": PAD_GROUPS, "n_symbols": PAD_SYMBOLS},
            "features": [{
                "id": i, "name": f.name, "kind": f.kind,
                "payload_len": f.payload_len,
                "tokens_per_slot": f.tokens_per_slot,
                "pad_shape": list(f.pad_shape), "patch": f.patch,
                "stats_key": f.stats_key, "is_target": f.is_target,
                "target_len": f.target_len,
            } for i, f in enumerate(self.features)],
        }

    def digest(self) -> str:
        blob = json.dumps(self.describe(), sort_keys=True,
                          separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def default_schema() -> Schema:
    return Schema(features=(
        FeatureSpec(name="channel_type", kind=KIND_CATEGORICAL,
                    payload_len=len(CHANNEL_TYPES), tokens_per_slot=1),
        _scalar_spec("n_subcarriers", "n_subcarriers"),
        _matrix_spec("noise_cov", PAD_RX, PAD_RX),
        _matrix_spec("freq_corr", PAD_GROUPS, PAD_GROUPS),
        _matrix_spec("time_cov", PAD_SYMBOLS, PAD_SYMBOLS),
        _matrix_spec("time_corr", PAD_SYMBOLS, PAD_SYMBOLS),
        _scalar_spec("delay_center", "delay_center", is_target=True),
        _scalar_spec("delay_len", "delay_len", is_target=True),
        _scalar_spec("doppler_width", "doppler_width", is_target=True),
        _matrix_spec("precoder", PAD_TX, PAD_RANK, is_target=True),
        _scalar_spec("rank", "rank", is_target=True),
        _scalar_spec("spectral_eff", "spectral_eff"),
    ))


# ---------------------------------------------------------------------------
# token assembly
# ---------------------------------------------------------------------------

@dataclass
class Token:
    feature_id: int
    slot: int
    patch_row: int
    patch_col: int
    kind: int
    payload: np.ndarray
    pad: np.ndarray                  # bool, aligned with payload
    masked: bool = False
    target_payload: np.ndarray | None = None
    target: np.ndarray | None = None   # reconstruction target (maskable only)


@dataclass
class TokenSequence:
    sequence_id: int
    run_id: int
    start_slot: int
    config_id: int
    tokens: list
    mode: str = ""
    mask_seed: int = 0

    def masked_tokens(self):
        return [t for t in self.tokens if t.masked]


def sequence_cov_scales(records) -> dict:
    """Per-sequence scale for each covariance feature: mean |diagonal|."""
    scales = {}
    for name in ("noise_cov", "time_cov"):
        diags = np.concatenate([np.abs(np.diag(getattr(r, name)))
                                for r in records])
        scales[name] = max(float(diags.mean()), 1e-12)
    return scales


def normalize_record(rec: FeatureRecord, stats: NormStats, scales: dict) -> dict:
    """Standardized scalars and scaled matrices of one record, by feature name."""
    out = {"channel_type": rec.channel_type}
    for name in ("n_subcarriers", "delay_center", "delay_len", "doppler_width",
                 "rank", "spectral_eff"):
        out[name] = float(stats.normalize(name, getattr(rec, name)))
    for name in ("noise_cov", "time_cov"):
        out[name] = getattr(rec, name) / scales[name]
    for name in ("freq_corr", "time_corr", "precoder"):
        out[name] = getattr(rec, name)
    return out


def denormalize_scalar(name: str, value, stats: NormStats):
    return stats.denormalize(name, value)


def _matrix_tokens(spec, fid, slot, m):
    padded, pad = pad_matrix(m, spec.pad_shape)
    payloads, gr, gc = patchify(padded, spec.patch)
    flags = _patch_flags(pad, spec.patch)
    toks = []
    for n in range(payloads.shape[0]):
        t = Token(feature_id=fid, slot=slot, patch_row=n // gc,
                  patch_col=n % gc, kind=spec.kind, payload=payloads[n],
                  pad=flags[n])
        if spec.is_target:
            t.target = payloads[n].copy()
        toks.append(t)
    return toks


def build_token_sequence(seq, schema: Schema, stats: NormStats,
                         sequence_id: int = 0) -> TokenSequence:
    """Tokenize one 5-slot SequenceRecord (no masking applied yet)."""
    if len(seq.records) != N_SLOTS:
        raise ValueError(f"expected {N_SLOTS} records, got {len(seq.records)}")
    grid = fourier_grid(schema.d_f, schema.lam_range)
    scales = sequence_cov_scales(seq.records)
    tokens = []
    for slot, rec in enumerate(seq.records):
        norm = normalize_record(rec, stats, scales)
        for fid, spec in enumerate(schema.features):
            if spec.kind == KIND_CATEGORICAL:
                payload = np.zeros(spec.payload_len)
                payload[CHANNEL_TYPES.index(norm[spec.name])] = 1.0
                tokens.append(Token(feature_id=fid, slot=slot, patch_row=0,
                                    patch_col=0, kind=spec.kind,
                                    payload=payload,
                                    pad=np.zeros(spec.payload_len, dtype=bool)))
            elif spec.kind == KIND_SCALAR:
                z = norm[spec.name]
                t = Token(feature_id=fid, slot=slot, patch_row=0, patch_col=0,
                          kind=spec.kind, payload=fourier_encode(z, grid),
                          pad=np.zeros(spec.payload_len, dtype=bool))
                if spec.is_target:
                    t.target = np.array([z])
                tokens.append(t)
            else:
                tokens.extend(_matrix_tokens(spec, fid, slot, norm[spec.name]))
    return TokenSequence(sequence_id=sequence_id, run_id=seq.run_id,
                         start_slot=seq.start_slot, config_id=seq.config_id,
                         tokens=tokens)


# ---------------------------------------------------------------------------
# mask plans
# ---------------------------------------------------------------------------

MODES = ("pretrain", "interpolation", "forecast")


def _mask_feature_slot(tseq: TokenSequence, fid: int, slot: int) -> None:
    hit = False
    for t in tseq.tokens:
        if t.feature_id == fid and t.slot == slot:
            t.masked = True
            t.target_payload = t.target
            t.payload = np.zeros_like(t.payload)
            hit = True
    if not hit:
        raise ValueError(f"no tokens for feature {fid} at slot {slot}")


def apply_mask_plan(tseq: TokenSequence, schema: Schema, mode: str,
                    mask_seed: int, feature: str | None = None) -> TokenSequence:
    """Mask target features in place per the requested mode.

    pretrain: one uniformly drawn target feature per slot (all its tokens
    at that slot). interpolation: the given feature at one uniformly drawn
    slot. forecast: the given feature at the final slot.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    target_ids = [schema.feature_id(n) for n in TARGET_FEATURES]
    rng = np.random.default_rng(mix_seed(mask_seed, tseq.sequence_id))
    if mode == "pretrain":
        for slot in range(N_SLOTS):
            _mask_feature_slot(tseq, target_ids[rng.integers(len(target_ids))],
                               slot)
    else:
        if feature is None:
            raise ValueError(f"mode {mode!r} needs a target feature")
        fid = schema.feature_id(feature)
        if fid not in target_ids:
            raise ValueError(f"{feature!r} is not a maskable target feature")
        slot = int(rng.integers(N_SLOTS)) if mode == "interpolation" else N_SLOTS - 1
        _mask_feature_slot(tseq, fid, slot)
    tseq.mode = mode
    tseq.mask_seed = mask_seed
    return tseq


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------

INDEX_NAME = "index.json"
TOKENS_NAME = "tokens.bin"
MASKS_NAME = "masks.bin"


def _token_template(schema: Schema) -> dict:
    cols = {k: [] for k in ("feature_id", "slot", "patch_row", "patch_col",
                            "kind", "payload_offset", "payload_len")}
    off = 0
    for slot in range(N_SLOTS):
        for fid, spec in enumerate(schema.features):
            gr = gc = 1
            if spec.kind == KIND_MATRIX:
                gc = spec.pad_shape[1] // spec.patch
                gr = spec.pad_shape[0] // spec.patch
            for n in range(spec.tokens_per_slot):
                cols["feature_id"].append(fid)
                cols["slot"].append(slot)
                cols["patch_row"].append(n // gc)
                cols["patch_col"].append(n % gc)
                cols["kind"].append(spec.kind)
                cols["payload_offset"].append(off)
                cols["payload_len"].append(spec.payload_len)
                off += spec.payload_len
    return cols


def write_token_export(out_dir, token_sequences, schema: Schema,
                       stats: NormStats, mode: str, mask_seed: int,
                       feature: str | None = None) -> dict:
    """Stream tokenized sequences to disk; returns the index dict."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    template = _token_template(schema)
    n_floats = schema.floats_per_sequence
    n_tokens = schema.tokens_per_sequence
    pad_bytes = -(n_floats // -8)
    flag_bytes = -(n_tokens // -8)

    entries = []
    offset = 0
    with open(out / TOKENS_NAME, "wb") as tok_f, \
         open(out / MASKS_NAME, "wb") as mask_f:
        for tseq in token_sequences:
            payload = np.empty(n_floats, dtype="<f4")
            padbits = np.empty(n_floats, dtype=bool)
            flags = np.zeros(n_tokens, dtype=bool)
            masked = []
            targets = []
            tlen = 0
            for k, t in enumerate(tseq.tokens):
                a = template["payload_offset"][k]
                b = a + template["payload_len"][k]
                payload[a:b] = t.payload
                padbits[a:b] = t.pad
                if t.masked:
                    flags[k] = True
                    masked.append([k, tlen, int(t.target_payload.size)])
                    targets.append(np.asarray(t.target_payload, dtype="<f4"))
                    tlen += t.target_payload.size
            tok_f.write(payload.tobytes())
            for arr in targets:
                tok_f.write(arr.tobytes())
            mask_f.write(np.packbits(padbits, bitorder="little").tobytes())
            mask_f.write(np.packbits(flags, bitorder="little").tobytes())
            entries.append({
                "id": tseq.sequence_id, "run_id": tseq.run_id,
                "start_slot": tseq.start_slot, "config_id": tseq.config_id,
                "payload_offset": offset, "target_offset": offset + n_floats,
                "target_len": tlen, "masked": masked,
            })
            offset += n_floats + tlen

    index = {
        "format": "csi-token-export",
        "version": 1,
        "mode": mode,
        "mask_seed": mask_seed,
        "feature": feature,
        "schema": schema.describe(),
        "schema_digest": schema.digest(),
        "norm_stats_digest": stats.digest(),
        "tokens_per_sequence": n_tokens,
        "floats_per_sequence": n_floats,
        "pad_bytes_per_sequence": pad_bytes,
        "flag_bytes_per_sequence": flag_bytes,
        "n_sequences": len(entries),
        "tokens": template,
        "sequences": entries,
    }
    (out / INDEX_NAME).write_text(json.dumps(index, sort_keys=True,
                                             separators=(",", ":")) + "\n")
    return index


class TokenExport:
    """Read-side view of an export directory, payloads memory-mapped."""

    def __init__(self, path):
        self.path = Path(path)
        self.index = json.loads((self.path / INDEX_NAME).read_text())
        self.floats = np.memmap(self.path / TOKENS_NAME, dtype="<f4", mode="r")
        self.masks = np.memmap(self.path / MASKS_NAME, dtype=np.uint8, mode="r")
        self._tpl = {k: np.asarray(v) for k, v in self.index["tokens"].items()}

    @property
    def n_sequences(self) -> int:
        return self.index["n_sequences"]

    def payloads(self, i: int) -> np.ndarray:
        e = self.index["sequences"][i]
        a = e["payload_offset"]
        return self.floats[a:a + self.index["floats_per_sequence"]]

    def targets(self, i: int):
        e = self.index["sequences"][i]
        a = e["target_offset"]
        block = self.floats[a:a + e["target_len"]]
        return [(int(tok), block[b:b + n]) for tok, b, n in e["masked"]]

    def pad_bits(self, i: int) -> np.ndarray:
        per = self.index["pad_bytes_per_sequence"] + self.index["flag_bytes_per_sequence"]
        a = i * per
        raw = self.masks[a:a + self.index["pad_bytes_per_sequence"]]
        return np.unpackbits(raw, count=self.index["floats_per_sequence"],
                             bitorder="little").astype(bool)

    def mask_flags(self, i: int) -> np.ndarray:
        per = self.index["pad_bytes_per_sequence"] + self.index["flag_bytes_per_sequence"]
        a = i * per + self.index["pad_bytes_per_sequence"]
        raw = self.masks[a:a + self.index["flag_bytes_per_sequence"]]
        return np.unpackbits(raw, count=self.index["tokens_per_sequence"],
                             bitorder="little").astype(bool)

    def token_payload(self, i: int, token: int) -> np.ndarray:
        a = int(self._tpl["payload_offset"][token])
        n = int(self._tpl["payload_len"][token])
        return self.payloads(i)[a:a + n]
