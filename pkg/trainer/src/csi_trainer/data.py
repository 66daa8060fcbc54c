"""Reader for csi-forge token exports.

An export directory holds three files: ``index.json`` (schema, per-token
template arrays and per-sequence extents), ``tokens.bin`` (little-endian
float32: per sequence the full payload block followed by the masked-target
payloads) and ``masks.bin`` (per sequence the bit-packed pad bits, then the
bit-packed token mask flags, both little bit order). Everything here is
numpy-only; the torch side lives in :mod:`csi_trainer.model`.
"""

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

INDEX_NAME = "index.json"
TOKENS_NAME = "tokens.bin"
MASKS_NAME = "masks.bin"

EXPORT_FORMAT = "csi-token-export"
EXPORT_VERSION = 1


class ExportError(ValueError):
    """Export directory is missing, malformed, or fails a digest check."""


def _canonical_digest(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


@dataclass
class NormStats:
    """Scalar means/stds the export was normalized with, digest-guarded."""

    means: dict
    stds: dict

    def digest(self) -> str:
        return _canonical_digest({"means": self.means, "stds": self.stds})

    @classmethod
    def load(cls, path) -> "NormStats":
        d = json.loads(Path(path).read_text())
        stats = cls(means=dict(d["means"]), stds=dict(d["stds"]))
        if "digest" in d and d["digest"] != stats.digest():
            raise ExportError(f"{path}: stats digest mismatch")
        return stats

    def denormalize(self, name: str, value):
        return np.asarray(value) * self.stds[name] + self.means[name]


@dataclass
class TokenBatch:
    """A collated slice of an export, everything as plain numpy arrays.

    Template arrays (``feature_ids`` .. ``payload_len``) describe the fixed
    token layout and are shared by every sequence. Masked-token arrays are
    flat in batch order; ``target_off``/``target_len`` slice ``target_vals``.
    """

    sequence_ids: np.ndarray    # [b] export-assigned ids
    payloads: np.ndarray        # [b, n_floats] float32
    pad: np.ndarray             # [b, n_floats] bool, True = padding
    flags: np.ndarray           # [b, n_tokens] bool, True = masked
    feature_ids: np.ndarray     # [n_tokens]
    slots: np.ndarray           # [n_tokens]
    kinds: np.ndarray           # [n_tokens]
    payload_offset: np.ndarray  # [n_tokens] into the per-sequence float block
    payload_len: np.ndarray     # [n_tokens]
    masked_rows: np.ndarray     # [n_masked] batch row of each masked token
    masked_toks: np.ndarray     # [n_masked] token index of each masked token
    target_vals: np.ndarray     # [sum target_len] float32
    target_off: np.ndarray      # [n_masked]
    target_len: np.ndarray      # [n_masked]
    schema_digest: str = ""

    @property
    def n_sequences(self) -> int:
        return len(self.sequence_ids)


class TokenExport:
    """Memory-mapped view of one export directory.

    The index is validated up front: format tag, version, schema digest
    recomputed from the embedded schema, and (when given) the normalization
    stats digest against the caller's stats.
    """

    def __init__(self, export_dir, stats: NormStats | None = None):
        self.path = Path(export_dir)
        try:
            index = json.loads((self.path / INDEX_NAME).read_text())
        except FileNotFoundError as e:
            raise ExportError(f"{self.path}: not a token export ({e})") from e
        if index.get("format") != EXPORT_FORMAT:
            raise ExportError(f"{self.path}: unexpected format tag "
                              f"{index.get('format')!r}")
        if index.get("version") != EXPORT_VERSION:
            raise ExportError(f"{self.path}: unsupported version "
                              f"{index.get('version')!r}")
        if _canonical_digest(index["schema"]) != index["schema_digest"]:
            raise ExportError(f"{self.path}: schema digest mismatch")
        if stats is not None and stats.digest() != index["norm_stats_digest"]:
            raise ExportError(f"{self.path}: export was normalized with "
                              "different statistics")

        self.index = index
        self.schema = index["schema"]
        self.schema_digest = index["schema_digest"]
        self.mode = index["mode"]
        self.feature = index.get("feature")
        self.n_sequences = index["n_sequences"]
        self.n_floats = index["floats_per_sequence"]
        self.n_tokens = index["tokens_per_sequence"]
        self.sequences = index["sequences"]
        self.template = {k: np.asarray(v, dtype=np.int64)
                         for k, v in index["tokens"].items()}

        self._tokens = np.memmap(self.path / TOKENS_NAME, dtype="<f4",
                                 mode="r")
        row = index["pad_bytes_per_sequence"] + index["flag_bytes_per_sequence"]
        self._masks = np.memmap(self.path / MASKS_NAME, dtype=np.uint8,
                                mode="r").reshape(self.n_sequences, row)
        self._pad_bytes = index["pad_bytes_per_sequence"]

    # -- batching ----------------------------------------------------------

    def batch(self, indices) -> TokenBatch:
        indices = list(indices)
        b = len(indices)
        payloads = np.empty((b, self.n_floats), dtype=np.float32)
        pad = np.empty((b, self.n_floats), dtype=bool)
        flags = np.empty((b, self.n_tokens), dtype=bool)
        seq_ids = np.empty(b, dtype=np.int64)
        rows, toks, offs, lens, vals = [], [], [], [], []
        filled = 0
        for r, i in enumerate(indices):
            entry = self.sequences[i]
            seq_ids[r] = entry["id"]
            a = entry["payload_offset"]
            payloads[r] = self._tokens[a:a + self.n_floats]
            mrow = self._masks[i]
            pad[r] = np.unpackbits(mrow[:self._pad_bytes],
                                   count=self.n_floats,
                                   bitorder="little").astype(bool)
            flags[r] = np.unpackbits(mrow[self._pad_bytes:],
                                     count=self.n_tokens,
                                     bitorder="little").astype(bool)
            t0 = entry["target_offset"]
            for tok_idx, t_off, t_len in entry["masked"]:
                rows.append(r)
                toks.append(tok_idx)
                offs.append(filled)
                lens.append(t_len)
                vals.append(self._tokens[t0 + t_off:t0 + t_off + t_len])
                filled += t_len
        return TokenBatch(
            sequence_ids=seq_ids, payloads=payloads, pad=pad, flags=flags,
            feature_ids=self.template["feature_id"],
            slots=self.template["slot"],
            kinds=self.template["kind"],
            payload_offset=self.template["payload_offset"],
            payload_len=self.template["payload_len"],
            masked_rows=np.asarray(rows, dtype=np.int64),
            masked_toks=np.asarray(toks, dtype=np.int64),
            target_vals=(np.concatenate(vals) if vals
                         else np.empty(0, dtype=np.float32)),
            target_off=np.asarray(offs, dtype=np.int64),
            target_len=np.asarray(lens, dtype=np.int64),
            schema_digest=self.schema_digest)

    def batches(self, batch_size: int, order=None):
        """Yield TokenBatches covering ``order`` (default: index order)."""
        if order is None:
            order = np.arange(self.n_sequences)
        order = np.asarray(order)
        for k in range(0, len(order), batch_size):
            yield self.batch(order[k:k + batch_size])
