"""Masked-prediction evaluation on normalized scales.

Model MSE and the predict-mean reference are both computed per target
feature over masked, unpadded target elements only. The reference predicts
the per-element mean of the evaluation targets, which is the best constant
predictor, so beating it is a meaningful (if low) bar; on standardized
scalars its MSE sits near 1.
"""

import numpy as np
import torch

from .data import ExportError, TokenExport
from .model import MaskedTokenModel


def _check_mode(export: TokenExport, mode, feature):
    if mode is not None and export.mode != mode:
        raise ExportError(f"export mode {export.mode!r}, expected {mode!r}")
    if feature is not None and export.feature != feature:
        raise ExportError(f"export feature {export.feature!r}, "
                          f"expected {feature!r}")


def evaluate(model: MaskedTokenModel, export: TokenExport,
             batch_size: int = 64, mode=None, feature=None) -> dict:
    """Per-feature MSE of the model over every masked token in the export."""
    _check_mode(export, mode, feature)
    sums: dict = {}
    counts: dict = {}
    model.eval()
    with torch.no_grad():
        for batch in export.batches(batch_size):
            outputs = model(batch)
            for fids, preds, targets, keep in model.decode_masked(outputs,
                                                                  batch):
                err = ((preds - targets) ** 2 * keep).cpu().numpy()
                kp = keep.cpu().numpy()
                for fid in np.unique(fids):
                    rows = np.nonzero(fids == fid)[0]
                    name = model.feature_names[fid]
                    sums[name] = sums.get(name, 0.0) + float(err[rows].sum())
                    counts[name] = counts.get(name, 0) + int(kp[rows].sum())
    return {name: sums[name] / counts[name] for name in sums}


def predict_mean_baseline(export: TokenExport, batch_size: int = 256) -> dict:
    """Per-feature MSE of predicting each target element's mean.

    One pass: per feature and element position, accumulate sum, sum of
    squares and count over unpadded elements; the mean predictor's MSE is
    sum((x - mean)^2) / n = (sumsq - sum^2 / n) / n pooled over positions.
    """
    acc: dict = {}
    for batch in export.batches(batch_size):
        fids_all = batch.feature_ids[batch.masked_toks]
        for i, fid in enumerate(fids_all):
            off, tlen = batch.target_off[i], batch.target_len[i]
            vals = batch.target_vals[off:off + tlen].astype(np.float64)
            tok = batch.masked_toks[i]
            if tlen == batch.payload_len[tok]:
                keep = ~batch.pad[batch.masked_rows[i],
                                  batch.payload_offset[tok]:
                                  batch.payload_offset[tok] + tlen]
            else:
                keep = np.ones(tlen, dtype=bool)
            a = acc.setdefault(int(fid), [np.zeros(tlen), np.zeros(tlen),
                                          np.zeros(tlen)])
            a[0] += np.where(keep, vals, 0.0)
            a[1] += np.where(keep, vals ** 2, 0.0)
            a[2] += keep
    out = {}
    feats = {f["id"]: f["name"] for f in export.schema["features"]}
    for fid, (s, sq, n) in acc.items():
        seen = n > 0
        sse = np.sum(sq[seen] - s[seen] ** 2 / n[seen])
        out[feats[fid]] = float(sse / n[seen].sum())
    return out
