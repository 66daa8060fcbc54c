"""Pretraining loop: Adam, fixed learning rate, everything seeded.

Multiple pretrain exports can be passed in; epochs cycle through them so
each epoch can see a different masking draw without any trainer-side
re-masking (targets only exist on the wire for masked tokens).
"""

import json
import time
from pathlib import Path

import numpy as np
import torch

from .data import ExportError, NormStats, TokenExport
from .model import MaskedTokenModel, ModelConfig

CHECKPOINT_NAME = "checkpoint.pt"
CURVE_NAME = "curve.json"

# batches averaged for the before/after loss figures
LOSS_WINDOW = 20


def _as_exports(exports, stats):
    out = [e if isinstance(e, TokenExport) else TokenExport(e, stats)
           for e in exports]
    if not out:
        raise ValueError("need at least one export")
    for e in out[1:]:
        if e.schema_digest != out[0].schema_digest:
            raise ExportError("exports disagree on the schema digest")
    return out


def initial_loss(model: MaskedTokenModel, export: TokenExport,
                 batch_size: int, n_batches: int = LOSS_WINDOW) -> float:
    """Mean loss of the untrained model over the first few batches."""
    losses = []
    model.eval()
    with torch.no_grad():
        for batch in export.batches(batch_size):
            outputs = model(batch)
            loss, _ = model.decode_and_loss(outputs, batch)
            losses.append(float(loss))
            if len(losses) >= n_batches:
                break
    return float(np.mean(losses))


def train(exports, stats: NormStats, cfg: ModelConfig, out_dir,
          epochs: int = 2, max_steps: int | None = None,
          progress=None) -> dict:
    """Train on pretrain exports; writes checkpoint + loss curve JSON."""
    exports = _as_exports(exports, stats)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    torch.manual_seed(cfg.seed)
    model = MaskedTokenModel(exports[0].schema, cfg)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)

    before = initial_loss(model, exports[0], cfg.batch_size)

    steps, losses, feature_curve = [], [], []
    t0 = time.perf_counter()
    step = 0
    model.train()
    for epoch in range(epochs):
        export = exports[epoch % len(exports)]
        order = np.random.default_rng([cfg.seed, epoch]).permutation(
            export.n_sequences)
        for batch in export.batches(cfg.batch_size, order):
            outputs = model(batch)
            loss, per_feature = model.decode_and_loss(outputs, batch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
            steps.append(step)
            losses.append(float(loss.detach()))
            feature_curve.append(per_feature)
            if progress is not None:
                progress(step, epoch, float(loss))
            if max_steps is not None and step >= max_steps:
                break
        if max_steps is not None and step >= max_steps:
            break

    window = min(LOSS_WINDOW, len(losses))
    after = float(np.mean(losses[-window:]))
    summary = {
        "n_params": model.n_params,
        "epochs": epochs,
        "steps": step,
        "initial_loss": before,
        "final_loss": after,
        "loss_ratio": after / before,
        "train_seconds": time.perf_counter() - t0,
        "checkpoint": str(out / CHECKPOINT_NAME),
    }
    torch.save({
        "model_state": model.state_dict(),
        "config": cfg.to_dict(),
        "schema": exports[0].schema,
        "schema_digest": exports[0].schema_digest,
    }, out / CHECKPOINT_NAME)
    (out / CURVE_NAME).write_text(json.dumps({
        **summary, "step": steps, "loss": losses,
        "per_feature": feature_curve}, indent=1) + "\n")
    return summary


def load_checkpoint(path):
    """Rebuild the model from a training checkpoint."""
    blob = torch.load(path, map_location="cpu", weights_only=False)
    cfg = ModelConfig(**blob["config"])
    model = MaskedTokenModel(blob["schema"], cfg)
    model.load_state_dict(blob["model_state"])
    model.eval()
    return model, blob
