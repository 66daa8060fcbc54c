"""Bidirectional masked-prediction transformer over token exports.

Embedding follows the token contract: a learnable linear map per payload
kind projects the raw payload to the content slice, masked tokens get a
learned mask vector instead of their (zeroed) payload projection, a learned
per-slot position is added to the content slice, and the per-feature
embedding is concatenated on top. The trunk is a stack of pre-norm blocks
(RMSNorm, multi-head attention, gated MLP) with full bidirectional
attention; sequences never attend across batch rows, so sequence boundaries
are respected by construction.
"""

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

KIND_SCALAR = 0
KIND_VECTOR = 1
KIND_MATRIX = 2
KIND_CATEGORICAL = 3


@dataclass
class ModelConfig:
    token_dim: int = 128
    feature_embed_dim: int = 42        # content gets the rest of token_dim
    n_layers: int = 4
    n_heads: int = 4
    hidden_dim: int = 512
    learning_rate: float = 1e-4
    schedule: str = "none"
    batch_size: int = 64
    mask_handling: str = "learned-vector"
    seed: int = 0

    @property
    def content_dim(self) -> int:
        return self.token_dim - self.feature_embed_dim

    def __post_init__(self):
        if self.token_dim % self.n_heads:
            raise ValueError("token_dim must be divisible by n_heads")
        if self.feature_embed_dim < 8:
            raise ValueError("feature_embed_dim must be at least 8")
        if self.feature_embed_dim >= self.token_dim:
            raise ValueError("feature_embed_dim must leave room for content")
        if self.schedule != "none":
            raise ValueError(f"unsupported schedule {self.schedule!r}")
        if self.mask_handling != "learned-vector":
            raise ValueError(
                f"unsupported mask handling {self.mask_handling!r}")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


class RMSNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim))

    def forward(self, x):
        scale = torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + self.eps)
        return x * scale * self.weight


class Block(nn.Module):
    """Pre-norm attention + gated MLP, both residual, no causal mask."""

    def __init__(self, dim: int, n_heads: int, hidden: int):
        super().__init__()
        self.n_heads = n_heads
        self.attn_norm = RMSNorm(dim)
        self.wq = nn.Linear(dim, dim, bias=False)
        self.wk = nn.Linear(dim, dim, bias=False)
        self.wv = nn.Linear(dim, dim, bias=False)
        self.wo = nn.Linear(dim, dim, bias=False)
        self.mlp_norm = RMSNorm(dim)
        self.w1 = nn.Linear(dim, hidden, bias=False)
        self.w3 = nn.Linear(dim, hidden, bias=False)
        self.w2 = nn.Linear(hidden, dim, bias=False)

    def forward(self, x):
        b, t, d = x.shape
        h = self.attn_norm(x)
        q = self.wq(h).view(b, t, self.n_heads, -1).transpose(1, 2)
        k = self.wk(h).view(b, t, self.n_heads, -1).transpose(1, 2)
        v = self.wv(h).view(b, t, self.n_heads, -1).transpose(1, 2)
        a = F.scaled_dot_product_attention(q, k, v)
        x = x + self.wo(a.transpose(1, 2).reshape(b, t, d))
        h = self.mlp_norm(x)
        return x + self.w2(F.silu(self.w1(h)) * self.w3(h))


def _proj_key(kind: int, payload_len: int) -> str:
    return f"k{kind}d{payload_len}"


class MaskedTokenModel(nn.Module):
    """Embed, transform and decode one export schema's token sequences.

    Built directly from the export's embedded schema dict so the reader and
    the model can never disagree about payload shapes.
    """

    def __init__(self, schema: dict, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.n_slots = schema["slots"]
        feats = schema["features"]
        self.feature_names = [f["name"] for f in feats]
        # target feature id -> (kind, target payload length)
        self.target_features = {f["id"]: (f["kind"], f["target_len"])
                                for f in feats if f["is_target"]}

        d_c, d_f = cfg.content_dim, cfg.feature_embed_dim
        self.proj = nn.ModuleDict()
        for f in feats:
            key = _proj_key(f["kind"], f["payload_len"])
            if key not in self.proj:
                self.proj[key] = nn.Linear(f["payload_len"], d_c)
        # one embedding vector per feature, shared across slots and patches
        self.feature_embed = nn.Embedding(len(feats), d_f)
        self.slot_embed = nn.Embedding(self.n_slots, d_c)
        self.mask_token = nn.Parameter(torch.randn(d_c) * 0.02)

        self.blocks = nn.ModuleList(
            Block(cfg.token_dim, cfg.n_heads, cfg.hidden_dim)
            for _ in range(cfg.n_layers))
        self.final_norm = RMSNorm(cfg.token_dim)

        self.heads = nn.ModuleDict()
        for kind, tlen in set(self.target_features.values()):
            self.heads[self._head_key(kind, tlen)] = \
                nn.Linear(cfg.token_dim, tlen)
        # categorical decode head: present for schema completeness, no
        # categorical feature is a target so it never enters the loss
        for f in feats:
            if f["kind"] == KIND_CATEGORICAL:
                self.heads["categorical"] = nn.Linear(cfg.token_dim,
                                                      f["payload_len"])
                break

    @staticmethod
    def _head_key(kind: int, tlen: int) -> str:
        return "scalar" if kind == KIND_SCALAR else f"patch{tlen}"

    @property
    def n_params(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def _ref(self):
        return next(self.parameters())

    # -- embedding ---------------------------------------------------------

    def embed_tokens(self, batch) -> torch.Tensor:
        """[b, n_tokens, token_dim] embeddings per the token contract."""
        ref = self._ref()
        pay = torch.as_tensor(batch.payloads, dtype=ref.dtype,
                              device=ref.device)
        b, n_tokens = pay.shape[0], len(batch.feature_ids)
        content = pay.new_zeros(b, n_tokens, self.cfg.content_dim)
        pairs = np.stack([batch.kinds, batch.payload_len], axis=1)
        for kind, plen in np.unique(pairs, axis=0):
            sel = np.nonzero((batch.kinds == kind)
                             & (batch.payload_len == plen))[0]
            key = _proj_key(int(kind), int(plen))
            if key not in self.proj:
                raise KeyError(f"no projection for token group {key}")
            idx = batch.payload_offset[sel][:, None] + np.arange(plen)
            content[:, torch.as_tensor(sel, device=ref.device)] = \
                self.proj[key](pay[:, torch.as_tensor(idx)])
        flags = torch.as_tensor(batch.flags, device=ref.device)
        content = torch.where(flags[..., None], self.mask_token, content)
        slots = torch.as_tensor(batch.slots, device=ref.device)
        content = content + self.slot_embed(slots)
        fids = torch.as_tensor(batch.feature_ids, device=ref.device)
        feat = self.feature_embed(fids).unsqueeze(0).expand(b, -1, -1)
        return torch.cat([content, feat], dim=-1)

    # -- trunk -------------------------------------------------------------

    def forward_hidden(self, hidden: torch.Tensor) -> torch.Tensor:
        for block in self.blocks:
            hidden = block(hidden)
        return self.final_norm(hidden)

    def forward(self, batch) -> torch.Tensor:
        return self.forward_hidden(self.embed_tokens(batch))

    # -- decoding and loss -------------------------------------------------

    def decode_masked(self, outputs: torch.Tensor, batch):
        """Predictions, targets and validity weights for each masked token.

        Returns a list of (feature_ids, preds, targets, keep) tuples, one
        per decoder group; ``keep`` zeroes elements that are padding in the
        token payload (scalar targets are never padded).
        """
        ref = self._ref()
        rows = torch.as_tensor(batch.masked_rows, device=ref.device)
        toks = torch.as_tensor(batch.masked_toks, device=ref.device)
        sel = outputs[rows, toks]
        fids = batch.feature_ids[batch.masked_toks]
        kinds = np.array([self.target_features[f][0] for f in fids])
        tlens = np.array([self.target_features[f][1] for f in fids])
        out = []
        for kind, tlen in sorted(set(zip(kinds.tolist(), tlens.tolist()))):
            gi = np.nonzero((kinds == kind) & (tlens == tlen))[0]
            preds = self.heads[self._head_key(kind, tlen)](
                sel[torch.as_tensor(gi, device=ref.device)])
            tg_idx = batch.target_off[gi][:, None] + np.arange(tlen)
            targets = torch.as_tensor(batch.target_vals[tg_idx],
                                      dtype=ref.dtype, device=ref.device)
            if kind == KIND_MATRIX:
                # patch targets mirror the token payload, pads and all
                pl_idx = batch.payload_offset[batch.masked_toks[gi]][:, None] \
                    + np.arange(tlen)
                keep = ~batch.pad[batch.masked_rows[gi][:, None], pl_idx]
            else:
                keep = np.ones((len(gi), tlen), dtype=bool)
            keep = torch.as_tensor(keep, device=ref.device)
            out.append((fids[gi], preds, targets, keep))
        return out

    def masked_loss(self, groups):
        """Total and per-feature MSE over masked, unpadded target elements.

        Per-feature MSE averages over that feature's valid elements in the
        batch; the training loss is the sum over target features.
        """
        ref = self._ref()
        sums = {}
        counts = {}
        for fids, preds, targets, keep in groups:
            err = (preds - targets) ** 2 * keep
            for fid in np.unique(fids):
                rows = np.nonzero(fids == fid)[0]
                rt = torch.as_tensor(rows, device=ref.device)
                name = self.feature_names[fid]
                sums[name] = sums.get(name, 0.0) + err[rt].sum()
                counts[name] = counts.get(name, 0) \
                    + int(keep[rt].sum().item())
        per_feature = {name: sums[name] / max(counts[name], 1)
                       for name in sums}
        loss = sum(per_feature.values())
        return loss, {k: float(v.detach()) for k, v in per_feature.items()}

    def decode_and_loss(self, outputs: torch.Tensor, batch):
        if len(batch.masked_rows) == 0:
            raise ValueError("batch has no masked tokens")
        return self.masked_loss(self.decode_masked(outputs, batch))
