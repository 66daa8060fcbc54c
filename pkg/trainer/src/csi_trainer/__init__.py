"""Toy-scale masked-prediction transformer over csi-forge token exports.

The package never imports the simulator; it consumes only the on-disk
contract: a token export directory (index.json, tokens.bin, masks.bin)
plus the normalization-statistics JSON the export was built with.
"""

from .data import ExportError, NormStats, TokenBatch, TokenExport
from .model import MaskedTokenModel, ModelConfig

__all__ = ["ExportError", "NormStats", "TokenBatch", "TokenExport",
           "MaskedTokenModel", "ModelConfig"]
