from .gvp import GVP, GVPChain, GVPLayerNorm, safe_norm
from .model import ModelConfig, MoleculeDenoiser, TorchPrediction, UpdateBlock, pair_geometry, rbf_embed

__all__ = [
    "GVP",
    "GVPChain",
    "GVPLayerNorm",
    "ModelConfig",
    "MoleculeDenoiser",
    "TorchPrediction",
    "UpdateBlock",
    "pair_geometry",
    "rbf_embed",
    "safe_norm",
]
