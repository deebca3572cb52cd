"""Endpoint-predicting molecule denoiser built from molecule update blocks."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..flows import FlowVariant, GraphState, Prediction
from ..molgraph import N_BOND_TYPES, AtomVocabulary
from ..schedules import MODALITIES, kappa
from .gvp import DTYPE, GVP, GVPChain, GVPLayerNorm

N_TIME_FEATURES = 1 + len(MODALITIES)


@dataclass
class ModelConfig:
    blocks: int = 2
    scalar_dim: int = 64
    vector_dim: int = 8
    edge_dim: int = 32
    n_cp: int = 2
    rbf_dim: int = 16
    rbf_dmax: float = 6.0

    def to_json(self) -> dict:
        return asdict(self)


def rbf_embed(d: torch.Tensor, k: int = 16, d_max: float = 6.0) -> torch.Tensor:
    """Gaussian bases exp(-(d - c_i)^2 / 2w^2), centres evenly spaced on [0, d_max]."""
    centers = torch.linspace(0.0, d_max, k, dtype=d.dtype)
    width = d_max / max(1, k - 1) if k > 1 else 1.0
    return torch.exp(-((d.unsqueeze(-1) - centers) ** 2) / (2 * width**2))


def pair_geometry(x: torch.Tensor):
    """Distances and unit directions x_j - x_i at ``[b, i, j]``.

    Coincident points (d < 1e-8) get distance 0 and a zero direction.
    """
    diff = x.unsqueeze(1) - x.unsqueeze(2)
    d2 = (diff * diff).sum(-1)
    small = d2 < 1e-16
    dist = torch.where(small, torch.zeros_like(d2), torch.sqrt(torch.where(small, torch.ones_like(d2), d2)))
    unit = torch.where(small.unsqueeze(-1), torch.zeros_like(diff), diff / torch.where(small, torch.ones_like(dist), dist).unsqueeze(-1))
    return dist, unit


def _mlp(d_in: int, d_hidden: int, d_out: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(d_in, d_hidden, dtype=DTYPE), nn.SiLU(), nn.Linear(d_hidden, d_out, dtype=DTYPE))


class UpdateBlock(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        S, V, E, K = cfg.scalar_dim, cfg.vector_dim, cfg.edge_dim, cfg.rbf_dim
        self.cfg = cfg
        self.psi_m = GVPChain([(S + E + K, V + 1), (S, V), (S, V)], cfg.n_cp)
        self.psi_u = GVPChain([(S, V)] * 4, cfg.n_cp)
        self.node_norm = GVPLayerNorm((S, V))
        self.psi_x = GVPChain([(S, V), (S, V), (S, V), (0, 1)], cfg.n_cp, last_gate="identity")
        self.phi_e = _mlp(2 * S + K, E, E)
        self.edge_norm = nn.LayerNorm(E, dtype=DTYPE)

    def nfu(self, x, s, v, e, pair_mask):
        """Message passing update of node scalars and vectors."""
        B, N, S = s.shape
        dist, unit = pair_geometry(x)
        rbf = rbf_embed(dist, self.cfg.rbf_dim, self.cfg.rbf_dmax)
        # [b, i, j] holds the message from sender j to receiver i
        s_send = s.unsqueeze(1).expand(B, N, N, S)
        e_send = e.transpose(1, 2)
        v_send = v.unsqueeze(1).expand(B, N, N, *v.shape[-2:])
        ms, mv = self.psi_m(torch.cat([s_send, e_send, rbf], -1), torch.cat([v_send, unit.unsqueeze(-2)], -2))
        w = pair_mask.to(s.dtype)
        count = w.sum(-1).clamp(min=1.0)
        agg_s = (ms * w.unsqueeze(-1)).sum(2) / count.unsqueeze(-1)
        agg_v = (mv * w[..., None, None]).sum(2) / count[..., None, None]
        us, uv = self.psi_u(agg_s, agg_v)
        return self.node_norm(s + us, v + uv)

    def npu(self, x, s, v):
        _, dx = self.psi_x(s, v)
        return x + dx[..., 0, :]

    def efu(self, x, s, e):
        B, N, S = s.shape
        dist, _ = pair_geometry(x)
        rbf = rbf_embed(dist, self.cfg.rbf_dim, self.cfg.rbf_dmax)
        feats = torch.cat([s.unsqueeze(2).expand(B, N, N, S), s.unsqueeze(1).expand(B, N, N, S), rbf], -1)
        return self.edge_norm(e + self.phi_e(feats))

    def forward(self, x, s, v, e, pair_mask):
        s, v = self.nfu(x, s, v, e, pair_mask)
        x = self.npu(x, s, v)
        e = self.efu(x, s, e)
        return x, s, v, e


@dataclass
class TorchPrediction:
    x: torch.Tensor
    a: torch.Tensor
    c: torch.Tensor
    e: torch.Tensor


class MoleculeDenoiser(nn.Module):
    """Predicts the endpoint molecule from a partially generated one.

    Categorical inputs are one-hot token vectors (with an extra mask row)
    for CTMC and raw real vectors otherwise, each mapped by an affine input
    layer; time enters as ``[t, kappa_x, kappa_a, kappa_c, kappa_e]``
    appended to the node scalars.
    """

    def __init__(self, vocab: AtomVocabulary, variant: FlowVariant, cfg: ModelConfig | None = None, seed: int = 0):
        super().__init__()
        self.vocab = vocab
        self.variant = variant
        self.cfg = cfg = cfg or ModelConfig()
        extra = 1 if variant.tokens else 0
        self.dims = {"a": vocab.n_types, "c": vocab.n_charges, "e": N_BOND_TYPES}
        S, E = cfg.scalar_dim, cfg.edge_dim
        self.node_in = nn.Linear(self.dims["a"] + self.dims["c"] + 2 * extra + N_TIME_FEATURES, S, dtype=DTYPE)
        self.edge_in = nn.Linear(self.dims["e"] + extra, E, dtype=DTYPE)
        self.blocks = nn.ModuleList([UpdateBlock(cfg) for _ in range(cfg.blocks)])
        self.head_a = _mlp(S, S, self.dims["a"])
        self.head_c = _mlp(S, S, self.dims["c"])
        self.head_e = _mlp(E, E, self.dims["e"])
        self.init_parameters(seed)

    def init_parameters(self, seed: int):
        gen = torch.Generator().manual_seed(int(seed))
        for mod in self.modules():
            if isinstance(mod, GVP):
                mod.reset_parameters(gen)
            elif isinstance(mod, nn.Linear):
                bound = 1.0 / np.sqrt(max(1, mod.in_features))
                with torch.no_grad():
                    mod.weight.uniform_(-bound, bound, generator=gen)
                    mod.bias.uniform_(-bound, bound, generator=gen)

    def time_features(self, t: np.ndarray) -> torch.Tensor:
        t = np.asarray(t, dtype=np.float64)
        cols = [t] + [np.asarray(kappa(self.variant.schedules[m], t), dtype=np.float64).reshape(t.shape) for m in MODALITIES]
        return torch.as_tensor(np.stack(cols, -1), dtype=DTYPE)

    def featurize(self, state: GraphState) -> tuple[torch.Tensor, ...]:
        def cat(arr, d):
            arr = np.asarray(arr)
            if self.variant.tokens:
                return F.one_hot(torch.as_tensor(arr, dtype=torch.long), d + 1).to(DTYPE)
            return torch.as_tensor(arr, dtype=DTYPE)

        return (
            torch.as_tensor(state.x, dtype=DTYPE),
            cat(state.a, self.dims["a"]),
            cat(state.c, self.dims["c"]),
            cat(state.e, self.dims["e"]),
            torch.as_tensor(state.mask, dtype=torch.bool),
        )

    def forward(self, x, a_in, c_in, e_in, mask, t_feats) -> TorchPrediction:
        B, N, _ = x.shape
        eye = torch.eye(N, dtype=torch.bool).unsqueeze(0)
        pair_mask = mask.unsqueeze(1) & mask.unsqueeze(2) & ~eye
        s = self.node_in(torch.cat([a_in, c_in, t_feats.unsqueeze(1).expand(B, N, t_feats.shape[-1])], -1))
        v = torch.zeros(B, N, self.cfg.vector_dim, 3, dtype=DTYPE)
        e = self.edge_in(e_in)
        for block in self.blocks:
            x, s, v, e = block(x, s, v, e, pair_mask)
        pa = torch.softmax(self.head_a(s), -1)
        pc = torch.softmax(self.head_c(s), -1)
        # one prediction per atom pair, invariant to the pair's orientation
        pe = torch.softmax(self.head_e(e + e.transpose(1, 2)), -1)
        return TorchPrediction(x, pa, pc, pe)

    def predict(self, state: GraphState, t: np.ndarray) -> TorchPrediction:
        return self(*self.featurize(state), self.time_features(t))

    def __call__(self, *args, **kwargs):
        if len(args) == 2 and isinstance(args[0], GraphState):
            with torch.no_grad():
                p = self.predict(*args)
            return Prediction(p.x.numpy(), p.a.numpy(), p.c.numpy(), p.e.numpy())
        return super().__call__(*args, **kwargs)

    def n_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())
