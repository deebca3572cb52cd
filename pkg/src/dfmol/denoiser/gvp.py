"""Geometric vector perceptron with a cross-product channel, and its layer norm."""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

NORM_EPS = 1e-8
DTYPE = torch.float64


def safe_norm(v: torch.Tensor, dim: int = -1) -> torch.Tensor:
    # smooth at zero so finite differences and autograd agree everywhere
    return torch.sqrt((v * v).sum(dim) + NORM_EPS)


def _act(name: str | None):
    return {
        None: lambda x: x,
        "identity": lambda x: x,
        "silu": F.silu,
        "sigmoid": torch.sigmoid,
    }[name]


class GVP(nn.Module):
    """Scalar/vector perceptron.

    Input ``(s, v)`` with ``s: (..., f)`` and ``v: (..., nu, 3)``; output
    ``(s', v')`` with ``s': (..., j)``, ``v': (..., mu, 3)``. Vectors go through
    ``W_h`` and through ``W_cp`` followed by row-wise cross products of its two
    halves; the concatenation feeds both ``W_mu`` (vector output) and the row
    norms that join the scalar path. Output vectors are gated by
    ``sigma_g(W_g sigma_plus(s_j) + b_g)`` where ``s_j`` is the scalar
    pre-activation.
    """

    def __init__(
        self,
        in_dims: tuple[int, int],
        out_dims: tuple[int, int],
        n_cp: int = 2,
        n_h: int | None = None,
        scalar_act: str | None = "silu",
        gate_act: str | None = "sigmoid",
        plus_act: str | None = "silu",
    ):
        super().__init__()
        self.f, self.nu = in_dims
        self.j, self.mu = out_dims
        self.n_cp = n_cp
        self.n_h = n_h if n_h is not None else max(self.nu, self.mu)
        width = self.n_h + self.n_cp
        self.W_h = nn.Parameter(torch.empty(self.n_h, self.nu, dtype=DTYPE))
        self.W_cp = nn.Parameter(torch.empty(2 * self.n_cp, self.nu, dtype=DTYPE))
        self.W_mu = nn.Parameter(torch.empty(self.mu, width, dtype=DTYPE))
        self.W_j = nn.Parameter(torch.empty(self.j, self.f + width, dtype=DTYPE))
        self.b_j = nn.Parameter(torch.zeros(self.j, dtype=DTYPE))
        self.W_g = nn.Parameter(torch.empty(self.mu, self.j, dtype=DTYPE))
        self.b_g = nn.Parameter(torch.zeros(self.mu, dtype=DTYPE))
        self.sigma = _act(scalar_act)
        self.sigma_g = _act(gate_act)
        self.sigma_plus = _act(plus_act)
        self.gate_bias_init = 1.0 if gate_act in (None, "identity") else 0.0
        self.reset_parameters()

    def reset_parameters(self, generator: torch.Generator | None = None):
        for w in (self.W_h, self.W_cp, self.W_mu, self.W_j, self.W_g):
            if w.numel() == 0:
                continue
            bound = 1.0 / math.sqrt(max(1, w.shape[1]))
            with torch.no_grad():
                w.uniform_(-bound, bound, generator=generator)
        with torch.no_grad():
            self.b_j.zero_()
            # an identity gate with no scalar outputs reduces to b_g; start it open
            self.b_g.fill_(self.gate_bias_init)

    def forward(self, s: torch.Tensor, v: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        v_h = torch.einsum("hn,...nc->...hc", self.W_h, v)
        if self.n_cp > 0:
            v_cp = torch.einsum("kn,...nc->...kc", self.W_cp, v)
            v_cp = torch.linalg.cross(v_cp[..., : self.n_cp, :], v_cp[..., self.n_cp :, :], dim=-1)
            v_hcp = torch.cat([v_h, v_cp], dim=-2)
        else:
            v_hcp = v_h
        v_mu = torch.einsum("mk,...kc->...mc", self.W_mu, v_hcp)
        s_hcp = safe_norm(v_hcp)
        s_j = torch.cat([s, s_hcp], dim=-1) @ self.W_j.T + self.b_j
        s_out = self.sigma(s_j)
        gate = self.sigma_g(self.sigma_plus(s_j) @ self.W_g.T + self.b_g)
        return s_out, gate.unsqueeze(-1) * v_mu


class GVPChain(nn.Module):
    """Sequential GVPs; the last one has a linear scalar output."""

    def __init__(self, dims: list[tuple[int, int]], n_cp: int, last_gate: str = "sigmoid"):
        super().__init__()
        layers = []
        for k in range(len(dims) - 1):
            last = k == len(dims) - 2
            layers.append(
                GVP(dims[k], dims[k + 1], n_cp=n_cp, scalar_act=None if last else "silu", gate_act=last_gate if last else "sigmoid")
            )
        self.layers = nn.ModuleList(layers)

    def forward(self, s, v):
        for layer in self.layers:
            s, v = layer(s, v)
        return s, v


class GVPLayerNorm(nn.Module):
    """Layer norm on scalars; vectors scaled by their root-mean-square row norm."""

    def __init__(self, dims: tuple[int, int]):
        super().__init__()
        self.scalar = nn.LayerNorm(dims[0], dtype=DTYPE)

    def forward(self, s, v):
        rms = torch.sqrt((v * v).sum(-1).mean(-1, keepdim=True) + NORM_EPS)
        return self.scalar(s), v / rms.unsqueeze(-1)
