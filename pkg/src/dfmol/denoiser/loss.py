"""Weighted endpoint loss and its parameter gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from ..flows import GraphState
from .gvp import DTYPE
from .model import MoleculeDenoiser, TorchPrediction

DEFAULT_LOSS_WEIGHTS = (3.0, 0.4, 1.0, 2.0)
CE_FLOOR = 1e-10


class GradientError(FloatingPointError):
    pass


@dataclass
class Targets:
    """Clean endpoints: coordinates and category indices (``e`` is ``(B, N, N)``)."""

    x: np.ndarray
    a: np.ndarray
    c: np.ndarray
    e: np.ndarray
    mask: np.ndarray


@dataclass
class TrainBatch:
    state: GraphState
    t: np.ndarray
    targets: Targets


def _check_weights(weights):
    w = tuple(float(v) for v in weights)
    if len(w) != 4 or any(not v > 0 for v in w):
        raise ValueError("loss weights must be four positive numbers")
    return w


def _ce(probs: torch.Tensor, idx: torch.Tensor, sel: torch.Tensor) -> torch.Tensor:
    p = probs.gather(-1, idx.unsqueeze(-1)).squeeze(-1)
    nll = -torch.log(p.clamp(min=CE_FLOOR))
    return (nll * sel).sum() / sel.sum().clamp(min=1.0)


def compute_loss(pred: TorchPrediction, targets: Targets, weights=DEFAULT_LOSS_WEIGHTS) -> tuple[torch.Tensor, dict]:
    """Weighted sum of coordinate squared error and categorical cross-entropies.

    The coordinate term is the squared distance per atom averaged over atoms;
    cross-entropies are averaged per atom, and per unordered atom pair for
    bonds. Returns ``(total, {"x", "a", "c", "e"})``.
    """
    wx, wa, wc, we = _check_weights(weights)
    mask = torch.as_tensor(targets.mask, dtype=torch.bool)
    if pred.x.shape != targets.x.shape:
        raise ValueError(f"prediction shape {tuple(pred.x.shape)} does not match targets {targets.x.shape}")
    node = mask.to(DTYPE)
    n = mask.shape[1]
    upper = torch.triu(torch.ones(n, n, dtype=torch.bool), diagonal=1)
    pair = (mask.unsqueeze(1) & mask.unsqueeze(2) & upper).to(DTYPE)

    x1 = torch.as_tensor(targets.x, dtype=DTYPE)
    sq = ((pred.x - x1) ** 2).sum(-1)
    parts = {
        "x": (sq * node).sum() / node.sum().clamp(min=1.0),
        "a": _ce(pred.a, torch.as_tensor(targets.a, dtype=torch.long), node),
        "c": _ce(pred.c, torch.as_tensor(targets.c, dtype=torch.long), node),
        "e": _ce(pred.e, torch.as_tensor(targets.e, dtype=torch.long), pair),
    }
    total = wx * parts["x"] + wa * parts["a"] + wc * parts["c"] + we * parts["e"]
    return total, parts


def batch_loss(model: MoleculeDenoiser, batch: TrainBatch, weights=DEFAULT_LOSS_WEIGHTS):
    return compute_loss(model.predict(batch.state, batch.t), batch.targets, weights)


def backward(model: MoleculeDenoiser, batch: TrainBatch, weights=DEFAULT_LOSS_WEIGHTS) -> tuple[float, dict]:
    """Loss value and gradient of the loss for every named parameter.

    Raises GradientError naming the first parameter with a non-finite gradient.
    """
    model.zero_grad(set_to_none=False)
    loss, _ = batch_loss(model, batch, weights)
    loss.backward()
    grads = {}
    for name, p in model.named_parameters():
        g = p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
        if not torch.isfinite(g).all():
            raise GradientError(f"non-finite gradient in parameter {name}")
        grads[name] = g
    return float(loss.detach()), grads
