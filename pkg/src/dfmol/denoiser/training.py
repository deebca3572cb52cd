"""Training loop: coupled prior/data pairs, per-variant conditional paths, Adam."""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np
import torch

from ..coupling import equivariant_ot_couple, sample_categorical_prior, sample_coord_prior
from ..datasets import AtomCountSampler, category_marginals, fit_atom_count_sampler
from ..flows import (
    FlowVariant,
    GraphState,
    ctmc_conditional_sample,
    dirichlet_conditional_sample,
    interp_conditional,
    pairs_to_edges,
    triu_pairs,
)
from ..molgraph import N_BOND_TYPES, AtomVocabulary, Molecule
from .loss import DEFAULT_LOSS_WEIGHTS, Targets, TrainBatch, batch_loss
from .model import ModelConfig, MoleculeDenoiser


class TrainingDiverged(FloatingPointError):
    """Loss became non-finite; ``state`` holds the last good checkpoint."""

    def __init__(self, message: str, state: "TrainState"):
        super().__init__(message)
        self.state = state


@dataclass
class TrainConfig:
    steps: int = 2000
    batch: int = 32
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    loss_weights: tuple = DEFAULT_LOSS_WEIGHTS
    ot_max_iters: int = 10
    ot_restarts: int = 0
    checkpoint_every: int = 500
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.steps < 0 or self.batch < 1:
            raise ValueError("train.steps must be >= 0 and train.batch >= 1")
        if not self.lr > 0:
            raise ValueError("train.lr must be positive")
        if len(self.loss_weights) != 4 or any(not w > 0 for w in self.loss_weights):
            raise ValueError("loss weights must be four positive numbers")

    def to_json(self) -> dict:
        out = asdict(self)
        out["betas"] = list(self.betas)
        out["loss_weights"] = list(self.loss_weights)
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        obj = dict(obj)
        obj["model"] = ModelConfig(**obj.get("model", {}))
        obj["betas"] = tuple(obj.get("betas", (0.9, 0.999)))
        obj["loss_weights"] = tuple(obj.get("loss_weights", DEFAULT_LOSS_WEIGHTS))
        return cls(**obj)


@dataclass
class TrainState:
    model: MoleculeDenoiser
    optimizer: torch.optim.Adam
    step: int
    seed: int
    config: TrainConfig
    atom_counts: AtomCountSampler
    history: list = field(default_factory=list)

    @property
    def variant(self) -> FlowVariant:
        return self.model.variant

    @property
    def vocab(self) -> AtomVocabulary:
        return self.model.vocab

    @property
    def loss_weights(self) -> tuple:
        return tuple(self.config.loss_weights)


def make_optimizer(model: MoleculeDenoiser, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=tuple(cfg.betas))


def molecule_targets(mol: Molecule, vocab: AtomVocabulary):
    x = mol.positions - mol.positions.mean(axis=0)
    c = np.array([vocab.charge_index(int(q)) for q in mol.charges], dtype=np.int64)
    return x, mol.atom_types.copy(), c, mol.bonds.copy()


def _categorical_path(variant: FlowVariant, m: str, idx: np.ndarray, d: int, t: float, rng) -> np.ndarray:
    sched = variant.schedules[m]
    if variant.tag == "ctmc":
        return ctmc_conditional_sample(idx, sched, t, rng, d)
    if variant.tag == "dirichlet":
        return dirichlet_conditional_sample(idx, sched, t, variant.omega_max, d, rng)
    # continuous and simplex: straight interpolation from a prior draw to the one-hot
    x0 = sample_categorical_prior(variant.prior_spec(m), len(idx), d, rng)
    return interp_conditional(x0, np.eye(d)[idx], sched, t)


def make_batch(
    mols: list[Molecule],
    variant: FlowVariant,
    vocab: AtomVocabulary,
    rng: np.random.Generator,
    ot_max_iters: int = 10,
    ot_restarts: int = 0,
    t: np.ndarray | None = None,
) -> TrainBatch:
    """Noisy states g_t, times and clean targets for a list of molecules.

    Coordinates are paired with their prior draw by the equivariant OT
    coupling; categorical modalities use the independent coupling.
    """
    b, n = len(mols), max(m.n_atoms for m in mols)
    dims = {"a": vocab.n_types, "c": vocab.n_charges, "e": N_BOND_TYPES}
    tok = variant.tokens
    if t is None:
        t = rng.random(b)
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (b,)).copy()
    mask = np.zeros((b, n), dtype=bool)
    x1 = np.zeros((b, n, 3))
    a1 = np.zeros((b, n), dtype=np.int64)
    c1 = np.zeros((b, n), dtype=np.int64)
    e1 = np.zeros((b, n, n), dtype=np.int64)
    xt = np.zeros((b, n, 3))
    if tok:
        at, ct = np.full((b, n), dims["a"]), np.full((b, n), dims["c"])
        et = np.full((b, n, n), dims["e"])
    else:
        at, ct = np.zeros((b, n, dims["a"])), np.zeros((b, n, dims["c"]))
        et = np.zeros((b, n, n, dims["e"]))
    for i, mol in enumerate(mols):
        k = mol.n_atoms
        mask[i, :k] = True
        x, a, c, e = molecule_targets(mol, vocab)
        x1[i, :k], a1[i, :k], c1[i, :k], e1[i, :k, :k] = x, a, c, e
        x0 = equivariant_ot_couple(sample_coord_prior(k, rng), x, ot_max_iters, ot_restarts).x0
        xt[i, :k] = interp_conditional(x0, x, variant.schedules["x"], t[i])
        at[i, :k] = _categorical_path(variant, "a", a, dims["a"], t[i], rng)
        ct[i, :k] = _categorical_path(variant, "c", c, dims["c"], t[i], rng)
        iu, ju = triu_pairs(k)
        pe = _categorical_path(variant, "e", e[iu, ju], dims["e"], t[i], rng)
        et[i, :k, :k] = pairs_to_edges(pe[None], k, fill=dims["e"] if tok else 0.0)[0]
    state = GraphState(xt, at, ct, et, mask)
    return TrainBatch(state, t, Targets(x1, a1, c1, e1, mask))


def with_data_marginals(variant: FlowVariant, dataset: list[Molecule], vocab: AtomVocabulary) -> FlowVariant:
    if variant.tag != "simplex" or variant.marginals is not None:
        return variant
    return replace(variant, marginals={k: v.tolist() for k, v in category_marginals(dataset, vocab).items()})


def init_train_state(dataset: list[Molecule], variant: FlowVariant, config: TrainConfig, vocab: AtomVocabulary) -> TrainState:
    variant = with_data_marginals(variant, dataset, vocab)
    torch.manual_seed(config.seed)
    model = MoleculeDenoiser(vocab, variant, config.model, seed=config.seed)
    return TrainState(model, make_optimizer(model, config), 0, config.seed, config, fit_atom_count_sampler(dataset))


def snapshot(state: TrainState) -> TrainState:
    model = copy.deepcopy(state.model)
    opt = make_optimizer(model, state.config)
    opt.load_state_dict(copy.deepcopy(state.optimizer.state_dict()))
    return TrainState(model, opt, state.step, state.seed, state.config, state.atom_counts, list(state.history))


def train(
    dataset: list[Molecule],
    variant: FlowVariant,
    config: TrainConfig,
    vocab: AtomVocabulary,
    state: TrainState | None = None,
    on_checkpoint: Callable[[TrainState], None] | None = None,
    log: Callable[[dict], None] | None = None,
) -> TrainState:
    """Run ``config.steps`` optimiser steps (continuing ``state`` if given).

    Randomness is drawn from a generator seeded by ``(seed, step)``, so a
    resumed run follows the same curve as an uninterrupted one. A
    non-finite loss raises TrainingDiverged carrying the last checkpoint.
    """
    if not dataset:
        raise ValueError("training dataset is empty")
    if state is None:
        state = init_train_state(dataset, variant, config, vocab)
    model, opt = state.model, state.optimizer
    last_good = snapshot(state)
    weights = tuple(config.loss_weights)
    model.train()
    end = state.step + config.steps
    while state.step < end:
        rng = np.random.default_rng([state.seed, state.step])
        idx = rng.choice(len(dataset), size=config.batch, replace=len(dataset) < config.batch)
        batch = make_batch([dataset[i] for i in idx], state.variant, vocab, rng, config.ot_max_iters, config.ot_restarts)
        loss, parts = batch_loss(model, batch, weights)
        value = float(loss.detach())
        if not math.isfinite(value):
            if on_checkpoint is not None:
                on_checkpoint(last_good)
            raise TrainingDiverged(f"non-finite loss at step {state.step}", last_good)
        opt.zero_grad()
        loss.backward()
        opt.step()
        state.step += 1
        rec = {"step": state.step, "total": value, **{k: float(v.detach()) for k, v in parts.items()}}
        state.history.append(rec)
        if log is not None:
            log(rec)
        if config.checkpoint_every and state.step % config.checkpoint_every == 0:
            last_good = snapshot(state)
            if on_checkpoint is not None:
                on_checkpoint(last_good)
    model.eval()
    return state
