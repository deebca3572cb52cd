"""Conditional paths, per-variant samplers and the Euler trajectory integrator.

Batched graph states are dense and padded: ``x`` is ``(B, N, 3)``, node
categorical modalities are ``(B, N, d)`` real vectors or ``(B, N)`` tokens
(CTMC, where the token ``d`` is the mask), edges are ``(B, N, N, d)`` or
``(B, N, N)`` and always symmetric. ``mask`` marks the real atoms.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np
from scipy.special import betainc, betaln

from .coupling import PriorSpec, project_to_simplex, sample_categorical_prior, sample_coord_prior
from .molgraph import N_BOND_TYPES, AtomVocabulary, Molecule
from .schedules import MODALITIES, InterpolantSchedule, default_schedules, kappa, kappa_dot

VARIANTS = ("continuous", "simplex", "dirichlet", "ctmc")
CATEGORICAL = ("a", "c", "e")
PROB_FLOOR = 1e-10


class FlowError(RuntimeError):
    """Numerical failure during integration (bad discretisation, singularity)."""


@dataclass(frozen=True)
class FlowVariant:
    tag: str
    schedules: dict = field(default_factory=dict)
    eta: float = 30.0
    tau: float = 0.05
    omega_max: float = 10.0
    simplex_sigma: float = 0.2
    marginals: dict | None = None

    def __post_init__(self):
        if self.tag not in VARIANTS:
            raise ValueError(f"unknown flow variant {self.tag!r}")
        if not self.tau > 0:
            raise ValueError("temperature tau must be positive")
        if self.eta < 0:
            raise ValueError("stochasticity eta must be nonnegative")
        if not self.omega_max > 0:
            raise ValueError("omega_max must be positive")
        scheds = default_schedules(self.tag)
        scheds.update(self.schedules)
        if self.tag == "ctmc":
            for m in CATEGORICAL:
                scheds[m] = InterpolantSchedule("linear")
        object.__setattr__(self, "schedules", scheds)

    @property
    def tokens(self) -> bool:
        return self.tag == "ctmc"

    def prior_spec(self, modality: str) -> PriorSpec:
        if modality == "x":
            return PriorSpec("gaussian-coords")
        if self.tag == "continuous":
            return PriorSpec("gaussian-onehot")
        if self.tag == "simplex":
            probs = None if self.marginals is None else tuple(self.marginals[modality])
            return PriorSpec("marginal-simplex", probs, self.simplex_sigma)
        if self.tag == "dirichlet":
            return PriorSpec("uniform-simplex")
        return PriorSpec("mask")

    def to_json(self) -> dict:
        return {
            "tag": self.tag,
            "schedules": {m: s.to_json() for m, s in self.schedules.items()},
            "eta": self.eta,
            "tau": self.tau,
            "omega_max": self.omega_max,
            "simplex_sigma": self.simplex_sigma,
            "marginals": None if self.marginals is None else {k: list(map(float, v)) for k, v in self.marginals.items()},
        }

    @classmethod
    def from_json(cls, obj: dict) -> "FlowVariant":
        scheds = {m: InterpolantSchedule(**s) for m, s in obj.get("schedules", {}).items()}
        return cls(
            obj["tag"],
            scheds,
            obj.get("eta", 30.0),
            obj.get("tau", 0.05),
            obj.get("omega_max", 10.0),
            obj.get("simplex_sigma", 0.2),
            obj.get("marginals"),
        )


@dataclass
class GraphState:
    x: np.ndarray
    a: np.ndarray
    c: np.ndarray
    e: np.ndarray
    mask: np.ndarray

    def copy(self) -> "GraphState":
        return GraphState(self.x.copy(), self.a.copy(), self.c.copy(), self.e.copy(), self.mask.copy())

    def get(self, m: str) -> np.ndarray:
        return getattr(self, m)


@dataclass
class Prediction:
    """Denoiser output: endpoint coordinates and probability rows."""

    x: np.ndarray
    a: np.ndarray
    c: np.ndarray
    e: np.ndarray

    def get(self, m: str) -> np.ndarray:
        return getattr(self, m)


class Denoiser(Protocol):
    vocab: AtomVocabulary

    def __call__(self, state: GraphState, t: np.ndarray) -> Prediction: ...


# ---------------------------------------------------------------------------
# conditional paths and vector fields


def interp_conditional(x0, x1, schedule: InterpolantSchedule, t):
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    if x0.shape != x1.shape:
        raise ValueError(f"shape mismatch {x0.shape} vs {x1.shape}")
    k = np.asarray(kappa(schedule, t))
    k = k.reshape(k.shape + (1,) * (x0.ndim - k.ndim))
    return (1.0 - k) * x0 + k * x1


def endpoint_vector_field(x_t, x1_hat, schedule: InterpolantSchedule, t):
    """(kappa_dot / (1 - kappa)) * (x1_hat - x_t)."""
    k = kappa(schedule, t)
    denom = 1.0 - np.asarray(k)
    if np.any(denom < 1e-9):
        raise FlowError("endpoint singularity: 1 - kappa(t) vanishes; snap to the prediction instead")
    scale = np.asarray(kappa_dot(schedule, t)) / denom
    x_t = np.asarray(x_t, dtype=np.float64)
    scale = scale.reshape(scale.shape + (1,) * (x_t.ndim - scale.ndim))
    return scale * (np.asarray(x1_hat, dtype=np.float64) - x_t)


def euler_step(x_t, velocity, dt: float):
    if not dt > 0:
        raise ValueError("Euler step size must be positive")
    return np.asarray(x_t) + dt * np.asarray(velocity)


# ---------------------------------------------------------------------------
# Dirichlet flows


def dirichlet_alpha(schedule: InterpolantSchedule, t, omega_max: float):
    """Concentration on the target vertex: 1 + omega_max * kappa(t)."""
    return 1.0 + omega_max * np.asarray(kappa(schedule, t))


def dirichlet_conditional_sample(j, schedule: InterpolantSchedule, t, omega_max: float, d: int, rng: np.random.Generator):
    """Draw(s) from Dir(1 + e_j * omega_max * kappa_t); uniform on the simplex at kappa = 0."""
    j = np.asarray(j, dtype=np.int64)
    if np.any(j < 0) or np.any(j >= d):
        raise ValueError("target index outside [0, d)")
    alpha = np.ones(j.shape + (d,))
    np.put_along_axis(alpha, j[..., None], np.broadcast_to(dirichlet_alpha(schedule, t, omega_max), j.shape)[..., None], -1)
    g = rng.standard_gamma(alpha)
    return g / g.sum(axis=-1, keepdims=True)


def _dalpha_betainc(z, a, b, h=1e-5):
    """d/da of the regularised incomplete beta I_z(a, b), by central differences.

    For z > 1/2 the complement I_z(a, b) = 1 - I_{1-z}(b, a) keeps relative
    precision near the vertex.
    """
    lo = z <= 0.5
    out = np.empty_like(z)
    zl = z[lo]
    out[lo] = (betainc(a + h, b, zl) - betainc(a - h, b, zl)) / (2 * h)
    zh = 1.0 - z[~lo]
    out[~lo] = -(betainc(b, a + h, zh) - betainc(b, a - h, zh)) / (2 * h)
    return out


def dirichlet_speed(z, alpha: float, alpha_dot: float, d: int, max_speed: float = 1e4):
    """Scalar C(z) of the conditional field C(z) (e_j - x), with z = x_j.

    Keeps the Beta(alpha, d - 1) marginal of the target coordinate on its
    path while alpha moves at rate ``alpha_dot``.
    """
    b = float(d - 1)
    z = np.clip(np.asarray(z, dtype=np.float64), 1e-12, 1.0 - 1e-12)
    log_dens = (alpha - 1.0) * np.log(z) + b * np.log1p(-z) - betaln(alpha, b)  # (1-z) * Beta pdf
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        c = -alpha_dot * _dalpha_betainc(z, alpha, b) / np.exp(log_dens)
    c = np.where(np.isfinite(c), c, 0.0)
    return np.clip(c, 0.0, max_speed)


def dirichlet_marginal_velocity(a_t, p1_probs, schedule: InterpolantSchedule, t: float, omega_max: float):
    a_t = np.asarray(a_t, dtype=np.float64)
    p1 = np.asarray(p1_probs, dtype=np.float64)
    d = a_t.shape[-1]
    alpha = float(dirichlet_alpha(schedule, t, omega_max))
    alpha_dot = omega_max * float(kappa_dot(schedule, t))
    c = dirichlet_speed(a_t, alpha, alpha_dot, d)
    w = p1 * c
    # sum_j w_j (e_j - a)
    return w - a_t * w.sum(axis=-1, keepdims=True)


def dirichlet_marginal_step(a_t, p1_probs, schedule: InterpolantSchedule, t: float, dt: float, omega_max: float = 10.0):
    u = dirichlet_marginal_velocity(a_t, p1_probs, schedule, t, omega_max)
    return project_to_simplex(euler_step(a_t, u, dt))


# ---------------------------------------------------------------------------
# CTMC flows


def ctmc_conditional_sample(final_index, schedule: InterpolantSchedule, t, rng: np.random.Generator, mask_index: int):
    """Final state with probability kappa(t), otherwise the mask token."""
    final_index = np.asarray(final_index, dtype=np.int64)
    keep = rng.random(final_index.shape) < np.asarray(kappa(schedule, t))
    return np.where(keep, final_index, mask_index)


def low_temp_renormalize(probs, tau: float):
    """softmax(log(p) / tau) with an epsilon floor before the log."""
    if not tau > 0:
        raise ValueError("tau must be positive")
    logits = np.log(np.maximum(np.asarray(probs, dtype=np.float64), PROB_FLOOR)) / tau
    logits -= logits.max(axis=-1, keepdims=True)
    w = np.exp(logits)
    return w / w.sum(axis=-1, keepdims=True)


def ctmc_unmask_probability(schedule: InterpolantSchedule, t: float, dt: float, eta: float) -> float:
    k = kappa(schedule, t)
    if 1.0 - k < 1e-12:
        return 1.0
    return dt * (kappa_dot(schedule, t) + eta * k) / (1.0 - k)


def _sample_rows(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    cdf = np.cumsum(probs, axis=-1)
    u = rng.random(probs.shape[:-1] + (1,)) * cdf[..., -1:]
    return np.minimum((u >= cdf).sum(axis=-1), probs.shape[-1] - 1)


def ctmc_step(tokens, p1_probs, schedule: InterpolantSchedule, t: float, dt: float, eta: float, tau: float, rng: np.random.Generator, final: bool | None = None):
    """One CTMC transition per position.

    Masked positions unmask with probability dt (kappa_dot + eta kappa) / (1 - kappa),
    drawing the new state from the temperature-sharpened prediction;
    unmasked positions remask with probability eta * dt. On the final step
    (``t + dt >= 1``) every masked position is unmasked.

    The unmask probability is capped at 1 (the rate integrated over the step
    exceeds one jump, so every masked token jumps); a remask probability
    above 1 is an invalid discretisation and raises.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    p1 = np.asarray(p1_probs, dtype=np.float64)
    d = p1.shape[-1]
    if final is None:
        final = t + dt >= 1.0 - 1e-12
    remask_p = eta * dt
    if remask_p > 1.0:
        raise FlowError("transition probability exceeds 1: reduce dt or eta")
    unmask_p = 1.0 if final else min(1.0, ctmc_unmask_probability(schedule, t, dt, eta))
    masked = tokens == d
    u = rng.random(tokens.shape)
    new_states = _sample_rows(low_temp_renormalize(p1, tau), rng)
    out = tokens.copy()
    jump_in = masked & (u < unmask_p)
    out[jump_in] = new_states[jump_in]
    if not final:
        out[~masked & (u < remask_p)] = d
    return out


# ---------------------------------------------------------------------------
# batched state helpers


def triu_pairs(n: int) -> tuple[np.ndarray, np.ndarray]:
    return np.triu_indices(n, 1)


def edges_to_pairs(e: np.ndarray) -> np.ndarray:
    iu, ju = triu_pairs(e.shape[1])
    return e[:, iu, ju]


def pairs_to_edges(p: np.ndarray, n: int, fill=0) -> np.ndarray:
    b = p.shape[0]
    out = np.full((b, n, n) + p.shape[2:], fill, dtype=p.dtype)
    iu, ju = triu_pairs(n)
    out[:, iu, ju] = p
    out[:, ju, iu] = p
    return out


def init_state(variant: FlowVariant, sizes, vocab: AtomVocabulary, rngs) -> GraphState:
    """Prior draws for a padded batch; ``rngs`` holds one generator per molecule."""
    sizes = list(sizes)
    b, n = len(sizes), max(sizes)
    dims = {"a": vocab.n_types, "c": vocab.n_charges, "e": N_BOND_TYPES}
    x = np.zeros((b, n, 3))
    mask = np.zeros((b, n), dtype=bool)
    if variant.tokens:
        cats = {"a": np.full((b, n), dims["a"]), "c": np.full((b, n), dims["c"]), "e": np.full((b, n, n), dims["e"])}
    else:
        cats = {"a": np.zeros((b, n, dims["a"])), "c": np.zeros((b, n, dims["c"])), "e": np.zeros((b, n, n, dims["e"]))}
    for i, (k, rng) in enumerate(zip(sizes, rngs)):
        mask[i, :k] = True
        x[i, :k] = sample_coord_prior(k, rng)
        for m in ("a", "c"):
            cats[m][i, :k] = sample_categorical_prior(variant.prior_spec(m), k, dims[m], rng)
        iu, ju = triu_pairs(k)
        pe = sample_categorical_prior(variant.prior_spec("e"), len(iu), dims["e"], rng)
        cats["e"][i, iu, ju] = pe
        cats["e"][i, ju, iu] = pe
    return GraphState(x, cats["a"], cats["c"], cats["e"], mask)


def _step_continuous(cur, pred, sched, t, dt, last):
    if last:
        return pred.copy()
    return euler_step(cur, endpoint_vector_field(cur, pred, sched, t), dt)


def _step_modality(variant: FlowVariant, m: str, cur, pred, t, dt, last, rng):
    sched = variant.schedules[m]
    if variant.tag in ("continuous", "simplex"):
        return _step_continuous(cur, pred, sched, t, dt, last)
    if variant.tag == "dirichlet":
        if last:
            return pred.copy()
        return dirichlet_marginal_step(cur, pred, sched, t, dt, variant.omega_max)
    return ctmc_step(cur, pred, sched, t, dt, variant.eta, variant.tau, rng, final=last)


def step_state(variant: FlowVariant, state: GraphState, pred: Prediction, t: float, dt: float, last: bool, rng) -> GraphState:
    x = _step_continuous(state.x, pred.x, variant.schedules["x"], t, dt, last)
    a = _step_modality(variant, "a", state.a, pred.a, t, dt, last, rng)
    c = _step_modality(variant, "c", state.c, pred.c, t, dt, last, rng)
    n = state.e.shape[1]
    pe = _step_modality(variant, "e", edges_to_pairs(state.e), edges_to_pairs(pred.e), t, dt, last, rng)
    e = pairs_to_edges(pe, n)
    return GraphState(x, a, c, e, state.mask)


@dataclass
class Trajectory:
    """Recorded states and denoiser outputs of one molecule on the time grid.

    ``states``/``preds`` map modality to arrays with a leading time axis; the
    edge modality is stored over upper-triangle atom pairs.
    """

    t: np.ndarray
    states: dict
    preds: dict
    variant: str

    def __len__(self) -> int:
        return len(self.t)

    def records(self):
        for k, t in enumerate(self.t):
            yield float(t), {m: v[k] for m, v in self.states.items()}, {m: v[k] for m, v in self.preds.items()}


def _snapshot(state: GraphState, pred: Prediction) -> tuple[dict, dict]:
    s = {"x": state.x.copy(), "a": state.a.copy(), "c": state.c.copy(), "e": edges_to_pairs(state.e).copy()}
    p = {"x": pred.x.copy(), "a": pred.a.copy(), "c": pred.c.copy(), "e": edges_to_pairs(pred.e).copy()}
    return s, p


def integrate(denoiser, variant: FlowVariant, state: GraphState, n_steps: int, rng: np.random.Generator, record: bool = False):
    """Euler integration of all modalities on a uniform grid from t=0 to 1.

    The last step replaces the update by the denoiser's endpoint (or forces
    unmasking for CTMC). Returns the final state and, if recording, a list of
    ``(t, state, pred)`` snapshots with ``n_steps + 1`` entries.
    """
    if n_steps < 1:
        raise ValueError("need at least one integration step")
    b = state.x.shape[0]
    dt = 1.0 / n_steps
    snaps = []
    for k in range(n_steps):
        t = k / n_steps
        pred = denoiser(state, np.full(b, t))
        if record:
            snaps.append((t,) + _snapshot(state, pred))
        state = step_state(variant, state, pred, t, dt, k == n_steps - 1, rng)
    if record:
        pred = denoiser(state, np.ones(b))
        snaps.append((1.0,) + _snapshot(state, pred))
    return state, snaps


def state_to_molecules(variant: FlowVariant, state: GraphState, vocab: AtomVocabulary) -> list[Molecule]:
    mols = []
    for i in range(state.x.shape[0]):
        k = int(state.mask[i].sum())
        if variant.tokens:
            a, c, e = state.a[i, :k], state.c[i, :k], state.e[i, :k, :k]
        else:
            # nearest one-hot under Euclidean distance is the argmax
            a = state.a[i, :k].argmax(-1)
            c = state.c[i, :k].argmax(-1)
            e = state.e[i, :k, :k].argmax(-1)
        e = np.triu(e, 1)
        e = e + e.T
        charges = np.asarray(vocab.charges)[c]
        mols.append(Molecule(state.x[i, :k].copy(), a, charges, e))
    return mols


def _split_trajectories(snaps, state: GraphState, variant: FlowVariant) -> list[Trajectory]:
    ts = np.array([s[0] for s in snaps])
    out = []
    for i in range(state.x.shape[0]):
        k = int(state.mask[i].sum())
        p = k * (k - 1) // 2
        n = state.x.shape[1]
        iu, ju = triu_pairs(n)
        keep = (iu < k) & (ju < k)
        states, preds = {}, {}
        for m in MODALITIES:
            if m == "e":
                states[m] = np.stack([s[1][m][i][keep] for s in snaps])
                preds[m] = np.stack([s[2][m][i][keep] for s in snaps])
                assert states[m].shape[1] == p
            else:
                states[m] = np.stack([s[1][m][i, :k] for s in snaps])
                preds[m] = np.stack([s[2][m][i, :k] for s in snaps])
        out.append(Trajectory(ts.copy(), states, preds, variant.tag))
    return out


def molecule_seed(global_seed: int, index: int) -> int:
    return int(global_seed) ^ int(index)


def sample_molecules(
    denoiser,
    variant: FlowVariant,
    n_mols: int,
    n_steps: int,
    atom_count_sampler,
    rng: np.random.Generator,
    record: bool = False,
    vocab: AtomVocabulary | None = None,
    batch_size: int = 250,
):
    """Sample molecules (and optionally their trajectories) from the flow.

    Atom counts come from ``atom_count_sampler``; prior draws use one
    generator per molecule seeded with ``global_seed XOR index``.
    """
    dvocab = getattr(denoiser, "vocab", None)
    if vocab is not None and dvocab is not None and tuple(vocab.elements) != tuple(dvocab.elements):
        raise ValueError("denoiser vocabulary does not match the requested vocabulary")
    vocab = vocab or dvocab
    if vocab is None:
        raise ValueError("no vocabulary available for sampling")
    if n_mols == 0:
        return [], ([] if record else None)
    global_seed = int(rng.integers(0, 2**62))
    sizes = atom_count_sampler.sample(n_mols, rng)
    mols, trajs = [], []
    for start in range(0, n_mols, batch_size):
        idx = range(start, min(n_mols, start + batch_size))
        rngs = [np.random.default_rng(molecule_seed(global_seed, i)) for i in idx]
        state = init_state(variant, [sizes[i] for i in idx], vocab, rngs)
        step_rng = np.random.default_rng([global_seed, start])
        state, snaps = integrate(denoiser, variant, state, n_steps, step_rng, record)
        mols.extend(state_to_molecules(variant, state, vocab))
        if record:
            trajs.extend(_split_trajectories(snaps, state, variant))
    return mols, (trajs if record else None)


def trajectory_to_jsonl(traj: Trajectory) -> str:
    """One JSON line per grid time: ``{"t", "state": {m: ...}, "pred": {m: ...}}``."""
    lines = []
    for t, s, p in traj.records():
        rec = {"t": t, "state": {m: v.tolist() for m, v in s.items()}, "pred": {m: v.tolist() for m, v in p.items()}}
        lines.append(json.dumps(rec))
    return "\n".join(lines) + "\n"


def trajectory_from_jsonl(text: str, variant: str) -> Trajectory:
    recs = [json.loads(line) for line in text.splitlines() if line.strip()]
    if not recs:
        raise ValueError("empty trajectory file")
    dtype = {m: (np.int64 if variant == "ctmc" and m != "x" else np.float64) for m in MODALITIES}
    states = {m: np.array([r["state"][m] for r in recs], dtype=dtype[m]) for m in MODALITIES}
    preds = {m: np.array([r["pred"][m] for r in recs], dtype=np.float64) for m in MODALITIES}
    return Trajectory(np.array([r["t"] for r in recs], dtype=np.float64), states, preds, variant)
