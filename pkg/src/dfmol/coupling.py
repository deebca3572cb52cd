"""Prior samplers and the equivariant optimal-transport coupling for coordinates."""

from __future__ import annotations

import functools
import itertools
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

PRIOR_VARIANTS = ("gaussian-coords", "gaussian-onehot", "marginal-simplex", "uniform-simplex", "mask")


@dataclass
class Coupling:
    x0: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray
    permutation: np.ndarray
    cost: float
    n_iters: int = 0


@dataclass(frozen=True)
class PriorSpec:
    variant: str
    probs: tuple | None = None
    sigma: float = 0.2

    def __post_init__(self):
        if self.variant not in PRIOR_VARIANTS:
            raise ValueError(f"unknown prior variant {self.variant!r}")
        if self.probs is not None:
            q = np.asarray(self.probs, dtype=np.float64)
            if np.any(q < 0) or abs(q.sum() - 1.0) > 1e-9:
                raise ValueError("prior probabilities must be nonnegative and sum to 1")
        if self.sigma < 0:
            raise ValueError("blur sigma must be nonnegative")


def sample_coord_prior(n: int, rng: np.random.Generator) -> np.ndarray:
    if n < 1:
        raise ValueError("need at least one atom")
    x = rng.standard_normal((n, 3))
    return x - x.mean(axis=0)


def kabsch_align(x0: np.ndarray, x1: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    """Proper rotation R and translation t minimising sum ||R x0_i + t - x1_i||^2.

    Returns ``(R, t, rmsd)``.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    if x0.shape != x1.shape or x0.ndim != 2 or x0.shape[1] != 3 or len(x0) < 1:
        raise ValueError("kabsch_align needs two equal-length N x 3 arrays")
    c0, c1 = x0.mean(axis=0), x1.mean(axis=0)
    a, b = x0 - c0, x1 - c1
    h = a.T @ b
    if not np.any(h):
        rot = np.eye(3)
    else:
        u, _, vt = np.linalg.svd(h)
        d = np.sign(np.linalg.det(vt.T @ u.T))
        d = 1.0 if d == 0 else d
        rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    t = c1 - rot @ c0
    resid = x0 @ rot.T + t - x1
    return rot, t, float(np.sqrt((resid**2).sum() / len(x0)))


def _assignment_value(cost: np.ndarray) -> float:
    if cost.size == 0:
        return 0.0
    r, c = linear_sum_assignment(cost)
    return float(cost[r, c].sum())


def solve_assignment(cost: np.ndarray) -> np.ndarray:
    """Minimum-cost permutation ``sigma`` (row i -> column sigma[i]).

    Among optimal permutations the lexicographically smallest is returned.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ValueError("assignment cost matrix must be square")
    if not np.all(np.isfinite(cost)):
        raise ValueError("assignment costs must be finite")
    n = len(cost)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    r, c = linear_sum_assignment(cost)
    best = float(cost[r, c].sum())
    tol = 1e-10 * max(1.0, float(np.abs(cost).max()) * n)

    # fix rows in order, taking the smallest column that keeps the optimum reachable
    perm = np.empty(n, dtype=np.int64)
    rows, cols = list(range(n)), list(range(n))
    remaining = best
    for i in range(n):
        rest_rows = rows[1:]
        for j in sorted(cols):
            rest_cols = [k for k in cols if k != j]
            val = cost[i, j] + _assignment_value(cost[np.ix_(rest_rows, rest_cols)])
            if val <= remaining + tol:
                perm[i] = j
                remaining -= cost[i, j]
                cols = rest_cols
                break
        rows = rest_rows
    return perm


def _squared_cost(a: np.ndarray, b: np.ndarray) -> float:
    return float(((a - b) ** 2).sum())


def _alternate(x0, x1, perm, max_iters):
    """Kabsch / assignment alternation from a starting permutation.

    Cost is non-increasing: each half-step minimises over one of rotation or
    permutation with the other fixed.
    """
    best = None
    for it in range(1, max_iters + 1):
        rot, t, _ = kabsch_align(x0[perm], x1)
        aligned = x0[perm] @ rot.T + t
        cost = _squared_cost(aligned, x1)
        if best is None or cost < best[4]:
            best = (perm.copy(), rot, t, aligned, cost, it)
        moved = x0 @ rot.T + t
        d2 = ((x1[:, None, :] - moved[None, :, :]) ** 2).sum(-1)
        # ties have measure zero for real coordinates; skip the tie-break pass
        _, new_perm = linear_sum_assignment(d2)
        if np.array_equal(new_perm, perm):
            break
        perm = new_perm
    return best


def _canonical_frame(xc: np.ndarray) -> np.ndarray:
    """Principal axes with signs fixed by the third moment, det +1.

    Rotating the cloud rotates the frame, so seeds expressed in this frame
    move with the data.
    """
    _, u = np.linalg.eigh(xc.T @ xc)
    skew = ((xc @ u) ** 3).sum(axis=0)
    u = u * np.where(skew < 0, -1.0, 1.0)
    if np.linalg.det(u) < 0:
        u[:, 0] = -u[:, 0]
    return u


def _octahedral() -> list[np.ndarray]:
    out = []
    for p in itertools.permutations(range(3)):
        for signs in itertools.product((1.0, -1.0), repeat=3):
            s = np.zeros((3, 3))
            s[range(3), p] = signs
            if np.linalg.det(s) > 0:
                out.append(s)
    return out


@functools.lru_cache(maxsize=8)
def _seed_rotations(n: int) -> np.ndarray:
    # fixed uniform draws on SO(3) via unit quaternions
    q = np.random.default_rng(20240521).standard_normal((n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = q.T
    return np.stack(
        [
            np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)], -1),
            np.stack([2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)], -1),
            np.stack([2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)], -1),
        ],
        axis=1,
    )


OCTAHEDRAL = _octahedral()


def equivariant_ot_couple(x0: np.ndarray, x1: np.ndarray, max_iters: int = 10, restarts: int = 100) -> Coupling:
    """Rigid alignment plus atom permutation of ``x0`` onto ``x1``.

    The base run alternates Kabsch and assignment from the identity
    permutation. With ``restarts > 0`` the alternation is also seeded from
    the 24 signed-axis rotations between the canonical principal frames of
    the two clouds and from ``restarts`` fixed rotations in those frames; the
    cheapest result wins. The seeds move with the data, so the achieved cost
    does not depend on rigid motions of either input.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    if x0.shape != x1.shape:
        raise ValueError("coupled point clouds must have the same shape")
    n = len(x0)
    best = _alternate(x0, x1, np.arange(n), max_iters)
    if restarts > 0 and n > 2:
        x0c, x1c = x0 - x0.mean(0), x1 - x1.mean(0)
        u0, u1 = _canonical_frame(x0c), _canonical_frame(x1c)
        for g in (*OCTAHEDRAL, *_seed_rotations(restarts)):
            rot = u1 @ g @ u0.T
            d2 = ((x1c[:, None, :] - (x0c @ rot.T)[None, :, :]) ** 2).sum(-1)
            _, perm = linear_sum_assignment(d2)
            cand = _alternate(x0, x1, perm, max_iters)
            if cand[4] < best[4]:
                best = cand
    perm, rot, t, aligned, cost, iters = best
    return Coupling(aligned, rot, t, perm, cost, iters)


def project_to_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection of the last axis onto the probability simplex."""
    v = np.asarray(v, dtype=np.float64)
    d = v.shape[-1]
    flat = v.reshape(-1, d)
    out = np.empty_like(flat)
    on = (flat.min(axis=1) >= 0.0) & (np.abs(flat.sum(axis=1) - 1.0) <= 1e-12)
    out[on] = flat[on]
    off = ~on
    if np.any(off):
        w = flat[off]
        u = -np.sort(-w, axis=1)
        css = np.cumsum(u, axis=1) - 1.0
        k = np.arange(1, d + 1)
        cond = u - css / k > 0
        rho = d - 1 - np.argmax(cond[:, ::-1], axis=1)
        theta = css[np.arange(len(w)), rho] / (rho + 1)
        p = np.maximum(w - theta[:, None], 0.0)
        out[off] = p
    return out.reshape(v.shape)


def sample_categorical_prior(spec: PriorSpec, n: int, d: int, rng: np.random.Generator) -> np.ndarray:
    """Prior draws for ``n`` positions of a ``d``-category variable.

    Returns an ``(n, d)`` array, or ``n`` token indices all equal to the mask
    index ``d`` for the mask prior.
    """
    if spec.variant == "gaussian-onehot":
        return rng.standard_normal((n, d))
    if spec.variant == "marginal-simplex":
        q = np.full(d, 1.0 / d) if spec.probs is None else np.asarray(spec.probs, dtype=np.float64)
        if len(q) != d:
            raise ValueError("marginal probabilities do not match category count")
        idx = rng.choice(d, size=n, p=q)
        x = np.eye(d)[idx]
        if spec.sigma > 0:
            x = project_to_simplex(x + spec.sigma * rng.standard_normal((n, d)))
        return x
    if spec.variant == "uniform-simplex":
        g = rng.standard_exponential((n, d))
        return g / g.sum(axis=1, keepdims=True)
    if spec.variant == "mask":
        return np.full(n, d, dtype=np.int64)
    raise ValueError(f"prior variant {spec.variant!r} is not categorical")
