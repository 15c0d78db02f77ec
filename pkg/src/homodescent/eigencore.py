"""Matrix-free symmetric linear operators and a Lanczos leftmost-eigenpair solver.

The optimizer only ever touches second-order information through
:class:`LinearMap`, i.e. through Hessian-vector products.  The central
construction is :class:`AugmentedMap`, the (n+1)-dimensional operator

    [[H, g], [g^T, -delta]]

whose leftmost eigenpair encodes a shifted Newton direction.  A dense
materializer is provided as a test oracle only.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.linalg import eigh_tridiagonal

from .errors import ConvergenceError, DimensionMismatchError, NumericError

DENSE_CAP = 512

# Lanczos breakdown threshold, relative to the operator scale.
_BREAKDOWN_RTOL = 1e-14

_MASK63 = (1 << 63) - 1


def seed_entropy(seed) -> list[int]:
    """Flatten a seed (int, str tag, tuple, or nesting) into SeedSequence entropy.

    String tags are hashed with blake2b so streams keyed by
    (run seed, iteration, call kind) replay identically across processes.
    """
    if seed is None:
        return [0]
    if isinstance(seed, (int, np.integer)):
        return [int(seed) & _MASK63]
    if isinstance(seed, str):
        digest = hashlib.blake2b(seed.encode(), digest_size=8).digest()
        return [int.from_bytes(digest, "big") & _MASK63]
    out: list[int] = []
    for part in seed:
        out.extend(seed_entropy(part))
    return out


def make_rng(*seed_parts) -> np.random.Generator:
    return np.random.default_rng(seed_entropy(seed_parts))


class MatvecCounter:
    """Shared counter so a run can account for every primitive HVP it pays for."""

    __slots__ = ("count",)

    def __init__(self) -> None:
        self.count = 0

    def add(self, n: int = 1) -> None:
        self.count += n


class LinearMap:
    """A symmetric linear operator accessed only through matrix-vector products.

    Subclasses implement ``_matvec``.  ``apply`` validates dimensions,
    increments the per-instance ``matvec_count`` and, when present, a shared
    :class:`MatvecCounter` used for run-level cost accounting.  Application
    must be pure apart from the counters; instances are safe to share
    read-only across runs that each own their counters.
    """

    def __init__(self, dim: int, counter: Optional[MatvecCounter] = None):
        if dim < 1:
            raise DimensionMismatchError(f"operator dimension must be >= 1, got {dim}")
        self.dim = int(dim)
        self.matvec_count = 0
        self._counter = counter
        # Optional content identity: two maps with equal value_key are
        # guaranteed to produce bit-identical outputs, letting linear
        # combinations cancel matching terms exactly.
        self.value_key = None

    def _matvec(self, v: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def apply(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        if v.shape != (self.dim,):
            raise DimensionMismatchError(
                f"operator of dim {self.dim} applied to vector of shape {v.shape}"
            )
        out = self._matvec(v)
        self.matvec_count += 1
        if self._counter is not None:
            self._counter.add()
        if not np.all(np.isfinite(out)):
            raise NumericError("non-finite value in operator application")
        return out


class DenseMap(LinearMap):
    """Wrap an explicit symmetric matrix as a LinearMap."""

    def __init__(self, matrix: np.ndarray, counter: Optional[MatvecCounter] = None):
        matrix = np.asarray(matrix, dtype=float)
        if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
            raise DimensionMismatchError(f"expected a square matrix, got {matrix.shape}")
        super().__init__(matrix.shape[0], counter)
        self.matrix = matrix

    def _matvec(self, v: np.ndarray) -> np.ndarray:
        return self.matrix @ v


class CallableMap(LinearMap):
    """Wrap a matvec closure as a LinearMap."""

    def __init__(self, dim: int, fn: Callable[[np.ndarray], np.ndarray],
                 counter: Optional[MatvecCounter] = None):
        super().__init__(dim, counter)
        self._fn = fn

    def _matvec(self, v: np.ndarray) -> np.ndarray:
        return np.asarray(self._fn(v), dtype=float)


class SumMap(LinearMap):
    """A flattened linear combination ``sum_i coef_i * map_i``.

    Nested SumMaps are flattened at construction so recursive estimator
    updates do not build deep call chains, and terms whose value keys (or
    identities) coincide are merged; a merged coefficient of exactly zero
    drops the term.  Recursive difference estimators therefore collapse to
    the plain estimate whenever their corrections cancel exactly, e.g. in
    the zero-noise limit.  Applying the sum applies every surviving term
    once, so the terms' own counters keep primitive-HVP accounting exact.
    """

    def __init__(self, terms: Sequence[tuple[float, LinearMap]],
                 counter: Optional[MatvecCounter] = None):
        merged: dict[object, tuple[float, LinearMap]] = {}
        dim = None

        def add(coef: float, m: LinearMap) -> None:
            key = m.value_key if m.value_key is not None else ("id", id(m))
            if key in merged:
                old_coef, old_m = merged[key]
                merged[key] = (old_coef + coef, old_m)
            else:
                merged[key] = (coef, m)

        for coef, m in terms:
            if dim is None:
                dim = m.dim
            elif m.dim != dim:
                raise DimensionMismatchError("summed operators must share a dimension")
            if isinstance(m, SumMap):
                for c2, m2 in m.terms:
                    add(coef * c2, m2)
            else:
                add(float(coef), m)
        if dim is None:
            raise DimensionMismatchError("SumMap needs at least one term")
        super().__init__(dim, counter)
        self.terms = [(c, m) for c, m in merged.values() if c != 0.0]

    def _matvec(self, v: np.ndarray) -> np.ndarray:
        out = np.zeros(self.dim)
        for coef, m in self.terms:
            out += coef * m.apply(v)
        return out


class AugmentedMap(LinearMap):
    """The gradient-Hessian augmented operator ``[[H, g], [g^T, -delta]]``.

    Acts on vectors ``z = [v; t]`` of length n+1 as
    ``[H v + t g; g.v - t delta]``, so one application costs exactly one
    inner HVP.
    """

    def __init__(self, inner: LinearMap, g: np.ndarray, delta: float,
                 counter: Optional[MatvecCounter] = None):
        g = np.asarray(g, dtype=float)
        if g.shape != (inner.dim,):
            raise DimensionMismatchError(
                f"gradient of shape {g.shape} does not match operator dim {inner.dim}"
            )
        if not np.isfinite(delta):
            raise NumericError("delta must be finite")
        super().__init__(inner.dim + 1, counter)
        self.inner = inner
        self.g = g
        self.delta = float(delta)

    def _matvec(self, z: np.ndarray) -> np.ndarray:
        v, t = z[:-1], z[-1]
        top = self.inner.apply(v) + t * self.g
        bottom = self.g @ v - t * self.delta
        return np.concatenate([top, [bottom]])


def apply_augmented(augmented: AugmentedMap, z: np.ndarray) -> np.ndarray:
    """Apply the augmented operator to ``z = [v; t]``."""
    return augmented.apply(z)


@dataclass
class EigenPair:
    """A computed extreme eigenpair with an honest residual report.

    ``converged`` is only set when ``residual <= tol * (1 + |value|)`` at the
    caller's tolerance; otherwise the best pair found is returned and the
    caller decides how to proceed.
    """

    value: float
    vector: np.ndarray
    residual: float
    iterations: int
    converged: bool


def _lanczos_sweep(op: LinearMap, q0: np.ndarray, tol: float, max_steps: int,
                   early_exit: bool = True):
    """One Lanczos sweep with full reorthogonalization.

    Returns (alphas, betas, Q, steps, broke_down).  The cheap residual
    estimate ``beta_k * |s_last|`` of the bottom Ritz pair is tracked every
    step; with ``early_exit`` the sweep stops once it clears the requested
    tolerance, otherwise it runs until breakdown or the step cap.
    """
    n = op.dim
    q = q0 / np.linalg.norm(q0)
    Q = np.empty((n, min(max_steps, n)))
    alphas: list[float] = []
    betas: list[float] = []
    scale = 0.0
    broke_down = False
    for j in range(min(max_steps, n)):
        Q[:, j] = q
        w = op.apply(q)
        alpha = q @ w
        alphas.append(alpha)
        w = w - alpha * q
        if j > 0:
            w = w - betas[-1] * Q[:, j - 1]
        # Full reorthogonalization: cheap at desk dimensions, and it keeps
        # the Ritz residual estimates trustworthy.
        w = w - Q[:, : j + 1] @ (Q[:, : j + 1].T @ w)
        w = w - Q[:, : j + 1] @ (Q[:, : j + 1].T @ w)
        beta = float(np.linalg.norm(w))
        scale = max(scale, abs(alpha), beta)
        if j + 1 == n:
            break
        if beta <= _BREAKDOWN_RTOL * max(scale, 1.0):
            broke_down = True
            break
        # Residual of a Ritz pair in a Krylov basis is beta_k * |last
        # component|; stop once the bottom pair clears the tolerance (the
        # caller still recomputes the true residual before accepting).  A few
        # warm-up steps stop loose tolerances from latching onto an interior
        # pair before the bottom Ritz value has settled.
        if early_exit and j >= 3:
            vals, vecs = eigh_tridiagonal(np.array(alphas), np.array(betas))
            est = beta * abs(vecs[-1, 0])
            if est <= 0.25 * tol * (1.0 + abs(vals[0])):
                break
        betas.append(beta)
        q = w / beta
    k = len(alphas)
    return np.array(alphas), np.array(betas[: k - 1]), Q[:, :k], k, broke_down, scale


def _bottom_ritz(alphas: np.ndarray, betas: np.ndarray, Q: np.ndarray):
    if len(alphas) == 1:
        return float(alphas[0]), Q[:, 0].copy()
    vals, vecs = eigh_tridiagonal(alphas, betas)
    y = Q @ vecs[:, 0]
    y /= np.linalg.norm(y)
    return float(vals[0]), y


def leftmost_eigenpair(op: LinearMap, tol: float = 1e-10, max_iters: int = 0,
                       seed: int | np.random.SeedSequence | None = 0) -> EigenPair:
    """Smallest eigenvalue and eigenvector of a symmetric LinearMap.

    Lanczos with full reorthogonalization and a random start; restarts with a
    fresh random vector on breakdown.  ``max_iters`` caps total operator
    applications (0 means a dim-scaled default).  Deterministic for a fixed
    seed.  On non-convergence the best pair seen is returned with
    ``converged=False``.

    Acceptance allows for the floating-point floor: a pair counts as
    converged when ``residual <= tol * (1 + |value|)`` plus a machine-epsilon
    multiple of the operator scale, which is the best any Krylov method can
    certify when the spectrum extends far beyond the target eigenvalue.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    n = op.dim
    if max_iters <= 0:
        max_iters = 4 * (n + 1)
    rng = make_rng(seed)

    if n == 1:
        val = float(op.apply(np.ones(1))[0])
        return EigenPair(val, np.ones(1), 0.0, 1, True)

    best: Optional[tuple[float, np.ndarray, float]] = None
    used = 0
    op_scale = 1.0
    eps_mach = float(np.finfo(float).eps)
    while used < max_iters:
        q0 = rng.standard_normal(n)
        alphas, betas, Q, steps, _, scale = _lanczos_sweep(op, q0, tol, max_iters - used)
        used += steps
        op_scale = max(op_scale, scale)
        val, vec = _bottom_ritz(alphas, betas, Q)
        # True residual of the candidate (one extra matvec, counted).
        r = op.apply(vec) - val * vec
        used += 1
        residual = float(np.linalg.norm(r))
        if best is None or val < best[0]:
            best = (val, vec, residual)
        if best[2] <= tol * (1.0 + abs(best[0])) + 64.0 * eps_mach * op_scale:
            value, vector, residual = best
            return EigenPair(value, vector, residual, used, True)
    value, vector, residual = best
    return EigenPair(value, vector, residual, used,
                     residual <= tol * (1.0 + abs(value)) + 64.0 * eps_mach * op_scale)


def min_eigenspace_projection(op: LinearMap, g: np.ndarray, cluster_tol: float | None = None,
                              tol: float = 1e-10,
                              seed: int | np.random.SeedSequence | None = 0
                              ) -> tuple[np.ndarray, float]:
    """Project ``g`` onto the minimal-eigenvalue space of ``op``.

    Two Lanczos passes: a random start locates the smallest eigenvalue, then a
    sweep started at ``g`` itself resolves exactly the directions of the
    bottom eigenspace that carry mass of ``g`` (a Krylov space seeded at ``g``
    contains no other component of a degenerate eigenspace).  Eigenvalues
    within ``cluster_tol`` of the smallest are treated as one eigenspace.
    """
    g = np.asarray(g, dtype=float)
    if g.shape != (op.dim,):
        raise DimensionMismatchError("g does not match operator dimension")
    ref = leftmost_eigenpair(op, tol=tol, seed=seed)
    if not ref.converged:
        raise ConvergenceError(
            f"eigensolver did not converge: residual={ref.residual:.3e} "
            f"after {ref.iterations} iterations"
        )
    lam_min = ref.value
    if cluster_tol is None:
        cluster_tol = 1e-8 * (1.0 + abs(lam_min))

    gnorm = float(np.linalg.norm(g))
    if gnorm == 0.0:
        return np.zeros(op.dim), 0.0

    n = op.dim
    if n == 1:
        return g.copy(), gnorm

    # Full-length sweep from g: with a complete (or invariant) Krylov basis
    # every Ritz pair is an exact eigenpair, so cluster membership is safe.
    alphas, betas, Q, _, _, _ = _lanczos_sweep(op, g, tol=0.25 * tol, max_steps=n,
                                               early_exit=False)
    if len(alphas) == 1:
        vals = alphas.copy()
        vecs = np.ones((1, 1))
    else:
        vals, vecs = eigh_tridiagonal(alphas, betas)
    proj = np.zeros(n)
    for i in range(len(vals)):
        if vals[i] > lam_min + cluster_tol:
            break
        y = Q @ vecs[:, i]
        y /= np.linalg.norm(y)
        proj += (y @ g) * y
    return proj, float(np.linalg.norm(proj))


def dense_materialize(op: LinearMap, cap: int = DENSE_CAP) -> np.ndarray:
    """Materialize a LinearMap by applying it to the standard basis.

    Test oracle only; refuses dimensions above ``cap``.
    """
    if op.dim > cap:
        raise ValueError(f"refusing to densify dim {op.dim} > cap {cap}")
    cols = []
    for i in range(op.dim):
        e = np.zeros(op.dim)
        e[i] = 1.0
        cols.append(op.apply(e))
    return np.column_stack(cols)


def symmetry_defect(op: LinearMap, probes: int = 100,
                    seed: int | np.random.SeedSequence | None = 0) -> float:
    """Worst relative asymmetry |u.Av - v.Au| over random unit probe pairs."""
    rng = make_rng(seed)
    worst = 0.0
    for _ in range(probes):
        u = rng.standard_normal(op.dim)
        v = rng.standard_normal(op.dim)
        u /= np.linalg.norm(u)
        v /= np.linalg.norm(v)
        uav = u @ op.apply(v)
        vau = v @ op.apply(u)
        worst = max(worst, abs(uav - vau) / (1.0 + abs(uav)))
    return worst


def operator_norm_estimate(op: LinearMap, iters: int = 15,
                           seed: int | np.random.SeedSequence | None = 0) -> float:
    """Cheap spectral-norm upper estimate via a short Lanczos sweep."""
    if op.dim == 1:
        return abs(float(op.apply(np.ones(1))[0]))
    rng = make_rng(seed)
    q0 = rng.standard_normal(op.dim)
    alphas, betas, _, _, _, _ = _lanczos_sweep(op, q0, tol=1e-6, max_steps=min(iters, op.dim))
    if len(alphas) == 1:
        return abs(float(alphas[0]))
    vals = eigh_tridiagonal(alphas, betas, eigvals_only=True)
    return float(max(abs(vals[0]), abs(vals[-1])))
