"""Stochastic first- and second-order oracles and SPIDER recursive estimators.

Every oracle exposes mini-batch gradient and Hessian-map estimators with
per-call sample accounting plus exact quantities for diagnostics.  RNG
streams are derived from explicit per-call seeds, so independent runs replay
deterministically and never share randomness.

Two noise models are shipped: additive Gaussian noise (moment bounds hold by
construction) and a finite-sum pool of perturbed quadratics, for which the
per-sample average-Lipschitz property used by the variance-reduced estimator
holds exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .eigencore import (
    DenseMap,
    LinearMap,
    MatvecCounter,
    SumMap,
    make_rng,
    seed_entropy,
)
from .errors import NumericError

_MASK63 = (1 << 63) - 1


class StochasticOracle:
    """Base class for sampled gradient / Hessian access with cost accounting.

    ``samples_drawn`` counts logical samples; a paired evaluation at two
    points with one sample set counts its ``n`` once.  ``hvp_counter`` is
    threaded into every Hessian map the oracle creates, so run-level matvec
    totals stay exact.  ``probes_drawn`` equals ``samples_drawn`` except for
    oracles whose samples decompose further (trajectory oracles count
    state-action probes).
    """

    def __init__(self, dim: int, problem=None, base_seed: int = 0):
        self.dim = dim
        self.problem = problem
        self.base_seed = int(base_seed) & _MASK63
        self.samples_drawn = 0
        self.probes_drawn = 0
        self.hvp_counter = MatvecCounter()

    # -- exact diagnostics ------------------------------------------------
    def exact_value(self, x: np.ndarray) -> float:
        return float(self.problem.value(x))

    def exact_gradient(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(self.problem.gradient(x), dtype=float)

    def exact_hessian_map(self, x: np.ndarray) -> LinearMap:
        x = np.asarray(x, dtype=float)
        m = self.problem.hessian_map(x, counter=self.hvp_counter)
        # Content identity: exact Hessians at the same point are bit-equal,
        # so recursive difference chains can cancel them exactly.
        m.value_key = ("exact-hess", id(self.problem), x.tobytes())
        return m

    @property
    def f_star(self) -> float:
        return self.problem.f_star if self.problem is not None else float("nan")

    @property
    def level_set_radius(self) -> float:
        if self.problem is None:
            return float("inf")
        return getattr(self.problem, "level_set_radius", float("inf"))

    def _rng(self, seed) -> np.random.Generator:
        return make_rng(self.base_seed, seed)

    def _account(self, n: int) -> None:
        self.samples_drawn += n
        self.probes_drawn += n

    # -- sampling interface ------------------------------------------------
    def sample_gradient(self, x, n, seed):
        raise NotImplementedError

    def sample_hessian_map(self, x, n, seed):
        raise NotImplementedError

    def sample_gradient_pair(self, x_new, x_old, n, seed):
        """Gradients at two points from one sample set (costed once)."""
        raise NotImplementedError

    def sample_hessian_pair(self, x_new, x_old, n, seed):
        """Hessian maps at two points from one sample set (costed once)."""
        raise NotImplementedError


class AdditiveNoiseOracle(StochasticOracle):
    """Exact quantities plus additive noise.

    Per-sample gradient is ``grad F(x) + sigma_g * zeta`` with ``zeta``
    standard normal per component, so a single-sample error has second moment
    ``sigma_g**2 * dim``.  Per-sample Hessian adds ``sigma_h`` times a
    spectral-norm-normalized symmetric Gaussian matrix, so the single-sample
    operator-norm error is exactly ``sigma_h`` (all higher moments bounded by
    construction).  The noise attached to a sample does not depend on the
    query point, which is what makes paired evaluations share it.
    """

    def __init__(self, problem, sigma_g: float, sigma_h: float, base_seed: int = 0):
        if sigma_g < 0 or sigma_h < 0:
            raise ValueError("noise scales must be non-negative")
        super().__init__(problem.dim, problem, base_seed)
        self.sigma_g = float(sigma_g)
        self.sigma_h = float(sigma_h)

    # Second-moment constants of the estimator error at batch size 1.
    @property
    def gradient_noise_norm(self) -> float:
        return self.sigma_g * np.sqrt(self.dim)

    @property
    def hessian_noise_norm(self) -> float:
        return self.sigma_h

    def _gradient_noise_mean(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.sigma_g == 0.0:
            return np.zeros(self.dim)
        return self.sigma_g * rng.standard_normal((n, self.dim)).mean(axis=0)

    def _hessian_noise_mean(self, rng: np.random.Generator, n: int) -> Optional[np.ndarray]:
        if self.sigma_h == 0.0:
            return None
        acc = np.zeros((self.dim, self.dim))
        for _ in range(n):
            w = rng.standard_normal((self.dim, self.dim))
            w = (w + w.T) / np.sqrt(2.0)
            acc += w / np.linalg.norm(w, 2)
        return self.sigma_h * acc / n

    def sample_gradient(self, x, n, seed):
        if n < 1:
            raise ValueError("batch size must be >= 1")
        base = self.exact_gradient(x)
        if not np.all(np.isfinite(base)):
            raise NumericError(f"non-finite gradient at sample 0 (x norm {np.linalg.norm(x):.3g})")
        g = base + self._gradient_noise_mean(self._rng(seed), n)
        self._account(n)
        return g, n

    def sample_hessian_map(self, x, n, seed):
        if n < 1:
            raise ValueError("batch size must be >= 1")
        exact = self.exact_hessian_map(x)
        noise = self._hessian_noise_mean(self._rng(("h", seed)), n)
        self._account(n)
        if noise is None:
            return exact, n
        return SumMap([(1.0, exact), (1.0, DenseMap(noise, counter=self.hvp_counter))]), n

    def sample_gradient_pair(self, x_new, x_old, n, seed):
        if n < 1:
            raise ValueError("batch size must be >= 1")
        noise = self._gradient_noise_mean(self._rng(seed), n)
        g_new = self.exact_gradient(x_new) + noise
        g_old = self.exact_gradient(x_old) + noise
        self._account(n)
        return g_new, g_old, n

    def sample_hessian_pair(self, x_new, x_old, n, seed):
        if n < 1:
            raise ValueError("batch size must be >= 1")
        noise = self._hessian_noise_mean(self._rng(("h", seed)), n)
        self._account(n)
        maps = []
        noise_map = None if noise is None else DenseMap(noise, counter=self.hvp_counter)
        for x in (x_new, x_old):
            exact = self.exact_hessian_map(x)
            if noise_map is None:
                maps.append(exact)
            else:
                # The shared noise term cancels exactly in new-minus-old.
                maps.append(SumMap([(1.0, exact), (1.0, noise_map)]))
        return maps[0], maps[1], n


def make_additive_noise_oracle(problem, sigma_g: float, sigma_h: float,
                               seed: int = 0) -> AdditiveNoiseOracle:
    """Additive-noise oracle over a problem; ``sigma_g = sigma_h = 0`` is exact."""
    return AdditiveNoiseOracle(problem, sigma_g, sigma_h, base_seed=seed)


def make_exact_oracle(problem, seed: int = 0) -> AdditiveNoiseOracle:
    return AdditiveNoiseOracle(problem, 0.0, 0.0, base_seed=seed)


class FiniteSumQuadraticOracle(StochasticOracle):
    """A fixed pool of perturbed quadratics sampled with replacement.

    Component ``i`` is ``f_i(x) = 0.5 x.(A + E_i) x + b_i . x`` where the
    ``E_i`` are symmetric with pool mean zero and the ``b_i`` have pool mean
    zero, so the pool average recovers the base quadratic exactly.  Because
    per-sample gradients genuinely depend on ``x``, squared gradient
    differences scale with ``||x - y||^2`` with a finite constant, which the
    recursive variance-reduced estimator relies on.
    """

    def __init__(self, problem, matrix: np.ndarray, sigma_g: float, sigma_h: float,
                 pool_size: int = 64, base_seed: int = 0):
        super().__init__(problem.dim, problem, base_seed)
        rng = make_rng(base_seed, "pool")
        d = self.dim
        self.matrix = np.asarray(matrix, dtype=float)
        self.b_pool = sigma_g * rng.standard_normal((pool_size, d))
        self.b_pool -= self.b_pool.mean(axis=0)
        e_pool = []
        for _ in range(pool_size):
            w = rng.standard_normal((d, d))
            w = (w + w.T) / np.sqrt(2.0)
            e_pool.append(sigma_h * w / np.linalg.norm(w, 2))
        e_mean = np.mean(e_pool, axis=0)
        self.e_pool = np.array([e - e_mean for e in e_pool])
        self.pool_size = pool_size

    def _indices(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.integers(0, self.pool_size, size=n)

    def _component_gradient_mean(self, x: np.ndarray, idx: np.ndarray) -> np.ndarray:
        e_mean = self.e_pool[idx].mean(axis=0)
        b_mean = self.b_pool[idx].mean(axis=0)
        return (self.matrix + e_mean) @ x + b_mean

    def sample_gradient(self, x, n, seed):
        if n < 1:
            raise ValueError("batch size must be >= 1")
        idx = self._indices(self._rng(seed), n)
        g = self._component_gradient_mean(np.asarray(x, dtype=float), idx)
        self._account(n)
        return g, n

    def sample_hessian_map(self, x, n, seed):
        if n < 1:
            raise ValueError("batch size must be >= 1")
        idx = self._indices(self._rng(("h", seed)), n)
        h = self.matrix + self.e_pool[idx].mean(axis=0)
        self._account(n)
        return DenseMap(h, counter=self.hvp_counter), n

    def sample_gradient_pair(self, x_new, x_old, n, seed):
        if n < 1:
            raise ValueError("batch size must be >= 1")
        idx = self._indices(self._rng(seed), n)
        g_new = self._component_gradient_mean(np.asarray(x_new, dtype=float), idx)
        g_old = self._component_gradient_mean(np.asarray(x_old, dtype=float), idx)
        self._account(n)
        return g_new, g_old, n

    def sample_hessian_pair(self, x_new, x_old, n, seed):
        if n < 1:
            raise ValueError("batch size must be >= 1")
        idx = self._indices(self._rng(("h", seed)), n)
        h = self.matrix + self.e_pool[idx].mean(axis=0)
        self._account(n)
        # Component Hessians do not depend on x; both maps coincide.
        m = DenseMap(h, counter=self.hvp_counter)
        return m, m, n


def make_finite_sum_quadratic_oracle(problem, matrix: np.ndarray, sigma_g: float,
                                     sigma_h: float, pool_size: int = 64,
                                     seed: int = 0) -> FiniteSumQuadraticOracle:
    return FiniteSumQuadraticOracle(problem, matrix, sigma_g, sigma_h,
                                    pool_size=pool_size, base_seed=seed)


# -- batch operations -------------------------------------------------------

def batch_gradient(oracle: StochasticOracle, x: np.ndarray, n: int, seed
                   ) -> tuple[np.ndarray, int]:
    """Mean of ``n`` per-sample gradients at ``x``; deterministic given seed."""
    if n < 1:
        raise ValueError("batch size must be >= 1")
    return oracle.sample_gradient(x, n, seed)


def batch_hessian_map(oracle: StochasticOracle, x: np.ndarray, n: int, seed
                      ) -> tuple[LinearMap, int]:
    """Mean of ``n`` per-sample symmetric Hessian maps at ``x``."""
    if n < 1:
        raise ValueError("batch size must be >= 1")
    return oracle.sample_hessian_map(x, n, seed)


# -- SPIDER recursive estimator ---------------------------------------------

@dataclass
class SpiderState:
    """Running recursive estimates between checkpoints.

    At a checkpoint the gradient estimate equals the fresh batch mean
    exactly; between checkpoints both estimates accumulate same-sample-set
    differences, so with point-independent per-sample noise the accumulated
    error is frozen at the anchor's.
    """

    v: np.ndarray
    h_map: LinearMap
    anchor_index: int
    x_prev: np.ndarray


def spider_init(oracle: StochasticOracle, x0: np.ndarray, n_g: int, n_h: int,
                seed, anchor_index: int = 1) -> SpiderState:
    """Fresh-batch state used for the first anchor of a run."""
    v, _ = batch_gradient(oracle, x0, n_g, (seed, "g"))
    h, _ = batch_hessian_map(oracle, x0, n_h, (seed, "h"))
    return SpiderState(v=v, h_map=h, anchor_index=anchor_index,
                       x_prev=np.asarray(x0, dtype=float).copy())


def spider_update(state: SpiderState, oracle: StochasticOracle, x_new: np.ndarray,
                  k: int, K_C: int, n: int, seed, n_h: Optional[int] = None
                  ) -> SpiderState:
    """Advance the recursive estimates to ``x_new`` at iteration ``k``.

    ``k mod K_C == 0`` refreshes both estimates from scratch (``n_h`` sizes
    the Hessian batch, defaulting to ``n``).  Otherwise a single sample set
    is evaluated at both the new and previous point and the differences are
    added on top of the running estimates.
    """
    if k < state.anchor_index:
        raise ValueError(f"iteration {k} precedes anchor {state.anchor_index}")
    if n < 1:
        raise ValueError("batch size must be >= 1")
    x_new = np.asarray(x_new, dtype=float)
    if n_h is None:
        n_h = n
    if k % K_C == 0:
        v, _ = batch_gradient(oracle, x_new, n, (seed, "g"))
        h, _ = batch_hessian_map(oracle, x_new, n_h, (seed, "h"))
        return SpiderState(v=v, h_map=h, anchor_index=k, x_prev=x_new.copy())
    g_new, g_old, _ = oracle.sample_gradient_pair(x_new, state.x_prev, n, (seed, "g"))
    h_new, h_old, _ = oracle.sample_hessian_pair(x_new, state.x_prev, n_h, (seed, "h"))
    if np.array_equal(g_old, state.v):
        # Bit-equal old estimate (zero-noise limit): telescoping is exact.
        v = g_new.copy()
    else:
        v = g_new - g_old + state.v
    h = SumMap([(1.0, h_new), (-1.0, h_old), (1.0, state.h_map)])
    return SpiderState(v=v, h_map=h, anchor_index=state.anchor_index,
                       x_prev=x_new.copy())


# -- diagnostics --------------------------------------------------------------

def estimate_variance(oracle: StochasticOracle, x: np.ndarray, trials: int,
                      seed=0, hessian_trials: Optional[int] = None
                      ) -> tuple[float, float]:
    """Empirical single-sample error scales (gradient 2-norm, Hessian op-norm).

    ``hessian_trials`` caps the Hessian side (dense materialization per
    trial); it defaults to ``min(trials, 200)``.
    """
    if trials < 2:
        raise ValueError("need at least 2 trials")
    if getattr(oracle, "exact_gradient", None) is None:
        raise TypeError("oracle does not expose exact quantities")
    from .eigencore import dense_materialize

    x = np.asarray(x, dtype=float)
    g_exact = oracle.exact_gradient(x)
    acc = 0.0
    for i in range(trials):
        g_hat, _ = oracle.sample_gradient(x, 1, (seed, "vg", i))
        acc += float(np.sum((g_hat - g_exact) ** 2))
    sigma_g_hat = np.sqrt(acc / trials)

    if hessian_trials is None:
        hessian_trials = min(trials, 200)
    h_exact = dense_materialize(oracle.exact_hessian_map(x))
    acc_h = 0.0
    for i in range(hessian_trials):
        h_hat, _ = oracle.sample_hessian_map(x, 1, (seed, "vh", i))
        err = dense_materialize(h_hat) - h_exact
        acc_h += float(np.linalg.norm(err, 2) ** 2)
    sigma_h_hat = np.sqrt(acc_h / hessian_trials)
    return sigma_g_hat, sigma_h_hat
