"""Gradient-dominated test problems with analytically known constants.

Each problem carries its dominance exponent ``alpha`` and constant ``c_gd``
(``F(x) - f_star <= c_gd * ||grad F(x)||**alpha``), the optimal value, and
gradient/Hessian Lipschitz constants valid on a stated level set.  Two
families are shipped:

* ``pl_quadratic`` -- 0.5 x.A x with spectrum in [1, cond]; alpha = 2 and
  the dominance constant 1/(2 lambda_min) is tight along the bottom
  eigenvector.
* ``pnorm`` -- ||x||**p for p >= 2; since ||grad F|| = p ||x||**(p-1), the
  identity F = (||grad F||/p)**(p/(p-1)) makes the family tight with
  alpha = p/(p-1) and c_gd = p**(-p/(p-1)), covering any alpha in (1, 2].
"""

from __future__ import annotations

import math
from typing import Optional

import numpy as np

from .eigencore import CallableMap, DenseMap, LinearMap, MatvecCounter


class Problem:
    """An objective bundle with exact derivatives and known constants."""

    name: str = "problem"

    def __init__(self, dim: int, f_star: float, alpha: float, c_gd: float,
                 lip_g: float, lip_h: float, level_set_radius: float):
        self.dim = dim
        self.f_star = f_star
        self.alpha = alpha
        self.c_gd = c_gd
        self.lip_g = lip_g
        self.lip_h = lip_h
        self.level_set_radius = level_set_radius

    def value(self, x: np.ndarray) -> float:
        raise NotImplementedError

    def gradient(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def hessian_map(self, x: np.ndarray, counter: Optional[MatvecCounter] = None
                    ) -> LinearMap:
        raise NotImplementedError


class QuadraticProblem(Problem):
    name = "pl_quadratic"

    def __init__(self, matrix: np.ndarray, cond: float):
        matrix = np.asarray(matrix, dtype=float)
        lam_min = float(np.linalg.eigvalsh(matrix)[0])
        super().__init__(
            dim=matrix.shape[0],
            f_star=0.0,
            alpha=2.0,
            c_gd=1.0 / (2.0 * lam_min),
            lip_g=cond,
            lip_h=0.0,
            level_set_radius=math.inf,
        )
        self.matrix = matrix
        self.cond = cond

    def value(self, x):
        x = np.asarray(x, dtype=float)
        return 0.5 * float(x @ (self.matrix @ x))

    def gradient(self, x):
        return self.matrix @ np.asarray(x, dtype=float)

    def hessian_map(self, x, counter=None):
        return DenseMap(self.matrix, counter=counter)


def make_pl_quadratic(dim: int, cond: float, seed: int = 0) -> QuadraticProblem:
    """0.5 x.A x with eigenvalues log-spaced on [1, cond] in a random frame."""
    if cond < 1:
        raise ValueError("cond must be >= 1")
    rng = np.random.default_rng(seed)
    lam = np.logspace(0.0, math.log10(cond), dim) if cond > 1 else np.ones(dim)
    if dim == 1:
        return QuadraticProblem(np.array([[lam[0]]]), cond)
    q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    return QuadraticProblem((q * lam) @ q.T, cond)


class PNormPowerProblem(Problem):
    name = "pnorm"

    def __init__(self, dim: int, p: float, level_set_radius: float):
        alpha = p / (p - 1.0)
        lip_h = 0.0 if p == 2.0 else p * (p - 1.0) * (p - 2.0) * level_set_radius ** (p - 3.0)
        super().__init__(
            dim=dim,
            f_star=0.0,
            alpha=alpha,
            c_gd=p ** (-alpha),
            lip_g=p * (p - 1.0) * level_set_radius ** (p - 2.0),
            lip_h=lip_h,
            level_set_radius=level_set_radius,
        )
        self.p = p

    def value(self, x):
        return float(np.linalg.norm(x) ** self.p)

    def gradient(self, x):
        x = np.asarray(x, dtype=float)
        nrm = float(np.linalg.norm(x))
        if nrm == 0.0:
            return 2.0 * x if self.p == 2.0 else np.zeros(self.dim)
        return self.p * nrm ** (self.p - 2.0) * x

    def hessian_map(self, x, counter=None):
        x = np.asarray(x, dtype=float).copy()
        p = self.p
        nrm = float(np.linalg.norm(x))
        if nrm == 0.0:
            if p == 2.0:
                return CallableMap(self.dim, lambda v: 2.0 * v, counter=counter)
            return CallableMap(self.dim, lambda v: np.zeros_like(v), counter=counter)
        c1 = p * nrm ** (p - 2.0)
        c2 = p * (p - 2.0) * nrm ** (p - 4.0)

        def matvec(v, x=x, c1=c1, c2=c2):
            return c1 * v + c2 * (x @ v) * x

        return CallableMap(self.dim, matvec, counter=counter)


def make_pnorm_power(dim: int, p: float, level_set_radius: float = 2.0
                     ) -> PNormPowerProblem:
    """||x||**p; refuses p < 2 (Hessian unbounded at the origin).

    The Hessian Lipschitz constant is exact on the ball of the given radius
    for p = 2 or p >= 3; for p strictly between 2 and 3 no finite constant
    exists on sets containing the origin and the recorded value is only
    valid away from it.
    """
    if p < 2:
        raise ValueError("p must be >= 2")
    if level_set_radius <= 0:
        raise ValueError("level_set_radius must be positive")
    return PNormPowerProblem(dim, float(p), float(level_set_radius))


def verify_gd_constant(problem: Problem, n_points: int = 1000, seed: int = 0,
                       radius: float | None = None) -> tuple[float, bool]:
    """Worst observed (F - f_star)/||grad F||**alpha over sampled points.

    Points are drawn uniformly from the ball on which the problem's
    constants are declared valid.  Returns ``(worst_ratio, holds)`` with
    ``holds`` true when the declared constant covers every sample.
    """
    if not math.isfinite(problem.f_star):
        raise ValueError("problem has no known optimal value")
    if radius is None:
        radius = problem.level_set_radius
        if not math.isfinite(radius):
            radius = 2.0
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_points):
        u = rng.standard_normal(problem.dim)
        u /= np.linalg.norm(u)
        x = radius * rng.random() ** (1.0 / problem.dim) * u
        gap = problem.value(x) - problem.f_star
        gnorm = float(np.linalg.norm(problem.gradient(x)))
        if gnorm < 1e-12:
            continue
        worst = max(worst, gap / gnorm ** problem.alpha)
    return worst, worst <= problem.c_gd * (1.0 + 1e-6)


def estimate_hessian_lipschitz(problem: Problem, x0: np.ndarray, radius: float = 0.5,
                               n_pairs: int = 30, n_probes: int = 4, seed: int = 0
                               ) -> float:
    """Sampled third-difference estimate of the Hessian Lipschitz constant.

    Probes ``||(H(x) - H(y)) v|| / ||x - y||`` on random nearby pairs around
    ``x0``; useful when a problem does not declare ``lip_h``.
    """
    rng = np.random.default_rng(seed)
    x0 = np.asarray(x0, dtype=float)
    worst = 0.0
    for _ in range(n_pairs):
        x = x0 + radius * rng.standard_normal(problem.dim)
        y = x + radius * 0.1 * rng.standard_normal(problem.dim)
        hx = problem.hessian_map(x)
        hy = problem.hessian_map(y)
        dist = float(np.linalg.norm(x - y))
        if dist == 0.0:
            continue
        for _ in range(n_probes):
            v = rng.standard_normal(problem.dim)
            v /= np.linalg.norm(v)
            diff = float(np.linalg.norm(hx.apply(v) - hy.apply(v)))
            worst = max(worst, diff / dist)
    return worst


def check_gradient(problem: Problem, n_pairs: int = 100, seed: int = 0,
                   radius: float | None = None, step: float = 1e-6) -> float:
    """Worst relative error of directional derivatives vs the gradient."""
    rng = np.random.default_rng(seed)
    if radius is None:
        radius = min(problem.level_set_radius, 2.0)
    worst = 0.0
    for _ in range(n_pairs):
        x = radius * 0.5 * rng.standard_normal(problem.dim) / math.sqrt(problem.dim)
        u = rng.standard_normal(problem.dim)
        u /= np.linalg.norm(u)
        fd = (problem.value(x + step * u) - problem.value(x - step * u)) / (2 * step)
        an = float(problem.gradient(x) @ u)
        worst = max(worst, abs(fd - an) / (1.0 + abs(an)))
    return worst


def check_hessian(problem: Problem, n_pairs: int = 50, seed: int = 0,
                  radius: float | None = None, step: float = 1e-5) -> float:
    """Worst relative error of gradient differences vs Hessian-vector products."""
    rng = np.random.default_rng(seed)
    if radius is None:
        radius = min(problem.level_set_radius, 2.0)
    worst = 0.0
    for _ in range(n_pairs):
        x = radius * 0.5 * rng.standard_normal(problem.dim) / math.sqrt(problem.dim)
        u = rng.standard_normal(problem.dim)
        u /= np.linalg.norm(u)
        fd = (problem.gradient(x + step * u) - problem.gradient(x - step * u)) / (2 * step)
        an = problem.hessian_map(x).apply(u)
        worst = max(worst, float(np.linalg.norm(fd - an)) / (1.0 + float(np.linalg.norm(an))))
    return worst


def build_problem(key: str, **params) -> Problem:
    """Problem registry for the CLI; see PROBLEM_KEYS."""
    if key == "pl_quadratic":
        return make_pl_quadratic(int(params.get("dim", 20)),
                                 float(params.get("cond", 10.0)),
                                 seed=int(params.get("problem_seed", 0)))
    if key == "pnorm":
        return make_pnorm_power(int(params.get("dim", 20)),
                                float(params.get("p", 4.0)),
                                level_set_radius=float(params.get("level_set_radius", 2.0)))
    if key == "chain_mdp":
        from .mdp import make_chain_mdp, make_chain_mdp_policy
        mdp = make_chain_mdp(n_states=int(params.get("n_states", 5)),
                             gamma=float(params.get("gamma", 0.9)),
                             slip=float(params.get("slip", 0.05)))
        problem, _ = make_chain_mdp_policy(mdp,
                                           horizon=int(params.get("horizon", 50)),
                                           temperature=float(params.get("temperature", 1.0)))
        return problem
    raise KeyError(f"unknown problem {key!r}; known: {sorted(PROBLEM_KEYS)}")


PROBLEM_KEYS = ("pl_quadratic", "pnorm", "chain_mdp")
