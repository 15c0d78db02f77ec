"""The homogenized quadratic model and the adaptive delta line search.

Minimizing ``[v;t]^T [[H, g],[g^T, -delta]] [v;t]`` over the unit ball
reduces to the leftmost eigenpair of the augmented operator.  Writing
``theta = -lambda_min`` for the dual, the eigenvector with ``t != 0`` yields
a direction ``d = v/t`` satisfying

    (H + theta I) d = -g        and        g.d = delta - theta,

so ``d`` is a shifted Newton direction obtained without any linear solve.
``theta(delta)`` is non-decreasing and 1-Lipschitz in ``delta``, and
``h(delta) = theta - C_e * ||d||`` is non-decreasing, which makes a plain
bisection on ``delta`` find the shift ratio ``theta ~ C_e * ||d||``.  The
degenerate ``t = 0`` case (gradient orthogonal to the bottom eigenspace of
``H``) is removed up front by a one-shot gradient perturbation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .eigencore import (
    AugmentedMap,
    LinearMap,
    leftmost_eigenpair,
    make_rng,
    min_eigenspace_projection,
)
from .errors import BracketError, ConvergenceError

# |t| below this marks the degenerate (hard) case.
T_TOL = 1e-8


@dataclass
class HqmSolution:
    """Leftmost eigenpair of the augmented operator, in primal-dual form.

    ``lam`` is the smallest eigenvalue, ``theta = -lam`` the dual shift,
    ``[v; t]`` the unit eigenvector with the sign fixed so ``t >= 0``, and
    ``d = v/t`` the direction (``None`` when ``t`` is degenerate).
    """

    lam: float
    theta: float
    v: np.ndarray
    t: float
    d: Optional[np.ndarray]
    t_is_degenerate: bool
    eigen_iters: int


def solve_hqm(H: LinearMap, g: np.ndarray, delta: float, tol: float = 1e-10,
              seed: int | np.random.SeedSequence | None = 0) -> HqmSolution:
    """Solve the homogenized model at a fixed ``delta``.

    Raises :class:`ConvergenceError` if the eigensolve does not reach ``tol``.
    """
    aug = AugmentedMap(H, np.asarray(g, dtype=float), delta)
    pair = leftmost_eigenpair(aug, tol=tol, seed=seed)
    if not pair.converged:
        raise ConvergenceError(
            f"hqm eigensolve stalled at residual {pair.residual:.3e} "
            f"(delta={delta:.6g})"
        )
    z = pair.vector / np.linalg.norm(pair.vector)
    v, t = z[:-1], float(z[-1])
    if t < 0.0:
        v, t = -v, -t
    degenerate = abs(t) < T_TOL
    d = None if degenerate else v / t
    return HqmSolution(
        lam=pair.value,
        theta=-pair.value,
        v=v,
        t=t,
        d=d,
        t_is_degenerate=degenerate,
        eigen_iters=pair.iterations,
    )


def kkt_residuals(sol: HqmSolution, H: LinearMap, g: np.ndarray, delta: float
                  ) -> tuple[float, float, float]:
    """First-order residuals of an HQM solution.

    Returns ``(stationarity, curve, norm_dev)`` where stationarity is
    ``||(H + theta I) d + g||``, curve is ``|g.d - (delta - theta)|`` and
    norm_dev is ``| ||[v;t]|| - 1 |``.  The first two are NaN for a
    degenerate ``t``.
    """
    g = np.asarray(g, dtype=float)
    norm_dev = abs(math.hypot(float(np.linalg.norm(sol.v)), sol.t) - 1.0)
    if sol.t_is_degenerate or sol.d is None:
        return math.nan, math.nan, norm_dev
    d = sol.d
    stationarity = float(np.linalg.norm(H.apply(d) + sol.theta * d + g))
    curve = abs(float(g @ d) - (delta - sol.theta))
    return stationarity, curve, norm_dev


def perturb_gradient(H: LinearMap, g: np.ndarray, eps_eig: float,
                     seed: int | np.random.SeedSequence | None = 0,
                     tol: float = 1e-10, cluster_tol: float | None = None
                     ) -> tuple[np.ndarray, bool]:
    """Guarantee the gradient has mass >= ``eps_eig`` in the bottom eigenspace.

    If the projection of ``g`` onto the minimal-eigenvalue space of ``H``
    already has norm >= ``eps_eig``, ``g`` is returned unchanged.  Otherwise
    ``eps_eig`` times the unit projection direction is added; when the
    projection is exactly zero a seeded unit vector inside the eigenspace is
    used instead (any unit direction there restores the guarantee).  At most
    one application is ever needed: the output is a fixed point.
    """
    if eps_eig <= 0:
        raise ValueError("eps_eig must be positive")
    g = np.asarray(g, dtype=float)
    proj, pnorm = min_eigenspace_projection(H, g, cluster_tol=cluster_tol,
                                            tol=tol, seed=seed)
    if pnorm >= eps_eig:
        return g, False
    if pnorm > 1e-13 * (1.0 + float(np.linalg.norm(g))):
        direction = proj / pnorm
    else:
        # Zero projection: draw a seeded direction inside the eigenspace by
        # projecting a random probe onto it.
        rng = make_rng(seed)
        for _ in range(8):
            probe = rng.standard_normal(H.dim)
            cand, cnorm = min_eigenspace_projection(H, probe, cluster_tol=cluster_tol,
                                                    tol=tol, seed=seed)
            if cnorm > 1e-12:
                break
        else:
            raise ConvergenceError("could not sample a bottom-eigenspace direction")
        direction = cand / cnorm
    return g + eps_eig * direction, True


def default_bracket(c_g: float, c_h: float, c_e: float, eps_eig: float
                    ) -> tuple[float, float]:
    """A delta interval guaranteed to bracket the line-search root.

    Requires ``c_g >= ||g||`` and ``c_h >= ||H||`` for the guarantee; the
    left end scales like ``1/eps_eig`` because a nearly orthogonal gradient
    pushes the root far left.
    """
    if eps_eig <= 0:
        raise ZeroDivisionError("eps_eig must be positive for the bracket bound")
    if c_g < 0 or c_h < 0 or c_e <= 0:
        raise ValueError("bracket constants must be non-negative (c_e positive)")
    lo = -c_g * (c_h + math.sqrt(eps_eig)) / eps_eig - c_h
    hi = c_e * c_g + c_h + 1.0
    return lo, hi


def default_ce(lip_h: float) -> float:
    """Shift-to-step ratio matching the cubic descent analysis."""
    return (lip_h + 4.0) / 3.0


def practical_bracket(c_g: float, c_h: float, c_e: float) -> tuple[float, float]:
    """A tighter valid bracket that does not blow up as eps_eig shrinks.

    At the root, ``theta = c_e ||d|| >= 0`` and ``g.d >= -||g|| ||d||`` with
    ``theta <= c_e c_g + c_h + 1``, so ``delta = theta + g.d`` is bounded
    below by ``-c_g (c_e c_g + c_h + 1) / c_e``.  Intersect with the
    eps_eig-based interval for the best of both.
    """
    hi = c_e * c_g + c_h + 1.0
    lo = -c_g * hi / c_e - 1.0
    return lo, hi


@dataclass
class LinesearchConfig:
    """Inputs of the adaptive delta search."""

    c_e: float
    eps_ls: float
    eps_eig: float
    delta_lo: float
    delta_hi: float
    max_bisections: int = 0
    eig_tol: float = 0.0  # eigensolver tolerance; defaults to eps_eig / 10

    def __post_init__(self) -> None:
        if self.eps_ls <= 0 or self.eps_eig <= 0:
            raise ValueError("eps_ls and eps_eig must be positive")
        if not self.delta_lo < self.delta_hi:
            raise ValueError("delta_lo must be below delta_hi")
        if self.c_e <= 0:
            raise ValueError("c_e must be positive")
        if self.max_bisections <= 0:
            width = self.delta_hi - self.delta_lo
            self.max_bisections = math.ceil(math.log2(width / self.eps_ls)) + 8
        if self.eig_tol <= 0:
            self.eig_tol = self.eps_eig / 10.0


@dataclass
class LinesearchResult:
    """Output of the adaptive delta search."""

    delta: float
    solution: HqmSolution
    bisections: int
    perturbed: bool
    h_value: float
    g_used: np.ndarray  # gradient actually solved against (post perturbation)
    eigen_iters: int = 0  # Lanczos iterations summed over all bisections


def _h_of(sol: HqmSolution, c_e: float) -> float:
    assert sol.d is not None
    return sol.theta - c_e * float(np.linalg.norm(sol.d))


def adaptive_delta_search(H: LinearMap, g: np.ndarray, cfg: LinesearchConfig,
                          seed: int | np.random.SeedSequence | None = 0
                          ) -> LinesearchResult:
    """Bisection on ``delta`` for the root of ``h = theta - C_e ||d||``.

    The gradient is perturbed once up front so ``t != 0`` throughout; a
    degenerate ``t`` after that is an invariant violation.  Because ``h`` is
    non-decreasing in ``delta``, the interval moves right when ``h < 0`` and
    left otherwise.  Terminates when ``|h| <= eps_ls`` (primary) or the
    interval width drops below ``eps_ls``; if the initial interval turns out
    not to bracket a sign change it is expanded a few times before failing.
    """
    g = np.asarray(g, dtype=float)
    g_used, perturbed = perturb_gradient(H, g, cfg.eps_eig, seed=seed,
                                         tol=cfg.eig_tol)

    lo, hi = cfg.delta_lo, cfg.delta_hi
    for expansion in range(6):
        result = _bisect(H, g_used, cfg, lo, hi, seed)
        if result is not None:
            delta, sol, bisections, eig_iters = result
            return LinesearchResult(
                delta=delta,
                solution=sol,
                bisections=bisections,
                perturbed=perturbed,
                h_value=_h_of(sol, cfg.c_e),
                g_used=g_used,
                eigen_iters=eig_iters,
            )
        width = hi - lo
        lo, hi = lo - width, hi + width
    raise BracketError(
        f"no sign change of h(delta) found in [{cfg.delta_lo:.3g}, {cfg.delta_hi:.3g}] "
        "even after expansion"
    )


def _bisect(H: LinearMap, g: np.ndarray, cfg: LinesearchConfig,
            lo: float, hi: float, seed
            ) -> Optional[tuple[float, HqmSolution, int, int]]:
    """Run the bisection; None signals a bracket failure (for expansion)."""
    best: Optional[tuple[float, HqmSolution, float]] = None
    seen_pos = seen_neg = False
    eig_iters = 0
    for j in range(1, cfg.max_bisections + 1):
        mid = 0.5 * (lo + hi)
        sol = solve_hqm(H, g, mid, tol=cfg.eig_tol, seed=seed)
        eig_iters += sol.eigen_iters
        if sol.t_is_degenerate:
            raise ConvergenceError(
                "degenerate t after perturbation; eps_eig guarantee violated"
            )
        h_mid = _h_of(sol, cfg.c_e)
        if best is None or abs(h_mid) < abs(best[2]):
            best = (mid, sol, h_mid)
        if abs(h_mid) <= cfg.eps_ls:
            return mid, sol, j, eig_iters
        if h_mid >= 0.0:
            seen_pos = True
            hi = mid
        else:
            seen_neg = True
            lo = mid
        # A one-sided collapse means the sign change lies outside the
        # original interval; hand back for expansion.  With both signs seen
        # the root is inside and bisection keeps tightening |h|.
        if hi - lo < cfg.eps_ls and not (seen_pos and seen_neg):
            return None
    if seen_pos and seen_neg:
        delta, sol_b, _ = best
        return delta, sol_b, cfg.max_bisections, eig_iters
    return None
