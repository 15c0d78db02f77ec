"""Outer optimization loops, sample-size planners and per-iteration traces.

The plain loop draws fresh gradient/Hessian batches each iteration, runs the
adaptive delta search on them and takes a unit step along the resulting
direction (which satisfies ``(H + theta I) d = -g``, so the iterate moves to
``x + d``).  The variance-reduced loop replaces the fresh batches with
recursive difference estimates refreshed at checkpoints.  Planners translate
a target accuracy ``eps`` and dominance exponent ``alpha`` into batch sizes,
subproblem tolerances and iteration budgets:

    n_g ~ eps**(-2/alpha),  n_H ~ eps**(-1/alpha),
    eps_eig = eps_ls ~ eps**(1/alpha),

with the iteration count sublinear (``eps**(1 - 3/(2 alpha))``) below
alpha = 3/2, logarithmic at 3/2, and doubly logarithmic above.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np

from .eigencore import operator_norm_estimate
from .errors import BracketError, ConvergenceError, NumericError
from .hqm import (
    LinesearchConfig,
    adaptive_delta_search,
    default_bracket,
    default_ce,
    practical_bracket,
)
from .oracle import (
    StochasticOracle,
    batch_gradient,
    batch_hessian_map,
    spider_init,
    spider_update,
)

MODES = ("shsodm", "vr_shsodm", "deterministic", "sgd")


# -- planners -----------------------------------------------------------------

def plan_sample_sizes(eps: float, alpha: float, c_g: float = 1.0, c_h: float = 1.0,
                      c_eig: float = 1.0, c_ls: float = 1.0
                      ) -> tuple[int, int, float, float]:
    """Batch sizes and subproblem tolerances for a target accuracy."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    if not 1.0 <= alpha <= 2.0:
        raise ValueError(f"alpha must lie in [1, 2], got {alpha}")
    n_g = math.ceil(c_g * eps ** (-2.0 / alpha))
    n_h = math.ceil(c_h * eps ** (-1.0 / alpha))
    eps_eig = c_eig * eps ** (1.0 / alpha)
    eps_ls = c_ls * eps ** (1.0 / alpha)
    return n_g, n_h, eps_eig, eps_ls


def predicted_iterations(eps: float, alpha: float, constant: float = 1.0) -> int:
    """Iteration budget: sublinear / linear / superlinear regime split."""
    if not 1.0 <= alpha <= 2.0:
        raise ValueError(f"alpha must lie in [1, 2], got {alpha}")
    if eps >= 1.0:
        return max(1, math.ceil(constant))
    if alpha < 1.5:
        k = constant * eps ** (1.0 - 3.0 / (2.0 * alpha))
    elif alpha == 1.5:
        k = constant * math.log(1.0 / eps)
    else:
        k = constant * math.log(math.log(1.0 / eps))
    return max(1, math.ceil(k))


def vr_checkpoint_interval(k_total: int, alpha: float, constant: float = 1.0) -> int:
    """Checkpoint spacing for the variance-reduced schedule."""
    if not 1.0 <= alpha < 1.5:
        raise ValueError("variance reduction applies for alpha in [1, 1.5)")
    return max(1, math.ceil(constant * k_total ** (alpha / (3.0 - 2.0 * alpha))))


def vr_schedule(k: int, k_c: int, d_prev_norm: float, alpha: float,
                constant: float = 1.0, n_floor: int = 4) -> int:
    """Per-iteration batch size of the variance-reduced estimator.

    Checkpoints draw ``ceil(c * k**(4/(3-2 alpha)))`` fresh samples; other
    iterations scale with the squared previous step length times the window
    length and the window-start index (the first window counts as index 1).
    """
    if not 1.0 <= alpha < 1.5:
        raise ValueError("variance reduction applies for alpha in [1, 1.5)")
    if k < 1:
        raise ValueError("iterations are 1-indexed")
    expo = 4.0 / (3.0 - 2.0 * alpha)
    if k % k_c == 0:
        return math.ceil(constant * float(k) ** expo)
    window_start = max((k // k_c) * k_c, 1)
    n = constant * d_prev_norm ** 2 * k_c * float(window_start) ** expo
    return max(n_floor, math.ceil(n))


# -- configuration and trace records ------------------------------------------

@dataclass
class RunConfig:
    """Full experiment configuration for a single run."""

    target_eps: float
    alpha: float
    mode: str = "shsodm"
    max_iters: int = 0        # 0: planner-derived via c_iter
    c_g: float = 1.0          # gradient batch constant
    c_h: float = 1.0          # Hessian batch constant
    c_eig: float = 1.0        # eps_eig constant
    c_ls: float = 1.0         # eps_ls constant
    c_iter: float = 1.0       # iteration-count constant
    k_c: int = 0              # VR checkpoint interval; 0: planner-derived
    c_e: Optional[float] = None  # shift ratio override; default (lip_h + 4)/3
    seed: int = 0
    sample_budget: int = 0    # 0: unlimited; counts probes
    fixed_k: bool = False     # disable the early gap exit (rate-fitting runs)
    sgd_lr: float = 0.01
    sgd_batch: int = 1

    def __post_init__(self) -> None:
        if self.target_eps <= 0:
            raise ValueError("target_eps must be positive")
        if not 1.0 <= self.alpha <= 2.0:
            raise ValueError("alpha must lie in [1, 2]")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; known: {MODES}")
        if self.mode == "vr_shsodm" and not 1.0 <= self.alpha < 1.5:
            raise ValueError("vr_shsodm requires alpha in [1, 1.5)")


@dataclass
class IterateTrace:
    """One persisted record per iteration (k = 0 is the initial point)."""

    k: int
    f_value: float
    f_gap: float
    true_grad_norm: float
    delta: float
    theta: float
    d_norm: float
    ls_bisections: int
    eigen_iters: int
    perturbed: bool
    n_g: int
    n_h: int
    cumulative_samples: int
    cumulative_matvecs: int
    wall_time_ns: int

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class Plan:
    """Planner outputs echoed into results for reproducibility."""

    n_g: int
    n_h: int
    eps_eig: float
    eps_ls: float
    c_e: float
    k_total: int
    k_c: int = 0


@dataclass
class RunResult:
    final_x: np.ndarray
    trace: list[IterateTrace]
    status: str  # reached_eps | budget_exhausted | error
    total_samples: int
    total_matvecs: int
    plan: Optional[Plan] = None
    message: str = ""


def derive_plan(oracle: StochasticOracle, cfg: RunConfig) -> Plan:
    n_g, n_h, eps_eig, eps_ls = plan_sample_sizes(
        cfg.target_eps, cfg.alpha, cfg.c_g, cfg.c_h, cfg.c_eig, cfg.c_ls)
    if cfg.mode == "deterministic":
        n_g = n_h = 1
    if cfg.c_e is not None:
        c_e = cfg.c_e
    else:
        lip_h = getattr(oracle.problem, "lip_h", math.nan) if oracle.problem else math.nan
        c_e = default_ce(lip_h) if math.isfinite(lip_h) else default_ce(0.0)
    k_total = cfg.max_iters if cfg.max_iters > 0 else predicted_iterations(
        cfg.target_eps, cfg.alpha, cfg.c_iter)
    k_c = 0
    if cfg.mode == "vr_shsodm":
        k_c = cfg.k_c if cfg.k_c > 0 else vr_checkpoint_interval(k_total, cfg.alpha)
    return Plan(n_g=n_g, n_h=n_h, eps_eig=eps_eig, eps_ls=eps_ls, c_e=c_e,
                k_total=k_total, k_c=k_c)


# -- single steps ---------------------------------------------------------------

def _linesearch_config(plan: Plan, g_norm: float, h_norm: float) -> LinesearchConfig:
    c_g_bound = g_norm + plan.eps_eig
    c_h_bound = 1.05 * h_norm + 1e-12
    lo1, hi = default_bracket(c_g_bound, c_h_bound, plan.c_e, plan.eps_eig)
    lo2, _ = practical_bracket(c_g_bound, c_h_bound, plan.c_e)
    return LinesearchConfig(c_e=plan.c_e, eps_ls=plan.eps_ls, eps_eig=plan.eps_eig,
                            delta_lo=max(lo1, lo2), delta_hi=hi)


def _solve_direction(h_map, g_hat, plan: Plan, seed):
    """Norm bound, delta search, direction; shared by plain and VR steps."""
    h_norm = operator_norm_estimate(h_map, iters=20, seed=(seed, "nrm"))
    ls_cfg = _linesearch_config(plan, float(np.linalg.norm(g_hat)), h_norm)
    res = adaptive_delta_search(h_map, g_hat, ls_cfg, seed=(seed, "ls"))
    return res


def _record(k: int, oracle: StochasticOracle, x: np.ndarray, *, res=None,
            n_g: int = 0, n_h: int = 0, d_norm: float = 0.0,
            wall_ns: int = 0) -> IterateTrace:
    f_star = oracle.f_star
    if oracle.problem is not None:
        f_value = oracle.exact_value(x)
        grad_norm = float(np.linalg.norm(oracle.exact_gradient(x)))
    else:
        f_value = math.nan
        grad_norm = math.nan
    gap = f_value - f_star if math.isfinite(f_star) else math.nan
    return IterateTrace(
        k=k,
        f_value=f_value,
        f_gap=gap,
        true_grad_norm=grad_norm,
        delta=res.delta if res is not None else math.nan,
        theta=res.solution.theta if res is not None else math.nan,
        d_norm=d_norm,
        ls_bisections=res.bisections if res is not None else 0,
        eigen_iters=res.eigen_iters if res is not None else 0,
        perturbed=res.perturbed if res is not None else False,
        n_g=n_g,
        n_h=n_h,
        cumulative_samples=oracle.samples_drawn,
        cumulative_matvecs=oracle.hvp_counter.count,
        wall_time_ns=wall_ns,
    )


def shsodm_step(x: np.ndarray, oracle: StochasticOracle, cfg: RunConfig, k: int,
                plan: Optional[Plan] = None) -> tuple[np.ndarray, IterateTrace]:
    """One sampled homogenized step: estimate, delta search, unit step."""
    if plan is None:
        plan = derive_plan(oracle, cfg)
    t0 = time.perf_counter_ns()
    g_hat, s_g = batch_gradient(oracle, x, plan.n_g, (cfg.seed, k, "g"))
    h_map, s_h = batch_hessian_map(oracle, x, plan.n_h, (cfg.seed, k, "h"))
    res = _solve_direction(h_map, g_hat, plan, (cfg.seed, k))
    d = res.solution.d
    x_next = x + d
    if not np.all(np.isfinite(x_next)):
        raise NumericError(f"non-finite iterate at k={k}")
    wall = time.perf_counter_ns() - t0
    rec = _record(k, oracle, x_next, res=res, n_g=s_g, n_h=s_h,
                  d_norm=float(np.linalg.norm(d)), wall_ns=wall)
    return x_next, rec


def sgd_step(x: np.ndarray, oracle: StochasticOracle, lr: float, n: int, seed
             ) -> np.ndarray:
    """Plain stochastic gradient step (baseline)."""
    if lr < 0:
        raise ValueError("lr must be non-negative")
    g_hat, _ = batch_gradient(oracle, x, n, seed)
    return x - lr * g_hat


# -- run loops -------------------------------------------------------------------

def _budget_hit(oracle: StochasticOracle, cfg: RunConfig, start_probes: int) -> bool:
    return cfg.sample_budget > 0 and \
        oracle.probes_drawn - start_probes >= cfg.sample_budget


def _left_level_set(oracle: StochasticOracle, x: np.ndarray) -> bool:
    radius = oracle.level_set_radius
    return math.isfinite(radius) and float(np.linalg.norm(x)) > radius * (1.0 + 1e-9)


def _finish(x, records, status, oracle, start_samples, start_matvecs, plan, message=""):
    return RunResult(
        final_x=x,
        trace=records,
        status=status,
        total_samples=oracle.samples_drawn - start_samples,
        total_matvecs=oracle.hvp_counter.count - start_matvecs,
        plan=plan,
        message=message,
    )


def run_shsodm(x0: np.ndarray, oracle: StochasticOracle, cfg: RunConfig) -> RunResult:
    """The plain loop (also used for the exact-oracle deterministic mode)."""
    if cfg.mode not in ("shsodm", "deterministic"):
        raise ValueError(f"run_shsodm does not handle mode {cfg.mode!r}")
    plan = derive_plan(oracle, cfg)
    x = np.asarray(x0, dtype=float).copy()
    start_samples, start_matvecs = oracle.samples_drawn, oracle.hvp_counter.count
    start_probes = oracle.probes_drawn
    records = [_record(0, oracle, x)]
    status = "budget_exhausted"
    message = ""
    for k in range(1, plan.k_total + 1):
        if _budget_hit(oracle, cfg, start_probes):
            break
        try:
            x, rec = shsodm_step(x, oracle, cfg, k, plan)
        except (NumericError, BracketError, ConvergenceError) as exc:
            status, message = "error", f"k={k}: {exc}"
            break
        records.append(rec)
        if _left_level_set(oracle, x):
            status = "error"
            message = f"k={k}: iterate left the level set of radius {oracle.level_set_radius:g}"
            break
        if not cfg.fixed_k and math.isfinite(rec.f_gap) and rec.f_gap <= cfg.target_eps:
            status = "reached_eps"
            break
    return _finish(x, records, status, oracle, start_samples, start_matvecs, plan, message)


def run_vr_shsodm(x0: np.ndarray, oracle: StochasticOracle, cfg: RunConfig) -> RunResult:
    """The variance-reduced loop with checkpointed recursive estimates.

    The first anchor is drawn at the plain planner's batch sizes: the
    checkpoint schedule sizes batches by iteration index, which is right for
    long horizons but leaves a desk-scale first window without the accuracy
    its final iterate needs; re-anchoring at the planner size restores it
    without touching the schedule itself.
    """
    if cfg.mode != "vr_shsodm":
        raise ValueError(f"run_vr_shsodm does not handle mode {cfg.mode!r}")
    plan = derive_plan(oracle, cfg)
    x = np.asarray(x0, dtype=float).copy()
    start_samples, start_matvecs = oracle.samples_drawn, oracle.hvp_counter.count
    start_probes = oracle.probes_drawn
    records = [_record(0, oracle, x)]
    status = "budget_exhausted"
    message = ""
    state = None
    d_prev = 0.0
    for k in range(1, plan.k_total + 1):
        if _budget_hit(oracle, cfg, start_probes):
            break
        t0 = time.perf_counter_ns()
        try:
            if state is None:
                n_k, n_hk = plan.n_g, plan.n_h
                state = spider_init(oracle, x, n_k, n_hk, (cfg.seed, k, "sp"),
                                    anchor_index=k)
            else:
                n_k = vr_schedule(k, plan.k_c, d_prev, cfg.alpha, cfg.c_g)
                if k % plan.k_c == 0:
                    n_hk = max(1, math.ceil(cfg.c_h * math.sqrt(n_k)))
                else:
                    n_hk = n_k
                state = spider_update(state, oracle, x, k, plan.k_c, n_k,
                                      (cfg.seed, k, "sp"), n_h=n_hk)
            res = _solve_direction(state.h_map, state.v, plan, (cfg.seed, k))
        except (NumericError, BracketError, ConvergenceError) as exc:
            status, message = "error", f"k={k}: {exc}"
            break
        d = res.solution.d
        x = x + d
        if not np.all(np.isfinite(x)):
            status, message = "error", f"k={k}: non-finite iterate"
            break
        d_prev = float(np.linalg.norm(d))
        wall = time.perf_counter_ns() - t0
        records.append(_record(k, oracle, x, res=res, n_g=n_k, n_h=n_hk,
                               d_norm=d_prev, wall_ns=wall))
        if _left_level_set(oracle, x):
            status = "error"
            message = f"k={k}: iterate left the level set of radius {oracle.level_set_radius:g}"
            break
        if not cfg.fixed_k and math.isfinite(records[-1].f_gap) and \
                records[-1].f_gap <= cfg.target_eps:
            status = "reached_eps"
            break
    return _finish(x, records, status, oracle, start_samples, start_matvecs, plan, message)


def run_sgd(x0: np.ndarray, oracle: StochasticOracle, cfg: RunConfig) -> RunResult:
    """Stochastic gradient baseline with the same trace schema."""
    if cfg.mode != "sgd":
        raise ValueError(f"run_sgd does not handle mode {cfg.mode!r}")
    k_total = cfg.max_iters if cfg.max_iters > 0 else 10000
    x = np.asarray(x0, dtype=float).copy()
    start_samples, start_matvecs = oracle.samples_drawn, oracle.hvp_counter.count
    start_probes = oracle.probes_drawn
    records = [_record(0, oracle, x)]
    status = "budget_exhausted"
    message = ""
    for k in range(1, k_total + 1):
        if _budget_hit(oracle, cfg, start_probes):
            break
        t0 = time.perf_counter_ns()
        x_next = sgd_step(x, oracle, cfg.sgd_lr, cfg.sgd_batch, (cfg.seed, k, "g"))
        if not np.all(np.isfinite(x_next)):
            status, message = "error", f"k={k}: non-finite iterate"
            break
        wall = time.perf_counter_ns() - t0
        d_norm = float(np.linalg.norm(x_next - x))
        x = x_next
        records.append(_record(k, oracle, x, n_g=cfg.sgd_batch, d_norm=d_norm,
                               wall_ns=wall))
        if _left_level_set(oracle, x):
            status = "error"
            message = f"k={k}: iterate left the level set of radius {oracle.level_set_radius:g}"
            break
        if not cfg.fixed_k and math.isfinite(records[-1].f_gap) and \
                records[-1].f_gap <= cfg.target_eps:
            status = "reached_eps"
            break
    return _finish(x, records, status, oracle, start_samples, start_matvecs, None, message)


def run(x0: np.ndarray, oracle: StochasticOracle, cfg: RunConfig) -> RunResult:
    """Dispatch on the configured mode."""
    if cfg.mode in ("shsodm", "deterministic"):
        return run_shsodm(x0, oracle, cfg)
    if cfg.mode == "vr_shsodm":
        return run_vr_shsodm(x0, oracle, cfg)
    if cfg.mode == "sgd":
        return run_sgd(x0, oracle, cfg)
    raise ValueError(f"unknown mode {cfg.mode!r}")


# -- certificate checks over deterministic traces --------------------------------

def verify_descent_certificates(records: list[IterateTrace], lip_h: float,
                                eps_eig: float, eps_ls: float,
                                atol: float = 1e-10) -> list[str]:
    """Check the exact-oracle per-iteration inequalities along a trace.

    Three families are checked between consecutive records: the descent
    bound ``f_k <= f_{k-1} + (2/3) eps_eig^1.5 + (1/3) eps_ls^3``, the cubic
    step bound ``lip_h ||d||^3 <= 6 (f_{k-1} - f_k + eps_eig^1.5 + eps_ls^3)``
    (stated multiplied through so a zero Hessian-Lipschitz constant stays
    meaningful), and the gradient contraction
    ``||grad_{k}|| <= (lip_h+1)/2 d^2 + theta d + eps_eig + pert`` where
    ``pert`` is eps_eig when the perturbation fired.  Returns a list of
    human-readable violations (empty on a clean trace).
    """
    bad: list[str] = []
    slack = (2.0 / 3.0) * eps_eig ** 1.5 + (1.0 / 3.0) * eps_ls ** 3
    for prev, cur in zip(records, records[1:]):
        drop = prev.f_value - cur.f_value
        if cur.f_value > prev.f_value + slack + atol:
            bad.append(f"k={cur.k}: descent violated by {cur.f_value - prev.f_value - slack:.3e}")
        lhs = lip_h * cur.d_norm ** 3
        rhs = 6.0 * (drop + eps_eig ** 1.5 + eps_ls ** 3) + atol * max(lip_h, 1.0)
        if lhs > rhs:
            bad.append(f"k={cur.k}: cubic step bound violated ({lhs:.3e} > {rhs:.3e})")
        pert = eps_eig if cur.perturbed else 0.0
        bound = (0.5 * (lip_h + 1.0) * cur.d_norm ** 2 + cur.theta * cur.d_norm
                 + eps_eig + pert + atol)
        if cur.true_grad_norm > bound:
            bad.append(
                f"k={cur.k}: gradient contraction violated "
                f"({cur.true_grad_norm:.3e} > {bound:.3e})"
            )
    return bad
