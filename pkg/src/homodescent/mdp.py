"""Tabular MDPs with softmax policies as a stochastic policy-gradient objective.

The objective is the negated discounted return -J(theta) so the optimizer's
minimization convention applies; traces still read naturally since the gap
-J - (-J*) = J* - J measures suboptimality of the return.  Exact J, its
gradient, and the optimal return are computed by dynamic programming for
diagnostics; the sampling oracle estimates the gradient by REINFORCE over
truncated trajectories and the Hessian by the likelihood-ratio form

    (1/m) sum_i  dPhi_i dlogp_i^T + d2Phi_i,

where Phi(theta; tau) = sum_h Psi_h(tau) log pi(a_h | s_h) and
Psi_h = sum_{t>=h} gamma^t r_t.  Each trajectory of length H counts as H
state-action probes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .eigencore import DenseMap, MatvecCounter
from .oracle import StochasticOracle
from .problems import Problem


@dataclass
class ChainMdp:
    """A finite MDP: transition kernel, bounded rewards, discount, start law."""

    transitions: np.ndarray  # (S, A, S)
    rewards: np.ndarray      # (S, A) in [0, 1]
    gamma: float
    rho: np.ndarray          # (S,)
    n_states: int = field(init=False)
    n_actions: int = field(init=False)

    def __post_init__(self) -> None:
        self.transitions = np.asarray(self.transitions, dtype=float)
        self.rewards = np.asarray(self.rewards, dtype=float)
        self.rho = np.asarray(self.rho, dtype=float)
        s, a, s2 = self.transitions.shape
        if s != s2 or self.rewards.shape != (s, a):
            raise ValueError("inconsistent transition/reward shapes")
        if np.any(self.transitions < -1e-12) or \
                not np.allclose(self.transitions.sum(axis=2), 1.0, atol=1e-9):
            raise ValueError("transition rows must be probability distributions")
        if np.any(self.rewards < 0) or np.any(self.rewards > 1):
            raise ValueError("rewards must lie in [0, 1]")
        if not (0.0 < self.gamma < 1.0):
            raise ValueError("gamma must lie in (0, 1)")
        if not math.isclose(self.rho.sum(), 1.0, abs_tol=1e-9):
            raise ValueError("rho must sum to 1")
        self.n_states, self.n_actions = s, a


def make_chain_mdp(n_states: int = 5, gamma: float = 0.9, slip: float = 0.05
                   ) -> ChainMdp:
    """A left/right chain: reward 1 in the absorbing rightmost state.

    Action 1 moves right and action 0 left, failing (staying put) with
    probability ``slip``; the leftmost state reflects.  Starts at state 0.
    """
    s_n, a_n = n_states, 2
    p = np.zeros((s_n, a_n, s_n))
    r = np.zeros((s_n, a_n))
    goal = s_n - 1
    for s in range(s_n):
        if s == goal:
            p[s, :, s] = 1.0
            r[s, :] = 1.0
            continue
        p[s, 1, min(s + 1, goal)] += 1.0 - slip
        p[s, 1, s] += slip
        p[s, 0, max(s - 1, 0)] += 1.0 - slip
        p[s, 0, s] += slip
    rho = np.zeros(s_n)
    rho[0] = 1.0
    return ChainMdp(transitions=p, rewards=r, gamma=gamma, rho=rho)


# -- policy and dynamic programming ------------------------------------------

def softmax_policy(theta: np.ndarray, n_states: int, n_actions: int,
                   temperature: float = 1.0) -> np.ndarray:
    logits = np.asarray(theta, dtype=float).reshape(n_states, n_actions) / temperature
    logits = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=1, keepdims=True)


def policy_value(mdp: ChainMdp, pi: np.ndarray) -> np.ndarray:
    """State values of a stochastic policy by direct linear solve."""
    p_pi = np.einsum("sa,sat->st", pi, mdp.transitions)
    r_pi = (pi * mdp.rewards).sum(axis=1)
    return np.linalg.solve(np.eye(mdp.n_states) - mdp.gamma * p_pi, r_pi)


def policy_return(mdp: ChainMdp, pi: np.ndarray) -> float:
    return float(mdp.rho @ policy_value(mdp, pi))


def exact_return(mdp: ChainMdp, theta: np.ndarray, temperature: float = 1.0) -> float:
    return policy_return(mdp, softmax_policy(theta, mdp.n_states, mdp.n_actions, temperature))


def exact_policy_gradient(mdp: ChainMdp, theta: np.ndarray,
                          temperature: float = 1.0) -> np.ndarray:
    """Exact gradient of J(theta) via occupancy and advantages."""
    pi = softmax_policy(theta, mdp.n_states, mdp.n_actions, temperature)
    v = policy_value(mdp, pi)
    q = mdp.rewards + mdp.gamma * np.einsum("sat,t->sa", mdp.transitions, v)
    p_pi = np.einsum("sa,sat->st", pi, mdp.transitions)
    occupancy = np.linalg.solve((np.eye(mdp.n_states) - mdp.gamma * p_pi).T, mdp.rho)
    grad = occupancy[:, None] * pi * (q - v[:, None]) / temperature
    return grad.ravel()


def truncated_policy_gradient(mdp: ChainMdp, theta: np.ndarray, horizon: int,
                              temperature: float = 1.0) -> np.ndarray:
    """Exact gradient of the horizon-truncated return.

    This is what the trajectory estimator is unbiased for; it differs from
    the infinite-horizon gradient by at most O(gamma**horizon / (1-gamma)).
    """
    s_n, a_n = mdp.n_states, mdp.n_actions
    pi = softmax_policy(theta, s_n, a_n, temperature)
    p_pi = np.einsum("sa,sat->st", pi, mdp.transitions)
    # q_trunc[j] holds the j-step truncated action values.
    q_trunc = np.zeros((horizon + 1, s_n, a_n))
    for j in range(1, horizon + 1):
        v_prev = (pi * q_trunc[j - 1]).sum(axis=1)
        q_trunc[j] = mdp.rewards + mdp.gamma * np.einsum("sat,t->sa", mdp.transitions, v_prev)
    grad = np.zeros((s_n, a_n))
    p_h = mdp.rho.copy()
    for h in range(horizon):
        q = q_trunc[horizon - h]
        v = (pi * q).sum(axis=1)
        grad += (mdp.gamma ** h) * p_h[:, None] * pi * (q - v[:, None]) / temperature
        p_h = p_h @ p_pi
    return grad.ravel()


def value_iteration(mdp: ChainMdp, tol: float = 1e-12, max_iters: int = 100000
                    ) -> tuple[float, np.ndarray]:
    """Optimal return and state values over all policies."""
    v = np.zeros(mdp.n_states)
    for _ in range(max_iters):
        q = mdp.rewards + mdp.gamma * np.einsum("sat,t->sa", mdp.transitions, v)
        v_new = q.max(axis=1)
        if np.max(np.abs(v_new - v)) < tol:
            v = v_new
            break
        v = v_new
    return float(mdp.rho @ v), v


# -- trajectory sampling oracle ------------------------------------------------

class TrajectoryOracle(StochasticOracle):
    """REINFORCE gradient and likelihood-ratio Hessian from truncated rollouts.

    One sample is one trajectory; ``probes_drawn`` additionally counts the
    ``horizon`` state-action probes each trajectory spends.  Paired sampling
    is undefined here because trajectory distributions depend on the query
    point, so the variance-reduced mode is not supported on this oracle.
    """

    def __init__(self, problem: "SoftmaxPolicyProblem", mdp: ChainMdp, horizon: int,
                 temperature: float = 1.0, baseline: bool = False, base_seed: int = 0):
        super().__init__(problem.dim, problem, base_seed)
        self.mdp = mdp
        self.horizon = horizon
        self.temperature = temperature
        self.baseline = baseline

    def _account(self, n: int) -> None:
        self.samples_drawn += n
        self.probes_drawn += n * self.horizon

    def _rollout(self, pi: np.ndarray, n: int, rng: np.random.Generator):
        mdp, h_len = self.mdp, self.horizon
        s_n = mdp.n_states
        states = np.empty((n, h_len), dtype=np.int64)
        actions = np.empty((n, h_len), dtype=np.int64)
        rewards = np.empty((n, h_len))
        s = (rng.random(n)[:, None] > np.cumsum(mdp.rho)[None, :]).sum(axis=1)
        s = np.minimum(s, s_n - 1)
        for t in range(h_len):
            states[:, t] = s
            cum_pi = np.cumsum(pi[s], axis=1)
            a = (rng.random(n)[:, None] > cum_pi).sum(axis=1)
            a = np.minimum(a, mdp.n_actions - 1)
            actions[:, t] = a
            rewards[:, t] = mdp.rewards[s, a]
            cum_p = np.cumsum(mdp.transitions[s, a], axis=1)
            s = (rng.random(n)[:, None] > cum_p).sum(axis=1)
            s = np.minimum(s, s_n - 1)
        return states, actions, rewards

    def _score_weights(self, states, actions, rewards, pi):
        """Reward-to-go weights Psi_h, optionally baseline-subtracted."""
        n, h_len = rewards.shape
        disc = self.mdp.gamma ** np.arange(h_len)
        w = rewards * disc[None, :]
        psi = np.flip(np.cumsum(np.flip(w, axis=1), axis=1), axis=1)
        if self.baseline:
            v = policy_value(self.mdp, pi)
            psi = psi - disc[None, :] * v[states]
        return psi

    def _eligibility(self, states, actions, weights, pi):
        """Per-trajectory sums of weights * dlog pi(a_h | s_h)."""
        n, h_len = states.shape
        s_n, a_n = self.mdp.n_states, self.mdp.n_actions
        out = np.zeros((n, s_n, a_n))
        idx_i = np.repeat(np.arange(n), h_len)
        idx_s = states.ravel()
        idx_a = actions.ravel()
        w = weights.ravel() / self.temperature
        np.add.at(out, (idx_i, idx_s, idx_a), w)
        np.add.at(out, (idx_i, idx_s), -w[:, None] * pi[idx_s])
        return out.reshape(n, self.dim)

    def sample_gradient(self, theta, n, seed):
        if n < 1:
            raise ValueError("batch size must be >= 1")
        pi = softmax_policy(theta, self.mdp.n_states, self.mdp.n_actions, self.temperature)
        states, actions, rewards = self._rollout(pi, n, self._rng(("traj", seed)))
        psi = self._score_weights(states, actions, rewards, pi)
        grads = self._eligibility(states, actions, psi, pi)
        self._account(n)
        # Negated: the library minimizes -J.
        return -grads.mean(axis=0), n

    def sample_hessian_map(self, theta, n, seed):
        if n < 1:
            raise ValueError("batch size must be >= 1")
        s_n, a_n = self.mdp.n_states, self.mdp.n_actions
        pi = softmax_policy(theta, s_n, a_n, self.temperature)
        states, actions, rewards = self._rollout(pi, n, self._rng(("traj-h", seed)))
        psi = self._score_weights(states, actions, rewards, pi)
        grad_phi = self._eligibility(states, actions, psi, pi)
        dlogp = self._eligibility(states, actions, np.ones_like(psi), pi)
        term1 = grad_phi.T @ dlogp / n
        # d2 log pi is block diagonal and action-independent; aggregate the
        # Psi mass per state and expand blocks once.
        w_state = np.zeros(s_n)
        np.add.at(w_state, states.ravel(), psi.ravel())
        term2 = np.zeros((self.dim, self.dim))
        t2 = self.temperature ** 2
        for s in range(s_n):
            block = -(np.diag(pi[s]) - np.outer(pi[s], pi[s])) / t2
            sl = slice(s * a_n, (s + 1) * a_n)
            term2[sl, sl] = w_state[s] * block / n
        h_j = term1 + term2
        h_j = 0.5 * (h_j + h_j.T)
        self._account(n)
        return DenseMap(-h_j, counter=self.hvp_counter), n

    def sample_gradient_pair(self, x_new, x_old, n, seed):
        raise NotImplementedError("paired sample sets are undefined for trajectory oracles")

    def sample_hessian_pair(self, x_new, x_old, n, seed):
        raise NotImplementedError("paired sample sets are undefined for trajectory oracles")


class SoftmaxPolicyProblem(Problem):
    """Negated softmax-policy return as a minimization objective.

    The optimal value is the value-iteration optimum over all policies, which
    softmax policies approach but do not attain; the weak dominance slack is
    therefore strictly positive and the dominance constant is left unset.
    """

    name = "chain_mdp"

    def __init__(self, mdp: ChainMdp, temperature: float = 1.0):
        self.mdp = mdp
        self.temperature = temperature
        j_star, _ = value_iteration(mdp)
        self.optimal_return = j_star
        super().__init__(
            dim=mdp.n_states * mdp.n_actions,
            f_star=-j_star,
            alpha=1.0,
            c_gd=math.nan,
            lip_g=math.nan,
            lip_h=math.nan,
            level_set_radius=math.inf,
        )

    def value(self, theta):
        return -exact_return(self.mdp, theta, self.temperature)

    def gradient(self, theta):
        return -exact_policy_gradient(self.mdp, theta, self.temperature)

    def hessian_map(self, theta, counter: Optional[MatvecCounter] = None,
                    step: float = 1e-6) -> DenseMap:
        # Central differences of the exact gradient; diagnostics only.
        theta = np.asarray(theta, dtype=float)
        cols = []
        for i in range(self.dim):
            e = np.zeros(self.dim)
            e[i] = step
            cols.append((self.gradient(theta + e) - self.gradient(theta - e)) / (2 * step))
        h = np.column_stack(cols)
        return DenseMap(0.5 * (h + h.T), counter=counter)


def make_chain_mdp_policy(mdp: ChainMdp, horizon: int = 50, temperature: float = 1.0,
                          baseline: bool = False, seed: int = 0
                          ) -> tuple[SoftmaxPolicyProblem, TrajectoryOracle]:
    """Bundle a chain MDP into a minimization problem plus a sampling oracle."""
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    problem = SoftmaxPolicyProblem(mdp, temperature)
    oracle = TrajectoryOracle(problem, mdp, horizon, temperature, baseline, base_seed=seed)
    return problem, oracle
