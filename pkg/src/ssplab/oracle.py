"""Exact ground truth for finite SSPs and their finite-horizon counterparts."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .env import FiniteHorizonView


class OracleError(RuntimeError):
    pass


class ImproperPolicyError(OracleError):
    pass


@dataclass
class OracleSolution:
    V_star: np.ndarray  # (S,), goal excluded
    Q_star: np.ndarray  # (S, A)
    pi_star: np.ndarray  # (S,)
    B_star: float
    T_star: float
    gap: np.ndarray  # (S, A)
    gap_min: float
    c_min: float
    residual: float
    iterations: int

    def to_dict(self):
        return {
            "V_star": self.V_star,
            "Q_star": self.Q_star,
            "pi_star": self.pi_star,
            "B_star": self.B_star,
            "T_star": self.T_star,
            "gap": self.gap,
            "gap_min": self.gap_min,
            "c_min": self.c_min,
            "residual": self.residual,
            "iterations": self.iterations,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            V_star=np.array(d["V_star"], dtype=float),
            Q_star=np.array(d["Q_star"], dtype=float),
            pi_star=np.array(d["pi_star"], dtype=int),
            B_star=float(d["B_star"]),
            T_star=float(d["T_star"]),
            gap=np.array(d["gap"], dtype=float),
            gap_min=float(d["gap_min"]),
            c_min=float(d["c_min"]),
            residual=float(d["residual"]),
            iterations=int(d["iterations"]),
        )


def _bellman(env, V):
    """Q(s,a) = c(s,a) + sum_{s'} P(s'|s,a) V(s') with V(g) = 0."""
    return env.c + env.P[..., :-1] @ V


def hitting_times(env, pi) -> np.ndarray:
    """Expected steps to the goal under a deterministic policy, solving T = 1 + P_pi T."""
    S = env.n_states
    pi = np.asarray(pi, dtype=int)
    P_pi = env.P[np.arange(S), pi, :S]
    M = np.eye(S) - P_pi
    try:
        T = np.linalg.solve(M, np.ones(S))
    except np.linalg.LinAlgError as exc:
        raise ImproperPolicyError("policy does not reach the goal from every state") from exc
    resid = np.max(np.abs(M @ T - 1.0)) if S else 0.0
    if not np.all(np.isfinite(T)) or np.any(T < 1.0 - 1e-9) or resid > 1e-10 * max(1.0, np.abs(T).max()):
        raise ImproperPolicyError("policy does not reach the goal from every state")
    return T


def policy_values(env, pi) -> np.ndarray:
    S = env.n_states
    pi = np.asarray(pi, dtype=int)
    P_pi = env.P[np.arange(S), pi, :S]
    c_pi = env.c[np.arange(S), pi]
    return np.linalg.solve(np.eye(S) - P_pi, c_pi)


def solve_ssp(env, tol: float = 1e-10, max_iter: int = 10**6) -> OracleSolution:
    """Value iteration from V = 0, then an exact evaluation of the greedy policy.

    The exact evaluation replaces the iterate only when its Bellman residual is
    no worse, which removes the geometric tail error of plain VI.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    V = np.zeros(env.n_states)
    residual = math.inf
    it = 0
    for it in range(1, max_iter + 1):
        V_new = _bellman(env, V).min(axis=1)
        residual = float(np.max(np.abs(V_new - V))) if V.size else 0.0
        V = V_new
        if residual <= tol:
            break
    else:
        raise OracleError("no proper policy detected or tol unreachable")

    pi = np.argmin(_bellman(env, V), axis=1)
    try:
        V_pi = policy_values(env, pi)
        res_pi = float(np.max(np.abs(_bellman(env, V_pi).min(axis=1) - V_pi)))
        if np.all(np.isfinite(V_pi)) and res_pi <= residual:
            V, residual = V_pi, res_pi
    except np.linalg.LinAlgError:
        pass

    Q = _bellman(env, V)
    V = Q.min(axis=1)
    pi = np.argmin(Q, axis=1)
    gap = Q - V[:, None]
    positive = gap[gap > 10 * tol]
    T = hitting_times(env, pi)
    return OracleSolution(
        V_star=V,
        Q_star=Q,
        pi_star=pi,
        B_star=float(V.max()),
        T_star=float(T.max()),
        gap=gap,
        gap_min=float(positive.min()) if positive.size else math.inf,
        c_min=float(env.c.min()),
        residual=residual,
        iterations=it,
    )


@dataclass
class FhOracleSolution:
    """Layered optimal values. Row ``h - 1`` holds layer ``h``; row ``H`` is layer H+1."""

    H: int
    V: np.ndarray  # (H+1, S+1)
    Q: np.ndarray  # (H+1, S+1, A)
    gap: np.ndarray  # (H, S, A), layers 1..H on non-goal states
    gap_min_prime: float

    def V_h(self, h: int) -> np.ndarray:
        return self.V[h - 1]

    def Q_h(self, h: int) -> np.ndarray:
        return self.Q[h - 1]

    def to_dict(self):
        return {"H": self.H, "V": self.V, "Q": self.Q, "gap_min_prime": self.gap_min_prime}


def solve_fh(view: FiniteHorizonView, tol: float = 1e-10) -> FhOracleSolution:
    """Backward induction with Q_{H+1}(s, a) = c_f(s)."""
    env = view.base
    H = view.H
    S, A = env.n_states, env.n_actions
    P = env.P_plus()
    c = env.c_plus()
    c_f = view.c_f
    V = np.empty((H + 1, S + 1))
    Q = np.empty((H + 1, S + 1, A))
    Q[H] = c_f[:, None]
    V[H] = c_f
    for h in range(H - 1, -1, -1):
        Q[h] = c + P @ V[h + 1]
        V[h] = Q[h].min(axis=1)
    gap = Q[:H, :S] - V[:H, :S, None]
    positive = gap[gap > 10 * tol]
    return FhOracleSolution(H=H, V=V, Q=Q, gap=gap, gap_min_prime=float(positive.min()) if positive.size else math.inf)


@dataclass
class HittingCheck:
    passed: bool
    fraction: float
    threshold: float
    tau: float
    delta: float
    n_trials: int
    sigma: float
    exceedances: int


def hitting_threshold(tau: float, delta: float) -> float:
    return 4.0 * tau * math.log(2.0 / delta)


def empirical_hitting_check(env, pi, delta: float, n_trials: int, rng, start: int | None = None,
                            tau: float | None = None) -> HittingCheck:
    """Monte-Carlo check that rollouts rarely exceed 4 tau ln(2/delta) steps."""
    if n_trials < 1000:
        raise ValueError("n_trials must be >= 1000")
    pi = np.asarray(pi, dtype=int)
    if tau is None:
        tau = float(hitting_times(env, pi).max())
    threshold = hitting_threshold(tau, delta)
    limit = math.floor(threshold)
    goal = env.goal
    states = np.full(n_trials, env.s_init if start is None else start)
    steps = np.zeros(n_trials, dtype=np.int64)
    cdf_pi = env.cdf[np.arange(env.n_states), pi]  # (S, S+1)
    active = np.arange(n_trials)
    # a rollout exceeds iff it is still running after `limit` steps
    for _ in range(limit):
        if active.size == 0:
            break
        rows = cdf_pi[states[active]]
        u = rng.random(active.size) * rows[:, -1]
        nxt = (rows <= u[:, None]).sum(axis=1)
        states[active] = nxt
        steps[active] += 1
        active = active[nxt != goal]
    exceed = int(active.size)
    frac = exceed / n_trials
    sigma = math.sqrt(delta * (1 - delta) / n_trials)
    return HittingCheck(
        passed=frac <= delta + 3 * sigma,
        fraction=frac,
        threshold=threshold,
        tau=tau,
        delta=delta,
        n_trials=n_trials,
        sigma=sigma,
        exceedances=exceed,
    )
