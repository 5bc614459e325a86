"""Finite SSP environments.

Every environment exposes the same tabular surface: ``n_states``,
``n_actions``, ``s_init``, ``goal`` (always ``n_states``), the materialized
transition tensor ``P`` of shape ``(S, A, S+1)`` and the cost table ``c`` of
shape ``(S, A)``. The goal is never part of the state index range used by
``phi`` and is treated as absorbing with zero cost.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

ROUNDOFF = 1e-12


class ValidationError(ValueError):
    pass


def _frozen(x, dtype=float):
    a = np.array(x, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


def _materialize_rows(raw, what):
    """Clamp roundoff negatives in probability rows and renormalize."""
    raw = np.asarray(raw, dtype=float)
    worst = raw.min() if raw.size else 0.0
    if worst < -ROUNDOFF:
        raise ValidationError(f"{what}: negative transition probability {worst:.3e}")
    sums = raw.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > 1e-9):
        bad = np.max(np.abs(sums - 1.0))
        raise ValidationError(f"{what}: rows do not sum to one (max error {bad:.3e})")
    P = np.where(raw < 0.0, 0.0, raw)
    if worst < 0.0:
        P = P / P.sum(axis=-1, keepdims=True)
    return P


class _SspBase:
    """Shared helpers for objects carrying ``P``, ``c``, ``s_init``."""

    n_states: int
    n_actions: int
    s_init: int

    @property
    def goal(self) -> int:
        return self.n_states

    @property
    def c_min(self) -> float:
        return float(self.c.min())

    @property
    def cdf(self) -> np.ndarray:
        return self._cdf

    def _set_derived(self, P, c):
        object.__setattr__(self, "P", _frozen(P))
        object.__setattr__(self, "c", _frozen(c))
        object.__setattr__(self, "_cdf", _frozen(np.cumsum(self.P, axis=-1)))

    def P_plus(self) -> np.ndarray:
        """Transitions over S+ with the goal row absorbing, shape (S+1, A, S+1)."""
        S, A = self.n_states, self.n_actions
        out = np.zeros((S + 1, A, S + 1))
        out[:S] = self.P
        out[S, :, S] = 1.0
        return out

    def c_plus(self) -> np.ndarray:
        out = np.zeros((self.n_states + 1, self.n_actions))
        out[: self.n_states] = self.c
        return out


@dataclass(frozen=True, eq=False)
class LinearSsp(_SspBase):
    """Linear SSP: ``c = phi @ theta_star`` and ``P(s'|s,a) = phi(s,a) @ mu(s')``.

    ``phi`` has shape (S, A, d), ``mu`` has shape (S+1, d) with the last row
    belonging to the goal. ``cost_slack`` records an applied cost perturbation
    so the validator accepts costs up to ``1 + cost_slack``.
    """

    phi: np.ndarray
    mu: np.ndarray
    theta_star: np.ndarray
    s_init: int = 0
    cost_slack: float = 0.0
    P: np.ndarray = field(init=False, repr=False)
    c: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        phi = _frozen(self.phi)
        mu = _frozen(self.mu)
        theta = _frozen(self.theta_star)
        if phi.ndim != 3:
            raise ValidationError("phi must have shape (n_states, n_actions, d)")
        S, A, d = phi.shape
        if mu.shape != (S + 1, d):
            raise ValidationError(f"mu must have shape {(S + 1, d)}, got {mu.shape}")
        if theta.shape != (d,):
            raise ValidationError(f"theta_star must have shape {(d,)}")
        if not 0 <= self.s_init < S:
            raise ValidationError("s_init out of range")
        object.__setattr__(self, "phi", phi)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "theta_star", theta)
        raw = np.einsum("sad,td->sat", phi, mu)
        self._set_derived(_materialize_rows(raw, "LinearSsp"), phi @ theta)

    @property
    def n_states(self) -> int:
        return self.phi.shape[0]

    @property
    def n_actions(self) -> int:
        return self.phi.shape[1]

    @property
    def d(self) -> int:
        return self.phi.shape[2]

    def phi_plus(self) -> np.ndarray:
        """Features over S+ with phi(g, a) = 0, shape (S+1, A, d)."""
        out = np.zeros((self.n_states + 1, self.n_actions, self.d))
        out[: self.n_states] = self.phi
        return out

    def features(self, s: int) -> np.ndarray:
        if s == self.goal:
            return np.zeros((self.n_actions, self.d))
        return self.phi[s]

    def validate(self, tol: float = ROUNDOFF, n_random: int = 16, seed: int = 0):
        validate_linear(self, tol=tol, n_random=n_random, seed=seed)
        return self


@dataclass(frozen=True, eq=False)
class TabularSsp(_SspBase):
    """Tabular SSP with ``P`` of shape (S, A, S+1) and costs in [0, 1]."""

    P: np.ndarray
    c: np.ndarray
    s_init: int = 0

    def __post_init__(self):
        P = np.asarray(self.P, dtype=float)
        c = np.asarray(self.c, dtype=float)
        if P.ndim != 3 or P.shape[2] != P.shape[0] + 1:
            raise ValidationError("P must have shape (S, A, S+1)")
        if c.shape != P.shape[:2]:
            raise ValidationError("c must have shape (S, A)")
        if not 0 <= self.s_init < P.shape[0]:
            raise ValidationError("s_init out of range")
        self._set_derived(_materialize_rows(P, "TabularSsp"), c)

    @property
    def n_states(self) -> int:
        return self.P.shape[0]

    @property
    def n_actions(self) -> int:
        return self.P.shape[1]

    def validate(self, tol: float = ROUNDOFF, cost_slack: float = 0.0):
        validate_tabular(self, tol=tol, cost_slack=cost_slack)
        return self


@dataclass(frozen=True, eq=False)
class LinearMixtureSsp(_SspBase):
    """Linear mixture SSP: ``P(s'|s,a) = <phi_mix[s, a, s'], theta_star>``.

    Costs are known to the learner; ``phi_mix`` has shape (S, A, S+1, d).
    """

    phi_mix: np.ndarray
    theta_star: np.ndarray
    c: np.ndarray
    s_init: int = 0
    P: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        phi_mix = _frozen(self.phi_mix)
        theta = _frozen(self.theta_star)
        if phi_mix.ndim != 4 or phi_mix.shape[2] != phi_mix.shape[0] + 1:
            raise ValidationError("phi_mix must have shape (S, A, S+1, d)")
        if theta.shape != (phi_mix.shape[3],):
            raise ValidationError("theta_star has the wrong dimension")
        c = np.asarray(self.c, dtype=float)
        if c.shape != phi_mix.shape[:2]:
            raise ValidationError("c must have shape (S, A)")
        object.__setattr__(self, "phi_mix", phi_mix)
        object.__setattr__(self, "theta_star", theta)
        raw = phi_mix @ theta
        self._set_derived(_materialize_rows(raw, "LinearMixtureSsp"), c)

    @property
    def n_states(self) -> int:
        return self.phi_mix.shape[0]

    @property
    def n_actions(self) -> int:
        return self.phi_mix.shape[1]

    @property
    def d(self) -> int:
        return self.phi_mix.shape[3]

    def phi_of(self, F: np.ndarray) -> np.ndarray:
        """phi_F(s, a) = sum_{s'} phi_mix(s'|s,a) F(s') for F over S+, shape (S, A, d)."""
        return np.einsum("satd,t->sad", self.phi_mix, np.asarray(F, dtype=float))

    def validate(self, tol: float = ROUNDOFF):
        validate_mixture(self, tol=tol)
        return self


# --------------------------------------------------------------------------
# validation


def _check_rows(P, tol, what):
    if P.min() < -tol:
        raise ValidationError(f"{what}: probability below -{tol:g}: {P.min():.3e}")
    err = np.max(np.abs(P.sum(axis=-1) - 1.0))
    if err > tol:
        raise ValidationError(f"{what}: row sums off by {err:.3e}")


def _test_functions(n, n_random, seed):
    """Indicator basis of S+ plus random +-1 functions."""
    rng = np.random.default_rng(seed)
    return np.vstack([np.eye(n), rng.choice([-1.0, 1.0], size=(n_random, n))])


def validate_linear(env: LinearSsp, tol=ROUNDOFF, n_random=16, seed=0):
    d = env.d
    norms = np.linalg.norm(env.phi, axis=-1)
    if norms.max() > 1.0 + tol:
        raise ValidationError(f"feature norm {norms.max():.6g} exceeds 1")
    if np.linalg.norm(env.theta_star) > math.sqrt(d) + tol:
        raise ValidationError("||theta_star|| exceeds sqrt(d)")
    c = env.phi @ env.theta_star
    if c.min() < -tol or c.max() > 1.0 + env.cost_slack + tol:
        raise ValidationError(f"costs outside [0, {1 + env.cost_slack:g}]")
    _check_rows(np.einsum("sad,td->sat", env.phi, env.mu), tol, "LinearSsp")
    H = _test_functions(env.n_states + 1, n_random, seed)
    lhs = np.linalg.norm(H @ env.mu, axis=1)
    rhs = math.sqrt(d) * np.abs(H).max(axis=1)
    if np.any(lhs > rhs + tol):
        raise ValidationError("measure norm bound ||sum h mu|| <= sqrt(d)||h|| violated")


def validate_tabular(env: TabularSsp, tol=ROUNDOFF, cost_slack=0.0):
    _check_rows(env.P, tol, "TabularSsp")
    if env.c.min() < 0.0 or env.c.max() > 1.0 + cost_slack:
        raise ValidationError("costs outside [0, 1]")


def validate_mixture(env: LinearMixtureSsp, tol=ROUNDOFF):
    d = env.d
    if np.linalg.norm(env.theta_star) > math.sqrt(d) + tol:
        raise ValidationError("||theta_star|| exceeds sqrt(d)")
    _check_rows(env.phi_mix @ env.theta_star, tol, "LinearMixtureSsp")
    for s_next in range(env.n_states + 1):
        F = np.zeros(env.n_states + 1)
        F[s_next] = 1.0
        if np.linalg.norm(env.phi_of(F), axis=-1).max() > math.sqrt(d) + tol:
            raise ValidationError("||phi_F|| exceeds sqrt(d) on an indicator function")
    if env.c.min() < 0.0 or env.c.max() > 1.0:
        raise ValidationError("costs outside [0, 1]")


def validate(env, tol=ROUNDOFF):
    """Dispatch to the invariant suite of the environment's type."""
    if isinstance(env, LinearSsp):
        validate_linear(env, tol=tol)
    elif isinstance(env, LinearMixtureSsp):
        validate_mixture(env, tol=tol)
    elif isinstance(env, TabularSsp):
        validate_tabular(env, tol=tol)
    else:
        raise TypeError(f"unknown environment type {type(env).__name__}")
    return env


# --------------------------------------------------------------------------
# generators


def sign_actions(d_action: int) -> np.ndarray:
    """Enumerate {-1, +1}^d in binary counting order (bit i <-> coordinate i, 0 <-> -1)."""
    idx = np.arange(2**d_action)[:, None]
    bits = (idx >> np.arange(d_action)[None, :]) & 1
    return np.where(bits == 1, 1.0, -1.0)


def lower_bound_delta(K: int) -> float:
    return math.sqrt((1.0 / 3.0) / K) / (8.0 * math.sqrt(2.0))


def parse_rho(spec: str, K: int) -> np.ndarray:
    """Turn a sign string like ``"+-+"`` into ``rho`` with entries +-Delta."""
    if not spec or any(ch not in "+-" for ch in spec):
        raise ValueError(f"rho spec must be a string of '+'/'-', got {spec!r}")
    Delta = lower_bound_delta(K)
    return np.array([Delta if ch == "+" else -Delta for ch in spec])


def make_lower_bound_instance(d_action: int, K: int, B_star: float, rho=None, rng=None) -> LinearSsp:
    """Two-state hard instance with action set {-1,+1}^d_action.

    States: 0 = s0 (initial, free), 1 = s1 (unit cost, exits w.p. 1/B_star).
    From s0, action ``a`` reaches the goal w.p. ``1/3 + <rho, a>``.
    ``rho`` is either given explicitly (entries +-Delta) or drawn with ``rng``.
    """
    if d_action < 1:
        raise ValueError("d_action must be >= 1 (feature dimension d_action + 2 >= 3)")
    delta = 1.0 / 3.0
    if K < d_action**2 / (2 * delta):
        raise ValueError(f"K={K} below the threshold d^2/(2 delta) = {d_action**2 / (2 * delta):g}")
    if B_star < 1:
        raise ValueError("B_star must be >= 1")
    Delta = lower_bound_delta(K)
    if rho is None:
        if rng is None:
            raise ValueError("either rho or rng must be supplied")
        rho = Delta * rng.choice([-1.0, 1.0], size=d_action)
    rho = np.asarray(rho, dtype=float)
    if rho.shape != (d_action,) or not np.allclose(np.abs(rho), Delta, rtol=1e-12, atol=0):
        raise ValueError("rho must have entries +-Delta")

    alpha = math.sqrt(1.0 / (1.0 + Delta * d_action))
    beta = math.sqrt(Delta / (1.0 + Delta * d_action))
    actions = sign_actions(d_action)
    A, d = len(actions), d_action + 2
    phi = np.zeros((2, A, d))
    phi[0, :, 0] = alpha
    phi[0, :, 1 : d_action + 1] = beta * actions
    phi[1, :, d - 1] = 1.0
    mu = np.zeros((3, d))
    mu[1] = np.concatenate([[(1 - delta) / alpha], -rho / beta, [1 - 1 / B_star]])
    mu[2] = np.concatenate([[delta / alpha], rho / beta, [1 / B_star]])
    theta = np.zeros(d)
    theta[-1] = 1.0
    return LinearSsp(phi=phi, mu=mu, theta_star=theta, s_init=0)


def make_gap_example(p: float, q: float, eps: float) -> TabularSsp:
    """Four-state instance whose layered gaps are much smaller than the SSP gap.

    s0 drifts to s1 w.p. p; at s1 action 0 (cost 0) leads to the costly loop
    s2, action 1 (cost eps) leads to the free exit s3.
    """
    for name, val in (("p", p), ("q", q), ("eps", eps)):
        if not 0.0 < val < 1.0:
            raise ValueError(f"{name} must lie in (0, 1), got {val}")
    S, A, g = 4, 2, 4
    P = np.zeros((S, A, S + 1))
    c = np.zeros((S, A))
    P[0, :, 1] = p
    P[0, :, 0] = 1 - p
    P[1, 0, 2] = 1.0
    P[1, 1, 3] = 1.0
    c[1, 1] = eps
    P[2, :, g] = q
    P[2, :, 1] = 1 - q
    c[2, :] = 1.0
    P[3, :, g] = 1.0
    return TabularSsp(P=P, c=c, s_init=0)


def make_two_route(p_low: float = 0.5, p_high: float = 0.6) -> TabularSsp:
    """Four-state instance with two noisy routes whose values differ by ``p_high - p_low``.

    s0 (cost 0.1) picks route s1 (action 0) or s2 (action 1). On a route,
    action 0 (cost 0.5) exits w.p. p_low / p_high and otherwise falls to s3;
    action 1 exits only w.p. 0.3. s3 costs 1 and always exits.
    """
    if not 0.3 < p_low <= p_high <= 1.0:
        raise ValueError("need 0.3 < p_low <= p_high <= 1")
    S, A, g = 4, 2, 4
    P = np.zeros((S, A, S + 1))
    c = np.zeros((S, A))
    c[0] = 0.1
    P[0, 0, 1] = 1.0
    P[0, 1, 2] = 1.0
    for s, p in ((1, p_low), (2, p_high)):
        c[s] = 0.5
        P[s, 0, g], P[s, 0, 3] = p, 1 - p
        P[s, 1, g], P[s, 1, 3] = 0.3, 0.7
    c[3] = 1.0
    P[3, :, g] = 1.0
    return TabularSsp(P=P, c=c, s_init=0)


def tabular_to_linear(env: TabularSsp) -> LinearSsp:
    """One-hot embedding: d = S*A, phi(s,a) = e_(s,a), mu(s')_(s,a) = P(s'|s,a)."""
    S, A = env.n_states, env.n_actions
    d = S * A
    phi = np.eye(d).reshape(S, A, d)
    mu = np.asarray(env.P).reshape(d, S + 1).T
    return LinearSsp(phi=phi, mu=mu, theta_star=np.asarray(env.c).reshape(d), s_init=env.s_init)


def tabular_to_mixture(env: TabularSsp) -> LinearMixtureSsp:
    """One-hot mixture encoding: phi(s'|s,a) = e_(s,a,s'), theta = vec(P)."""
    S, A = env.n_states, env.n_actions
    d = S * A * (S + 1)
    phi_mix = np.eye(d).reshape(S, A, S + 1, d)
    return LinearMixtureSsp(phi_mix=phi_mix, theta_star=np.asarray(env.P).reshape(d), c=env.c, s_init=env.s_init)


def mixture_from_kernels(kernels, weights, c, s_init=0) -> LinearMixtureSsp:
    """Convex mixture of tabular kernels: phi(s'|s,a)_i = P_i(s'|s,a), theta = weights."""
    kernels = np.asarray(kernels, dtype=float)
    weights = np.asarray(weights, dtype=float)
    if kernels.ndim != 4 or len(kernels) != len(weights):
        raise ValueError("kernels must have shape (d, S, A, S+1) matching weights")
    if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-12:
        raise ValueError("weights must lie on the probability simplex")
    return LinearMixtureSsp(phi_mix=np.moveaxis(kernels, 0, -1), theta_star=weights, c=c, s_init=s_init)


def make_mixture_fixture(d: int = 3, n_states: int = 3, n_actions: int = 2, seed: int = 0) -> LinearMixtureSsp:
    """Small random mixture SSP; every kernel exits to the goal w.p. >= 0.2."""
    rng = np.random.default_rng(seed)
    S, A = n_states, n_actions
    kernels = []
    for _ in range(d):
        K_i = rng.dirichlet(np.ones(S + 1), size=(S, A))
        K_i = 0.8 * K_i
        K_i[..., S] += 0.2
        kernels.append(K_i)
    weights = rng.dirichlet(np.ones(d))
    c = rng.uniform(0.1, 1.0, size=(S, A))
    return mixture_from_kernels(kernels, weights, c)


def perturb_costs(env, eps: float):
    """Shift every cost by ``eps``; for a linear SSP via theta + eps * sum_s' mu(s')."""
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    if eps == 0:
        return env
    if isinstance(env, LinearSsp):
        theta = env.theta_star + eps * env.mu.sum(axis=0)
        return LinearSsp(phi=env.phi, mu=env.mu, theta_star=theta, s_init=env.s_init,
                         cost_slack=env.cost_slack + eps)
    if isinstance(env, LinearMixtureSsp):
        return LinearMixtureSsp(phi_mix=env.phi_mix, theta_star=env.theta_star, c=env.c + eps, s_init=env.s_init)
    if isinstance(env, TabularSsp):
        return TabularSsp(P=env.P, c=env.c + eps, s_init=env.s_init)
    raise TypeError(f"cannot perturb {type(env).__name__}")


# --------------------------------------------------------------------------
# simulation


def sample_transition(env, s: int, a: int, rng: np.random.Generator) -> int:
    """Draw s' ~ P(.|s, a) with exactly one uniform from ``rng``."""
    if s == env.goal:
        raise ValueError("cannot sample a transition from the goal state")
    row = env.cdf[s, a]
    return int(np.searchsorted(row, rng.random() * row[-1], side="right"))


@dataclass(frozen=True)
class TerminalCost:
    """Terminal cost spec: ``two_B_star`` (2 B 1{s != g}) or ``zero``."""

    kind: str
    B_star: float = 0.0

    def __post_init__(self):
        if self.kind not in ("two_B_star", "zero"):
            raise ValueError(f"unknown terminal cost kind {self.kind!r}")

    @property
    def level(self) -> float:
        return 2.0 * self.B_star if self.kind == "two_B_star" else 0.0

    def vector(self, n_states: int) -> np.ndarray:
        out = np.full(n_states + 1, self.level)
        out[n_states] = 0.0
        return out

    def to_dict(self):
        return {"kind": self.kind, "B_star": self.B_star}

    @classmethod
    def from_dict(cls, d):
        return cls(d["kind"], float(d.get("B_star", 0.0)))


def two_B_star(B_star: float) -> TerminalCost:
    return TerminalCost("two_B_star", float(B_star))


def zero() -> TerminalCost:
    return TerminalCost("zero")


@dataclass(frozen=True, eq=False)
class FiniteHorizonView:
    """Horizon-H counterpart of an SSP: goal absorbing at zero cost, terminal cost c_f."""

    base: object
    H: int
    terminal: TerminalCost

    def __post_init__(self):
        if self.H < 1:
            raise ValueError("H must be >= 1")

    @property
    def goal(self) -> int:
        return self.base.goal

    @property
    def c_f(self) -> np.ndarray:
        return self.terminal.vector(self.base.n_states)

    def cost(self, s: int, a: int) -> float:
        return 0.0 if s == self.goal else float(self.base.c[s, a])

    def step(self, s: int, a: int, rng) -> tuple[float, int]:
        if s == self.goal:
            return 0.0, self.goal
        return float(self.base.c[s, a]), sample_transition(self.base, s, a, rng)

    def rollout(self, s1: int, policy, rng) -> tuple[float, int]:
        """Run ``policy(h, s)`` for H steps from ``s1``; return (total cost incl. terminal, s_{H+1})."""
        total, s = 0.0, s1
        for h in range(1, self.H + 1):
            cost, s = self.step(s, policy(h, s), rng)
            total += cost
        return total + self.c_f[s], s


def fh_wrap(env, H: int, c_f: TerminalCost) -> FiniteHorizonView:
    return FiniteHorizonView(env, int(H), c_f)
