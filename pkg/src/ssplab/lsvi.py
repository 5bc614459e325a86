"""Optimistic least-squares value iteration with one covariance shared by all layers."""

from __future__ import annotations

import math

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .env import TerminalCost


class ContractError(RuntimeError):
    """The driver broke the begin / H x (act, observe) / end protocol."""


def beta(m: int, d: int, B: float, H: int, delta: float) -> float:
    """Bonus scale 50 d B sqrt(ln(16 B m H d / delta)) for interval m >= 1."""
    if m < 1:
        raise ValueError("interval index starts at 1")
    return 50.0 * d * B * math.sqrt(math.log(16.0 * B * m * H * d / delta))


class LsviLearner:
    """Finite-horizon learner for the horizon-H view of a linear SSP.

    ``features(s)`` must return an (A, d) array and all zeros at the goal.
    Values are evaluated lazily from (w_h, Lambda, beta); the learner never
    needs the size of the state space. Data enters the regression as sums
    grouped by next state, which is the same ridge system as summing over
    every record.

    ``beta_scale`` multiplies the bonus; 1.0 is the formula above.
    """

    def __init__(self, features, d, H, B, terminal: TerminalCost, goal, delta=0.05, lam=1.0,
                 beta_scale=1.0, keep_history=True):
        self.features = features
        self.d, self.H, self.B = int(d), int(H), float(B)
        self.delta, self.lam = float(delta), float(lam)
        self.beta_scale = float(beta_scale)
        self.goal = goal
        self.terminal_level = terminal.level
        self.m = 0
        self.Lambda = self.lam * np.eye(self.d)
        self._pending = np.zeros((self.d, self.d))
        self.b_cost = np.zeros(self.d)
        self._pending_cost = np.zeros(self.d)
        # next state -> sum of phi over records landing there
        self.psi: dict[int, np.ndarray] = {}
        self._pending_psi: dict[int, np.ndarray] = {}
        self.keep_history = keep_history
        self.history: list[tuple[np.ndarray, float, int]] = []
        self.W = np.zeros((self.H, self.d))
        self.beta_m = 0.0
        self.anomaly = False
        self._n_obs = 0
        self._feat_cache: dict[int, np.ndarray] = {}
        self._norm_cache: dict[int, np.ndarray] = {}
        self._Linv = np.eye(self.d) / self.lam
        self.last_qhat = None

    # ---- helpers -------------------------------------------------------
    def _phi(self, s):
        F = self._feat_cache.get(s)
        if F is None:
            F = np.asarray(self.features(s), dtype=float)
            self._feat_cache[s] = F
        return F

    def _bonus_norms(self, s):
        n = self._norm_cache.get(s)
        if n is None:
            F = self._phi(s)
            n = np.sqrt(np.maximum(np.einsum("ad,de,ae->a", F, self._Linv, F), 0.0))
            self._norm_cache[s] = n
        return n

    def _terminal(self, s):
        return 0.0 if s == self.goal else self.terminal_level

    def q_hat(self, h, s):
        """Unprojected estimate phi^T w_h - beta_m ||phi||_{Lambda^-1} for every action."""
        return self._phi(s) @ self.W[h - 1] - self.beta_m * self._bonus_norms(s)

    def q_values(self, h, s):
        return np.clip(self.q_hat(h, s), 0.0, self.B)

    def value(self, h, s):
        if h == self.H + 1:
            return self._terminal(s)
        return float(self.q_values(h, s).min())

    # ---- protocol ------------------------------------------------------
    def begin_interval(self, s1):
        self.m += 1
        self._n_obs = 0
        self.anomaly = False
        self.beta_m = self.beta_scale * beta(self.m, self.d, self.B, self.H, self.delta)
        factor = cho_factor(self.Lambda, lower=True)
        self._Linv = cho_solve(factor, np.eye(self.d))
        self._norm_cache = {}

        W = np.empty((self.H, self.d))
        next_states = list(self.psi)
        if not next_states:
            W[:] = cho_solve(factor, self.b_cost)
            self.W = W
            return
        Psi = np.array([self.psi[s] for s in next_states])
        Fs = np.array([self._phi(s) for s in next_states])
        norms = np.array([self._bonus_norms(s) for s in next_states])
        v = np.array([self._terminal(s) for s in next_states])
        for h in range(self.H, 0, -1):
            w = cho_solve(factor, self.b_cost + Psi.T @ v)
            W[h - 1] = w
            v = np.clip(Fs @ w - self.beta_m * norms, 0.0, self.B).min(axis=1)
        self.W = W

    def act(self, h, s):
        if s == self.goal:
            self.last_qhat = 0.0
            return 0
        qh = self.q_hat(h, s)
        a = int(np.argmin(np.clip(qh, 0.0, self.B)))
        self.last_qhat = float(qh[a])
        if qh[a] > self.B:
            self.anomaly = True
        return a

    def observe(self, h, s, a, c, s_next):
        self._n_obs += 1
        if s == self.goal:
            return
        phi = self._phi(s)[a]
        self._pending += np.outer(phi, phi)
        self._pending_cost += phi * c
        acc = self._pending_psi.get(s_next)
        if acc is None:
            self._pending_psi[s_next] = phi.copy()
        else:
            acc += phi
        if self.keep_history:
            self.history.append((phi, float(c), int(s_next)))

    def end_interval(self):
        if self._n_obs != self.H:
            raise ContractError(f"expected {self.H} observations in interval {self.m}, got {self._n_obs}")
        L = self.Lambda + self._pending
        self.Lambda = 0.5 * (L + L.T)
        self.b_cost += self._pending_cost
        for s_next, acc in self._pending_psi.items():
            cur = self.psi.get(s_next)
            if cur is None:
                self.psi[s_next] = acc
            else:
                cur += acc
        self._pending = np.zeros((self.d, self.d))
        self._pending_cost = np.zeros(self.d)
        self._pending_psi = {}
        return self.anomaly

    # ---- diagnostics ---------------------------------------------------
    def regression_rhs(self, h):
        """sum_i phi_i (c_i + V_{h+1}(s'_i)) recomputed record by record from the history."""
        rhs = np.zeros(self.d)
        for phi, c, s_next in self.history:
            rhs += phi * (c + self.value(h + 1, s_next))
        return rhs

    def recomputed_lambda(self):
        L = self.lam * np.eye(self.d)
        for phi, _, _ in self.history:
            L += np.outer(phi, phi)
        return L


def make_lsvi(env, H, B, terminal, delta=0.05, lam=1.0, beta_scale=1.0, keep_history=False):
    """LSVI learner wired to a LinearSsp's feature map."""
    return LsviLearner(env.features, env.d, H, B, terminal, env.goal, delta=delta, lam=lam,
                       beta_scale=beta_scale, keep_history=keep_history)
