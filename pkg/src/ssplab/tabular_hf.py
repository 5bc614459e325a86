"""MVP-style horizon-free tabular learner with Bernstein bonuses and doubling-count recomputes."""

from __future__ import annotations

import math

import numpy as np


def mvp_iota(n, SA: int, delta: float):
    return 20.0 * np.log(2.0 * SA * np.maximum(1.0, n) / delta)


def mvp_bonus(n, var, B: float, SA: int, delta: float):
    """max{7 sqrt(var * iota / max(1,n)), 49 B iota / max(1,n)}; works on scalars or arrays."""
    n1 = np.maximum(1.0, n)
    iota = mvp_iota(n, SA, delta)
    out = np.maximum(7.0 * np.sqrt(np.maximum(var, 0.0) * iota / n1), 49.0 * B * iota / n1)
    return float(out) if np.ndim(out) == 0 else out


def _is_power_of_two(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


class MvpLearner:
    """Tabular finite-horizon learner with known costs.

    Tables cover S+1 states; the goal row stays at zero. ``bonus_scale``
    multiplies b; 1.0 is the formula in :func:`mvp_bonus`.
    """

    def __init__(self, n_states, n_actions, costs, H, B, delta=0.05, bonus_scale=1.0):
        self.S, self.A = int(n_states), int(n_actions)
        self.goal = self.S
        self.c = np.asarray(costs, dtype=float)
        self.H, self.B, self.delta = int(H), float(B), float(delta)
        self.bonus_scale = float(bonus_scale)
        self.n = np.zeros((self.S, self.A), dtype=np.int64)
        self.n3 = np.zeros((self.S, self.A, self.S + 1), dtype=np.int64)
        self.Q = np.zeros((self.H + 1, self.S + 1, self.A))
        self.V = np.zeros((self.H + 1, self.S + 1))
        self.pending_recompute = True
        self.recomputes = 0
        self.bonus_min = math.inf  # smallest bonus seen across recomputes
        self.real_observations = 0
        self._n_obs = 0

    def recompute(self):
        S, A, H = self.S, self.A, self.H
        n = self.n.astype(float)
        P_hat = self.n3 / np.maximum(1.0, n)[..., None]
        Q = np.zeros((H + 1, S + 1, A))
        V = np.zeros((H + 1, S + 1))
        # row h-1 holds layer h; row H is layer H+1 and stays zero
        for h in range(H - 1, -1, -1):
            v_next = V[h + 1]
            mean = P_hat @ v_next
            var = P_hat @ (v_next**2) - mean**2
            b = self.bonus_scale * mvp_bonus(n, var, self.B, S * A, self.delta)
            self.bonus_min = min(self.bonus_min, float(b.min()))
            Q[h, :S] = np.maximum(0.0, self.c + mean - b)
            V[h] = Q[h].min(axis=1)
        self.Q, self.V = Q, V
        self.pending_recompute = False
        self.recomputes += 1

    def begin_interval(self, s1):
        self._n_obs = 0

    def act(self, h, s):
        if self.pending_recompute:
            self.recompute()
        return int(np.argmin(self.Q[h - 1, s]))

    def value(self, h, s):
        if self.pending_recompute:
            self.recompute()
        return float(self.V[h - 1, s])

    def observe(self, h, s, a, c, s_next):
        self._n_obs += 1
        if s == self.goal:
            return
        self.n[s, a] += 1
        self.n3[s, a, s_next] += 1
        self.real_observations += 1
        if _is_power_of_two(int(self.n[s, a])):
            self.pending_recompute = True

    def end_interval(self):
        if self._n_obs != self.H:
            raise RuntimeError(f"expected {self.H} observations, got {self._n_obs}")
        return False


def make_mvp(env, H, B, delta=0.05, bonus_scale=1.0):
    return MvpLearner(env.n_states, env.n_actions, env.c, H, B, delta=delta, bonus_scale=bonus_scale)


def bonus_check(B: float = 2.0, SA: int = 4, delta: float = 0.1) -> dict:
    """Worked values at n=4, var=0.25 used in the docs."""
    iota = 20.0 * math.log(2 * SA * 4 / delta)
    return {"iota": iota, "first": 7 * math.sqrt(0.25 * iota / 4), "second": 49 * B * iota / 4}
