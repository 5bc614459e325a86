"""Variance-weighted value-targeted regression for linear mixture SSPs."""

from __future__ import annotations

import math

import numpy as np
from scipy.linalg import cho_factor, cho_solve


def vtr_betas(m: int, d: int, H: int, B_star: float, lam: float = 1.0, delta: float = 0.05):
    """The three confidence radii (beta_hat, beta_tilde, beta_check) for interval m >= 1."""
    if m < 1:
        raise ValueError("interval index starts at 1")
    L = math.log(4.0 * m**2 * H**2 / delta)
    root_ld = math.sqrt(lam * d)
    hat = 8 * math.sqrt(d * math.log(1 + d * m * H / lam) * L) + 4 * math.sqrt(d) * L + root_ld
    tilde = (72 * B_star**2 * math.sqrt(d * math.log(1 + 81 * d * m * H * B_star**4 / lam) * L)
             + 36 * B_star**2 * L + root_ld)
    check = 8 * d * math.sqrt(math.log(1 + d * m * H / lam) * L) + 4 * math.sqrt(d) * L + root_ld
    return hat, tilde, check


def sigma_bar(nu: float, E: float, B_star: float, d: int) -> float:
    return math.sqrt(max(9.0 * B_star**2 / d, nu + E))


def _norms(F, Sinv):
    """||F[..., :]||_{Sinv} over the leading axes."""
    return np.sqrt(np.maximum(np.einsum("...d,de,...e->...", F, Sinv, F), 0.0))


class VtrLearner:
    """Finite-horizon learner for a linear mixture SSP with known costs and known B_star.

    ``beta_scale`` multiplies beta_hat inside Q (1.0 is the listed radius);
    the variance correction always uses the listed radii.
    """

    def __init__(self, env, H, B_star, delta=0.05, lam=1.0, beta_scale=1.0, record=False):
        self.phi_mix = np.asarray(env.phi_mix)
        self.c = np.asarray(env.c, dtype=float)
        self.S, self.A, self.d = env.n_states, env.n_actions, env.d
        self.goal = self.S
        self.H, self.B_star = int(H), float(B_star)
        self.delta, self.lam, self.beta_scale = float(delta), float(lam), float(beta_scale)
        d = self.d
        self.Sigma_hat = lam * np.eye(d)
        self.Sigma_tilde = lam * np.eye(d)
        self.b_hat = np.zeros(d)
        self.b_tilde = np.zeros(d)
        self.theta_hat = np.zeros(d)
        self.theta_tilde = np.zeros(d)
        self.m = 0
        self.record = record
        self.sigma_sq: list[float] = []
        self.diagnostics: list[dict] = []
        self._n_obs = 0
        self._buf = []

    def terminal_values(self):
        v = np.full(self.S + 1, 2.0 * self.B_star)
        v[self.goal] = 0.0
        return v

    def phi_of(self, F):
        return np.einsum("satd,t->sad", self.phi_mix, F)

    def begin_interval(self, s1):
        self.m += 1
        self._n_obs = 0
        self._buf = []
        self.betas = vtr_betas(self.m, self.d, self.H, self.B_star, self.lam, self.delta)
        eye = np.eye(self.d)
        self.Sigma_hat_inv = cho_solve(cho_factor(self.Sigma_hat, lower=True), eye)
        self.Sigma_tilde_inv = cho_solve(cho_factor(self.Sigma_tilde, lower=True), eye)
        bh = self.beta_scale * self.betas[0]
        S, A, H = self.S, self.A, self.H
        self.V = np.zeros((H + 1, S + 1))
        self.Q = np.zeros((H, S + 1, A))
        self.phi_V = np.zeros((H, S, A, self.d))
        self.V[H] = self.terminal_values()
        for h in range(H - 1, -1, -1):
            phiV = self.phi_of(self.V[h + 1])
            self.phi_V[h] = phiV
            self.Q[h, :S] = self.c + phiV @ self.theta_hat - bh * _norms(phiV, self.Sigma_hat_inv)
            self.V[h] = np.clip(self.Q[h], 0.0, 3.0 * self.B_star).min(axis=1)
            self.V[h, self.goal] = 0.0

    def value(self, h, s):
        return float(self.V[h - 1, s])

    def act(self, h, s):
        if s == self.goal:
            return 0
        return int(np.argmin(self.Q[h - 1, s]))

    def observe(self, h, s, a, c, s_next):
        self._n_obs += 1
        if s == self.goal:
            return
        B = self.B_star
        _, bt, bc = self.betas
        v_next = self.V[h]
        fV = self.phi_V[h - 1, s, a]
        fV2 = np.einsum("td,t->d", self.phi_mix[s, a], v_next**2)
        nu = (np.clip(fV2 @ self.theta_tilde, 0.0, 9 * B**2)
              - np.clip(fV @ self.theta_hat, 0.0, 3 * B) ** 2)
        n_tilde = math.sqrt(max(fV2 @ self.Sigma_tilde_inv @ fV2, 0.0))
        n_hat = math.sqrt(max(fV @ self.Sigma_hat_inv @ fV, 0.0))
        E = min(9 * B**2, bt * n_tilde) + min(9 * B**2, 6 * B * bc * n_hat)
        sb = sigma_bar(nu, E, B, self.d)
        target = float(v_next[s_next])
        self._buf.append((fV, fV2, sb**2, target))
        self.sigma_sq.append(sb**2)
        if self.record:
            true_p = np.asarray(self.phi_mix[s, a]) @ self._theta_star if hasattr(self, "_theta_star") else None
            row = {"m": self.m, "h": h, "nu": float(nu), "E": float(E), "sigma_sq": sb**2}
            if true_p is not None:
                mean = true_p @ v_next
                row["true_var"] = float(true_p @ v_next**2 - mean**2)
            self.diagnostics.append(row)

    def attach_truth(self, theta_star):
        """White-box hook: lets recorded diagnostics carry the true one-step variance."""
        self._theta_star = np.asarray(theta_star, dtype=float)

    def end_interval(self):
        if self._n_obs != self.H:
            raise RuntimeError(f"expected {self.H} observations, got {self._n_obs}")
        for fV, fV2, s2, target in self._buf:
            self.Sigma_hat += np.outer(fV, fV) / s2
            self.b_hat += fV * target / s2
            self.Sigma_tilde += np.outer(fV2, fV2)
            self.b_tilde += fV2 * target**2
        self.Sigma_hat = 0.5 * (self.Sigma_hat + self.Sigma_hat.T)
        self.Sigma_tilde = 0.5 * (self.Sigma_tilde + self.Sigma_tilde.T)
        self.theta_hat = cho_solve(cho_factor(self.Sigma_hat, lower=True), self.b_hat)
        self.theta_tilde = cho_solve(cho_factor(self.Sigma_tilde, lower=True), self.b_tilde)
        self._buf = []
        return False

    def coverage(self, theta_star) -> bool:
        """White-box check ||theta_star - theta_hat||_{Sigma_hat} <= beta_hat for the coming interval."""
        diff = np.asarray(theta_star) - self.theta_hat
        return math.sqrt(diff @ self.Sigma_hat @ diff) <= vtr_betas(
            self.m + 1, self.d, self.H, self.B_star, self.lam, self.delta)[0]


def make_vtr(env, H, B_star, delta=0.05, beta_scale=1.0, record=False):
    return VtrLearner(env, H, B_star, delta=delta, beta_scale=beta_scale, record=record)
