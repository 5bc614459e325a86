"""Desk-scale VA-GOPO: self-referential variance-aware confidence sets searched on a grid.

The exact algorithm optimizes over epsilon-nets whose size is astronomically
large even at d = 3. Here both nets are regular grids whose spacing is a
fixed fraction of the ball radius they cover:

* candidate weights w: spacing ``net_w * 3 sqrt(d) B`` inside B(3 sqrt(d) B),
* test directions nu: spacing ``net_nu * 6 sqrt(d) B`` inside B(6 sqrt(d) B).

Everything else (J_B, iota, clip_j, f_j, the lazy and overestimate triggers,
B doubling) follows the algorithm as stated.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass

import numpy as np

from .trace import RunTrace, TraceRecorder

log = logging.getLogger(__name__)

TRIGGERS = ("goal", "lazy", "overestimate")


# ---- scalar machinery -----------------------------------------------------


def clip_j(j, x):
    r = 2.0**j
    return np.clip(x, -r, r)


def f_j(j, x):
    return clip_j(j, x) * x


def g_j(j, x):
    """Quadratic inside [-2^j, 2^j], linear continuation outside."""
    r = 2.0**j
    x = np.asarray(x, dtype=float)
    return np.where(x > r, 2 * r * x - r * r, np.where(x < -r, -2 * r * x - r * r, x * x))


def clip_fns(j, x):
    """(clip_j(x), f_j(x), g_j(x))."""
    return clip_j(j, x), f_j(j, x), g_j(j, x)


def default_eps(c_min: float, d: int, K: int) -> float:
    return max(c_min / (150.0 * d**3 * K), 1e-8)


def j_range(eps: float, d: int, B: float) -> np.ndarray:
    lo = math.ceil(math.log2(eps))
    hi = math.ceil(math.log2(6.0 * math.sqrt(d) * B))
    return np.arange(lo, hi + 1)


def iota(d: int, B: float, t: int, eps: float, delta: float) -> float:
    return 2.0**11 * d * math.log(48.0 * d * B * t / (eps * delta))


def value_of(w, B, s, phi_plus, goal=None):
    """V_{w,B}(s) = min_a [phi(s,a)^T w] clipped to [0, 2B]; zero at the goal."""
    if goal is None:
        goal = phi_plus.shape[0] - 1
    if s == goal:
        return 0.0
    return float(np.clip(phi_plus[s] @ np.asarray(w, dtype=float), 0.0, 2.0 * B).min())


def values_all(W, B, phi_plus):
    """V_{w,B} over all of S+ for a batch of weights W (n, d) -> (n, S+1)."""
    q = np.einsum("sad,nd->nsa", phi_plus, W)
    V = np.clip(q, 0.0, 2.0 * B).min(axis=2)
    V[:, -1] = 0.0
    return V


def u_operator(env, w, B):
    """theta_star + sum_{s'} V_{w,B}(s') mu(s'). Uses the true model; tests only."""
    V = values_all(np.atleast_2d(np.asarray(w, dtype=float)), B, env.phi_plus())[0]
    return env.theta_star + V @ env.mu


def ball_grid(radius: float, spacing: float, d: int) -> np.ndarray:
    """Integer lattice points times ``spacing`` inside the closed ball, lexicographic order."""
    n = int(math.floor(radius / spacing + 1e-12))
    axis = np.arange(-n, n + 1)
    pts = np.array(list(itertools.product(axis, repeat=d)), dtype=float) * spacing
    keep = np.linalg.norm(pts, axis=1) <= radius * (1 + 1e-12)
    return pts[keep]


def grid_size(radius_over_spacing: float, d: int) -> int:
    n = int(math.floor(radius_over_spacing + 1e-12))
    axis = np.arange(-n, n + 1)
    return int(sum(1 for p in itertools.product(axis, repeat=d) if sum(x * x for x in p) <= radius_over_spacing**2 + 1e-9))


# ---- history --------------------------------------------------------------


class History:
    """Past transitions grouped by (s, a, s'), with count, sum of costs and sum of squared costs."""

    def __init__(self, phi_plus):
        self.phi_plus = phi_plus
        self.index: dict[tuple[int, int, int], int] = {}
        self.keys: list[tuple[int, int, int]] = []
        self.stats: list[list[float]] = []
        self.pair_counts: dict[tuple[int, int], int] = {}
        self.n = 0

    def add(self, s, a, c, s_next):
        key = (int(s), int(a), int(s_next))
        i = self.index.get(key)
        if i is None:
            i = len(self.keys)
            self.index[key] = i
            self.keys.append(key)
            self.stats.append([0.0, 0.0, 0.0])
        st = self.stats[i]
        st[0] += 1
        st[1] += c
        st[2] += c * c
        self.pair_counts[(key[0], key[1])] = self.pair_counts.get((key[0], key[1]), 0) + 1
        self.n += 1

    def arrays(self):
        if not self.keys:
            d = self.phi_plus.shape[2]
            return np.zeros((0, d)), np.zeros(0, dtype=int), np.zeros((0, 3))
        keys = np.array(self.keys)
        feats = self.phi_plus[keys[:, 0], keys[:, 1]]
        return feats, keys[:, 2], np.array(self.stats)

    def pair_arrays(self):
        if not self.pair_counts:
            return np.zeros((0, self.phi_plus.shape[2])), np.zeros(0)
        pairs = list(self.pair_counts)
        feats = np.array([self.phi_plus[s, a] for s, a in pairs])
        return feats, np.array([self.pair_counts[p] for p in pairs], dtype=float)


# ---- confidence set -------------------------------------------------------


@dataclass
class Membership:
    contained: bool
    in_ball: bool
    worst: float  # max over (nu, j) of (|lhs| - rhs) / rhs; <= 0 when contained


def _residual_sums(hist_arrays, W_cand, W_anchor, B, phi_plus):
    """Per group: sum of eps_i and sum of eps_i^2 for each (candidate, anchor) row."""
    feats, s_next, st = hist_arrays
    V = values_all(W_anchor, B, phi_plus)[:, s_next]  # (n, G)
    pred = W_cand @ feats.T  # (n, G)
    diff = pred - V
    n_g, sc, sc2 = st[:, 0], st[:, 1], st[:, 2]
    s1 = n_g * diff - sc
    s2 = n_g * diff**2 - 2 * diff * sc + sc2
    return s1, np.maximum(s2, 0.0)


def _check_batch(hist_arrays, W_cand, W_anchor, B, phi_plus, nus, js, iota_val, d):
    """Worst normalized violation per row and the ball test."""
    in_ball = np.linalg.norm(W_cand, axis=1) <= 3 * math.sqrt(d) * B * (1 + 1e-12)
    feats = hist_arrays[0]
    if feats.shape[0] == 0:
        return np.full(len(W_cand), -1.0), in_ball
    s1, s2 = _residual_sums(hist_arrays, W_cand, W_anchor, B, phi_plus)
    proj = feats @ nus.T  # (G, N)
    r = 2.0 ** js  # (J,)
    cl = np.clip(proj[:, :, None], -r, r)  # (G, N, J)
    lhs = np.abs(np.einsum("gnj,cg->cnj", cl, s1))
    rhs = np.sqrt(np.einsum("gnj,cg->cnj", cl**2, s2) * iota_val) + B * r * iota_val
    worst = ((lhs - rhs) / rhs).reshape(len(W_cand), -1).max(axis=1)
    return worst, in_ball


def omega_contains(history: History, w_candidate, w_anchor, B, params: "VagopoParams", eps: float) -> Membership:
    """Is ``w_candidate`` in Omega_t(w_anchor, B) for t = len(history) + 1?"""
    phi_plus = history.phi_plus
    d = phi_plus.shape[2]
    t = history.n + 1
    nus = params.nu_grid(d, B)
    js = j_range(eps, d, B)
    worst, in_ball = _check_batch(history.arrays(), np.atleast_2d(w_candidate), np.atleast_2d(w_anchor), B,
                                  phi_plus, nus, js, iota(d, B, t, eps, params.delta), d)
    ok = bool(in_ball[0] and worst[0] <= 0.0)
    return Membership(contained=ok, in_ball=bool(in_ball[0]), worst=float(worst[0]))


def potentials(pair_feats, pair_counts, nus, js):
    """Phi^j(nu) = sum_i f_j(phi_i^T nu) + 2^j ||nu||^2, shape (N, J)."""
    r = 2.0 ** js
    base = r[None, :] * (nus**2).sum(axis=1)[:, None]
    if pair_feats.shape[0] == 0:
        return base
    proj = pair_feats @ nus.T  # (P, N)
    f = np.clip(proj[:, :, None], -r, r) * proj[:, :, None]
    return base + np.einsum("p,pnj->nj", pair_counts, f)


def lazy_condition(Phi_t, Phi_tp, d) -> bool:
    return bool(np.any(Phi_t > 8.0 * d * d * Phi_tp))


# ---- learner ----------------------------------------------------------------


@dataclass
class VagopoParams:
    delta: float = 0.05
    eps_conf: float | None = None  # None -> c_min / (150 d^3 K), clamped at 1e-8
    net_w: float = 0.25
    net_nu: float = 0.5
    B_init: float = 1.0
    candidate_budget: int = 100_000
    chunk: int = 256

    def __post_init__(self):
        if self.net_w <= 0 or self.net_nu <= 0:
            raise ValueError("grid resolutions must be positive")
        if self.eps_conf is not None and self.eps_conf <= 0:
            raise ValueError("eps_conf must be positive")

    def w_grid(self, d, B):
        R = 3 * math.sqrt(d) * B
        return ball_grid(R, self.net_w * R, d)

    def nu_grid(self, d, B):
        R = 6 * math.sqrt(d) * B
        return ball_grid(R, self.net_nu * R, d)

    def check_budget(self, d):
        n = grid_size(1.0 / self.net_w, d)
        if n > self.candidate_budget:
            raise ValueError(f"candidate grid has {n} points, budget is {self.candidate_budget}")
        return n


class VagopoLearner:
    """Step-level learner. ``candidate_grid(B)`` may replace the default lattice (fixtures)."""

    def __init__(self, env, K, params: VagopoParams, candidate_grid=None):
        self.env = env
        self.phi_plus = env.phi_plus()
        self.d = env.d
        self.goal = env.goal
        self.params = params
        self.eps = params.eps_conf if params.eps_conf is not None else default_eps(env.c_min, env.d, K)
        if candidate_grid is None:
            params.check_budget(self.d)
            candidate_grid = lambda B: params.w_grid(self.d, B)  # noqa: E731
        self.candidate_grid = candidate_grid
        self.B = float(params.B_init)
        self.w = np.zeros(self.d)
        self.history = History(self.phi_plus)
        self.t = 1
        self.t_prime = 1
        self.Phi_tp = None
        self.updates: list[dict] = []
        self.trigger_counts = {k: 0 for k in TRIGGERS}
        self.infeasible = 0
        self._grid_cache: dict[float, np.ndarray] = {}

    # -- pieces used by update_step --
    def _nus(self):
        return self.params.nu_grid(self.d, self.B)

    def _js(self):
        return j_range(self.eps, self.d, self.B)

    def current_potentials(self):
        feats, counts = self.history.pair_arrays()
        return potentials(feats, counts, self._nus(), self._js())

    def lazy(self) -> bool:
        if self.Phi_tp is None:
            return False
        return lazy_condition(self.current_potentials(), self.Phi_tp, self.d)

    def overestimate(self, s) -> bool:
        return value_of(self.w, self.B, s, self.phi_plus, self.goal) == 2.0 * self.B

    def _grid(self, B):
        g = self._grid_cache.get(B)
        if g is None:
            g = np.asarray(self.candidate_grid(B), dtype=float)
            self._grid_cache[B] = g
        return g

    def search(self, s):
        """Grid minimizer of V_{w,B}(s) over self-consistent candidates, or None."""
        B, d = self.B, self.d
        W = self._grid(B)
        if s == self.goal:
            vals = np.zeros(len(W))
        else:
            vals = np.clip(W @ self.phi_plus[s].T, 0.0, 2 * B).min(axis=1)
        order = np.lexsort((np.arange(len(W)), np.linalg.norm(W, axis=1), vals))
        hist = self.history.arrays()
        nus, js = self._nus(), self._js()
        io = iota(d, B, self.t, self.eps, self.params.delta)
        step = self.params.chunk
        for lo in range(0, len(order), step):
            idx = order[lo:lo + step]
            Wc = W[idx]
            worst, in_ball = _check_batch(hist, Wc, Wc, B, self.phi_plus, nus, js, io, d)
            ok = np.flatnonzero(in_ball & (worst <= 0.0))
            if ok.size:
                i = idx[ok[0]]
                return W[i], float(vals[i])
        return None

    def update_step(self, s):
        """Search, doubling B while the minimizer's value exceeds B. Returns the event tags."""
        events = []
        while True:
            found = self.search(s)
            if found is None:
                self.infeasible += 1
                events.append("infeasible_grid")
                log.info("no feasible grid candidate at t=%d (B=%g); keeping previous w", self.t, self.B)
                break
            w, v = found
            self.w = w
            if v > self.B:
                self.B *= 2.0
                events.append("double_B")
            else:
                break
        self.t_prime = self.t
        self.Phi_tp = self.current_potentials()
        self.updates.append({"t": self.t, "s": int(s), "V": value_of(self.w, self.B, s, self.phi_plus, self.goal),
                             "B": self.B, "w": self.w.copy()})
        return events

    def act(self, s):
        return int(np.argmin(self.phi_plus[s] @ self.w))

    def observe(self, s, a, c, s_next):
        self.history.add(s, a, c, s_next)
        self.t += 1


def vagopo_run(env, K, params: VagopoParams | None = None, rng=None, step_cap=None, probe=None,
               candidate_grid=None) -> tuple[RunTrace, VagopoLearner]:
    """Run K episodes. ``probe(learner, s)`` is called before every action (white-box checks)."""
    params = params or VagopoParams()
    if rng is None:
        raise ValueError("rng is required")
    learner = VagopoLearner(env, K, params, candidate_grid=candidate_grid)
    cap = step_cap if step_cap is not None else 1000 * K
    rec = TraceRecorder()
    cdf, costs, goal = env.cdf, env.c, env.goal
    s = env.s_init
    k, epoch, h = 1, 0, 0
    prev_next = goal
    complete = False
    while True:
        if k > K:
            complete = True
            break
        if learner.t > cap:
            log.warning("step cap %d reached after %d episodes; trace is partial", cap, k - 1)
            break
        trigger = None
        if prev_next == goal:
            trigger = "goal"
        elif learner.lazy():
            trigger = "lazy"
        elif learner.overestimate(s):
            trigger = "overestimate"
        event = ""
        if trigger is not None:
            learner.trigger_counts[trigger] += 1
            extra = learner.update_step(s)
            epoch += 1
            h = 0
            event = ";".join([trigger] + extra)
        if probe is not None:
            probe(learner, s)
        a = learner.act(s)
        row = cdf[s, a]
        s_next = int(np.searchsorted(row, rng.random() * row[-1], side="right"))
        c = float(costs[s, a])
        h += 1
        rec.append(k, epoch, h, s, a, c, s_next, False, epoch, learner.B, event)
        learner.observe(s, a, c, s_next)
        prev_next = s_next
        if s_next == goal:
            k += 1
            s = env.s_init
        else:
            s = s_next
    trace = rec.finish(
        complete=complete,
        K=K,
        episodes=k - 1,
        s_init=env.s_init,
        goal=goal,
        epochs=epoch,
        triggers=dict(learner.trigger_counts),
        L_prime=learner.trigger_counts["overestimate"],
        infeasible_grid=learner.infeasible,
        B_final=learner.B,
        eps_conf=learner.eps,
        step_cap=cap,
    )
    return trace, learner
