"""Finite-horizon approximation of SSP: plain, restarting and parameter-free drivers.

A finite-horizon learner is driven interval by interval. When the goal is
reached inside an interval the learner keeps receiving zero-cost goal
observations until layer H; the next interval then starts a fresh episode
at ``s_init``. Otherwise the next interval continues from the state where the
previous one stopped.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

from .env import TerminalCost, zero
from .trace import RunTrace, TraceRecorder

log = logging.getLogger(__name__)


class FhLearner(Protocol):
    def begin_interval(self, s1: int) -> None: ...

    def act(self, h: int, s: int) -> int: ...

    def observe(self, h: int, s: int, a: int, c: float, s_next: int) -> None: ...

    def end_interval(self) -> bool: ...


@dataclass
class PfConfig:
    """Parameter-free doubling of the B estimate.

    ``U(B)`` follows the shape gamma0/B + gamma1^2/B^2 + gamma1 sqrt(K)/B + H,
    whose constants the theory leaves unspecified; ``u_c0`` scales the regret
    terms, ``u_c1`` the horizon term and ``u_log_power`` the log factor
    ln(e + B K). gamma0/gamma1 default to the LSVI forms d^2 B H and
    sqrt(d^3 B^2 H).
    """

    B_init: float = 1.0
    d: int = 2
    u_c0: float = 1.0
    u_c1: float = 1.0
    u_log_power: float = 1.0
    gamma0: Callable[[float, int], float] | None = None
    gamma1: Callable[[float, int], float] | None = None

    def U(self, B: float, H: int, K: int) -> float:
        g0 = self.gamma0(B, H) if self.gamma0 else self.d**2 * B * H
        g1 = self.gamma1(B, H) if self.gamma1 else math.sqrt(self.d**3 * B**2 * H)
        core = self.u_c0 * (g0 / B + g1**2 / B**2 + g1 * math.sqrt(K) / B) + self.u_c1 * H
        return core * math.log(math.e + B * K) ** self.u_log_power


@dataclass
class ReductionConfig:
    K: int
    H: int
    terminal_cost: TerminalCost = field(default_factory=zero)
    restart_threshold: int | None = None
    step_cap: int | None = None
    pf: PfConfig | None = None

    def __post_init__(self):
        if self.H < 1:
            raise ValueError("H must be >= 1")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.restart_threshold is not None and self.restart_threshold < 1:
            raise ValueError("restart_threshold must be >= 1")

    def cap(self, H: int | None = None) -> int:
        return self.step_cap if self.step_cap is not None else 50 * self.K * (H or self.H)


def pf_horizon(B: float, c_min: float, K: int) -> int:
    """Horizon used by the parameter-free driver: ceil((10 B / c_min) ln(8 B K))."""
    return math.ceil(10.0 * B / c_min * math.log(8.0 * B * K))


def horizon_4tstar(T_star: float, K: int) -> int:
    return math.ceil(4.0 * T_star * math.log(4.0 * K))


def horizon_log(B_star: float, c_min: float, d: int, K: int, b_prime: float = 1.0) -> int:
    return math.ceil(b_prime * B_star / c_min * math.log(d * B_star * K / c_min))


def bound_M_formula(gamma0: float, gamma1: float, B_star: float, K: int) -> float:
    """K + gamma1^2 / B_star^2 + gamma0 / B_star, log factors dropped (diagnostic only)."""
    return K + gamma1**2 / B_star**2 + gamma0 / B_star


def _drive(env, make_learner, cfg: ReductionConfig, rng, *, restart_every=None, pf=None) -> RunTrace:
    goal = env.goal
    cdf = env.cdf
    costs = env.c
    K = cfg.K
    terminal = zero() if pf is not None else cfg.terminal_cost

    B_cur = float("nan")
    if pf is not None:
        B_cur = float(pf.B_init)
        H = pf_horizon(B_cur, env.c_min, K)
        learner = make_learner(B_cur, H)
    else:
        H = cfg.H
        learner = make_learner()
    cap = cfg.cap(H)

    rec = TraceRecorder()
    k, m, epoch = 1, 0, 1
    s = env.s_init
    real_steps = 0
    bad_since_double = 0
    complete, capped = False, False
    starts, ends, interval_H, anomalies, restarts = [], [], [], [], []
    epochs = [{"epoch": 1, "B": B_cur, "H": H, "first_interval": 1}]
    pending_event = ""

    while k <= K:
        if restart_every is not None and m > 0 and m % restart_every == 0:
            learner = make_learner()
            restarts.append(m)
            pending_event = "restart"
        m += 1
        starts.append(s)
        interval_H.append(H)
        learner.begin_interval(s)
        for h in range(1, H + 1):
            a = learner.act(h, s)
            if s != goal:
                row = cdf[s, a]
                s_next = int(np.searchsorted(row, rng.random() * row[-1], side="right"))
                c = float(costs[s, a])
                dummy = False
                real_steps += 1
            else:
                s_next, c, dummy = goal, 0.0, True
            learner.observe(h, s, a, c, s_next)
            rec.append(k, m, h, s, a, c, s_next, dummy, epoch, B_cur, pending_event)
            pending_event = ""
            s = s_next
            if real_steps >= cap and not dummy:
                capped = True
                break
        if capped:
            ends.append(s)
            break
        ends.append(s)
        anomaly = bool(learner.end_interval())
        if anomaly:
            anomalies.append(m)
        if s == goal:
            k += 1
            s = env.s_init
        else:
            bad_since_double += 1
        if pf is not None and k <= K and (bad_since_double > pf.U(B_cur, H, K) or anomaly):
            reason = "anomaly" if anomaly else "bad_intervals"
            B_cur *= 2.0
            H = pf_horizon(B_cur, env.c_min, K)
            cap = max(cap, cfg.cap(H))
            learner = make_learner(B_cur, H)
            bad_since_double = 0
            epoch += 1
            epochs.append({"epoch": epoch, "B": B_cur, "H": H, "first_interval": m + 1, "reason": reason})
            pending_event = f"double_B:{reason}"
    else:
        complete = True

    if capped:
        log.warning("step cap %d reached after %d episodes; trace is partial", cap, k - 1)
    return rec.finish(
        complete=complete,
        K=K,
        episodes=k - 1,
        H=cfg.H if pf is None else None,
        intervals=m,
        interval_start=starts,
        interval_end=ends,
        interval_H=interval_H,
        anomalies=anomalies,
        restarts=restarts,
        epochs=epochs,
        terminal=terminal.to_dict(),
        real_steps=real_steps,
        step_cap=cap,
        s_init=env.s_init,
        goal=goal,
    )


def run_fha(env, learner: FhLearner, cfg: ReductionConfig, rng) -> RunTrace:
    if cfg.restart_threshold is not None or cfg.pf is not None:
        raise ValueError("run_fha takes neither a restart threshold nor a pf block")
    return _drive(env, lambda: learner, cfg, rng)


def run_fha_restart(env, learner_factory: Callable[[], FhLearner], cfg: ReductionConfig, rng) -> RunTrace:
    """Rebuild the learner each time the interval count reaches a multiple of the threshold."""
    if cfg.restart_threshold is None:
        raise ValueError("run_fha_restart needs cfg.restart_threshold")
    return _drive(env, learner_factory, cfg, rng, restart_every=cfg.restart_threshold)


def run_fha_pf(env, learner_factory: Callable[[float, int], FhLearner], cfg: ReductionConfig, rng) -> RunTrace:
    """Zero terminal cost, horizon tied to the running estimate B, B doubled on triggers."""
    if cfg.pf is None:
        raise ValueError("run_fha_pf needs cfg.pf")
    if env.c_min <= 0:
        raise ValueError("parameter-free driver needs c_min > 0; perturb the costs first")
    return _drive(env, learner_factory, cfg, rng, pf=cfg.pf)


@dataclass
class RegretReport:
    R_K: float
    R_tilde_M: float
    M: int
    K: int
    bad_intervals: int
    lemma_fha_slack: float
    total_cost: float
    complete: bool

    def to_dict(self):
        return dict(self.__dict__)


def compute_regret(trace: RunTrace, oracle, fh_oracle=None, B_star: float | None = None) -> RegretReport:
    """R_K over real steps; finite-horizon regret including terminal costs per interval.

    ``fh_oracle`` may be a single FhOracleSolution or a mapping H -> solution
    (for parameter-free runs whose horizon changes between epochs).
    """
    real = trace.real
    costs = trace["cost"]
    total = float(costs[real].sum())
    episodes = int(trace.meta["episodes"])
    R_K = total - episodes * float(oracle.V_star[trace.meta["s_init"]])
    B_star = oracle.B_star if B_star is None else B_star
    goal = trace.meta["goal"]

    M = int(trace.meta.get("intervals", 0))
    starts = trace.meta.get("interval_start")
    ends = trace.meta.get("interval_end") or []
    bad = sum(1 for e in ends if e != goal)
    R_tilde = float("nan")
    if starts is not None and fh_oracle is not None:
        terminal = TerminalCost.from_dict(trace.meta["terminal"])
        Hs = trace.meta["interval_H"]
        per_interval = np.bincount(trace["m"], weights=costs, minlength=M + 1)[1:]
        # a capped run leaves its last interval unfinished; it is excluded
        n = len(ends) if trace.complete else len(ends) - 1
        R_tilde = 0.0
        for i in range(max(n, 0)):
            sol = fh_oracle[Hs[i]] if isinstance(fh_oracle, dict) else fh_oracle
            cf = terminal.level if ends[i] != goal else 0.0
            R_tilde += per_interval[i] + cf - sol.V[0, starts[i]]
    return RegretReport(
        R_K=R_K,
        R_tilde_M=R_tilde,
        M=M,
        K=episodes,
        bad_intervals=bad,
        lemma_fha_slack=R_tilde + B_star - R_K,
        total_cost=total,
        complete=trace.complete,
    )
