"""Batch experiments: config parsing, seed batteries, per-run CSV traces, summaries and verdicts."""

from __future__ import annotations

import copy
import json
import logging
import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from . import env as E
from .io import dumps, env_from_dict, env_to_dict, load_env, load_json, save_json
from .lsvi import beta as lsvi_beta
from .lsvi import make_lsvi
from .mixture import make_vtr
from .oracle import OracleSolution, solve_fh, solve_ssp
from .reduction import (PfConfig, ReductionConfig, bound_M_formula, compute_regret, horizon_4tstar, horizon_log,
                        run_fha, run_fha_pf, run_fha_restart)
from .tabular_hf import make_mvp
from .trace import RunTrace
from .vagopo import VagopoParams, vagopo_run

log = logging.getLogger(__name__)

EXIT_PASS, EXIT_INVARIANT, EXIT_CONFIG = 0, 2, 3
ALGOS = ("lsvi", "mvp", "vtr", "vagopo")
DEFAULT_THRESHOLDS = {"optimism_rate": 0.9, "lemma_fha_rate": 0.99, "B_t_rate": 0.95, "binomial_slack_sigmas": 3.0}


class ConfigError(ValueError):
    pass


# ---- config -----------------------------------------------------------------


@dataclass
class ExperimentConfig:
    envs: list
    algos: list
    K: list
    seeds: list
    H: dict = field(default_factory=lambda: {"policy": "auto_4Tstar"})
    terminal_cost: str = "two_B_star"
    restart_threshold: int | None = None
    pf: dict | None = None
    step_cap: int | None = None
    write_traces: bool = True
    thresholds: dict = field(default_factory=dict)
    name: str = "experiment"

    @classmethod
    def from_dict(cls, d, base_dir=None):
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known - {"out"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            cfg = cls(**{k: v for k, v in d.items() if k in known})
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        cfg._base_dir = Path(base_dir) if base_dir else Path(".")
        cfg.validate()
        return cfg

    def validate(self):
        if not self.seeds:
            raise ConfigError("seeds must be nonempty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seed collision: seeds must be distinct")
        if not self.K or any(int(k) < 2 for k in self.K):
            raise ConfigError("every K must be >= 2")
        if not self.envs or not self.algos:
            raise ConfigError("need at least one env and one algo")
        names = [e.get("name") for e in self.envs]
        if None in names or len(set(names)) != len(names):
            raise ConfigError("every env needs a distinct name")
        for a in self.algos:
            if a.get("algo") not in ALGOS:
                raise ConfigError(f"invalid algo name {a.get('algo')!r}; choose from {ALGOS}")
        if self.H.get("policy") not in ("auto_4Tstar", "auto_log", "fixed"):
            raise ConfigError(f"unknown H policy {self.H.get('policy')!r}")
        if self.H["policy"] == "fixed" and int(self.H.get("n", 0)) < 1:
            raise ConfigError("fixed H policy needs n >= 1")
        if self.terminal_cost not in ("two_B_star", "zero"):
            raise ConfigError("terminal_cost must be two_B_star or zero")

    @property
    def all_thresholds(self):
        th = dict(DEFAULT_THRESHOLDS)
        th.update(self.thresholds)
        return th

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return ExperimentConfig.from_dict(raw, base_dir=path.parent)


def build_env(spec: dict, base_dir=Path(".")):
    """Environment from an inline spec: a file ref, inline arrays, or a generator call."""
    spec = dict(spec)
    if "file" in spec:
        env = load_env(Path(base_dir) / spec["file"])
    elif "kind" in spec:
        env = env_from_dict(spec)
    else:
        gen = spec.get("gen")
        if gen == "gap":
            env = E.make_gap_example(spec.get("p", 0.5), spec.get("q", 0.1), spec.get("eps", 0.01))
        elif gen == "lower_bound":
            K = int(spec["K"])
            rho = E.parse_rho(spec["rho"], K) if "rho" in spec else None
            rng = np.random.default_rng(spec.get("seed", 0)) if rho is None else None
            env = E.make_lower_bound_instance(int(spec["d"]), K, float(spec["B"]), rho=rho, rng=rng)
        elif gen == "two_route":
            env = E.make_two_route(spec.get("p_low", 0.5), spec.get("p_high", 0.6))
        elif gen == "mixture_fixture":
            env = E.make_mixture_fixture(d=spec.get("d", 3), n_states=spec.get("n_states", 3),
                                         n_actions=spec.get("n_actions", 2), seed=spec.get("seed", 0))
        else:
            raise ConfigError(f"env {spec.get('name')!r}: need 'file', 'kind' or a known 'gen'")
    embed = spec.get("embed")
    if embed == "one_hot":
        env = E.tabular_to_linear(env)
    elif embed == "mixture":
        env = E.tabular_to_mixture(env)
    elif embed is not None:
        raise ConfigError(f"unknown embed {embed!r}")
    if spec.get("perturb"):
        env = E.perturb_costs(env, float(spec["perturb"]))
    return env


def choose_H(policy: dict, sol: OracleSolution, env, K: int) -> int:
    p = policy["policy"]
    if p == "fixed":
        return int(policy["n"])
    if p == "auto_4Tstar":
        return horizon_4tstar(sol.T_star, K)
    if sol.c_min <= 0:
        raise ConfigError("auto_log horizon needs c_min > 0")
    d = getattr(env, "d", env.n_states * env.n_actions)
    return horizon_log(sol.B_star, sol.c_min, d, K, float(policy.get("b_prime", 1.0)))


# ---- probes -------------------------------------------------------------------


class OptimismProbe:
    """Wraps an FH learner and counts visited (m, h) with V^m_h(s) <= V*_h(s) + tol."""

    def __init__(self, learner, fh_V, goal, tol=1e-9, counter=None):
        self.learner = learner
        self.fh_V = fh_V
        self.goal = goal
        self.tol = tol
        self.counter = counter if counter is not None else {"hits": 0, "total": 0}

    def begin_interval(self, s1):
        self.learner.begin_interval(s1)

    def act(self, h, s):
        a = self.learner.act(h, s)
        if s != self.goal:
            v = self.learner.value(h, s)
            self.counter["total"] += 1
            self.counter["hits"] += int(v <= self.fh_V[h - 1, s] + self.tol)
        return a

    def observe(self, h, s, a, c, s_next):
        self.learner.observe(h, s, a, c, s_next)

    def end_interval(self):
        return self.learner.end_interval()


# ---- single run -----------------------------------------------------------------


def run_name(env_name, algo_spec, K, seed):
    tag = algo_spec.get("label", algo_spec["algo"])
    return f"{env_name}__{tag}__K{K}__s{seed}"


def _fh_V(env, H, terminal, cache):
    key = (H, terminal.kind, terminal.B_star)
    sol = cache.get(key)
    if sol is None:
        sol = solve_fh(E.fh_wrap(env, H, terminal))
        cache[key] = sol
    return sol


def execute_run(env, sol: OracleSolution, algo_spec: dict, K: int, seed: int, cfg: ExperimentConfig):
    """One (env, algo, K, seed) run. Returns (trace, result dict)."""
    algo = algo_spec["algo"]
    rng = np.random.default_rng(seed)
    result = {"algo": algo, "K": K, "seed": seed}
    if algo == "vagopo":
        params = VagopoParams(**{k: v for k, v in algo_spec.items() if k in VagopoParams.__dataclass_fields__})
        ups = []
        trace, learner = vagopo_run(env, K, params, rng, step_cap=cfg.step_cap)
        for u in learner.updates:
            ups.append(u["V"] <= sol.V_star[u["s"]] + float(algo_spec.get("grid_slack", 1e-9))
                       if u["s"] != env.goal else True)
        B_trace = trace["B_t"]
        result.update(
            optimism_hits=int(sum(ups)), optimism_total=len(ups),
            B_t_ok=bool(np.all(B_trace <= 2 * sol.B_star + 1e-12)),
            B_t_max=float(B_trace.max()) if len(B_trace) else float(params.B_init),
        )
        rep = compute_regret(trace, sol)
        result.update(R_K=rep.R_K, complete=rep.complete, total_cost=rep.total_cost)
        return trace, result

    terminal = E.two_B_star(sol.B_star) if cfg.terminal_cost == "two_B_star" else E.zero()
    cache: dict = {}
    counter = {"hits": 0, "total": 0}
    B = algo_spec.get("B", "auto")
    B = 3.0 * sol.B_star if B == "auto" else float(B)
    delta = float(algo_spec.get("delta", 0.05))

    def base_learner(H, B_est, term):
        if algo == "lsvi":
            return make_lsvi(env, H, B_est, term, delta=delta, lam=float(algo_spec.get("lambda", 1.0)),
                             beta_scale=float(algo_spec.get("beta_scale", 1.0)))
        if algo == "mvp":
            return make_mvp(env, H, B_est, delta=delta, bonus_scale=float(algo_spec.get("bonus_scale", 1.0)))
        B_star = algo_spec.get("B_star", "auto")
        B_star = sol.B_star if B_star == "auto" else float(B_star)
        return make_vtr(env, H, B_star, delta=delta, beta_scale=float(algo_spec.get("beta_scale", 1.0)))

    def probed(H, B_est, term):
        # the tabular learner's values end at zero, so it is compared with the zero-terminal oracle
        ref = E.zero() if algo == "mvp" else term
        if algo == "vtr":
            ref = E.two_B_star(sol.B_star)
        fh = _fh_V(env, H, ref, cache)
        return OptimismProbe(base_learner(H, B_est, term), fh.V, env.goal, counter=counter)

    if cfg.pf is not None:
        if algo != "lsvi":
            raise ConfigError("the parameter-free driver is offered for lsvi only")
        pf = PfConfig(**cfg.pf)
        if not pf.d or "d" not in cfg.pf:
            pf.d = env.d
        rc = ReductionConfig(K=K, H=1, step_cap=cfg.step_cap, pf=pf)
        trace = run_fha_pf(env, lambda B_est, H: probed(H, B_est, E.zero()), rc, rng)
        fh = {H: _fh_V(env, H, E.zero(), cache) for H in set(trace.meta["interval_H"])}
    else:
        H = choose_H(cfg.H, sol, env, K)
        rc = ReductionConfig(K=K, H=H, terminal_cost=terminal, restart_threshold=cfg.restart_threshold,
                             step_cap=cfg.step_cap)
        if cfg.restart_threshold is not None:
            trace = run_fha_restart(env, lambda: probed(H, B, terminal), rc, rng)
        else:
            trace = run_fha(env, probed(H, B, terminal), rc, rng)
        fh = _fh_V(env, H, terminal, cache)
    rep = compute_regret(trace, sol, fh)
    Hs = trace.meta["interval_H"]
    H0 = Hs[0] if Hs else 0
    d = getattr(env, "d", env.n_states * env.n_actions)
    result.update(rep.to_dict())
    result.update(
        H=H0,
        optimism_hits=counter["hits"],
        optimism_total=counter["total"],
        anomalies=len(trace.meta["anomalies"]),
        epochs=len(trace.meta["epochs"]),
        overlay={
            "bound_M_formula": bound_M_formula(d**2 * B * H0, math.sqrt(d**3 * B**2 * H0), sol.B_star, K),
            "beta_1": lsvi_beta(1, d, B, H0, delta) if algo == "lsvi" else None,
        },
    )
    return trace, result


# ---- experiment -------------------------------------------------------------------


def _task(args):
    env_dict, sol_dict, algo_spec, K, seed, cfg_dict, out_dir, env_name = args
    env = env_from_dict(env_dict)
    sol = OracleSolution.from_dict(sol_dict)
    cfg = ExperimentConfig.from_dict(cfg_dict)
    trace, result = execute_run(env, sol, algo_spec, K, seed, cfg)
    result["env"] = env_name
    result["label"] = algo_spec.get("label", algo_spec["algo"])
    name = run_name(env_name, algo_spec, K, seed)
    result["run"] = name
    if out_dir is not None and cfg.write_traces:
        trace.to_csv(Path(out_dir) / f"{name}.csv")
        save_json({"env": env_name, "result": result, "meta": trace.meta}, Path(out_dir) / f"{name}.meta.json")
    return result


def _workers():
    raw = os.environ.get("SSPLAB_WORKERS")
    if not raw:
        return 1
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"SSPLAB_WORKERS must be an integer, got {raw!r}")


def run_experiment(cfg: ExperimentConfig, out_dir=None, workers: int | None = None) -> dict:
    """Run every (env, algo, K, seed) task; write traces and ``summary.json`` under ``out_dir``."""
    base = getattr(cfg, "_base_dir", Path("."))
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
    envs, sols = {}, {}
    for spec in cfg.envs:
        env = build_env(spec, base)
        E.validate(env)
        try:
            sol = solve_ssp(env)
        except Exception as exc:
            raise ConfigError(f"env {spec['name']!r} is not solvable: {exc}") from exc
        envs[spec["name"]] = env
        sols[spec["name"]] = sol
        if out_dir is not None:
            save_json(env_to_dict(env), out_dir / f"env_{spec['name']}.json")
            save_json(sol.to_dict(), out_dir / f"oracle_{spec['name']}.json")
    cfg_dict = cfg.to_dict()
    tasks = []
    for name, env in envs.items():
        for algo_spec in cfg.algos:
            for K in cfg.K:
                for seed in cfg.seeds:
                    tasks.append((env_to_dict(env), sols[name].to_dict(), algo_spec, int(K), int(seed), cfg_dict,
                                  str(out_dir) if out_dir is not None else None, name))
    n = workers if workers is not None else _workers()
    if n > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=n) as pool:
            results = list(pool.map(_task, tasks))
    else:
        results = [_task(t) for t in tasks]
    summary = summarize(results, cfg.all_thresholds, sols)
    summary["config"] = cfg_dict
    if out_dir is not None:
        (out_dir / "summary.json").write_text(dumps(summary, indent=1) + "\n")
    return summary


# ---- summaries ---------------------------------------------------------------------


@dataclass
class RateFit:
    exponent: float
    intercept: float
    stderr: float
    ci: tuple
    n_points: int
    dropped: int

    def to_dict(self):
        return dict(self.__dict__)


def fit_rate(points) -> RateFit:
    """OLS of ln R on ln K. Nonpositive R are dropped with a warning; needs >= 3 remaining points."""
    pts = [(float(k), float(r)) for k, r in points]
    kept = [(k, r) for k, r in pts if r > 0 and k > 0]
    dropped = len(pts) - len(kept)
    if dropped:
        warnings.warn(f"fit_rate: dropped {dropped} nonpositive point(s)", RuntimeWarning, stacklevel=2)
    if len(kept) < 3:
        raise ValueError(f"fit_rate needs >= 3 positive points, got {len(kept)}")
    x = np.log([k for k, _ in kept])
    y = np.log([r for _, r in kept])
    res = stats.linregress(x, y)
    n = len(kept)
    half = float(stats.t.ppf(0.975, n - 2) * res.stderr) if n > 2 else math.inf
    return RateFit(float(res.slope), float(res.intercept), float(res.stderr),
                   (float(res.slope) - half, float(res.slope) + half), n, dropped)


def _rate_with_slack(hits, total, target, sigmas):
    if total == 0:
        return {"rate": 1.0, "n": 0, "threshold": target, "passed": True}
    rate = hits / total
    slack = sigmas * math.sqrt(target * (1 - target) / total)
    return {"rate": rate, "n": total, "threshold": target, "passed": rate >= target - slack}


def invariant_suite(results: list[dict], thresholds: dict | None = None) -> dict:
    """Per-invariant pass rates against thresholds plus an overall PASS/FAIL verdict."""
    th = dict(DEFAULT_THRESHOLDS)
    th.update(thresholds or {})
    sig = float(th["binomial_slack_sigmas"])
    report = {"thresholds": dict(thresholds) if thresholds is not None else th, "invariants": {}}
    slack_runs = [r for r in results if r.get("lemma_fha_slack") is not None and not _isnan(r["lemma_fha_slack"])]
    if slack_runs:
        ok = sum(1 for r in slack_runs if r["lemma_fha_slack"] >= -1e-9)
        n = len(slack_runs)
        report["invariants"]["lemma_fha"] = {"rate": ok / n, "n": n, "threshold": th["lemma_fha_rate"],
                                             "passed": ok / n >= th["lemma_fha_rate"]}
    hits = sum(r.get("optimism_hits", 0) for r in results)
    total = sum(r.get("optimism_total", 0) for r in results)
    if total:
        report["invariants"]["optimism"] = _rate_with_slack(hits, total, th["optimism_rate"], sig)
    bt = [r["B_t_ok"] for r in results if "B_t_ok" in r]
    if bt:
        rate = sum(bt) / len(bt)
        report["invariants"]["B_t_le_2B_star"] = {"rate": rate, "n": len(bt), "threshold": th["B_t_rate"],
                                                  "passed": rate >= th["B_t_rate"]}
    failed = [k for k, v in report["invariants"].items() if not v["passed"]]
    report["failed"] = failed
    report["verdict"] = "FAIL" if failed else "PASS"
    return report


def _isnan(x):
    return isinstance(x, float) and math.isnan(x)


def summarize(results: list[dict], thresholds: dict | None = None, sols=None) -> dict:
    groups: dict = {}
    for r in results:
        groups.setdefault((r["env"], r.get("label", r["algo"])), []).append(r)
    per = []
    for (env_name, label), rs in sorted(groups.items()):
        byK = {}
        for r in rs:
            byK.setdefault(r["K"], []).append(r["R_K"])
        rows = [{"K": K, "mean_R_K": float(np.mean(v)), "std_R_K": float(np.std(v)), "n": len(v)}
                for K, v in sorted(byK.items())]
        entry = {"env": env_name, "algo": label, "regret": rows}
        if len(rows) >= 3:
            try:
                entry["rate_fit"] = fit_rate([(row["K"], row["mean_R_K"]) for row in rows]).to_dict()
            except ValueError as exc:
                entry["rate_fit"] = {"error": str(exc)}
        slacks = [r["lemma_fha_slack"] for r in rs if r.get("lemma_fha_slack") is not None]
        if slacks:
            entry["lemma_fha_slack"] = {"min": float(np.min(slacks)), "mean": float(np.mean(slacks)),
                                        "max": float(np.max(slacks))}
        tot = sum(r.get("optimism_total", 0) for r in rs)
        if tot:
            entry["optimism_rate"] = sum(r.get("optimism_hits", 0) for r in rs) / tot
        overlays = [(r["K"], r["M"], r["overlay"]["bound_M_formula"]) for r in rs if "overlay" in r]
        if overlays:
            entry["M_vs_bound"] = [{"K": K, "M": M, "bound_M_formula": b} for K, M, b in overlays]
        per.append(entry)
    report = invariant_suite(results, thresholds)
    return {"runs": results, "groups": per, "invariants": report}


# ---- artifact checks -----------------------------------------------------------------


def check_dir(runs_dir, oracle_path=None, thresholds: dict | None = None) -> dict:
    """Recompute regret and lemma slack from the CSVs and sidecar metadata, then tally invariants."""
    runs_dir = Path(runs_dir)
    metas = sorted(runs_dir.glob("*.meta.json"))
    if not metas:
        raise FileNotFoundError(f"no run artifacts (*.meta.json) in {runs_dir}")
    oracle = OracleSolution.from_dict(load_json(oracle_path)) if oracle_path else None
    if thresholds is None and (runs_dir / "summary.json").exists():
        thresholds = load_json(runs_dir / "summary.json").get("invariants", {}).get("thresholds")
    envs, sols, fh_cache = {}, {}, {}
    results = []
    for meta_path in metas:
        side = load_json(meta_path)
        csv = meta_path.with_name(meta_path.name[: -len(".meta.json")] + ".csv")
        if not csv.exists():
            raise FileNotFoundError(f"missing trace {csv}")
        name = side["env"]
        if name not in envs:
            env_file = runs_dir / f"env_{name}.json"
            if not env_file.exists():
                raise FileNotFoundError(f"missing environment file {env_file}")
            envs[name] = load_env(env_file)
            sols[name] = oracle if oracle is not None else solve_ssp(envs[name])
        env, sol = envs[name], sols[name]
        if sol.V_star.shape[0] != env.n_states:
            raise ValueError(f"oracle does not match environment {name!r}")
        trace = RunTrace.from_csv(csv, meta=side["meta"])
        res = dict(side["result"])
        if "interval_H" in trace.meta:
            terminal = E.TerminalCost.from_dict(trace.meta["terminal"])
            fh = {}
            for H in set(trace.meta["interval_H"]):
                key = (name, H, terminal.kind, terminal.B_star)
                if key not in fh_cache:
                    fh_cache[key] = solve_fh(E.fh_wrap(env, H, terminal))
                fh[H] = fh_cache[key]
            rep = compute_regret(trace, sol, fh)
            res.update(rep.to_dict())
        else:
            res["R_K"] = compute_regret(trace, sol).R_K
        results.append(res)
    report = invariant_suite(results, thresholds)
    report["runs"] = len(results)
    return report


def exit_code(report: dict) -> int:
    verdict = report.get("verdict") or report.get("invariants", {}).get("verdict")
    return EXIT_PASS if verdict == "PASS" else EXIT_INVARIANT


def summarize_dir(runs_dir) -> dict:
    runs_dir = Path(runs_dir)
    path = runs_dir / "summary.json"
    if path.exists():
        return load_json(path)
    metas = sorted(runs_dir.glob("*.meta.json"))
    if not metas:
        raise FileNotFoundError(f"nothing to summarize in {runs_dir}")
    return summarize([load_json(m)["result"] for m in metas])


def config_copy(cfg: ExperimentConfig, **changes) -> ExperimentConfig:
    d = copy.deepcopy(cfg.to_dict())
    d.update(changes)
    return ExperimentConfig.from_dict(d, base_dir=getattr(cfg, "_base_dir", None))
