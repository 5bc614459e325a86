"""JSON-compatible serialization with 17 significant digits for floats."""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .env import LinearMixtureSsp, LinearSsp, TabularSsp


def _fmt_float(x: float) -> str:
    if math.isnan(x):
        return "NaN"
    if math.isinf(x):
        return "Infinity" if x > 0 else "-Infinity"
    s = format(x, ".17g")
    if not any(ch in s for ch in ".en"):
        s += ".0"
    return s


def dumps(obj, indent: int | None = None) -> str:
    """Like ``json.dumps`` but floats always carry 17 significant digits."""

    def enc(o, level):
        pad = "" if indent is None else "\n" + " " * (indent * (level + 1))
        end = "" if indent is None else "\n" + " " * (indent * level)
        sep = ", " if indent is None else ","
        if isinstance(o, np.ndarray):
            o = o.tolist()
        if isinstance(o, (bool, np.bool_)):
            return "true" if o else "false"
        if o is None:
            return "null"
        if isinstance(o, (int, np.integer)):
            return str(int(o))
        if isinstance(o, (float, np.floating)):
            return _fmt_float(float(o))
        if isinstance(o, str):
            return json.dumps(o)
        if isinstance(o, dict):
            if not o:
                return "{}"
            items = [pad + json.dumps(str(k)) + ": " + enc(v, level + 1) for k, v in o.items()]
            return "{" + sep.join(items) + end + "}"
        if isinstance(o, (list, tuple)):
            if not o:
                return "[]"
            # numeric rows stay on one line
            if all(not isinstance(v, (dict, list, tuple, np.ndarray)) for v in o):
                return "[" + ", ".join(enc(v, level + 1) for v in o) + "]"
            return "[" + sep.join(pad + enc(v, level + 1) for v in o) + end + "]"
        raise TypeError(f"cannot serialize {type(o).__name__}")

    return enc(obj, 0)


def env_to_dict(env) -> dict:
    if isinstance(env, LinearSsp):
        return {
            "kind": "linear",
            "n_states": env.n_states,
            "n_actions": env.n_actions,
            "d": env.d,
            "phi": env.phi,
            "mu": env.mu,
            "theta_star": env.theta_star,
            "s_init": env.s_init,
            "cost_slack": env.cost_slack,
        }
    if isinstance(env, LinearMixtureSsp):
        return {
            "kind": "mixture",
            "n_states": env.n_states,
            "n_actions": env.n_actions,
            "d": env.d,
            "phi_mix": env.phi_mix,
            "theta_star": env.theta_star,
            "c": env.c,
            "s_init": env.s_init,
        }
    if isinstance(env, TabularSsp):
        return {
            "kind": "tabular",
            "n_states": env.n_states,
            "n_actions": env.n_actions,
            "P": env.P,
            "c": env.c,
            "s_init": env.s_init,
        }
    raise TypeError(f"cannot serialize {type(env).__name__}")


def env_from_dict(d: dict):
    kind = d.get("kind", "linear")
    if kind == "linear":
        env = LinearSsp(
            phi=np.array(d["phi"], dtype=float),
            mu=np.array(d["mu"], dtype=float),
            theta_star=np.array(d["theta_star"], dtype=float),
            s_init=int(d["s_init"]),
            cost_slack=float(d.get("cost_slack", 0.0)),
        )
        if env.n_states != d["n_states"] or env.n_actions != d["n_actions"] or env.d != d["d"]:
            raise ValueError("declared sizes do not match the arrays")
        return env
    if kind == "mixture":
        return LinearMixtureSsp(
            phi_mix=np.array(d["phi_mix"], dtype=float),
            theta_star=np.array(d["theta_star"], dtype=float),
            c=np.array(d["c"], dtype=float),
            s_init=int(d["s_init"]),
        )
    if kind == "tabular":
        return TabularSsp(P=np.array(d["P"], dtype=float), c=np.array(d["c"], dtype=float), s_init=int(d["s_init"]))
    raise ValueError(f"unknown environment kind {kind!r}")


def save_env(env, path) -> None:
    Path(path).write_text(dumps(env_to_dict(env), indent=1) + "\n")


def load_env(path):
    return env_from_dict(json.loads(Path(path).read_text()))


def save_json(obj, path) -> None:
    Path(path).write_text(dumps(obj, indent=1) + "\n")


def load_json(path):
    return json.loads(Path(path).read_text())
