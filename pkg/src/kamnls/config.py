"""Configuration file loading, defaults and validation."""

from __future__ import annotations

import copy
import json
import math
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .lattice import validate_sites


class ConfigError(ValueError):
    """Schema violations; ``problems`` lists every one found."""

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  - " + "\n  - ".join(self.problems))


DEFAULTS = {
    "seed": 0,
    "workers": 1,
    "model": {"degree_cap": 4, "G": []},
    "domain": {"r": 0.5, "s": 0.1, "rho": 0.5},
    "kam": {"gamma": 0.05, "tau": None, "c": 1.0, "max_steps": 3, "target_eps": 1e-30,
            "order_cap": 8, "prune_beta": 1e-4},
    "measure": {"samples": 10000, "box": None, "gammas": None, "sampler": "halton",
                "K_lo": 0, "K_hi": None},
    "toeplitz": {"cap": 3, "eps_budget": None},
    "torus": {"T": None, "dt": None, "n_samples": 4096, "trajectories": 2,
              "residence_points": 256, "flow_rtol": 1e-12},
}


def theoretical_tau(d: int, b: int, b_t: int) -> float:
    return float(math.factorial(d) * (2 * d * (d + 1) + b + b_t + 1) + 1)


def effective_tau(d: int, b: int, b_t: int) -> float:
    return float(2 * (b + b_t) + d + 2)


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load(path: str | Path, overrides: dict | None = None) -> dict:
    """Read a TOML config, apply command-line overrides and fill defaults."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError([f"config file {path} does not exist"])
    try:
        raw = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as err:
        raise ConfigError([f"config file {path} is not valid TOML: {err}"]) from None
    return resolve(raw, overrides)


def resolve(raw: dict, overrides: dict | None = None) -> dict:
    cfg = _merge(DEFAULTS, raw)
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        node = cfg
        *head, last = dotted.split(".")
        for h in head:
            node = node.setdefault(h, {})
        node[last] = value
    problems = validate(cfg)
    if problems:
        raise ConfigError(problems)
    sites = cfg["sites"]
    d, b, bt = sites["d"], len(sites["S"]), len(sites["S_tilde"])
    tau = cfg["kam"]["tau"]
    if tau is None:
        cfg["kam"]["tau"] = effective_tau(d, b, bt)
    elif tau == "theory":
        cfg["kam"]["tau"] = theoretical_tau(d, b, bt)
    cfg["kam"]["tau"] = float(cfg["kam"]["tau"])
    if cfg["measure"]["box"] is None:
        cfg["measure"]["box"] = [[0.0, 1.0]] * (b + bt)
    if cfg["measure"]["gammas"] is None:
        g = cfg["kam"]["gamma"]
        cfg["measure"]["gammas"] = [g, g / 2]
    if cfg["torus"]["T"] is None:
        cfg["torus"]["T"] = 10.0 / cfg["domain"]["s"] ** 2
    return cfg


def validate(cfg: dict) -> list[str]:
    """Every schema violation of a merged config (empty when valid)."""
    problems = []
    sites = cfg.get("sites")
    model = cfg.get("model", {})
    if not isinstance(sites, dict):
        problems.append("missing section [sites]")
        sites = {}
    for key in ("d", "S", "S_tilde", "N_max"):
        if key not in sites:
            problems.append(f"missing field sites.{key}")
    b = bt = None
    if all(k in sites for k in ("d", "S", "S_tilde", "N_max")):
        try:
            S = [tuple(int(x) for x in n) for n in sites["S"]]
            St = [tuple(int(x) for x in n) for n in sites["S_tilde"]]
            problems += validate_sites(int(sites["d"]), S, St, int(sites["N_max"]))
            b, bt = len(S), len(St)
        except (TypeError, ValueError):
            problems.append("sites.S and sites.S_tilde must be lists of integer lists")
    for key in ("xi", "sigma"):
        if key not in model:
            problems.append(f"missing field model.{key}")
    if b is not None and "xi" in model and len(model["xi"]) != b:
        problems.append(f"model.xi has {len(model['xi'])} entries, expected b = {b}")
    if bt is not None and "sigma" in model and len(model["sigma"]) != bt:
        problems.append(f"model.sigma has {len(model['sigma'])} entries, expected b_tilde = {bt}")
    if "actions" not in model:
        problems.append("missing field model.actions")
    elif b is not None and len(model["actions"]) != b + bt:
        problems.append(f"model.actions has {len(model['actions'])} entries, expected {b + bt}")
    elif any(a <= 0 for a in model["actions"]):
        problems.append("model.actions must be positive")
    for i, term in enumerate(model.get("G", [])):
        if not isinstance(term, dict) or not {"p", "q", "g"} <= set(term):
            problems.append(f"model.G[{i}] needs keys p, q, g")
        elif term["p"] < 0 or term["q"] < 0 or term["p"] + term["q"] < 2:
            problems.append(f"model.G[{i}]: need p, q >= 0 and p + q >= 2")
    for key in ("r", "s", "rho"):
        v = cfg["domain"].get(key)
        if not isinstance(v, (int, float)) or not v > 0:
            problems.append(f"domain.{key} must be positive")
    kam = cfg["kam"]
    if not isinstance(kam["gamma"], (int, float)) or kam["gamma"] < 0:
        problems.append("kam.gamma must be nonnegative")
    if kam["tau"] is not None and kam["tau"] != "theory" and not (
            isinstance(kam["tau"], (int, float)) and kam["tau"] > 0):
        problems.append("kam.tau must be positive or \"theory\"")
    if int(kam["max_steps"]) < 0:
        problems.append("kam.max_steps must be nonnegative")
    if cfg["measure"]["samples"] < 100:
        problems.append("measure.samples must be at least 100")
    if cfg["measure"]["sampler"] not in ("halton", "lattice", "random"):
        problems.append("measure.sampler must be halton, lattice or random")
    n = cfg["torus"]["n_samples"]
    if n < 2 or n & (n - 1):
        problems.append("torus.n_samples must be a power of two")
    return problems


def canonical_json(cfg: dict) -> str:
    """One-line deterministic rendering used to embed the config in reports."""
    return json.dumps(cfg, sort_keys=True, separators=(",", ":"))
