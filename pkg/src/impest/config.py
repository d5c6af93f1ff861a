"""Run configuration: one JSON document plus dotted ``key=value`` overrides."""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path

from . import estimation as est
from . import solver
from .impedance import ImeToggles, default_alphas
from .pipeline import SimulationSettings

DEFAULTS: dict = {
    "feeder": None,  # network model handed to the estimator (prior lengths / topology)
    "truth_feeder": None,  # reference network for simulation and validation; defaults to "feeder"
    "out": "out",
    "train": None,  # measurement CSVs; default to <out>/train.csv and <out>/validation.csv
    "validation": None,
    "validation_injections": None,
    "feeder_est": None,  # default <out>/feeder_est.json
    "mode": "LLE",
    "seed": 0,
    "simulation": {
        "n_train": 50,
        "n_validation": 10,
        "n_steps_5min": 630,
        "aggregation": 3,
        "load_scale": 1.0,
        "cos_phi": 0.97,
    },
    "noise": {"accuracy_class": 0.005, "enabled": True},
    "solver": {"tol": 1e-7, "max_iter": 3000, "time_limit": None, "acceptable_tol": 1e-6},
    "estimation": {
        "length_residuals": "per_timestep",
        "length_bounds": [0.5, 2.0],
        "ime_bound_scope": "branch",
        "ime_lower": 0.0,
        "init_state": "flat",
        "alpha_scope": None,
        "toggles": {},
    },
    "alpha_overrides": {},
    "pinned": [],
    "se_validation": True,
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, extra: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        key = f"{path}{k}"
        if k not in out:
            raise ConfigError(f"unknown configuration key {key!r}")
        if isinstance(out[k], dict) and out[k] and isinstance(v, dict) and k not in ("alpha_overrides", "toggles"):
            out[k] = _merge(out[k], v, key + ".")
        else:
            out[k] = v
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(data: dict, assignments) -> dict:
    """Apply ``a.b=value`` strings; values are parsed as JSON when possible, else kept as strings."""
    data = copy.deepcopy(data)
    for item in assignments or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = data
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigError(f"unknown configuration key {key!r}")
            node = node[p]
        if parts[-1] not in node and node is not data.get("alpha_overrides"):
            raise ConfigError(f"unknown configuration key {key!r}")
        node[parts[-1]] = _parse_value(raw)
    return data


@dataclass(frozen=True)
class RunConfig:
    data: dict
    base_dir: Path

    @classmethod
    def load(cls, path: str | Path | None, overrides=None) -> "RunConfig":
        if path is None:
            raw, base = {}, Path.cwd()
        else:
            path = Path(path)
            try:
                raw = json.loads(path.read_text(encoding="utf-8"))
            except FileNotFoundError as exc:
                raise ConfigError(f"configuration file {path} not found") from exc
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
            base = path.resolve().parent
        data = apply_overrides(_merge(DEFAULTS, raw), overrides)
        cfg = cls(data, base)
        cfg.check()
        return cfg

    def __getitem__(self, key):
        return self.data[key]

    def check(self) -> None:
        try:
            est.normalize_mode(self.data["mode"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if not isinstance(self.data["seed"], int):
            raise ConfigError("seed must be an integer")
        self.build_options()
        self.solver_options()

    def path(self, key: str, default_name: str | None = None) -> Path | None:
        value = self.data.get(key)
        if value is None:
            return self.out / default_name if default_name else None
        p = Path(value)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def out(self) -> Path:
        p = Path(self.data["out"])
        return p if p.is_absolute() else self.base_dir / p

    def require(self, *keys_and_defaults) -> list[Path]:
        """Resolve paths and fail if any of them is missing on disk."""
        paths = []
        for item in keys_and_defaults:
            key, default = item if isinstance(item, tuple) else (item, None)
            p = self.path(key, default)
            if p is None:
                raise ConfigError(f"configuration key {key!r} is required")
            if not p.exists():
                raise ConfigError(f"{key}: file {p} does not exist")
            paths.append(p)
        return paths

    @property
    def mode(self) -> str:
        return est.normalize_mode(self.data["mode"])

    def simulation_settings(self) -> SimulationSettings:
        s, n = self.data["simulation"], self.data["noise"]
        try:
            return SimulationSettings(
                n_train=int(s["n_train"]), n_validation=int(s["n_validation"]),
                n_steps_5min=int(s["n_steps_5min"]), aggregation=int(s["aggregation"]),
                accuracy_class=float(n["accuracy_class"]), noise=bool(n["enabled"]),
                cos_phi=float(s["cos_phi"]), load_scale=float(s["load_scale"]), seed=self.data["seed"],
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"simulation settings: {exc}") from exc

    def solver_options(self) -> solver.SolverOptions:
        s = self.data["solver"]
        try:
            return solver.SolverOptions(tol=float(s["tol"]), max_iter=int(s["max_iter"]),
                                        time_limit=None if s["time_limit"] is None else float(s["time_limit"]),
                                        acceptable_tol=float(s["acceptable_tol"]))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"solver settings: {exc}") from exc

    def build_options(self) -> est.BuildOptions:
        e = self.data["estimation"]
        try:
            alphas = default_alphas(e["alpha_scope"]) if e["alpha_scope"] else None
            toggles = ImeToggles(**e["toggles"]) if e["toggles"] else None
            return est.BuildOptions(
                alphas=alphas, alpha_overrides=self.data["alpha_overrides"] or None, toggles=toggles,
                pinned=frozenset(self.data["pinned"]), length_residuals=e["length_residuals"],
                length_bounds=tuple(e["length_bounds"]), ime_bound_scope=e["ime_bound_scope"],
                ime_lower=float(e["ime_lower"]), init_state=e["init_state"],
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"estimation settings: {exc}") from exc
