"""Synthetic measurement campaign: profiles, power flow, meter noise, aggregation, step selection, split."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import estimation as est
from . import measurements as ms
from . import powerflow as pf
from . import solver
from .network import Feeder
from .synthetic import load_profiles

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SimulationSettings:
    n_train: int = 50
    n_validation: int = 10
    n_steps_5min: int = 630
    aggregation: int = 3
    accuracy_class: float = 0.005
    noise: bool = True
    cos_phi: float = 0.97
    load_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_train < 1 or self.n_validation < 0:
            raise ValueError("need at least one training step")
        if self.n_steps_5min // self.aggregation < self.n_train + self.n_validation:
            raise ValueError("profile horizon too short for the requested train/validation steps")


@dataclass(frozen=True, eq=False)
class Simulation:
    feeder: Feeder
    settings: SimulationSettings
    profiles: dict
    aggregated: ms.MeasurementSet  # all 15-minute steps, noisy
    train: ms.MeasurementSet
    validation: ms.MeasurementSet
    validation_injections: pf.InjectionSpec  # clean averaged P/Q of the validation steps
    validation_state: pf.StateSolution  # true state at those averaged injections
    selection: ms.SelectionReport

    @property
    def train_steps(self) -> list[int]:
        return self.train.timesteps

    @property
    def validation_steps(self) -> list[int]:
        return self.validation.timesteps


def averaged_injections(inj: pf.InjectionSpec, group: int, steps) -> pf.InjectionSpec:
    """Clean injections averaged over aggregation groups, for the given aggregated steps."""
    steps = list(steps)
    T = inj.n_steps // group
    p = inj.p[: T * group].reshape(T, group, -1).mean(axis=1)
    q = inj.q[: T * group].reshape(T, group, -1).mean(axis=1)
    return pf.InjectionSpec(inj.columns, p[steps], q[steps], inj.model)


INJECTION_HEADER = ["step", "user_id", "phase", "p_w", "q_var"]


def save_injections(inj: pf.InjectionSpec, steps, path: str | Path) -> None:
    """Long-format CSV of per-step user injections, labelled with aggregated step numbers."""
    steps = list(steps)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(INJECTION_HEADER)
        for k, t in enumerate(steps):
            for j, (uid, ph) in enumerate(inj.columns):
                w.writerow([t, uid, ph, repr(float(inj.p[k, j])), repr(float(inj.q[k, j]))])


def load_injections(path: str | Path) -> tuple[pf.InjectionSpec, list[int]]:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != INJECTION_HEADER:
            raise ValueError(f"{path}: expected header {INJECTION_HEADER}, got {reader.fieldnames}")
        for r in reader:
            rows.append((int(r["step"]), r["user_id"], r["phase"], float(r["p_w"]), float(r["q_var"])))
    steps = sorted({r[0] for r in rows})
    cols = tuple(sorted({(r[1], r[2]) for r in rows}))
    si = {t: i for i, t in enumerate(steps)}
    ci = {c: j for j, c in enumerate(cols)}
    p = np.zeros((len(steps), len(cols)))
    q = np.zeros_like(p)
    for t, uid, ph, pv, qv in rows:
        p[si[t], ci[(uid, ph)]] = pv
        q[si[t], ci[(uid, ph)]] = qv
    return pf.InjectionSpec(cols, p, q), steps


def simulate(feeder: Feeder, settings: SimulationSettings | None = None) -> Simulation:
    """Run the whole synthesis chain on ``feeder``; every random draw derives from ``settings.seed``."""
    s = settings or SimulationSettings()
    seeds = np.random.SeedSequence(s.seed).spawn(3)
    prof_seed, noise_seed, split_seed = (int(q.generate_state(1)[0]) for q in seeds)
    profiles = load_profiles(feeder.users, s.n_steps_5min, seed=prof_seed)
    profiles = {k: v * s.load_scale for k, v in profiles.items()}
    cols = tuple(sorted(profiles))
    P = np.array([profiles[c] for c in cols]).T
    inj = pf.InjectionSpec(cols, P, ms.derive_reactive(P, s.cos_phi))
    state = pf.solve(feeder, inj)
    clean = ms.from_powerflow(feeder, state, inj, duration_min=5.0)
    model = ms.NoiseModel(s.accuracy_class if s.noise else 0.0, reference=ms.default_noise_reference(feeder, profiles),
                          seed=noise_seed)
    noisy = ms.add_noise(clean, model) if s.noise else ms.with_sigma(clean, ms.NoiseModel(
        s.accuracy_class, reference=model.reference))
    agg, _ = ms.aggregate(noisy, s.aggregation)

    rng = np.random.default_rng(split_seed)
    steps = np.array(agg.timesteps)
    val_steps = sorted(int(t) for t in rng.choice(steps, size=s.n_validation, replace=False))
    pool = agg.restrict(sorted(set(steps.tolist()) - set(val_steps)))
    selected, report = ms.select_steps(pool, feeder, s.n_train)
    train, validation = ms.split(agg, selected.timesteps, val_steps)

    val_inj = averaged_injections(inj, s.aggregation, val_steps)
    val_state = pf.solve(feeder, val_inj)
    logger.info("simulated %d five-minute steps, %d training and %d validation steps",
                s.n_steps_5min, len(train.timesteps), len(val_steps))
    return Simulation(feeder, s, profiles, agg, train, validation, val_inj, val_state, report)


def estimate(feeder: Feeder, train: ms.MeasurementSet, mode: str, options: est.BuildOptions | None = None,
             solver_options: solver.SolverOptions | None = None) -> est.EstimationResult:
    """Build, solve and recover in one call."""
    problem = est.build(feeder, train, mode, options)
    outcome = solver.solve(problem, solver_options)
    result = est.recover_solution(problem, outcome.x, feeder, status=outcome.status)
    result.messages.append(f"{outcome.iterations} iterations in {outcome.wall_time:.2f} s")
    return result
