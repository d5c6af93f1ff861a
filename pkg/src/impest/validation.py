"""Estimation quality metrics: PF validation, cumulative impedance errors, SE-objective validation."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import estimation as est
from . import powerflow as pf
from . import solver
from .measurements import MeasurementSet, voltage_drops
from .network import Feeder, cumulative_impedance

logger = logging.getLogger(__name__)

QUANTILE_FIELDS = ("min", "p25", "median", "p75", "max")


@dataclass(frozen=True)
class Quantiles:
    min: float
    p25: float
    median: float
    p75: float
    max: float
    count: int

    @classmethod
    def of(cls, values) -> "Quantiles":
        v = np.asarray(list(values), dtype=float)
        if v.size == 0:
            return cls(*(np.nan,) * 5, 0)
        q = np.percentile(v, [0, 25, 50, 75, 100])
        return cls(*(float(a) for a in q), int(v.size))

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in (*QUANTILE_FIELDS, "count")}


@dataclass(eq=False)
class ValidationReport:
    """Per-entry metrics; quantile summaries are computed on demand."""

    voltage_diff: dict[tuple[str, str, int], float] = field(default_factory=dict)  # p.u.
    cumulative: dict[tuple[str, str], tuple[float, float]] = field(default_factory=dict)  # % of truth
    se_objective: dict[int, float] = field(default_factory=dict)
    flagged_steps: tuple[int, ...] = ()
    injection_source: str = "clean"

    def voltage_quantiles(self) -> Quantiles:
        return Quantiles.of(self.voltage_diff.values())

    def cumulative_quantiles(self) -> tuple[Quantiles, Quantiles]:
        r = [abs(v[0]) for v in self.cumulative.values()]
        x = [abs(v[1]) for v in self.cumulative.values()]
        return Quantiles.of(r), Quantiles.of(x)

    def to_dict(self) -> dict:
        qr, qx = self.cumulative_quantiles()
        return {
            "injection_source": self.injection_source,
            "flagged_steps": list(self.flagged_steps),
            "voltage_diff_pu": [
                {"bus": b, "phase": p, "step": t, "value": v} for (b, p, t), v in sorted(self.voltage_diff.items())
            ],
            "cumulative_error_pct": [
                {"user": u, "phase": p, "r": r, "x": x} for (u, p), (r, x) in sorted(self.cumulative.items())
            ],
            "se_objective": {str(t): v for t, v in sorted(self.se_objective.items())},
            "summary": {
                "voltage_diff_pu": self.voltage_quantiles().as_dict(),
                "abs_cumulative_r_pct": qr.as_dict(),
                "abs_cumulative_x_pct": qx.as_dict(),
                "se_objective": Quantiles.of(self.se_objective.values()).as_dict(),
            },
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ValidationReport":
        return cls(
            {(d["bus"], d["phase"], int(d["step"])): float(d["value"]) for d in data.get("voltage_diff_pu", [])},
            {(d["user"], d["phase"]): (float(d["r"]), float(d["x"])) for d in data.get("cumulative_error_pct", [])},
            {int(t): float(v) for t, v in data.get("se_objective", {}).items()},
            tuple(data.get("flagged_steps", [])),
            data.get("injection_source", "clean"),
        )


def _same_topology(a: Feeder, b: Feeder) -> None:
    ta = {(br.from_bus, br.to_bus, br.phases) for br in a.branches}
    tb = {(br.from_bus, br.to_bus, br.phases) for br in b.branches}
    if ta != tb or {(x.id, x.phases) for x in a.buses} != {(x.id, x.phases) for x in b.buses}:
        raise ValueError("feeders differ in topology or phase sets")


def pf_validate(feeder_est: Feeder, feeder_ref: Feeder, injections: pf.InjectionSpec, steps=None,
                source_voltage=None, injection_source: str = "clean") -> ValidationReport:
    """|Vmag_est - Vmag_ref| in p.u. for every bus phase and validation step.

    Steps where either power flow fails are flagged and left out of the
    differences.
    """
    _same_topology(feeder_est, feeder_ref)
    steps = list(range(injections.n_steps)) if steps is None else list(steps)
    if len(steps) != injections.n_steps:
        raise ValueError("one step label per injection row is required")
    base = {b.id: b.base_voltage for b in feeder_ref.buses}
    diffs, flagged = {}, []
    for k, t in enumerate(steps):
        inj = injections.step(k)
        try:
            a = pf.solve(feeder_est, inj, source_voltage=source_voltage)
            b = pf.solve(feeder_ref, inj, source_voltage=source_voltage)
        except pf.PowerFlowError as exc:
            logger.warning("power flow failed at validation step %s: %s", t, exc)
            flagged.append(t)
            continue
        col = {bp: i for i, bp in enumerate(b.bus_phases)}
        va, vb = np.abs(a.voltage[0]), np.abs(b.voltage[0])
        for i, (bus, ph) in enumerate(a.bus_phases):
            diffs[(bus, ph, t)] = float(abs(va[i] - vb[col[(bus, ph)]]) / base[bus])
    return ValidationReport(voltage_diff=diffs, flagged_steps=tuple(flagged), injection_source=injection_source)


def cumulative_error(feeder_true: Feeder, feeder_est: Feeder) -> dict[tuple[str, str], tuple[float, float]]:
    """Per user phase: 100 (est - true) / true for cumulative R and X (absolute difference where true is 0)."""
    out = {}
    est_users = feeder_est.user_map
    for u in feeder_true.users:
        if u.id not in est_users:
            raise ValueError(f"user {u.id} missing from the estimated feeder")
        ct = cumulative_impedance(feeder_true, u)
        ce = cumulative_impedance(feeder_est, est_users[u.id])
        for ph, (rt, xt) in ct.items():
            re_, xe = ce[ph]
            out[(u.id, ph)] = (
                100.0 * (re_ - rt) / rt if rt != 0 else re_ - rt,
                100.0 * (xe - xt) / xt if xt != 0 else xe - xt,
            )
    return out


@dataclass(eq=False)
class SeValidation:
    objective: dict[int, float]
    per_measurement: dict[int, float]  # objective divided by the measurement count of the step
    residuals: list[est.ResidualRecord]
    flagged: tuple[int, ...]

    def mean_objective(self) -> float:
        return float(np.mean(list(self.objective.values()))) if self.objective else np.inf


def se_objective_validate(feeder_est: Feeder, validation: MeasurementSet,
                          solver_options: solver.SolverOptions | None = None,
                          build_options: est.BuildOptions | None = None, joint: bool = False) -> SeValidation:
    """Solve state estimation with fixed impedances on each validation step (or all at once)."""
    groups = [validation.timesteps] if joint else [[t] for t in validation.timesteps]
    objective, per_meas, residuals, flagged = {}, {}, [], []
    for steps in groups:
        data = validation.restrict(steps)
        problem = est.build(feeder_est, data, est.SE, build_options)
        out = solver.solve(problem, solver_options)
        res = est.recover_solution(problem, out.x, feeder_est, status=out.status)
        if not out.success or res.flagged:
            flagged.extend(steps)
            logger.warning("SE validation did not converge on steps %s (%s)", steps[:5], out.status)
            continue
        residuals.extend(res.residuals)
        for t in steps:
            rho = [r.rho for r in res.residuals if r.sample.timestep == t]
            objective[t] = float(np.sum(rho))
            per_meas[t] = objective[t] / max(1, len(rho))
    return SeValidation(objective, per_meas, residuals, tuple(flagged))


def residuals_at_state(feeder: Feeder, measurements: MeasurementSet, state: pf.StateSolution) -> np.ndarray:
    """Normalised residuals (estimate - z) / sigma of ``measurements`` evaluated at a given state.

    ``state`` holds one row per measurement timestep, in ascending order.
    """
    problem = est.build(feeder, measurements, est.SE)
    x = est.point_from_state(problem, state, feeder)
    res = est.recover_solution(problem, x, feeder)
    return np.array([r.normalized for r in res.residuals])


def default_ladder(measurements: MeasurementSet, feeder: Feeder, count: int = 13, start: int = 10,
                   step: int = 10) -> list[list[int]]:
    """Nested candidates: the ``start``, ``start + step``, ... most loaded steps."""
    drops, _ = voltage_drops(measurements, feeder)
    ranked = sorted(drops, key=lambda t: (-drops[t], t))
    ladder = []
    for k in range(count):
        n = start + k * step
        if n > len(ranked):
            break
        ladder.append(sorted(ranked[:n]))
    return ladder


@dataclass(frozen=True)
class CandidateTrace:
    steps: tuple[int, ...]
    status: str
    mean_objective: float
    message: str = ""


@dataclass(eq=False)
class TrainingSelection:
    best: tuple[int, ...]
    best_result: est.EstimationResult | None
    trace: list[CandidateTrace]


def select_training_set(candidates, feeder: Feeder, measurements: MeasurementSet, validation: MeasurementSet,
                        mode: str, options: est.BuildOptions | None = None,
                        solver_options: solver.SolverOptions | None = None) -> TrainingSelection:
    """Estimate on each candidate subset and keep the one with the lowest mean validation objective."""
    if not candidates:
        raise ValueError("at least one candidate is required")
    val_steps = set(validation.timesteps)
    trace, best, best_score, best_result = [], None, np.inf, None
    for cand in candidates:
        cand = tuple(sorted(cand))
        if val_steps & set(cand):
            raise ValueError("validation steps must be disjoint from every candidate")
        try:
            problem = est.build(feeder, measurements.restrict(cand), mode, options)
            out = solver.solve(problem, solver_options)
            res = est.recover_solution(problem, out.x, feeder, status=out.status)
            if not out.success or res.flagged:
                trace.append(CandidateTrace(cand, out.status, np.inf, "estimation did not converge"))
                continue
            score = se_objective_validate(res.feeder, validation, solver_options).mean_objective()
        except (est.EstimationInputError, pf.PowerFlowError, ValueError) as exc:
            trace.append(CandidateTrace(cand, "error", np.inf, str(exc)))
            continue
        trace.append(CandidateTrace(cand, out.status, score))
        logger.info("candidate with %d steps: mean validation objective %.4f", len(cand), score)
        if score < best_score:
            best, best_score, best_result = cand, score, res
    if best is None:
        best = tuple(sorted(candidates[0]))
    return TrainingSelection(best, best_result, trace)
