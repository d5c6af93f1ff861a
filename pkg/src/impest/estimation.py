"""Multi-period state and impedance estimation program.

The program minimises the sum of epigraph variables ``rho`` where each
measurement contributes ``rho >= +-(x(state) - z) / sigma``.  Physics rows are
KCL at every non-source bus phase and multi-conductor Ohm's law per branch
phase, both in rectangular current-voltage coordinates and per-unit.  The
impedance of each branch is either a constant (state estimation), a scaled
linecode (line length estimation) or a structured matrix of variables
(impedance matrix estimation).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import network
from .impedance import (
    DIAGONAL, TRANSPOSED, UNTRANSPOSED, AlphaBounds, BranchImpedance, ImeBounds, ImeToggles, LleParams,
    check_structure, default_alphas, fixed_impedance, parameterize_ime, parameterize_lle,
)
from .measurements import MeasurementSample, MeasurementSet
from .network import Feeder, ImpedanceMatrix
from .nlp import EQ, LE, NlpProblem, ProgramBuilder, evaluate  # noqa: F401  (re-exported)
from .powerflow import StateSolution

logger = logging.getLogger(__name__)

SE = "SE_fixed_Z"
LLE = "LLE"
IME_TRANSPOSED = "IME_transposed"
IME_UNTRANSPOSED = "IME_untransposed"
IME_DIAGONAL = "IME_diagonal"
MODES = (SE, LLE, IME_TRANSPOSED, IME_UNTRANSPOSED, IME_DIAGONAL)
_VARIANT = {IME_TRANSPOSED: TRANSPOSED, IME_UNTRANSPOSED: UNTRANSPOSED, IME_DIAGONAL: DIAGONAL}
_ALIASES = {m.lower(): m for m in MODES} | {"se": SE, "lle": LLE, "ime_t": IME_TRANSPOSED,
                                            "ime_u": IME_UNTRANSPOSED, "ime_d": IME_DIAGONAL}
FEASIBILITY_FLAG = 1e-6
STRUCTURE_TOL = 1e-8  # per-unit


def normalize_mode(mode: str) -> str:
    try:
        return _ALIASES[mode.lower()]
    except KeyError:
        raise ValueError(f"unknown estimation mode {mode!r}; expected one of {', '.join(MODES)}") from None


class EstimationInputError(ValueError):
    """Measurements or feeder data that cannot be turned into a program."""


@dataclass(frozen=True)
class BuildOptions:
    alphas: AlphaBounds | None = None  # None: default scope for the variant
    alpha_overrides: dict | None = None
    toggles: ImeToggles | None = None
    pinned: frozenset = frozenset()  # branch ids whose impedance is trusted
    length_residuals: str = "per_timestep"
    length_bounds: tuple[float, float] = (0.5, 2.0)  # factors of the length guess
    length_limits: dict = field(default_factory=dict)  # branch id -> (guess, lower, upper) in metres
    ime_bound_scope: str = "branch"  # "branch": factor x prior entry; "feeder": factor x largest cumulative R/X
    ime_upper_factor: float | None = None  # None: 3 per branch; 100 (10 for diagonal) feeder-wide
    ime_upper: tuple[float, float] | None = None  # explicit (R, X) upper bounds in ohm for every entry
    ime_lower: float = 0.0  # ohm; > 0 replaces nonnegativity by a strictly positive bound
    ime_init: str = "midpoint"
    vmag_bounds: tuple[float, float] = (0.5, 1.5)
    voltage_box: float = 2.0
    source_voltage: dict | None = None  # phase -> SI phasor; fixes the whole source voltage
    init_state: str = "flat"  # or "powerflow"

    def __post_init__(self):
        if self.length_residuals not in ("per_timestep", "single", "off"):
            raise ValueError(f"unknown length residual mode {self.length_residuals!r}")
        if self.ime_bound_scope not in ("branch", "feeder"):
            raise ValueError(f"unknown impedance bound scope {self.ime_bound_scope!r}")
        if self.ime_init not in ("midpoint", "prior"):
            raise ValueError(f"unknown impedance initialisation {self.ime_init!r}")
        if self.init_state not in ("flat", "powerflow"):
            raise ValueError(f"unknown state initialisation {self.init_state!r}")
        lo, hi = self.vmag_bounds
        if not 0 < lo < hi:
            raise ValueError("voltage magnitude bounds must satisfy 0 < lower < upper")
        object.__setattr__(self, "pinned", frozenset(self.pinned))


@dataclass(frozen=True)
class MeasurementRow:
    sample: MeasurementSample
    rho: int
    rows: tuple[int, int]
    weight: float  # 1 / sigma in per-unit
    target: float  # z in per-unit


@dataclass(eq=False)
class ProblemLayout:
    """Everything needed to map a solution vector back to physical quantities."""

    feeder: Feeder
    mode: str
    timesteps: tuple[int, ...]
    index: network.FeederIndex
    branches: dict[str, BranchImpedance]
    measurements: list[MeasurementRow]
    options: BuildOptions
    alphas: AlphaBounds | None
    z_base: float
    v_base: float
    s_base: float
    i_base: float


def _check_inputs(feeder: Feeder, train: MeasurementSet) -> None:
    problems = network.validate(feeder)
    if problems:
        raise EstimationInputError("invalid feeder: " + "; ".join(str(v) for v in problems[:5]))
    if feeder.per_unit:
        raise EstimationInputError("estimation expects an SI feeder; per-unit conversion is internal")
    if len(train) == 0:
        raise EstimationInputError("no training measurements")
    try:
        train.check(feeder)
    except ValueError as exc:
        raise EstimationInputError(str(exc)) from exc


def _reference_phase(bus) -> str:
    return "a" if "a" in bus.phases else bus.phases[0]


def _cumulative_max(feeder: Feeder) -> tuple[float, float]:
    best_r = best_x = 0.0
    for u in feeder.users:
        for r, x in network.cumulative_impedance(feeder, u).values():
            best_r, best_x = max(best_r, r), max(best_x, x)
    return best_r, best_x


def ime_bounds(feeder: Feeder, mode: str, options: BuildOptions) -> dict[str, ImeBounds]:
    """Per-branch entry bounds and units for impedance matrix estimation."""
    factor = options.ime_upper_factor
    if options.ime_bound_scope == "feeder":
        factor = factor if factor is not None else (10.0 if mode == IME_DIAGONAL else 100.0)
        cum_r, cum_x = _cumulative_max(feeder)
        feeder_upper = (factor * max(cum_r, 1e-9), factor * max(cum_x, 1e-9))
    else:
        factor = factor if factor is not None else 3.0
    out = {}
    for br in feeder.branches:
        r_ref = float(np.abs(br.impedance.r).max())
        x_ref = float(np.abs(br.impedance.x).max())
        r_ref = r_ref if r_ref > 0 else 0.01
        x_ref = x_ref if x_ref > 0 else 0.1 * r_ref
        if options.ime_upper is not None:
            upper = options.ime_upper
        elif options.ime_bound_scope == "feeder":
            upper = feeder_upper
        else:
            upper = (factor * r_ref, factor * x_ref)
        out[br.id] = ImeBounds(upper[0], upper[1], options.ime_lower, r_ref, x_ref, options.ime_init)
    return out


def _default_alphas(mode: str, options: BuildOptions) -> AlphaBounds | None:
    if mode not in _VARIANT:
        return None
    base = options.alphas
    if base is None:
        base = default_alphas("loose_untransposed" if mode == IME_UNTRANSPOSED else "transposed_defaults")
    return base.with_overrides(options.alpha_overrides)


def build(feeder: Feeder, train: MeasurementSet, mode: str, options: BuildOptions | None = None) -> NlpProblem:
    """Assemble the estimation program for ``mode`` over all timesteps in ``train``.

    ``feeder`` carries the topology and prior impedances (used for pinned
    branches, length guesses and impedance bounds).  Timesteps keep their
    original indices.
    """
    options = options or BuildOptions()
    mode = normalize_mode(mode)
    _check_inputs(feeder, train)
    idx = network.FeederIndex(feeder)
    zb = feeder.z_base()
    v_base = feeder.base_voltage
    s_base = feeder.base_power / 3.0
    i_base = s_base / v_base
    steps = tuple(train.timesteps)
    by_t = train.by_timestep()
    src = feeder.source
    ref_phase = _reference_phase(src)
    alphas = _default_alphas(mode, options)

    unknown_pins = options.pinned - set(feeder.branch_map)
    if unknown_pins:
        raise EstimationInputError(f"pinned branches not in feeder: {sorted(unknown_pins)}")

    b = ProgramBuilder()
    vlo, vhi = options.vmag_bounds
    box = options.voltage_box
    angle = {"a": 0.0, "b": -2 * np.pi / 3, "c": 2 * np.pi / 3}
    src_fixed = None
    if options.source_voltage is not None:
        src_fixed = {p: complex(options.source_voltage[p]) / v_base for p in src.phases}

    # -- time-invariant impedance parameterisation -------------------------------
    branches: dict[str, BranchImpedance] = {}
    entry_bounds = ime_bounds(feeder, mode, options) if mode in _VARIANT else {}
    for br in feeder.branches:
        if mode == SE or br.id in options.pinned:
            branches[br.id] = fixed_impedance(br, zb)
        elif mode == LLE:
            if br.linecode is None or br.linecode not in feeder.linecodes:
                raise EstimationInputError(f"branch {br.id} has no linecode; length estimation needs one")
            lc = feeder.linecodes[br.linecode]
            if br.id in options.length_limits:
                guess, lo, hi = options.length_limits[br.id]
                params = LleParams(lc.r_per_km, lc.x_per_km, guess, lo, hi)
            else:
                params = LleParams.from_branch(br, lc, options.length_bounds)
            branches[br.id] = parameterize_lle(b, br, params, zb, steps, options.length_residuals)
        else:
            branches[br.id] = parameterize_ime(b, br, _VARIANT[mode], alphas, zb, options.toggles,
                                               entry_bounds[br.id])

    # -- per-timestep state and physics ---------------------------------------------
    measured_v = {(s.user_id, s.phase, s.timestep) for s in train if s.kind == "VM"}
    user_bus = {u.id: u.bus for u in feeder.users}
    rows_out: list[MeasurementRow] = []
    for t in steps:
        for bus in feeder.buses:
            for p in bus.phases:
                v0 = np.exp(1j * angle.get(p, 0.0)) * bus.base_voltage / v_base
                if bus.id == src.id and src_fixed is not None:
                    f = src_fixed[p]
                    b.add_var("Ure", (bus.id, p), t, f.real, f.real, x0=f.real)
                    b.add_var("Uim", (bus.id, p), t, f.imag, f.imag, x0=f.imag)
                    continue
                b.add_var("Ure", (bus.id, p), t, -box, box, x0=v0.real)
                if bus.id == src.id and p == ref_phase:
                    b.add_var("Uim", (bus.id, p), t, 0.0, 0.0, x0=0.0)
                else:
                    b.add_var("Uim", (bus.id, p), t, -box, box, x0=v0.imag)
        for br in feeder.branches:
            for p in br.phases:
                b.add_var("Ire_branch", (br.id, p), t, x0=0.0)
                b.add_var("Iim_branch", (br.id, p), t, x0=0.0)
        for u in feeder.users:
            for p in u.phases:
                b.add_var("Ire_user", (u.id, p), t, x0=0.0)
                b.add_var("Iim_user", (u.id, p), t, x0=0.0)
        for uid, p, tt in sorted(k for k in measured_v if k[2] == t):
            bus = feeder.bus_map[user_bus[uid]]
            if not b.has_var("Umag", (bus.id, p), t):
                b.add_var("Umag", (bus.id, p), t, vlo, vhi, x0=bus.base_voltage / v_base)

        # KCL at non-source bus phases (source injection is free)
        for bus in feeder.buses:
            if bus.id == src.id:
                continue
            for p in bus.phases:
                re, im = [], []
                for br in feeder.incident.get(bus.id, []):
                    if p not in br.phases:
                        continue
                    sign = 1.0 if br.from_bus == bus.id else -1.0
                    re.append((b.var("Ire_branch", (br.id, p), t), sign))
                    im.append((b.var("Iim_branch", (br.id, p), t), sign))
                for u in feeder.users_at.get(bus.id, []):
                    if p in u.phases:
                        re.append((b.var("Ire_user", (u.id, p), t), 1.0))
                        im.append((b.var("Iim_user", (u.id, p), t), 1.0))
                b.add_row(EQ, re, label=("kcl", bus.id, p, t, "re"))
                b.add_row(EQ, im, label=("kcl", bus.id, p, t, "im"))

        # Ohm: U_from - U_to - Z I = 0
        for br in feeder.branches:
            z = branches[br.id]
            ir = [b.var("Ire_branch", (br.id, q), t) for q in br.phases]
            ii = [b.var("Iim_branch", (br.id, q), t) for q in br.phases]
            for a, p in enumerate(br.phases):
                lin_re = [(b.var("Ure", (br.from_bus, p), t), 1.0), (b.var("Ure", (br.to_bus, p), t), -1.0)]
                lin_im = [(b.var("Uim", (br.from_bus, p), t), 1.0), (b.var("Uim", (br.to_bus, p), t), -1.0)]
                quad_re, quad_im = [], []
                for k in range(len(br.phases)):
                    (rc, r0), (xc, x0) = z.r[a][k], z.x[a][k]
                    # re: - R Ire + X Iim ; im: - R Iim - X Ire
                    if r0:
                        lin_re.append((ir[k], -r0))
                        lin_im.append((ii[k], -r0))
                    if x0:
                        lin_re.append((ii[k], x0))
                        lin_im.append((ir[k], -x0))
                    for col, coef in rc.items():
                        quad_re.append((col, ir[k], -coef))
                        quad_im.append((col, ii[k], -coef))
                    for col, coef in xc.items():
                        quad_re.append((col, ii[k], coef))
                        quad_im.append((col, ir[k], -coef))
                b.add_row(EQ, lin_re, quad_re, label=("ohm", br.id, p, t, "re"))
                b.add_row(EQ, lin_im, quad_im, label=("ohm", br.id, p, t, "im"))

        # voltage magnitude definition for measured bus phases
        for bus_id, p in sorted({(user_bus[uid], p) for uid, p, tt in measured_v if tt == t}):
            um = b.var("Umag", (bus_id, p), t)
            ur, ui = b.var("Ure", (bus_id, p), t), b.var("Uim", (bus_id, p), t)
            b.add_row(EQ, quad=[(um, um, 1.0), (ur, ur, -1.0), (ui, ui, -1.0)], label=("vmag", bus_id, p, t))

        # measurement epigraphs
        for s in sorted(by_t[t], key=lambda s: (s.user_id, s.kind, s.phase)):
            bus_id = user_bus[s.user_id]
            p = s.phase
            rho = b.add_var("rho", (s.user_id, s.kind, p), t, 0.0, np.inf, x0=1.0)
            b.add_objective(rho, 1.0)
            if s.kind == "VM":
                w, target = v_base / s.sigma, s.value / v_base
                lin = [(b.var("Umag", (bus_id, p), t), w)]
                quad = []
            else:
                w, target = s_base / s.sigma, s.value / s_base
                ur, ui = b.var("Ure", (bus_id, p), t), b.var("Uim", (bus_id, p), t)
                jr, ji = b.var("Ire_user", (s.user_id, p), t), b.var("Iim_user", (s.user_id, p), t)
                lin = []
                if s.kind == "P":  # P = Ure Ire + Uim Iim
                    quad = [(ur, jr, w), (ui, ji, w)]
                else:  # Q = Uim Ire - Ure Iim
                    quad = [(ui, jr, w), (ur, ji, -w)]
            r_plus = b.add_row(LE, lin + [(rho, -1.0)], quad, const=-w * target,
                               label=("residual", s.user_id, s.kind, p, t, "+"))
            r_minus = b.add_row(LE, [(c, -v) for c, v in lin] + [(rho, -1.0)], [(j, k, -v) for j, k, v in quad],
                                const=w * target, label=("residual", s.user_id, s.kind, p, t, "-"))
            rows_out.append(MeasurementRow(s, rho, (r_plus, r_minus), w, target))

    layout = ProblemLayout(feeder, mode, steps, idx, branches, rows_out, options, alphas, zb, v_base, s_base, i_base)
    problem = b.build(meta={"layout": layout, "mode": mode})
    if options.init_state == "powerflow":
        _powerflow_start(problem, train)
    return problem


def layout_of(problem: NlpProblem) -> ProblemLayout:
    try:
        return problem.meta["layout"]
    except KeyError:
        raise ValueError("problem was not assembled by estimation.build") from None


def _powerflow_start(problem: NlpProblem, train: MeasurementSet) -> None:
    """Warm start the state from a power flow on the prior impedances with measured P/Q."""
    from . import powerflow

    lay = layout_of(problem)
    users = [(u.id, p) for u in lay.feeder.users for p in u.phases]
    col = {k: i for i, k in enumerate(users)}
    T = len(lay.timesteps)
    P = np.zeros((T, len(users)))
    Q = np.zeros((T, len(users)))
    pos = {t: i for i, t in enumerate(lay.timesteps)}
    for s in train:
        if s.kind == "P":
            P[pos[s.timestep], col[(s.user_id, s.phase)]] = s.value
        elif s.kind == "Q":
            Q[pos[s.timestep], col[(s.user_id, s.phase)]] = s.value
    inj = powerflow.InjectionSpec(tuple(users), P, Q)
    source = None
    if lay.options.source_voltage is not None:
        source = lay.options.source_voltage
    try:
        state = powerflow.solve(lay.feeder, inj, source_voltage=source)
    except powerflow.PowerFlowError as exc:
        logger.warning("power-flow warm start failed (%s); keeping flat start", exc)
        return
    x = problem.x0.copy()
    _fill_state(problem, lay, state, x)
    problem.x0[:] = np.clip(x, problem.lb, problem.ub)


def _fill_state(problem: NlpProblem, lay: ProblemLayout, state: StateSolution, x: np.ndarray) -> None:
    if state.n_steps != len(lay.timesteps):
        raise ValueError(f"state has {state.n_steps} steps, problem has {len(lay.timesteps)}")
    bp = {k: i for i, k in enumerate(state.bus_phases)}
    lp = {k: i for i, k in enumerate(state.branch_phases)}
    up = {k: i for i, k in enumerate(state.user_phases)}
    keys = problem.keys
    for k, t in enumerate(lay.timesteps):
        for (bus, p), i in bp.items():
            v = state.voltage[k, i] / lay.v_base
            x[keys[("Ure", (bus, p), t)]] = v.real
            x[keys[("Uim", (bus, p), t)]] = v.imag
            j = keys.get(("Umag", (bus, p), t))
            if j is not None:
                x[j] = abs(v)
        for (br, p), i in lp.items():
            c = state.branch_current[k, i] / lay.i_base
            x[keys[("Ire_branch", (br, p), t)]] = c.real
            x[keys[("Iim_branch", (br, p), t)]] = c.imag
        for (u, p), i in up.items():
            c = state.user_current[k, i] / lay.i_base
            x[keys[("Ire_user", (u, p), t)]] = c.real
            x[keys[("Iim_user", (u, p), t)]] = c.imag


def _fill_impedances(problem: NlpProblem, lay: ProblemLayout, feeder: Feeder, x: np.ndarray) -> None:
    for br in feeder.branches:
        z = lay.branches[br.id]
        if not z.variables:
            continue
        if z.length_var is not None:
            if br.length is None:
                raise ValueError(f"branch {br.id} needs a length")
            x[z.length_var] = br.length / z.length_scale
            continue
        n = len(br.phases)
        for i in range(n):
            for j in range(n):
                for expr, M in ((z.r[i][j], br.impedance.r), (z.x[i][j], br.impedance.x)):
                    coefs, _ = expr
                    for col, coef in coefs.items():
                        # every entry expression is a single variable times the per-unit unit
                        x[col] = M[i, j] / lay.z_base / coef


def tighten_epigraphs(problem: NlpProblem, x: np.ndarray) -> np.ndarray:
    """Set every residual variable to the smallest value its rows allow."""
    lay = layout_of(problem)
    x = x.copy()
    for m in lay.measurements:
        x[m.rho] = 0.0
    _tighten_length_rho(problem, x)
    g = problem.constraints(x)
    for m in lay.measurements:
        x[m.rho] = max(0.0, g[m.rows[0]], g[m.rows[1]])
    return x


def _tighten_length_rho(problem: NlpProblem, x: np.ndarray) -> None:
    rows = problem.rows_with_kind("lle_residual")
    if rows.size == 0:
        return
    for v in problem.vars_with_role("rho"):
        if v.owner and v.owner[0] == "length":
            x[v.index] = 0.0
    g = problem.constraints(x)
    A = problem.A.tocsc()
    for v in problem.vars_with_role("rho"):
        if v.owner and v.owner[0] == "length":
            lo, hi = A.indptr[v.index], A.indptr[v.index + 1]
            x[v.index] = max(0.0, *(g[r] for r in A.indices[lo:hi]))


def point_from_state(problem: NlpProblem, state: StateSolution, feeder: Feeder | None = None) -> np.ndarray:
    """Candidate point holding ``state`` (SI, one row per program timestep) and the feeder's impedances.

    Residual variables are set to their tight values, so the objective at the
    returned point is the WLAV fit of that state.
    """
    lay = layout_of(problem)
    feeder = feeder or lay.feeder
    x = problem.x0.copy()
    _fill_state(problem, lay, state, x)
    _fill_impedances(problem, lay, feeder, x)
    return tighten_epigraphs(problem, x)


# -- recovery ---------------------------------------------------------------------

@dataclass(frozen=True)
class ResidualRecord:
    sample: MeasurementSample
    estimate: float  # SI
    normalized: float  # (estimate - z) / sigma
    rho: float


@dataclass(eq=False)
class EstimationResult:
    mode: str
    impedances: dict[str, ImpedanceMatrix]
    lengths: dict[str, float]
    feeder: Feeder  # input feeder with estimated impedances substituted
    state: StateSolution
    timesteps: tuple[int, ...]
    residuals: list[ResidualRecord]
    objective: float
    max_violation: float
    status: str = "unknown"
    flagged: bool = False
    messages: list[str] = field(default_factory=list)

    def summary(self) -> dict:
        return {
            "mode": self.mode,
            "status": self.status,
            "objective": self.objective,
            "max_violation": self.max_violation,
            "flagged": self.flagged,
            "timesteps": list(self.timesteps),
            "n_measurements": len(self.residuals),
            "lengths_m": dict(self.lengths),
            "messages": list(self.messages),
        }


def recover_solution(problem: NlpProblem, x_star, feeder: Feeder | None = None, status: str = "unknown") -> EstimationResult:
    """Map a solution vector back to ohm-valued impedances, SI states and residuals."""
    lay = layout_of(problem)
    feeder = feeder or lay.feeder
    x = np.asarray(x_star, dtype=float)
    objective, viol = evaluate(problem, x)
    messages = []
    flagged = viol > FEASIBILITY_FLAG
    if flagged:
        messages.append(f"solution violates constraints by {viol:.3e} (> {FEASIBILITY_FLAG:g})")

    impedances, lengths = {}, {}
    for br in feeder.branches:
        z = lay.branches[br.id]
        if not z.variables:
            continue
        m = z.value(x)
        # per-unit -> ohm; symmetric by construction of shared variables
        impedances[br.id] = ImpedanceMatrix(m.r * lay.z_base, m.x * lay.z_base, symmetric=True)
        if z.length_var is not None:
            lengths[br.id] = z.length(x)
    est_feeder = feeder.with_impedances(impedances, lengths)

    idx = lay.index
    T = len(lay.timesteps)
    keys = problem.keys
    V = np.empty((T, len(idx.bus_phases)), complex)
    IL = np.empty((T, len(idx.branch_phases)), complex)
    IU = np.empty((T, len(idx.user_phases)), complex)
    for k, t in enumerate(lay.timesteps):
        for i, (bus, p) in enumerate(idx.bus_phases):
            V[k, i] = x[keys[("Ure", (bus, p), t)]] + 1j * x[keys[("Uim", (bus, p), t)]]
        for i, (br, p) in enumerate(idx.branch_phases):
            IL[k, i] = x[keys[("Ire_branch", (br, p), t)]] + 1j * x[keys[("Iim_branch", (br, p), t)]]
        for i, (u, p) in enumerate(idx.user_phases):
            IU[k, i] = x[keys[("Ire_user", (u, p), t)]] + 1j * x[keys[("Iim_user", (u, p), t)]]
    state = StateSolution(
        tuple(idx.bus_phases), tuple(idx.branch_phases), tuple(idx.user_phases),
        V * lay.v_base, IL * lay.i_base, IU * lay.i_base, (),
        tuple(feeder.user_map[u].bus for u, _ in idx.user_phases),
    )

    g = problem.constraints(x)
    residuals = []
    for m in lay.measurements:
        # row "+" is w (x - z) - rho
        est_pu = (g[m.rows[0]] + x[m.rho]) / m.weight + m.target
        unit = lay.v_base if m.sample.kind == "VM" else lay.s_base
        est = est_pu * unit
        residuals.append(ResidualRecord(m.sample, est, (est - m.sample.value) / m.sample.sigma, float(x[m.rho])))

    if lay.mode in _VARIANT:
        for bid, zm in impedances.items():
            if bid in lay.options.pinned:
                continue
            broken = check_structure(zm, _VARIANT[lay.mode], lay.alphas, STRUCTURE_TOL, lay.options.toggles,
                                     scale=lay.z_base)
            if broken:
                messages.append(f"branch {bid} breaks {', '.join(broken)}")
    return EstimationResult(lay.mode, impedances, lengths, est_feeder, state, lay.timesteps, residuals,
                            objective, viol, status, flagged, messages)


def problem_size(problem: NlpProblem) -> dict:
    free = int(np.sum(problem.lb < problem.ub))
    return {
        "variables": problem.n,
        "free_variables": free,
        "fixed_variables": problem.n - free,
        "constraints": problem.m,
        "equalities": int(problem.is_eq.sum()),
        "inequalities": int((~problem.is_eq).sum()),
        "quadratic_terms": int(problem.q_val.size),
    }
