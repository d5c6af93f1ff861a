"""Unbalanced power flow in the rectangular current-voltage formulation.

Unknowns per timestep are the real/imaginary parts of every non-source bus
voltage, every branch current (from -> to) and every user current (bus ->
user).  Equations are KCL at non-source buses, multi-conductor Ohm's law per
branch and one pair of load equations per user phase.  Everything is solved
in per-unit and reported in SI.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .network import Feeder, FeederIndex

logger = logging.getLogger(__name__)

CONSTANT_POWER = "constant_power"
CONSTANT_CURRENT = "constant_current"


class PowerFlowError(RuntimeError):
    def __init__(self, message, timestep=None, iteration=None, bus=None):
        super().__init__(message)
        self.timestep = timestep
        self.iteration = iteration
        self.bus = bus


@dataclass(frozen=True, eq=False)
class InjectionSpec:
    """Per (user, phase) demand time series; positive P/Q is consumption."""

    columns: tuple[tuple[str, str], ...]
    p: np.ndarray  # (T, K) watt
    q: np.ndarray  # (T, K) var
    model: str = CONSTANT_POWER

    def __post_init__(self):
        p = np.atleast_2d(np.asarray(self.p, dtype=float))
        q = np.atleast_2d(np.asarray(self.q, dtype=float))
        if p.shape != q.shape or p.shape[1] != len(self.columns):
            raise ValueError("P/Q arrays must be (T, len(columns))")
        if self.model not in (CONSTANT_POWER, CONSTANT_CURRENT):
            raise ValueError(f"unknown load model {self.model!r}")
        object.__setattr__(self, "columns", tuple(tuple(c) for c in self.columns))
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "q", q)

    @property
    def n_steps(self) -> int:
        return self.p.shape[0]

    def step(self, t: int) -> "InjectionSpec":
        return InjectionSpec(self.columns, self.p[t : t + 1], self.q[t : t + 1], self.model)

    def check(self, feeder: Feeder) -> None:
        users = feeder.user_map
        for uid, ph in self.columns:
            if uid not in users or ph not in users[uid].phases:
                raise ValueError(f"injection on ({uid}, {ph}) which the user does not have")


@dataclass(frozen=True, eq=False)
class StateSolution:
    """Phasors in SI per timestep: arrays are (T, n) complex."""

    bus_phases: tuple[tuple[str, str], ...]
    branch_phases: tuple[tuple[str, str], ...]
    user_phases: tuple[tuple[str, str], ...]
    voltage: np.ndarray
    branch_current: np.ndarray
    user_current: np.ndarray
    iterations: tuple[int, ...] = ()
    user_buses: tuple[str, ...] = ()  # bus of each user phase

    @property
    def n_steps(self) -> int:
        return self.voltage.shape[0]

    def v(self, bus: str, phase: str) -> np.ndarray:
        return self.voltage[:, self.bus_phases.index((bus, phase))]

    def vmag(self) -> np.ndarray:
        return np.abs(self.voltage)

    def user_power(self) -> np.ndarray:
        """Complex user consumption S = U conj(I) per user phase, (T, K)."""
        idx = [self.bus_phases.index((b, p)) for b, (_, p) in zip(self.user_buses, self.user_phases)]
        return self.voltage[:, idx] * np.conj(self.user_current)

    def select(self, steps) -> "StateSolution":
        steps = list(steps)
        return StateSolution(
            self.bus_phases, self.branch_phases, self.user_phases,
            self.voltage[steps], self.branch_current[steps], self.user_current[steps],
            tuple(self.iterations[i] for i in steps) if self.iterations else (),
            self.user_buses,
        )


def balanced_source(magnitude: float, phases=("a", "b", "c")) -> dict[str, complex]:
    angles = {"a": 0.0, "b": -120.0, "c": 120.0}
    return {p: magnitude * np.exp(1j * np.deg2rad(angles[p])) for p in phases}


class _System:
    """Sparse structure of the I-V equations for one feeder (per-unit)."""

    def __init__(self, feeder: Feeder):
        idx = FeederIndex(feeder)
        self.idx = idx
        self.feeder = feeder
        zb = feeder.z_base()
        self.v_base = feeder.base_voltage
        self.s_base = feeder.base_power / 3.0
        self.i_base = self.s_base / self.v_base
        src = idx.source
        self.src_cols = [i for i, (b, _) in enumerate(idx.bus_phases) if b == src]
        self.free_bus = [i for i, (b, _) in enumerate(idx.bus_phases) if b != src]
        nb, nl, nu = len(self.free_bus), len(idx.branch_phases), len(idx.user_phases)
        self.nb, self.nl, self.nu = nb, nl, nu
        # unknown layout: [Ure nb][Uim nb][Ire nl][Iim nl][Iure nu][Iuim nu]
        self.o_ur, self.o_ui = 0, nb
        self.o_ir, self.o_ii = 2 * nb, 2 * nb + nl
        self.o_ur_u, self.o_ui_u = 2 * nb + 2 * nl, 2 * nb + 2 * nl + nu
        self.n = 2 * (nb + nl + nu)
        free_pos = {k: j for j, k in enumerate(self.free_bus)}
        self.free_pos = free_pos

        rows, cols, vals = [], [], []
        rhs_src_rows = []  # (row, source bus-phase column, sign, part)
        r = 0
        # KCL at non-source bus phases
        kcl_row = {}
        for j, bp in enumerate(self.free_bus):
            kcl_row[idx.bus_phases[bp]] = r
            r += 2
        for br in feeder.branches:
            for p in br.phases:
                li = idx.lp[(br.id, p)]
                for bus, sign in ((br.from_bus, 1.0), (br.to_bus, -1.0)):
                    key = (bus, p)
                    if key in kcl_row:
                        kr = kcl_row[key]
                        rows += [kr, kr + 1]
                        cols += [self.o_ir + li, self.o_ii + li]
                        vals += [sign, sign]
        for u in feeder.users:
            for p in u.phases:
                ui = idx.up[(u.id, p)]
                key = (u.bus, p)
                if key in kcl_row:
                    kr = kcl_row[key]
                    rows += [kr, kr + 1]
                    cols += [self.o_ur_u + ui, self.o_ui_u + ui]
                    vals += [1.0, 1.0]
        # Ohm: U_i - U_j - Z I = 0
        for br in feeder.branches:
            R = br.impedance.r / zb
            X = br.impedance.x / zb
            for a, p in enumerate(br.phases):
                for bus, sign in ((br.from_bus, 1.0), (br.to_bus, -1.0)):
                    bp = idx.bp[(bus, p)]
                    if bus == src:
                        rhs_src_rows.append((r, self.src_cols.index(bp), sign))
                    else:
                        jb = free_pos[bp]
                        rows += [r, r + 1]
                        cols += [self.o_ur + jb, self.o_ui + jb]
                        vals += [sign, sign]
                for b, q in enumerate(br.phases):
                    lq = idx.lp[(br.id, q)]
                    if R[a, b] != 0.0:
                        rows += [r, r + 1]
                        cols += [self.o_ir + lq, self.o_ii + lq]
                        vals += [-R[a, b], -R[a, b]]
                    if X[a, b] != 0.0:
                        rows += [r, r + 1]
                        cols += [self.o_ii + lq, self.o_ir + lq]
                        vals += [X[a, b], -X[a, b]]
                r += 2
        self.n_lin = r
        self.lin = sp.csr_matrix((vals, (rows, cols)), shape=(r, self.n))
        self.src_rows = rhs_src_rows
        # load rows follow: user phase ui -> rows n_lin + 2ui, +1
        self.user_bus_col = []
        for u in feeder.users:
            for p in u.phases:
                self.user_bus_col.append(idx.bp[(u.bus, p)])
        self.user_bus_col = np.array(self.user_bus_col, dtype=int)
        self.u_nom = np.array([feeder.bus_map[u.bus].base_voltage / self.v_base for u in feeder.users for _ in u.phases])

    def split(self, z: np.ndarray, src: np.ndarray):
        nb, nl, nu = self.nb, self.nl, self.nu
        u = np.empty(len(self.idx.bus_phases), dtype=complex)
        u[self.src_cols] = src
        u[self.free_bus] = z[: nb] + 1j * z[nb : 2 * nb]
        il = z[2 * nb : 2 * nb + nl] + 1j * z[2 * nb + nl : 2 * nb + 2 * nl]
        iu = z[2 * nb + 2 * nl : 2 * nb + 2 * nl + nu] + 1j * z[2 * nb + 2 * nl + nu :]
        return u, il, iu

    def pack(self, u, il, iu) -> np.ndarray:
        uf = u[self.free_bus]
        return np.concatenate([uf.real, uf.imag, il.real, il.imag, iu.real, iu.imag])

    def source_rhs(self, src: np.ndarray) -> np.ndarray:
        c = np.zeros(self.n_lin)
        for row, k, sign in self.src_rows:
            c[row] += sign * src[k].real
            c[row + 1] += sign * src[k].imag
        return c

    def load_terms(self, u_user, iu, p, q, model):
        """Load residuals and their partials w.r.t. (Ure, Uim, Ire, Iim) of each user phase."""
        ur, ui, ir, ii = u_user.real, u_user.imag, iu.real, iu.imag
        if model == CONSTANT_CURRENT:
            mag = np.abs(u_user)
            safe = np.where(mag > 0, mag, 1.0)
            scale = mag / self.u_nom
            dsr, dsi = ur / safe / self.u_nom, ui / safe / self.u_nom
        else:
            scale = np.ones_like(ur)
            dsr = dsi = np.zeros_like(ur)
        fp = ur * ir + ui * ii - p * scale
        fq = ui * ir - ur * ii - q * scale
        dfp = (ir - p * dsr, ii - p * dsi, ur, ui)
        dfq = (-ii - q * dsr, ir - q * dsi, ui, -ur)
        return fp, fq, dfp, dfq

    def residual(self, z, src, p, q, model):
        u, il, iu = self.split(z, src)
        lin = self.lin @ z + self.source_rhs(src)
        fp, fq, _, _ = self.load_terms(u[self.user_bus_col], iu, p, q, model)
        load = np.empty(2 * self.nu)
        load[0::2], load[1::2] = fp, fq
        return np.concatenate([lin, load])

    def jacobian(self, z, src, p, q, model):
        u, il, iu = self.split(z, src)
        _, _, dfp, dfq = self.load_terms(u[self.user_bus_col], iu, p, q, model)
        rows, cols, vals = [], [], []
        for k in range(self.nu):
            bp = self.user_bus_col[k]
            rp, rq = self.n_lin + 2 * k, self.n_lin + 2 * k + 1
            ucols = []
            if bp in self.free_pos:
                jb = self.free_pos[bp]
                ucols = [(0, self.o_ur + jb), (1, self.o_ui + jb)]
            icols = [(2, self.o_ur_u + k), (3, self.o_ui_u + k)]
            for part, col in ucols + icols:
                rows += [rp, rq]
                cols += [col, col]
                vals += [dfp[part][k], dfq[part][k]]
        load = sp.csr_matrix((vals, (rows, cols)), shape=(self.n_lin + 2 * self.nu, self.n))
        lin = sp.vstack([self.lin, sp.csr_matrix((2 * self.nu, self.n))])
        return (lin + load).tocsc()


def _injection_columns(sys: _System, inj: InjectionSpec):
    col = {c: i for i, c in enumerate(inj.columns)}
    sel = np.array([col.get(k, -1) for k in sys.idx.user_phases], dtype=int)
    return sel


def _solve_step(sys: _System, src_pu, p, q, model, tol, max_iter, t):
    u0 = np.empty(len(sys.idx.bus_phases), dtype=complex)
    phase_src = {ph: src_pu[k] for k, (_, ph) in enumerate(sys.idx.bus_phases[c] for c in sys.src_cols)}
    for i, (_, ph) in enumerate(sys.idx.bus_phases):
        u0[i] = phase_src.get(ph, 1.0)
    z = sys.pack(u0, np.zeros(sys.nl, complex), np.zeros(sys.nu, complex))
    for it in range(max_iter + 1):
        f = sys.residual(z, src_pu, p, q, model)
        err = np.max(np.abs(f)) if f.size else 0.0
        if err <= tol:
            return z, it
        if it == max_iter:
            break
        J = sys.jacobian(z, src_pu, p, q, model)
        try:
            dz = spla.splu(J).solve(-f)
        except RuntimeError as exc:
            worst = int(np.argmax(np.abs(f)))
            raise PowerFlowError(f"singular Jacobian at timestep {t}, iteration {it} (worst residual row {worst})",
                                 timestep=t, iteration=it, bus=_row_owner(sys, worst)) from exc
        if not np.all(np.isfinite(dz)):
            raise PowerFlowError(f"non-finite Newton step at timestep {t}", timestep=t, iteration=it)
        z = z + dz
    worst = int(np.argmax(np.abs(f)))
    raise PowerFlowError(f"power flow did not converge at timestep {t} after {max_iter} iterations "
                         f"(residual {err:.3e}, worst near {_row_owner(sys, worst)})",
                         timestep=t, iteration=max_iter, bus=_row_owner(sys, worst))


def _row_owner(sys: _System, row: int) -> str:
    if row < 2 * sys.nb:
        return str(sys.idx.bus_phases[sys.free_bus[row // 2]])
    if row < sys.n_lin:
        return f"branch row {row}"
    return str(sys.idx.user_phases[(row - sys.n_lin) // 2])


def solve(
    feeder: Feeder,
    injections: InjectionSpec,
    source_voltage: dict[str, complex] | None = None,
    tol: float = 1e-8,
    max_iter: int = 50,
    workers: int = 1,
) -> StateSolution:
    """Solve every timestep of ``injections`` and return SI phasors.

    ``source_voltage`` maps phase -> phasor in volt; by default a balanced set
    at the source bus base voltage.  ``tol`` is the infinity norm of the
    per-unit residual.
    """
    if feeder.per_unit:
        raise ValueError("power flow expects an SI feeder")
    injections.check(feeder)
    src_bus = feeder.source
    if source_voltage is None:
        source_voltage = balanced_source(src_bus.base_voltage, src_bus.phases)
    if any(abs(source_voltage[p]) <= 0 for p in src_bus.phases):
        raise ValueError("source voltage magnitudes must be positive")
    sys = _System(feeder)
    src_pu = np.array([source_voltage[ph] for (_, ph) in (sys.idx.bus_phases[c] for c in sys.src_cols)]) / sys.v_base
    sel = _injection_columns(sys, injections)
    T = injections.n_steps

    def run(t):
        p = np.where(sel >= 0, injections.p[t, sel], 0.0) / sys.s_base
        q = np.where(sel >= 0, injections.q[t, sel], 0.0) / sys.s_base
        return _solve_step(sys, src_pu, p, q, injections.model, tol, max_iter, t)

    if workers > 1 and T > 1:
        with ThreadPoolExecutor(workers) as ex:
            results = list(ex.map(run, range(T)))
    else:
        results = [run(t) for t in range(T)]

    V = np.empty((T, len(sys.idx.bus_phases)), complex)
    IL = np.empty((T, sys.nl), complex)
    IU = np.empty((T, sys.nu), complex)
    for t, (z, _) in enumerate(results):
        u, il, iu = sys.split(z, src_pu)
        V[t], IL[t], IU[t] = u * sys.v_base, il * sys.i_base, iu * sys.i_base
    sol = StateSolution(tuple(sys.idx.bus_phases), tuple(sys.idx.branch_phases), tuple(sys.idx.user_phases),
                        V, IL, IU, tuple(it for _, it in results),
                        tuple(u.bus for u in feeder.users for _ in u.phases))
    return sol


def residual_norm(feeder: Feeder, state: StateSolution, injections: InjectionSpec) -> float:
    """Largest per-unit violation of KCL, Ohm's law and the load equations over all timesteps."""
    sys = _System(feeder)
    if state.voltage.shape[1] != len(sys.idx.bus_phases) or state.n_steps != injections.n_steps:
        raise ValueError("state and injections do not match the feeder")
    sel = _injection_columns(sys, injections)
    worst = 0.0
    for t in range(state.n_steps):
        src = state.voltage[t, sys.src_cols] / sys.v_base
        z = sys.pack(state.voltage[t] / sys.v_base, state.branch_current[t] / sys.i_base,
                     state.user_current[t] / sys.i_base)
        p = np.where(sel >= 0, injections.p[t, sel], 0.0) / sys.s_base
        q = np.where(sel >= 0, injections.q[t, sel], 0.0) / sys.s_base
        f = sys.residual(z, src, p, q, injections.model)
        if f.size:
            worst = max(worst, float(np.max(np.abs(f))))
    return worst
