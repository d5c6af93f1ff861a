"""Primal-dual interior-point solver for :class:`~impest.nlp.NlpProblem`.

Inequality rows get slack variables, so the inner problem is
``min f(y)  s.t.  c(y) = 0,  lb <= y <= ub`` with ``y = (x_free, s)``.  Each
iteration solves the regularised primal-dual KKT system with a sparse LU
factorisation; negative curvature is handled without inertia information by
testing the curvature of the computed step and adding a multiple of the
identity to the Hessian block until it is positive.  Steps are globalised by
a filter line search on the barrier problem with second-order corrections
and a feasibility restoration phase.
"""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.linalg as sla
import scipy.sparse.linalg as spla

from .nlp import NlpProblem

logger = logging.getLogger(__name__)

OPTIMAL = "optimal_local"
MAX_ITER = "max_iter"
TIME_LIMIT = "time_limit"
INFEASIBLE = "infeasible_detected"
NUMERICAL = "numerical_failure"
STATUSES = (OPTIMAL, MAX_ITER, TIME_LIMIT, INFEASIBLE, NUMERICAL)
LOG_COLUMNS = ["iter", "objective", "inf_pr", "inf_du", "mu", "alpha"]


@dataclass(frozen=True)
class SolverOptions:
    tol: float = 1e-7
    max_iter: int = 3000
    time_limit: float | None = None  # seconds of wall clock
    mu_init: float = 0.1
    acceptable_tol: float = 1e-6
    acceptable_iter: int = 15
    bound_push: float = 1e-2
    bound_relax: float = 1e-8
    warm_start: np.ndarray | None = None  # full-length start point replacing problem.x0
    scale_rows: bool = True
    polish: bool = True
    verbosity: int = 0
    log_path: str | None = None

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("solver tolerance must be positive")
        if self.max_iter < 0:
            raise ValueError("max_iter must be non-negative")


@dataclass(eq=False)
class SolveOutcome:
    status: str
    x: np.ndarray
    objective: float
    max_violation: float
    iterations: int
    wall_time: float
    multipliers: np.ndarray | None = None
    log: list[dict] = field(default_factory=list)

    @property
    def success(self) -> bool:
        return self.status == OPTIMAL


class _Scaled:
    """The slack-augmented problem on free variables with row and objective scaling."""

    def __init__(self, problem: NlpProblem, x_start: np.ndarray, opts: SolverOptions):
        self.p = problem
        self.free = problem.lb < problem.ub
        self.fi = np.flatnonzero(self.free)
        self.x_fixed = np.where(self.free, 0.0, problem.lb)
        self.n_x = self.fi.size
        self.ineq = np.flatnonzero(~problem.is_eq)
        self.m = problem.m
        self.n_s = self.ineq.size
        self.n = self.n_x + self.n_s

        x0 = np.where(self.free, x_start, problem.lb)
        J0 = problem.jacobian(x0)
        if opts.scale_rows and self.m:
            gmax = abs(J0).max(axis=1).toarray().ravel()
            self.d = np.minimum(1.0, 100.0 / np.maximum(gmax, 1e-300))
            self.d[gmax == 0] = 1.0
        else:
            self.d = np.ones(self.m)
        cmax = np.abs(problem.c).max(initial=0.0)
        self.df = min(1.0, 100.0 / cmax) if opts.scale_rows and cmax > 0 else 1.0
        self.grad = np.concatenate([self.df * problem.c[self.fi], np.zeros(self.n_s)])
        self.S = sp.csr_matrix((np.ones(self.n_s), (self.ineq, np.arange(self.n_s))), shape=(self.m, self.n_s))
        self.D = sp.diags(self.d)

        lb = np.concatenate([problem.lb[self.fi], np.zeros(self.n_s)])
        ub = np.concatenate([problem.ub[self.fi], np.full(self.n_s, np.inf)])
        relax = opts.bound_relax
        self.lb = np.where(np.isfinite(lb), lb - relax * np.maximum(1.0, np.abs(lb)), -np.inf)
        self.ub = np.where(np.isfinite(ub), ub + relax * np.maximum(1.0, np.abs(ub)), np.inf)
        # a relaxed slack is a constraint violation of relax / d in the unscaled rows
        self.lb[self.n_x:] = -relax * self.d[self.ineq]
        self.has_l = np.isfinite(self.lb)
        self.has_u = np.isfinite(self.ub)

    def full_x(self, y: np.ndarray) -> np.ndarray:
        x = self.x_fixed.copy()
        x[self.fi] = y[: self.n_x]
        return x

    def f(self, y):
        return float(self.grad @ y) + self.df * self.p.c0

    def cons(self, y):
        c = self.d * self.p.constraints(self.full_x(y))
        c[self.ineq] += y[self.n_x:]
        return c

    def jac(self, y):
        J = self.p.jacobian(self.full_x(y))[:, self.fi]
        return sp.hstack([self.D @ J, self.S], format="csr")

    def hess(self, lam):
        H = self.p.hessian(self.d * lam)[self.fi][:, self.fi]
        return sp.block_diag([H, sp.csr_matrix((self.n_s, self.n_s))], format="csr")


def _push(y, lb, ub, k):
    """Move a start point strictly inside its bounds."""
    y = y.copy()
    fin_l, fin_u = np.isfinite(lb), np.isfinite(ub)
    both = fin_l & fin_u
    pl = np.where(fin_l, k * np.maximum(1.0, np.abs(lb)), 0.0)
    pu = np.where(fin_u, k * np.maximum(1.0, np.abs(ub)), 0.0)
    width = np.where(both, ub - lb, np.inf)
    pl = np.minimum(pl, k * width)
    pu = np.minimum(pu, k * width)
    lo = np.where(fin_l, lb + pl, -np.inf)
    hi = np.where(fin_u, ub - pu, np.inf)
    return np.clip(y, lo, hi)


def _frac_to_boundary(v, dv, lo, tau):
    """Largest alpha in (0, 1] with v + alpha dv >= (1 - tau)(v - lo) + lo componentwise."""
    gap = v - lo
    neg = dv < 0
    if not np.any(neg):
        return 1.0
    return float(min(1.0, np.min(-tau * gap[neg] / dv[neg])))


class _Factor:
    """Factorization of the primal-dual matrix, split into a sparse and a dense part.

    Time-invariant variables (lengths, impedance entries) touch every timestep.
    Ordering them late is what minimum-degree orderings get wrong once pivoting
    kicks in, so they are eliminated last through a dense Schur complement,
    leaving a block-diagonal remainder.
    """

    def __init__(self, K: sp.csc_matrix, dense: np.ndarray):
        self.K = K
        self.dense = dense
        if not dense.size:
            self.lu = _splu(K)
            return
        mask = np.zeros(K.shape[0], dtype=bool)
        mask[dense] = True
        self.local = np.flatnonzero(~mask)
        K_ll = K[self.local][:, self.local].tocsc()
        K_lg = K[self.local][:, dense]
        K_gl = K[dense][:, self.local]
        K_gg = K[dense][:, dense].toarray()
        self.lu = _splu(K_ll)
        self.X = self.lu.solve(np.asarray(K_lg.toarray()))
        self.K_gl = K_gl.tocsr()
        schur = K_gg - self.K_gl @ self.X
        if not np.all(np.isfinite(schur)):
            raise RuntimeError("non-finite Schur complement")
        self.schur = sla.lu_factor(schur, check_finite=False)
        piv = np.abs(np.diag(self.schur[0]))
        if piv.min(initial=np.inf) <= 1e-14 * max(1.0, piv.max(initial=0.0)):
            raise RuntimeError("singular Schur complement")

    def _solve_once(self, b):
        if not self.dense.size:
            return self.lu.solve(b)
        b_l, b_g = b[self.local], b[self.dense]
        y = self.lu.solve(b_l)
        x_g = sla.lu_solve(self.schur, b_g - self.K_gl @ y, check_finite=False)
        out = np.empty_like(b)
        out[self.local] = y - self.X @ x_g
        out[self.dense] = x_g
        return out

    def solve(self, b):
        x = self._solve_once(b)
        x = x + self._solve_once(b - self.K @ x)
        return x


def _splu(K):
    return spla.splu(K, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.1, options={"SymmetricMode": True})


def _dense_nodes(K: sp.csc_matrix, n: int) -> np.ndarray:
    """High-degree primal columns plus the constraint rows that only touch them."""
    pattern = (K != 0).astype(np.int8)
    deg = np.diff(pattern.indptr)
    if K.shape[0] < 2000:
        return np.zeros(0, dtype=int)
    heavy = np.zeros(K.shape[0], dtype=bool)
    heavy[:n] = deg[:n] > max(50.0, 10.0 * float(np.median(deg[:n])))
    if not heavy.any():
        return np.zeros(0, dtype=int)
    A = pattern[n:, :n].tocsr()
    light_count = A @ (~heavy[:n]).astype(np.int64)
    heavy[n:] = (light_count == 0) & (np.diff(A.indptr) > 0)
    return np.flatnonzero(heavy)


class _KKT:
    def __init__(self, n, m):
        self.n, self.m = n, m
        self.delta_w_last = 0.0

    def solve(self, W, Sigma, A, r1, r2, delta_w, delta_c):
        n, m = self.n, self.m
        H = W + sp.diags(Sigma + delta_w)
        K = sp.bmat([[H, A.T], [A, -delta_c * sp.identity(m) if delta_c else None]], format="csc")
        fac = _Factor(K, _dense_nodes(K, n))
        sol = fac.solve(np.concatenate([r1, r2]))
        if not np.all(np.isfinite(sol)):
            raise RuntimeError("non-finite KKT solution")
        return sol[:n], sol[n:], fac, H


class _Filter:
    """Pairs (theta, phi) that future iterates must improve upon."""

    def __init__(self, theta_max: float):
        self.theta_max = theta_max
        self.entries: list[tuple[float, float]] = []

    def acceptable(self, theta: float, phi: float) -> bool:
        if theta > self.theta_max:
            return False
        return all(theta < t or phi < p for t, p in self.entries)

    def add(self, theta: float, phi: float) -> None:
        self.entries = [(t, p) for t, p in self.entries if not (t >= theta and p >= phi)]
        self.entries.append((theta, phi))


# filter line search constants
_GAMMA_THETA = 1e-5
_GAMMA_PHI = 1e-8
_DELTA = 1.0
_S_THETA = 1.1
_S_PHI = 2.3
_ETA_PHI = 1e-8
_KAPPA_SOC = 0.99
_MAX_SOC = 4
_SHORT_STEP = 1e-2
_SHORT_TRIGGER = 5
_KAPPA_SIGMA = 1e10


class _State:
    """Primal-dual iterate with the quantities every step needs."""

    def __init__(self, P: _Scaled, y, lam, zl, zu):
        self.P = P
        self.y, self.lam, self.zl, self.zu = y, lam, zl, zu

    def dist(self, y=None):
        P = self.P
        y = self.y if y is None else y
        dl = np.where(P.has_l, y - P.lb, 1.0)
        du = np.where(P.has_u, P.ub - y, 1.0)
        return dl, du


def _barrier(P: _Scaled, y, mu) -> float:
    dl = (y - P.lb)[P.has_l]
    du = (P.ub - y)[P.has_u]
    if np.any(dl <= 0) or np.any(du <= 0):
        return np.inf
    return P.f(y) - mu * (np.log(dl).sum() + np.log(du).sum())


def _max_step(P: _Scaled, y, dy, tau) -> float:
    a = 1.0
    if P.has_l.any():
        a = min(a, _frac_to_boundary(y[P.has_l], dy[P.has_l], P.lb[P.has_l], tau))
    if P.has_u.any():
        a = min(a, _frac_to_boundary(-y[P.has_u], -dy[P.has_u], -P.ub[P.has_u], tau))
    return a


def _direction(kkt: _KKT, W, sig, A, r1, r2, mu, reg: dict, delta_w: float = 0.0):
    """Solve the primal-dual system, regularising until the step has positive curvature."""
    delta_c = 0.0
    for _ in range(80):
        try:
            dy, dlam, lu, H = kkt.solve(W, sig, A, r1, r2, delta_w, delta_c)
        except RuntimeError:
            if delta_c == 0.0:
                delta_c = 1e-8 * mu ** 0.25
            else:
                delta_w = _bump(delta_w, reg["last"])
            continue
        curv = float(dy @ (H @ dy))
        if curv >= 1e-12 * float(dy @ dy) or delta_w > 1e30:
            if delta_w > 0:
                reg["last"] = delta_w
            reg["current"] = delta_w
            return dy, dlam, lu, curv
        delta_w = _bump(delta_w, reg["last"])
    return None


def _restore(P: _Scaled, st: _State, mu: float, filt: _Filter, kkt: _KKT, tau: float, max_iter: int = 100):
    """Reduce the constraint violation alone until the filter accepts the point.

    Each step is the minimum-norm linearised feasibility step in the metric of
    the barrier Hessian, kept inside the bounds.
    """
    y = st.y.copy()
    theta0 = float(np.abs(P.cons(y)).sum())
    phi0 = _barrier(P, y, mu)
    zeta = math.sqrt(mu)
    for _ in range(max_iter):
        c = P.cons(y)
        theta = float(np.abs(c).sum())
        A = P.jac(y)
        dl, du = st.dist(y)
        sig = np.zeros(P.n)
        sig[P.has_l] += mu / dl[P.has_l] ** 2
        sig[P.has_u] += mu / du[P.has_u] ** 2
        try:
            dy, _, _, _ = kkt.solve(sp.csr_matrix((P.n, P.n)), sig + zeta, A, np.zeros(P.n), -c, 0.0, 1e-10)
        except RuntimeError:
            return None
        alpha = _max_step(P, y, dy, tau)
        while alpha > 1e-10:
            y_t = y + alpha * dy
            th_t = float(np.abs(P.cons(y_t)).sum())
            if th_t < (1 - 1e-4 * alpha) * theta:
                break
            alpha *= 0.5
        else:
            return None
        y = y_t
        phi = _barrier(P, y, mu)
        if th_t <= 0.9 * theta0 and filt.acceptable(th_t, phi) and (th_t < (1 - _GAMMA_THETA) * theta0
                                                                   or phi < phi0 - _GAMMA_PHI * theta0):
            return y
        if th_t < 1e-12:
            return y
    return None


def solve(problem: NlpProblem, opts: SolverOptions | None = None) -> SolveOutcome:
    """Local minimisation of ``problem`` from ``problem.x0`` (or ``opts.warm_start``)."""
    opts = opts or SolverOptions()
    t0 = time.perf_counter()
    x_start = problem.x0 if opts.warm_start is None else np.asarray(opts.warm_start, dtype=float)
    if x_start.shape != (problem.n,):
        raise ValueError("warm start has the wrong dimension")
    P = _Scaled(problem, x_start, opts)
    n, m = P.n, P.m
    log: list[dict] = []

    if n == 0:
        x = P.full_x(np.zeros(0))
        viol = problem.max_violation(x)
        status = OPTIMAL if viol <= opts.tol else INFEASIBLE
        return SolveOutcome(status, x, problem.objective(x), viol, 0, time.perf_counter() - t0, np.zeros(m))

    # -- initial point ---------------------------------------------------------------
    x0f = np.clip(x_start[P.fi], problem.lb[P.fi], problem.ub[P.fi])
    g0 = P.d * problem.constraints(np.where(P.free, x_start, problem.lb))
    s0 = np.maximum(-g0[P.ineq], 0.0)
    y = _push(np.concatenate([x0f, s0]), P.lb, P.ub, opts.bound_push)
    zl = np.where(P.has_l, 1.0, 0.0)
    zu = np.where(P.has_u, 1.0, 0.0)
    st = _State(P, y, _initial_multipliers(P, y, zl, zu), zl, zu)
    mu = opts.mu_init
    tau_min = 0.99
    kkt = _KKT(n, m)
    reg = {"last": 0.0, "current": 0.0}
    theta_init = float(np.abs(P.cons(st.y)).sum())
    theta_max = 1e4 * max(1.0, theta_init)
    theta_min = 1e-4 * max(1.0, theta_init)
    filt = _Filter(theta_max)
    accept_count = 0
    resto_fail = 0
    status = MAX_ITER
    alpha = 0.0
    short_steps = 0
    it = 0

    for it in range(opts.max_iter + 1):
        y, lam, zl, zu = st.y, st.lam, st.zl, st.zu
        c = P.cons(y)
        A = P.jac(y)
        dl, du = st.dist()
        grad_lag = P.grad + A.T @ lam - zl + zu
        nb = int(P.has_l.sum() + P.has_u.sum())
        zsum = np.abs(zl).sum() + np.abs(zu).sum()
        s_d = max(100.0, (np.abs(lam).sum() + zsum) / max(1, m + nb)) / 100.0
        s_c = max(100.0, zsum / max(1, nb)) / 100.0
        inf_du = float(np.abs(grad_lag).max(initial=0.0))
        inf_pr = float(np.abs(c).max(initial=0.0))

        def compl(mu_):
            a = np.abs(dl * zl - mu_)[P.has_l].max(initial=0.0)
            b = np.abs(du * zu - mu_)[P.has_u].max(initial=0.0)
            return float(max(a, b))

        err0 = max(inf_du / s_d, inf_pr, compl(0.0) / s_c)
        obj = problem.objective(P.full_x(y))
        log.append({"iter": it, "objective": obj, "inf_pr": inf_pr, "inf_du": inf_du, "mu": mu, "alpha": alpha,
                    "reg": reg["current"]})
        if opts.verbosity >= 2:
            logger.info("iter %4d obj %.8e inf_pr %.2e inf_du %.2e mu %.1e alpha %.2e reg %.1e",
                        it, obj, inf_pr, inf_du, mu, alpha, reg["current"])

        x_full = _clip_full(problem, P.full_x(y))
        feasible = problem.max_violation(x_full) <= opts.tol
        if err0 <= opts.tol and feasible:
            status = OPTIMAL
            break
        if err0 <= opts.acceptable_tol and feasible:
            accept_count += 1
            if accept_count >= opts.acceptable_iter:
                status = OPTIMAL
                break
        else:
            accept_count = 0
        if it == opts.max_iter:
            status = MAX_ITER
            break
        if opts.time_limit is not None and time.perf_counter() - t0 > opts.time_limit:
            status = TIME_LIMIT
            break

        mu_old = mu
        while max(inf_du / s_d, inf_pr, compl(mu) / s_c) <= 10.0 * mu and mu > opts.tol / 10.0:
            mu = max(opts.tol / 10.0, min(0.2 * mu, mu ** 1.5))
        if mu != mu_old:
            filt = _Filter(theta_max)
        tau = max(tau_min, 1.0 - mu)

        # -- search direction -------------------------------------------------------
        W = P.hess(lam)
        sig = np.zeros(n)
        sig[P.has_l] += zl[P.has_l] / dl[P.has_l]
        sig[P.has_u] += zu[P.has_u] / du[P.has_u]
        grad_phi = P.grad.copy()
        grad_phi[P.has_l] -= mu / dl[P.has_l]
        grad_phi[P.has_u] += mu / du[P.has_u]
        r1 = -(grad_phi + A.T @ lam)
        found = _direction(kkt, W, sig, A, r1, -c, mu, reg)
        if found is None:
            status = NUMERICAL
            break
        dy, dlam, lu, curv = found
        # After repeated tiny steps near feasibility, an ascent direction for the barrier
        # signals negative curvature that the global curvature test missed; regularise
        # until the step descends.
        theta = float(np.abs(c).sum())
        bumps = 0
        while (short_steps >= _SHORT_TRIGGER and theta <= theta_min and float(grad_phi @ dy) > 0
               and bumps < 10):
            retry = _direction(kkt, W, sig, A, r1, -c, mu, reg, _bump(reg["current"], reg["last"]))
            if retry is None:
                break
            dy, dlam, lu, curv = retry
            bumps += 1
        dzl = np.where(P.has_l, mu / dl - zl - zl / dl * dy, 0.0)
        dzu = np.where(P.has_u, mu / du - zu + zu / du * dy, 0.0)

        a_max = _max_step(P, y, dy, tau)
        a_z = 1.0
        if P.has_l.any():
            a_z = min(a_z, _frac_to_boundary(zl[P.has_l], dzl[P.has_l], 0.0, tau))
        if P.has_u.any():
            a_z = min(a_z, _frac_to_boundary(zu[P.has_u], dzu[P.has_u], 0.0, tau))

        # -- filter line search ---------------------------------------------------------
        theta = float(np.abs(c).sum())
        phi = _barrier(P, y, mu)
        gd = float(grad_phi @ dy)
        if gd < 0:
            a_min = 0.05 * min(_GAMMA_THETA, _GAMMA_PHI * theta / -gd, _DELTA * theta ** _S_THETA / (-gd) ** _S_PHI)
        else:
            a_min = 0.05 * _GAMMA_THETA
        a_min = max(a_min, 1e-16)

        def try_point(y_t, alpha_):
            th_t = float(np.abs(P.cons(y_t)).sum())
            ph_t = _barrier(P, y_t, mu)
            if not np.isfinite(ph_t) or not filt.acceptable(th_t, ph_t):
                return False, False, th_t
            switching = gd < 0 and alpha_ * (-gd) ** _S_PHI > _DELTA * theta ** _S_THETA
            if theta <= theta_min and switching:
                return ph_t <= phi + _ETA_PHI * alpha_ * gd, True, th_t
            ok = th_t <= (1 - _GAMMA_THETA) * theta or ph_t <= phi - _GAMMA_PHI * theta
            return ok, False, th_t

        alpha = a_max
        accepted, f_type, y_new = False, False, None
        first = True
        while alpha >= a_min:
            y_t = y + alpha * dy
            ok, f_type, th_t = try_point(y_t, alpha)
            if ok:
                accepted, y_new = True, y_t
                break
            if first and th_t >= theta:
                # second-order corrections for the curvature of the quadratic rows
                c_soc = alpha * c + P.cons(y_t)
                th_old = theta
                for _ in range(_MAX_SOC):
                    sol = lu.solve(np.concatenate([r1, -c_soc]))
                    d_soc = sol[:n]
                    a_soc = _max_step(P, y, d_soc, tau)
                    y_s = y + a_soc * d_soc
                    ok, f_type, th_s = try_point(y_s, alpha)
                    if ok:
                        accepted, y_new = True, y_s
                        break
                    if th_s > _KAPPA_SOC * th_old:
                        break
                    th_old = th_s
                    c_soc = a_soc * c_soc + P.cons(y_s)
                if accepted:
                    break
            first = False
            alpha *= 0.5

        if not accepted:
            y_r = _restore(P, st, mu, filt, kkt, tau)
            if y_r is None:
                resto_fail += 1
                status = INFEASIBLE if theta > 1e3 * opts.tol else NUMERICAL
                break
            filt.add((1 - _GAMMA_THETA) * theta, phi - _GAMMA_PHI * theta)
            st.y = y_r
            st.lam = _initial_multipliers(P, y_r, st.zl, st.zu)
            dl, du = st.dist()
            st.zl = np.where(P.has_l, np.clip(st.zl, mu / (_KAPPA_SIGMA * dl), _KAPPA_SIGMA * mu / dl), 0.0)
            st.zu = np.where(P.has_u, np.clip(st.zu, mu / (_KAPPA_SIGMA * du), _KAPPA_SIGMA * mu / du), 0.0)
            alpha = 0.0
            continue

        short_steps = short_steps + 1 if alpha < _SHORT_STEP * a_max else 0
        if not f_type:
            filt.add((1 - _GAMMA_THETA) * theta, phi - _GAMMA_PHI * theta)
        st.y = y_new
        st.lam = lam + alpha * dlam
        zl = zl + a_z * dzl
        zu = zu + a_z * dzu
        dl, du = st.dist()
        st.zl = np.where(P.has_l, np.clip(zl, mu / (_KAPPA_SIGMA * dl), _KAPPA_SIGMA * mu / dl), 0.0)
        st.zu = np.where(P.has_u, np.clip(zu, mu / (_KAPPA_SIGMA * du), _KAPPA_SIGMA * mu / du), 0.0)

    x = _clip_full(problem, P.full_x(st.y))
    if opts.polish:
        x = polish_epigraph(problem, x)
    viol = problem.max_violation(x)
    if status == OPTIMAL and viol > opts.tol:
        status = NUMERICAL
    wall = time.perf_counter() - t0
    multipliers = st.lam * P.d / P.df
    out = SolveOutcome(status, x, problem.objective(x), viol, it, wall, multipliers, log)
    if opts.log_path and opts.verbosity >= 1:
        write_log(out, opts.log_path)
    if opts.verbosity >= 1:
        logger.info("solver finished: %s after %d iterations, objective %.6e, violation %.2e, %.2f s",
                    status, it, out.objective, viol, wall)
    return out


def _bump(delta_w, last):
    if delta_w == 0.0:
        return 1e-4 if last == 0.0 else max(1e-20, last / 3.0)
    return delta_w * (100.0 if last == 0.0 else 8.0)


def _clip_full(problem: NlpProblem, x: np.ndarray) -> np.ndarray:
    return np.clip(x, problem.lb, problem.ub)


def _initial_multipliers(P: _Scaled, y, zl, zu) -> np.ndarray:
    """Least-squares multiplier estimate, discarded when it is implausibly large."""
    m, n = P.m, P.n
    if m == 0:
        return np.zeros(0)
    A = P.jac(y)
    K = sp.bmat([[sp.identity(n), A.T], [A, -1e-8 * sp.identity(m)]], format="csc")
    try:
        sol = spla.splu(K, permc_spec="MMD_AT_PLUS_A").solve(
            np.concatenate([-(P.grad - zl + zu), np.zeros(m)]))
    except RuntimeError:
        return np.zeros(m)
    lam = sol[n:]
    if not np.all(np.isfinite(lam)) or np.abs(lam).max() > 1e3:
        return np.zeros(m)
    return lam


def polish_epigraph(problem: NlpProblem, x: np.ndarray) -> np.ndarray:
    """Move every epigraph variable to the tightest value its rows allow.

    A variable qualifies when it has a positive objective coefficient, enters
    only inequality rows, linearly and with a negative coefficient, and is
    not part of any quadratic term.  Its rows then hold exactly at the new
    value, so a slack epigraph is lowered and one left slightly violated by
    the interior-point tolerance is raised onto its residual.
    """
    x = x.copy()
    cand = _epigraph_candidates(problem)
    if not cand:
        return x
    A = problem.A.tocsc()
    g = problem.constraints(x)
    for j in cand:
        lo, hi = A.indptr[j], A.indptr[j + 1]
        rows, coefs = A.indices[lo:hi], A.data[lo:hi]
        new = max(x[j] + g[r] / -a for r, a in zip(rows, coefs))
        new = min(problem.ub[j], max(problem.lb[j], new))
        if new != x[j]:
            delta = new - x[j]
            x[j] = new
            g[rows] += coefs * delta
    return x


def _epigraph_candidates(problem: NlpProblem) -> list[int]:
    cached = problem.meta.get("_epigraph_candidates")
    if cached is not None:
        return cached
    A = problem.A.tocsc()
    in_quad = np.zeros(problem.n, bool)
    in_quad[problem.q_j] = True
    in_quad[problem.q_k] = True
    out = []
    for j in np.flatnonzero(problem.c > 0):
        lo, hi = A.indptr[j], A.indptr[j + 1]
        if in_quad[j] or hi == lo or not problem.lb[j] < problem.ub[j]:
            continue
        rows = A.indices[lo:hi]
        if problem.is_eq[rows].any() or (A.data[lo:hi] >= 0).any():
            continue
        out.append(int(j))
    problem.meta["_epigraph_candidates"] = out
    return out


def write_log(outcome: SolveOutcome, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        w.writeheader()
        for row in outcome.log:
            w.writerow({k: (f"{row[k]:.10g}" if isinstance(row[k], float) else row[k]) for k in LOG_COLUMNS})


# -- derivative checker ------------------------------------------------------------

def check_derivatives(problem: NlpProblem, point, fd_step: float = 1e-3, jacobian=None) -> float:
    """Largest relative error between analytic and central-difference derivatives.

    Covers the objective gradient and every constraint row.  The relative
    error of an entry is ``|analytic - fd| / max(1, |analytic|, |fd|)``.
    Central differences carry no truncation error on rows of degree two, so
    the default step is large enough to keep round-off near 1e-13.
    ``jacobian`` may replace the analytic Jacobian (used to test the checker).
    """
    x = np.asarray(point, dtype=float)
    if x.shape != (problem.n,):
        raise ValueError("point has the wrong dimension")
    worst = 0.0
    Jc = problem.jacobian(x).tocsc() if jacobian is None else sp.csc_matrix(jacobian)
    for j in range(problem.n):
        e = np.zeros(problem.n)
        h = fd_step * max(1.0, abs(x[j]))
        e[j] = h
        gp, gm = problem.constraints(x + e), problem.constraints(x - e)
        fd = (gp - gm) / (2 * h)
        col = Jc[:, j].toarray().ravel()
        err = np.abs(col - fd) / np.maximum(1.0, np.maximum(np.abs(col), np.abs(fd)))
        worst = max(worst, float(err.max(initial=0.0)))
        fo = (problem.objective(x + e) - problem.objective(x - e)) / (2 * h)
        worst = max(worst, abs(fo - problem.c[j]) / max(1.0, abs(fo), abs(problem.c[j])))
    return worst
