"""Quadratically constrained programs in a solver-neutral form.

A program is ``min c.x + c0`` subject to rows ``a_i.x + sum_k q_k x_j x_l + b_i``
that are either ``= 0`` or ``<= 0``, and simple bounds on ``x``.  Every
quadratic term is a scalar product of two variables, which is all the
estimation programs need (bilinear Ohm's law, squared voltage magnitude,
power mappings).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

EQ = "eq"
LE = "le"


@dataclass(frozen=True)
class DecisionVariable:
    index: int
    role: str
    owner: tuple
    timestep: int | None
    lb: float
    ub: float
    scale: float = 1.0  # SI units (metre, ohm) per unit of the variable; 1 for per-unit quantities

    @property
    def id(self) -> str:
        owner = ",".join(str(o) for o in self.owner)
        return f"{self.role}[{owner}]" + (f"@{self.timestep}" if self.timestep is not None else "")


class ProgramBuilder:
    """Incremental assembly of an :class:`NlpProblem`."""

    def __init__(self):
        self.vars: list[DecisionVariable] = []
        self.keys: dict[tuple, int] = {}
        self.x0: list[float] = []
        self.obj: dict[int, float] = {}
        self.obj_const = 0.0
        self._lin_r: list[int] = []
        self._lin_c: list[int] = []
        self._lin_v: list[float] = []
        self._q_r: list[int] = []
        self._q_j: list[int] = []
        self._q_k: list[int] = []
        self._q_v: list[float] = []
        self.const: list[float] = []
        self.sense: list[str] = []
        self.labels: list[tuple] = []

    def add_var(self, role, owner, timestep=None, lb=-np.inf, ub=np.inf, x0=0.0, scale=1.0) -> int:
        owner = tuple(owner) if isinstance(owner, (tuple, list)) else (owner,)
        key = (role, owner, timestep)
        if key in self.keys:
            raise ValueError(f"variable {key} declared twice")
        if lb > ub:
            raise ValueError(f"variable {key} has empty bounds [{lb}, {ub}]")
        i = len(self.vars)
        self.vars.append(DecisionVariable(i, role, owner, timestep, float(lb), float(ub), float(scale)))
        self.keys[key] = i
        self.x0.append(float(x0))
        return i

    def var(self, role, owner, timestep=None) -> int:
        owner = tuple(owner) if isinstance(owner, (tuple, list)) else (owner,)
        return self.keys[(role, owner, timestep)]

    def has_var(self, role, owner, timestep=None) -> bool:
        owner = tuple(owner) if isinstance(owner, (tuple, list)) else (owner,)
        return (role, owner, timestep) in self.keys

    def add_objective(self, col: int, coef: float) -> None:
        self.obj[col] = self.obj.get(col, 0.0) + coef

    def add_row(self, sense: str, lin=(), quad=(), const: float = 0.0, label: tuple = ()) -> int:
        """Append ``sum(lin) + sum(quad) + const (= or <=) 0``.

        ``lin`` is an iterable of (col, coef); ``quad`` of (col_j, col_k, coef).
        """
        if sense not in (EQ, LE):
            raise ValueError(f"bad row sense {sense!r}")
        r = len(self.sense)
        n = len(self.vars)
        for c, v in lin:
            if not 0 <= c < n:
                raise IndexError(f"row {label}: unknown variable {c}")
            if v != 0.0:
                self._lin_r.append(r)
                self._lin_c.append(c)
                self._lin_v.append(float(v))
        for j, k, v in quad:
            if not (0 <= j < n and 0 <= k < n):
                raise IndexError(f"row {label}: unknown variable in quadratic term")
            if v != 0.0:
                self._q_r.append(r)
                self._q_j.append(j)
                self._q_k.append(k)
                self._q_v.append(float(v))
        self.const.append(float(const))
        self.sense.append(sense)
        self.labels.append(tuple(label))
        return r

    @property
    def n_rows(self) -> int:
        return len(self.sense)

    def build(self, meta: dict | None = None) -> "NlpProblem":
        n, m = len(self.vars), len(self.sense)
        c = np.zeros(n)
        for k, v in self.obj.items():
            c[k] += v
        A = sp.csr_matrix((self._lin_v, (self._lin_r, self._lin_c)), shape=(m, n))
        A.sum_duplicates()
        return NlpProblem(
            variables=tuple(self.vars),
            lb=np.array([v.lb for v in self.vars]),
            ub=np.array([v.ub for v in self.vars]),
            x0=np.array(self.x0),
            c=c,
            c0=self.obj_const,
            A=A,
            b=np.array(self.const),
            q_row=np.array(self._q_r, dtype=np.int64),
            q_j=np.array(self._q_j, dtype=np.int64),
            q_k=np.array(self._q_k, dtype=np.int64),
            q_val=np.array(self._q_v, dtype=float),
            is_eq=np.array([s == EQ for s in self.sense], dtype=bool),
            labels=tuple(self.labels),
            keys=dict(self.keys),
            meta=meta or {},
        )


@dataclass(eq=False)
class NlpProblem:
    variables: tuple[DecisionVariable, ...]
    lb: np.ndarray
    ub: np.ndarray
    x0: np.ndarray
    c: np.ndarray
    c0: float
    A: sp.csr_matrix
    b: np.ndarray
    q_row: np.ndarray
    q_j: np.ndarray
    q_k: np.ndarray
    q_val: np.ndarray
    is_eq: np.ndarray
    labels: tuple
    keys: dict
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        m, n = self.A.shape
        coo = self.A.tocoo()
        rows = np.concatenate([coo.row, self.q_row, self.q_row])
        cols = np.concatenate([coo.col, self.q_j, self.q_k])
        self._jac_slots, self._jac_pattern = _slot_map(rows, cols, (m, n))
        self._a_data = coo.data
        hr = np.concatenate([self.q_j, self.q_k])
        hc = np.concatenate([self.q_k, self.q_j])
        self._hess_slots, self._hess_pattern = _slot_map(hr, hc, (n, n))

    @property
    def n(self) -> int:
        return len(self.variables)

    @property
    def m(self) -> int:
        return self.A.shape[0]

    @property
    def scale(self) -> np.ndarray:
        return np.array([v.scale for v in self.variables])

    def var(self, role, owner, timestep=None) -> int:
        owner = tuple(owner) if isinstance(owner, (tuple, list)) else (owner,)
        return self.keys[(role, owner, timestep)]

    def vars_with_role(self, role) -> list[DecisionVariable]:
        return [v for v in self.variables if v.role == role]

    def rows_with_kind(self, kind) -> np.ndarray:
        return np.array([i for i, lab in enumerate(self.labels) if lab and lab[0] == kind], dtype=int)

    def _check(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape != (self.n,):
            raise ValueError(f"point has shape {x.shape}, problem has {self.n} variables")
        return x

    def objective(self, x) -> float:
        x = self._check(x)
        return float(self.c @ x + self.c0)

    def constraints(self, x) -> np.ndarray:
        x = self._check(x)
        g = self.A @ x + self.b
        if self.q_val.size:
            g += np.bincount(self.q_row, weights=self.q_val * x[self.q_j] * x[self.q_k], minlength=self.m)
        return g

    def jacobian(self, x) -> sp.csr_matrix:
        x = self._check(x)
        vals = np.concatenate([self._a_data, self.q_val * x[self.q_k], self.q_val * x[self.q_j]])
        data = np.bincount(self._jac_slots, weights=vals, minlength=self._jac_pattern.nnz)
        J = self._jac_pattern.copy()
        J.data = data
        return J

    def hessian(self, lam) -> sp.csr_matrix:
        """Hessian of sum_i lam_i g_i(x); constant in x because every term is quadratic."""
        lam = np.asarray(lam, dtype=float)
        w = lam[self.q_row] * self.q_val
        data = np.bincount(self._hess_slots, weights=np.concatenate([w, w]), minlength=self._hess_pattern.nnz)
        H = self._hess_pattern.copy()
        H.data = data
        return H

    def violations(self, x) -> np.ndarray:
        g = self.constraints(x)
        return np.where(self.is_eq, np.abs(g), np.maximum(g, 0.0))

    def bound_violation(self, x) -> float:
        x = self._check(x)
        v = np.maximum(self.lb - x, 0.0).max(initial=0.0)
        return float(max(v, np.maximum(x - self.ub, 0.0).max(initial=0.0)))

    def max_violation(self, x) -> float:
        v = self.violations(x)
        return float(max(v.max(initial=0.0), self.bound_violation(x)))

    def to_json(self) -> dict:
        A = self.A.tocsr()
        rows = []
        qs: dict[int, list] = {}
        for r, j, k, v in zip(self.q_row, self.q_j, self.q_k, self.q_val):
            qs.setdefault(int(r), []).append([self.variables[j].id, self.variables[k].id, float(v)])
        for i in range(self.m):
            lo, hi = A.indptr[i], A.indptr[i + 1]
            rows.append({
                "label": [str(s) for s in self.labels[i]],
                "sense": EQ if self.is_eq[i] else LE,
                "linear": [[self.variables[j].id, float(v)] for j, v in zip(A.indices[lo:hi], A.data[lo:hi])],
                "quadratic": qs.get(i, []),
                "constant": float(self.b[i]),
            })
        return {
            "variables": [
                {"id": v.id, "role": v.role, "lb": _jnum(v.lb), "ub": _jnum(v.ub), "scale": v.scale}
                for v in self.variables
            ],
            "objective": {self.variables[j].id: float(self.c[j]) for j in np.flatnonzero(self.c)},
            "constraints": rows,
        }

    def dump(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1), encoding="utf-8")


def _jnum(v: float):
    return None if not np.isfinite(v) else float(v)


def _slot_map(rows, cols, shape):
    """CSR pattern of the (row, col) list plus the data slot each entry accumulates into."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    if rows.size == 0:
        return np.zeros(0, dtype=np.int64), sp.csr_matrix(shape)
    lin = rows * shape[1] + cols
    uniq, slots = np.unique(lin, return_inverse=True)
    ur, uc = np.divmod(uniq, shape[1])
    pattern = sp.csr_matrix((np.zeros(len(uniq)), (ur, uc)), shape=shape)
    # np.unique sorts by row-major linear index, identical to CSR ordering
    pattern.sort_indices()
    return slots, pattern


def evaluate(problem: NlpProblem, x) -> tuple[float, float]:
    """Objective value and largest constraint or bound violation at ``x``."""
    return problem.objective(x), problem.max_violation(x)
