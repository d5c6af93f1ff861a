"""Impedance variables and structural constraints for length and matrix estimation.

Every branch impedance entry is exposed to the program builder as an affine
expression ``({col: coef}, const)`` in per-unit, so Ohm's law can be written
the same way whether the entry is a constant, a scaled length or a free
matrix entry.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .network import Branch, ImpedanceMatrix, Linecode
from .nlp import LE, ProgramBuilder

Affine = tuple[dict, float]

TRANSPOSED = "transposed"
UNTRANSPOSED = "untransposed"
DIAGONAL = "diagonal"
FREE_SCALARS = {TRANSPOSED: 4, UNTRANSPOSED: 12, DIAGONAL: 6}


@dataclass(frozen=True)
class ImeVariant:
    tag: str

    def __post_init__(self):
        if self.tag not in FREE_SCALARS:
            raise ValueError(f"unknown IME variant {self.tag!r}")

    @property
    def free_scalars(self) -> int:
        return FREE_SCALARS[self.tag]


@dataclass(frozen=True)
class AlphaBounds:
    """Ratio bounds: ``alpha2 X <= R <= alpha1 X`` and ``alpha4 Z_pq <= Z_pp <= alpha3 Z_pq``.

    ``alpha1``/``alpha2`` are keyed by ``service``, ``diagonal``, ``offdiagonal``;
    ``alpha3``/``alpha4`` by ``r`` and ``x``.
    """

    alpha1: dict = field(default_factory=dict)
    alpha2: dict = field(default_factory=dict)
    alpha3: dict = field(default_factory=dict)
    alpha4: dict = field(default_factory=dict)

    def __post_init__(self):
        for hi, lo, keys in ((self.alpha1, self.alpha2, ("service", "diagonal", "offdiagonal")),
                             (self.alpha3, self.alpha4, ("r", "x"))):
            for k in keys:
                if k not in hi or k not in lo:
                    raise ValueError(f"missing alpha bound for {k!r}")
                if not hi[k] >= lo[k] > 0:
                    raise ValueError(f"alpha bounds for {k!r} violate upper >= lower > 0: {hi[k]}, {lo[k]}")

    def widened(self, up: float, down: float) -> "AlphaBounds":
        return AlphaBounds(
            {k: v * up for k, v in self.alpha1.items()},
            {k: v * down for k, v in self.alpha2.items()},
            {k: v * up for k, v in self.alpha3.items()},
            {k: v * down for k, v in self.alpha4.items()},
        )

    def with_overrides(self, overrides: dict | None) -> "AlphaBounds":
        if not overrides:
            return self
        fields = {name: dict(getattr(self, name)) for name in ("alpha1", "alpha2", "alpha3", "alpha4")}
        for name, vals in overrides.items():
            if name not in fields:
                raise ValueError(f"unknown alpha group {name!r}")
            fields[name].update(vals)
        return AlphaBounds(**fields)


def default_alphas(scope: str = "transposed_defaults") -> AlphaBounds:
    """Ratio bounds never exceeded by the transposed cable library, or a widened envelope."""
    base = AlphaBounds(
        alpha1={"service": 16.0, "diagonal": 35.0, "offdiagonal": 130.0},
        alpha2={"service": 8.96, "diagonal": 1.1, "offdiagonal": 2.0},
        # self/mutual ratio: X in [14, 50], R in [2, 70]
        alpha3={"x": 50.0, "r": 70.0},
        alpha4={"x": 14.0, "r": 2.0},
    )
    if scope == "transposed_defaults":
        return base
    if scope == "loose_untransposed":
        return base.widened(100.0, 0.01)
    raise ValueError(f"unknown alpha scope {scope!r}")


@dataclass(frozen=True)
class ImeToggles:
    nonnegativity: bool = True
    xr_ratio: bool = True
    dominance: bool = True
    offdiag_ratio: bool = True
    equal_diagonal: bool = True
    equal_offdiagonal: bool = True

    @classmethod
    def for_variant(cls, variant: ImeVariant | str) -> "ImeToggles":
        tag = variant.tag if isinstance(variant, ImeVariant) else variant
        if tag == TRANSPOSED:
            return cls()
        if tag == UNTRANSPOSED:
            return cls(equal_diagonal=False, equal_offdiagonal=False)
        return cls(dominance=False, offdiag_ratio=False, equal_diagonal=False, equal_offdiagonal=False)


@dataclass(frozen=True)
class LleParams:
    r_nom: np.ndarray  # ohm/km
    x_nom: np.ndarray
    guess: float  # m
    lower: float
    upper: float

    def __post_init__(self):
        if not 0 <= self.lower <= self.upper:
            raise ValueError("length bounds must satisfy 0 <= lower <= upper")
        if not self.lower <= self.guess <= self.upper:
            raise ValueError(f"length guess {self.guess} outside [{self.lower}, {self.upper}]")

    @classmethod
    def from_branch(cls, branch: Branch, linecode: Linecode, factors=(0.1, 3.0)) -> "LleParams":
        if branch.length is None:
            raise ValueError(f"branch {branch.id} has no length guess")
        return cls(linecode.r_per_km, linecode.x_per_km, branch.length,
                   branch.length * factors[0], branch.length * factors[1])


@dataclass
class BranchImpedance:
    """Per-unit impedance of one branch as affine expressions of program variables."""

    branch: str
    r: list  # n x n of Affine
    x: list
    variables: list[int] = field(default_factory=list)
    length_var: int | None = None
    length_scale: float = 1.0  # metres per unit of the length variable

    def value(self, xvec: np.ndarray) -> ImpedanceMatrix:
        n = len(self.r)
        R = np.zeros((n, n))
        X = np.zeros((n, n))
        for i in range(n):
            for j in range(n):
                R[i, j] = _aff_value(self.r[i][j], xvec)
                X[i, j] = _aff_value(self.x[i][j], xvec)
        return ImpedanceMatrix(R, X)

    def length(self, xvec) -> float | None:
        return None if self.length_var is None else float(xvec[self.length_var]) * self.length_scale


def _aff_value(expr: Affine, xvec) -> float:
    coefs, const = expr
    return const + sum(c * xvec[k] for k, c in coefs.items())


def fixed_impedance(branch: Branch, z_base: float) -> BranchImpedance:
    R = branch.impedance.r / z_base
    X = branch.impedance.x / z_base
    n = R.shape[0]
    return BranchImpedance(
        branch.id,
        [[({}, float(R[i, j])) for j in range(n)] for i in range(n)],
        [[({}, float(X[i, j])) for j in range(n)] for i in range(n)],
    )


def parameterize_lle(builder: ProgramBuilder, branch: Branch, params: LleParams, z_base: float,
                     timesteps=(), residuals: str = "per_timestep") -> BranchImpedance:
    """One length variable per branch; R = length * R_nom, X = length * X_nom.

    The length variable is expressed in units of the guess, so it sits near 1.
    With ``residuals`` other than ``off``, the likelihood terms
    ``rho >= +-3 (l - guess) / (upper - lower)`` join the objective, once per
    timestep (``per_timestep``) or once overall (``single``).
    """
    if residuals not in ("per_timestep", "single", "off"):
        raise ValueError(f"unknown length residual mode {residuals!r}")
    unit = params.guess if params.guess > 0 else max(params.upper, 1.0)
    col = builder.add_var("length", branch.id, None, params.lower / unit, params.upper / unit,
                          x0=params.guess / unit, scale=unit)
    n = len(branch.phases)
    r_nom = np.atleast_2d(params.r_nom)
    x_nom = np.atleast_2d(params.x_nom)
    if r_nom.shape != (n, n):
        raise ValueError(f"linecode shape {r_nom.shape} does not match branch {branch.id}")
    k = unit / 1000.0 / z_base
    R = [[({col: k * r_nom[i, j]}, 0.0) if r_nom[i, j] else ({}, 0.0) for j in range(n)] for i in range(n)]
    X = [[({col: k * x_nom[i, j]}, 0.0) if x_nom[i, j] else ({}, 0.0) for j in range(n)] for i in range(n)]
    width = params.upper - params.lower
    if residuals != "off" and width > 0:
        w = 3.0 * unit / width
        steps = list(timesteps) if residuals == "per_timestep" else [None]
        for t in steps:
            rho = builder.add_var("rho", ("length", branch.id), t, 0.0, np.inf, x0=1.0)
            builder.add_objective(rho, 1.0)
            guess = params.guess / unit
            builder.add_row(LE, [(col, w), (rho, -1.0)], const=-w * guess, label=("lle_residual", branch.id, t, "+"))
            builder.add_row(LE, [(col, -w), (rho, -1.0)], const=w * guess, label=("lle_residual", branch.id, t, "-"))
    elif residuals != "off" and not params.lower <= params.guess <= params.upper:
        raise ValueError("zero-width bounds with guess outside")
    return BranchImpedance(branch.id, R, X, [col], col, unit)


@dataclass(frozen=True)
class ImeBounds:
    """Entry bounds in ohm, separately for R and X, and the variable units.

    Each entry variable is expressed in multiples of its unit (ohm), so that
    variables of branches with very different impedances have similar size.
    """

    upper_r: float = 1.0
    upper_x: float = 1.0
    lower: float = 0.0
    unit_r: float = 0.01
    unit_x: float = 0.01
    init: str = "midpoint"  # or "prior"
    init_offset: float = 1e-4

    def __post_init__(self):
        if not (self.upper_r > self.lower and self.upper_x > self.lower):
            raise ValueError("impedance entry upper bounds must exceed the lower bound")
        if not (self.unit_r > 0 and self.unit_x > 0):
            raise ValueError("impedance units must be positive")

    def limits(self, kind: str, nonnegative: bool) -> tuple[float, float, float]:
        """(unit, lower, upper) of a ``kind`` entry in variable units."""
        unit = self.unit_r if kind == "R" else self.unit_x
        upper = self.upper_r if kind == "R" else self.upper_x
        lower = self.lower if nonnegative or self.lower > 0 else -upper
        return unit, lower / unit, upper / unit


def parameterize_ime(builder: ProgramBuilder, branch: Branch, variant: ImeVariant | str, alphas: AlphaBounds,
                     z_base: float, toggles: ImeToggles | None = None, bounds: ImeBounds = ImeBounds(),
                     ) -> BranchImpedance:
    """Free R/X entries with the structural constraints of the chosen variant.

    Symmetry and the equal-diagonal / equal-off-diagonal rules are realised by
    sharing one variable between entries, so no redundant rows are emitted.
    Diagonal dominance and the self/mutual ratio are applied to R and X
    separately, which keeps every row linear.
    """
    variant = variant if isinstance(variant, ImeVariant) else ImeVariant(variant)
    toggles = toggles or ImeToggles.for_variant(variant)
    n = len(branch.phases)
    lim = {k: bounds.limits(k, toggles.nonnegativity) for k in ("R", "X")}
    prior = {"R": branch.impedance.r, "X": branch.impedance.x}

    def start(kind, i, j):
        unit, lo, hi = lim[kind]
        if bounds.init == "prior":
            return float(min(max(prior[kind][i, j] / unit, lo), hi))
        return 0.5 * (lo + hi) + bounds.init_offset * (hi - lo)

    def entry(kind, i, j):
        p, q = branch.phases[i], branch.phases[j]
        unit, lo, hi = lim[kind]
        return builder.add_var(f"{kind}_entry", (branch.id, p, q), None, lo, hi, x0=start(kind, i, j), scale=unit)

    cols: dict[tuple[str, int, int], int | None] = {}
    if n == 1:
        cols[("R", 0, 0)] = entry("R", 0, 0)
        cols[("X", 0, 0)] = entry("X", 0, 0)
    else:
        for kind in ("R", "X"):
            for i in range(n):
                for j in range(i, n):
                    if i == j:
                        if toggles.equal_diagonal and i > 0:
                            cols[(kind, i, j)] = cols[(kind, 0, 0)]
                        else:
                            cols[(kind, i, j)] = entry(kind, i, j)
                    elif variant.tag == DIAGONAL:
                        cols[(kind, i, j)] = None
                    elif toggles.equal_offdiagonal and (i, j) != (0, 1):
                        cols[(kind, i, j)] = cols[(kind, 0, 1)]
                    else:
                        cols[(kind, i, j)] = entry(kind, i, j)
                    cols[(kind, j, i)] = cols[(kind, i, j)]

    def expr(kind, i, j) -> Affine:
        c = cols[(kind, i, j)]
        return ({}, 0.0) if c is None else ({c: lim[kind][0] / z_base}, 0.0)

    R = [[expr("R", i, j) for j in range(n)] for i in range(n)]
    X = [[expr("X", i, j) for j in range(n)] for i in range(n)]

    rows: set[tuple] = set()

    def row(terms, label):
        # identical rows arise from aliased entries; emit each once
        key = tuple(sorted((c, round(v, 15)) for c, v in terms))
        if key in rows:
            return
        rows.add(key)
        builder.add_row(LE, terms, label=(label, branch.id))

    unique_entries = []
    seen = set()
    for i in range(n):
        for j in range(i, n):
            cr, cx = cols[("R", i, j)], cols[("X", i, j)]
            if cr is None or (cr, cx) in seen:
                continue
            seen.add((cr, cx))
            unique_entries.append((i, j, cr, cx))

    if toggles.xr_ratio:
        for i, j, cr, cx in unique_entries:
            scope = "service" if n == 1 else ("diagonal" if i == j else "offdiagonal")
            a1, a2 = alphas.alpha1[scope], alphas.alpha2[scope]
            # rows in units of the R variable: alpha2 X - R <= 0, R - alpha1 X <= 0
            kx = lim["X"][0] / lim["R"][0]
            row([(cx, a2 * kx), (cr, -1.0)], "xr_ratio_lower")
            row([(cr, 1.0), (cx, -a1 * kx)], "xr_ratio_upper")
    if n > 1 and toggles.dominance and variant.tag != DIAGONAL:
        for kind in ("R", "X"):
            for i in range(n):
                terms: dict[int, float] = {}
                for j in range(n):
                    c = cols[(kind, i, j)]
                    if c is None:
                        continue
                    terms[c] = terms.get(c, 0.0) + (-1.0 if i == j else 1.0)
                row([(c, v) for c, v in terms.items() if v != 0.0], "dominance")
    if n > 1 and toggles.offdiag_ratio and variant.tag != DIAGONAL:
        for kind, key in (("R", "r"), ("X", "x")):
            a3, a4 = alphas.alpha3[key], alphas.alpha4[key]
            for i in range(n):
                for j in range(n):
                    if i == j:
                        continue
                    cd, co = cols[(kind, i, i)], cols[(kind, i, j)]
                    row([(co, a4), (cd, -1.0)], "offdiag_ratio_lower")
                    row([(cd, 1.0), (co, -a3)], "offdiag_ratio_upper")

    var_cols = sorted({c for c in cols.values() if c is not None})
    return BranchImpedance(branch.id, R, X, var_cols)


def check_structure(z: ImpedanceMatrix, variant: str, alphas: AlphaBounds | None, tol: float = 1e-8,
                    toggles: ImeToggles | None = None, scale: float | None = None) -> list[str]:
    """Names of the structural rules ``z`` breaks by more than ``tol * scale`` ohm.

    ``scale`` defaults to the largest entry of ``z``; pass the impedance base to
    get an absolute per-unit tolerance, which stays meaningful when a branch
    collapses towards zero.
    """
    toggles = toggles or ImeToggles.for_variant(variant)
    R, X = z.r, z.x
    n = R.shape[0]
    s = scale if scale is not None else max(float(np.abs(R).max()), float(np.abs(X).max()), 1e-300)
    bad = []
    if toggles.nonnegativity and (R.min() < -tol * s or X.min() < -tol * s):
        bad.append("nonnegativity")
    if not (np.allclose(R, R.T, atol=tol * s) and np.allclose(X, X.T, atol=tol * s)):
        bad.append("symmetry")
    if variant == DIAGONAL and n > 1 and (np.abs(R - np.diag(np.diag(R))).max() > 0 or np.abs(X - np.diag(np.diag(X))).max() > 0):
        bad.append("zero_mutual")
    if alphas is not None and toggles.xr_ratio:
        for i in range(n):
            for j in range(n):
                if variant == DIAGONAL and i != j:
                    continue
                scope = "service" if n == 1 else ("diagonal" if i == j else "offdiagonal")
                if R[i, j] < alphas.alpha2[scope] * X[i, j] - tol * s or R[i, j] > alphas.alpha1[scope] * X[i, j] + tol * s:
                    bad.append("xr_ratio")
    if n > 1 and variant != DIAGONAL:
        if toggles.dominance:
            for M in (R, X):
                for i in range(n):
                    if abs(M[i, i]) < np.abs(np.delete(M[i], i)).sum() - tol * s:
                        bad.append("dominance")
        if alphas is not None and toggles.offdiag_ratio:
            for M, key in ((R, "r"), (X, "x")):
                for i in range(n):
                    for j in range(n):
                        if i != j and (M[i, i] < alphas.alpha4[key] * M[i, j] - tol * s
                                       or M[i, i] > alphas.alpha3[key] * M[i, j] + tol * s):
                            bad.append("offdiag_ratio")
        if variant == TRANSPOSED:
            if np.ptp(np.diag(R)) > tol * s or np.ptp(np.diag(X)) > tol * s:
                bad.append("equal_diagonal")
            off = ~np.eye(n, dtype=bool)
            if np.ptp(R[off]) > tol * s or np.ptp(X[off]) > tol * s:
                bad.append("equal_offdiagonal")
    return sorted(set(bad))
