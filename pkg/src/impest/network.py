"""Feeder data model: buses, branches, users, validation, reduction and per-unit handling.

All quantities are SI (volt, ohm, VA, meter) unless a feeder is explicitly
flagged ``per_unit``.  Branch impedance matrices are indexed in the order of
the branch's own phase tuple.
"""
from __future__ import annotations

import json
import logging
from collections import defaultdict, deque
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Iterable

import numpy as np

logger = logging.getLogger(__name__)

PHASES = ("a", "b", "c")
BUS_KINDS = ("source", "junction", "user_connection")


def phase_set(phases: Iterable[str]) -> tuple[str, ...]:
    """Canonical ordered phase tuple; rejects empty sets, unknown labels and duplicates."""
    phases = tuple(phases)
    if not phases:
        raise ValueError("phase set must not be empty")
    if len(set(phases)) != len(phases):
        raise ValueError(f"duplicate phases in {phases}")
    unknown = set(phases) - set(PHASES)
    if unknown:
        raise ValueError(f"unknown phase labels {sorted(unknown)}")
    return tuple(p for p in PHASES if p in phases)


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=float, copy=True)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ImpedanceMatrix:
    r: np.ndarray
    x: np.ndarray
    symmetric: bool = True

    def __post_init__(self):
        object.__setattr__(self, "r", _frozen(self.r))
        object.__setattr__(self, "x", _frozen(self.x))

    @property
    def n(self) -> int:
        return self.r.shape[0]

    @property
    def z(self) -> np.ndarray:
        return self.r + 1j * self.x

    def __add__(self, other: "ImpedanceMatrix") -> "ImpedanceMatrix":
        return ImpedanceMatrix(self.r + other.r, self.x + other.x, self.symmetric and other.symmetric)

    def scaled(self, factor: float) -> "ImpedanceMatrix":
        return ImpedanceMatrix(self.r * factor, self.x * factor, self.symmetric)

    def __eq__(self, other):
        if not isinstance(other, ImpedanceMatrix):
            return NotImplemented
        return (
            self.r.shape == other.r.shape
            and np.array_equal(self.r, other.r)
            and np.array_equal(self.x, other.x)
            and self.symmetric == other.symmetric
        )

    def __hash__(self):
        return hash((self.r.tobytes(), self.x.tobytes(), self.symmetric))


@dataclass(frozen=True, eq=False)
class Linecode:
    """Per-unit-length series impedance (ohm/km)."""

    r_per_km: np.ndarray
    x_per_km: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "r_per_km", _frozen(self.r_per_km))
        object.__setattr__(self, "x_per_km", _frozen(self.x_per_km))

    def impedance(self, length_m: float) -> ImpedanceMatrix:
        return ImpedanceMatrix(self.r_per_km * length_m / 1000.0, self.x_per_km * length_m / 1000.0)

    def __eq__(self, other):
        if not isinstance(other, Linecode):
            return NotImplemented
        return np.array_equal(self.r_per_km, other.r_per_km) and np.array_equal(self.x_per_km, other.x_per_km)

    def __hash__(self):
        return hash((self.r_per_km.tobytes(), self.x_per_km.tobytes()))


@dataclass(frozen=True)
class Bus:
    id: str
    phases: tuple[str, ...]
    kind: str = "junction"
    base_voltage: float = 230.0


@dataclass(frozen=True)
class Branch:
    id: str
    from_bus: str
    to_bus: str
    phases: tuple[str, ...]
    impedance: ImpedanceMatrix
    length: float | None = None
    linecode: str | None = None

    def phase_index(self, phase: str) -> int:
        return self.phases.index(phase)


@dataclass(frozen=True)
class User:
    id: str
    bus: str
    phases: tuple[str, ...]
    metered: bool = True


@dataclass(frozen=True)
class Violation:
    entity: str
    code: str
    message: str

    def __str__(self):
        return f"{self.entity}: {self.code} ({self.message})"


@dataclass(frozen=True, eq=False)
class Feeder:
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    users: tuple[User, ...]
    base_power: float = 3000.0
    base_voltage: float = 230.0
    linecodes: dict[str, Linecode] = field(default_factory=dict)
    per_unit: bool = False

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "branches", tuple(self.branches))
        object.__setattr__(self, "users", tuple(self.users))
        object.__setattr__(self, "linecodes", dict(self.linecodes))

    @cached_property
    def bus_map(self) -> dict[str, Bus]:
        return {b.id: b for b in self.buses}

    @cached_property
    def branch_map(self) -> dict[str, Branch]:
        return {br.id: br for br in self.branches}

    @cached_property
    def user_map(self) -> dict[str, User]:
        return {u.id: u for u in self.users}

    @cached_property
    def users_at(self) -> dict[str, list[User]]:
        out: dict[str, list[User]] = defaultdict(list)
        for u in self.users:
            out[u.bus].append(u)
        return dict(out)

    @cached_property
    def incident(self) -> dict[str, list[Branch]]:
        out: dict[str, list[Branch]] = {b.id: [] for b in self.buses}
        for br in self.branches:
            out.setdefault(br.from_bus, []).append(br)
            out.setdefault(br.to_bus, []).append(br)
        return out

    @property
    def source(self) -> Bus:
        sources = [b for b in self.buses if b.kind == "source"]
        if len(sources) != 1:
            raise ValueError(f"feeder must have exactly one source bus, found {len(sources)}")
        return sources[0]

    @property
    def metered_users(self) -> list[User]:
        return [u for u in self.users if u.metered]

    def is_radial(self) -> bool:
        return len(self.branches) == len(self.buses) - 1 and _connected(self)

    def z_base(self) -> float:
        return z_base(self.base_voltage, self.base_power)

    def with_impedances(self, impedances: dict[str, ImpedanceMatrix], lengths: dict[str, float] | None = None) -> "Feeder":
        """Copy of the feeder with selected branch impedances (and lengths) replaced.

        A branch whose impedance changes without a new length no longer
        follows its linecode, so the linecode reference is dropped.
        """
        lengths = lengths or {}
        branches = []
        for br in self.branches:
            if br.id in impedances or br.id in lengths:
                code = br.linecode if br.id in lengths or br.id not in impedances else None
                br = replace(br, impedance=impedances.get(br.id, br.impedance), length=lengths.get(br.id, br.length),
                             linecode=code)
            branches.append(br)
        return replace(self, branches=tuple(branches))


def z_base(base_voltage: float, base_power: float) -> float:
    """Impedance base for line-to-neutral voltage and three-phase base power."""
    if base_voltage <= 0 or base_power <= 0:
        raise ValueError("base voltage and base power must be positive")
    return base_voltage**2 / (base_power / 3.0)


def _connected(feeder: Feeder) -> bool:
    if not feeder.buses:
        return True
    adj = defaultdict(set)
    for br in feeder.branches:
        adj[br.from_bus].add(br.to_bus)
        adj[br.to_bus].add(br.from_bus)
    start = feeder.buses[0].id
    seen = {start}
    queue = deque([start])
    while queue:
        b = queue.popleft()
        for nb in adj[b]:
            if nb not in seen:
                seen.add(nb)
                queue.append(nb)
    return seen >= {b.id for b in feeder.buses}


def validate(feeder: Feeder) -> list[Violation]:
    """Check every structural invariant; violations are returned, never raised."""
    out: list[Violation] = []

    def bad(entity, code, msg):
        out.append(Violation(entity, code, msg))

    for kind, items in (("bus", feeder.buses), ("branch", feeder.branches), ("user", feeder.users)):
        seen = set()
        for it in items:
            if it.id in seen:
                bad(it.id, "duplicate id", f"{kind} id used more than once")
            seen.add(it.id)

    def check_phases(entity, phases):
        try:
            if phase_set(phases) != tuple(phases):
                bad(entity, "phase order", f"phases {phases} not in canonical order")
            return True
        except ValueError as exc:
            bad(entity, "invalid phases", str(exc))
            return False

    sources = [b for b in feeder.buses if b.kind == "source"]
    if len(sources) == 0:
        bad("feeder", "no source", "feeder has no source bus")
    elif len(sources) > 1:
        bad("feeder", "multiple sources", ", ".join(b.id for b in sources))
    for b in feeder.buses:
        check_phases(b.id, b.phases)
        if b.kind not in BUS_KINDS:
            bad(b.id, "invalid kind", b.kind)
        if not b.base_voltage > 0:
            bad(b.id, "invalid base voltage", str(b.base_voltage))

    buses = feeder.bus_map
    for br in feeder.branches:
        ok = check_phases(br.id, br.phases)
        if br.from_bus == br.to_bus:
            bad(br.id, "self loop", f"branch connects {br.from_bus} to itself")
        for end in (br.from_bus, br.to_bus):
            if end not in buses:
                bad(br.id, "unknown bus", end)
            elif ok and not set(br.phases) <= set(buses[end].phases):
                bad(br.id, "phase mismatch", f"branch phases {br.phases} not on bus {end} {buses[end].phases}")
        z = br.impedance
        n = len(br.phases)
        if n not in (1, 3):
            bad(br.id, "phase count", "branches must be single- or three-phase")
        if z.r.shape != (n, n) or z.x.shape != (n, n):
            bad(br.id, "dimension mismatch", f"impedance shape {z.r.shape} for {n} phases")
            continue
        if not (np.all(np.isfinite(z.r)) and np.all(np.isfinite(z.x))):
            bad(br.id, "non-finite", "impedance has non-finite entries")
        if z.symmetric and not (np.array_equal(z.r, z.r.T) and np.array_equal(z.x, z.x.T)):
            bad(br.id, "asymmetric", "impedance tagged symmetric but is not")
        if br.length is not None and br.length < 0:
            bad(br.id, "negative length", str(br.length))
        if br.linecode is not None:
            lc = feeder.linecodes.get(br.linecode)
            if lc is None:
                bad(br.id, "unknown linecode", br.linecode)
            elif lc.r_per_km.shape != (n, n):
                bad(br.id, "linecode mismatch", "linecode dimension differs from branch")
            elif br.length is not None:
                expect = lc.impedance(br.length)
                scale = max(1.0, float(np.abs(expect.r).max()), float(np.abs(expect.x).max()))
                if not (np.allclose(expect.r, z.r, rtol=1e-9, atol=1e-12 * scale)
                        and np.allclose(expect.x, z.x, rtol=1e-9, atol=1e-12 * scale)):
                    bad(br.id, "linecode mismatch", "impedance differs from length x linecode")

    for u in feeder.users:
        ok = check_phases(u.id, u.phases)
        if u.bus not in buses:
            bad(u.id, "unknown bus", u.bus)
        elif ok and not set(u.phases) <= set(buses[u.bus].phases):
            bad(u.id, "phase mismatch", f"user phases {u.phases} not on bus {u.bus}")

    if feeder.buses and not _connected(feeder):
        bad("feeder", "disconnected", "graph is not connected")
    if feeder.base_power <= 0 or feeder.base_voltage <= 0:
        bad("feeder", "invalid base", "base power and voltage must be positive")

    if not out:
        for u in feeder.metered_users:
            degree = len(feeder.incident.get(u.bus, []))
            if degree > 1:
                logger.warning("metered user %s sits on non-leaf bus %s (degree %d)", u.id, u.bus, degree)
    return out


def merge_series(a: Branch, b: Branch, shared_bus: str, linecodes: dict[str, Linecode] | None = None) -> Branch:
    """Replace two series branches meeting at ``shared_bus`` by one equivalent branch."""
    if a.phases != b.phases:
        raise ValueError(f"cannot merge {a.id} {a.phases} with {b.id} {b.phases}: incompatible phase sets")
    start = a.from_bus if a.to_bus == shared_bus else a.to_bus
    end = b.to_bus if b.from_bus == shared_bus else b.from_bus
    length = a.length + b.length if a.length is not None and b.length is not None else None
    linecode = a.linecode if a.linecode == b.linecode and length is not None else None
    return Branch(a.id, start, end, a.phases, a.impedance + b.impedance, length, linecode)


def _distances_from_source(feeder: Feeder) -> dict[str, int]:
    src = feeder.source.id
    dist = {src: 0}
    queue = deque([src])
    while queue:
        b = queue.popleft()
        for br in feeder.incident.get(b, []):
            nb = br.to_bus if br.from_bus == b else br.from_bus
            if nb not in dist:
                dist[nb] = dist[b] + 1
                queue.append(nb)
    return dist


def reduce(feeder: Feeder) -> Feeder:
    """Eliminate zero-injection pass-through buses by merging their series branches.

    A junction bus without users, with exactly two incident branches on the
    same phases, is removed; repeated until nothing changes.  Linecode names
    survive only when both merged pieces share them.
    """
    dist = _distances_from_source(feeder)
    buses = {b.id: b for b in feeder.buses}
    branches = {br.id: br for br in feeder.branches}
    order = [br.id for br in feeder.branches]
    incident: dict[str, set[str]] = {b: set() for b in buses}
    for br in feeder.branches:
        incident[br.from_bus].add(br.id)
        incident[br.to_bus].add(br.id)
    has_users = set(feeder.users_at)

    changed = True
    while changed:
        changed = False
        for bus_id in list(buses):
            bus = buses[bus_id]
            if bus.kind != "junction" or bus_id in has_users or len(incident[bus_id]) != 2:
                continue
            a, b = (branches[i] for i in sorted(incident[bus_id], key=order.index))
            if a.phases != b.phases:
                continue
            ends = {br.id: (br.to_bus if br.from_bus == bus_id else br.from_bus) for br in (a, b)}
            if ends[a.id] == ends[b.id]:
                continue  # parallel pair, not a series chain
            if dist.get(ends[a.id], 0) > dist.get(ends[b.id], 0):
                a, b = b, a
            merged = merge_series(a, b, bus_id)
            del buses[bus_id], incident[bus_id]
            del branches[a.id], branches[b.id]
            for br in (a, b):
                other = ends[br.id]
                incident[other].discard(br.id)
            branches[merged.id] = merged
            incident[merged.from_bus].add(merged.id)
            incident[merged.to_bus].add(merged.id)
            order.remove(b.id)
            changed = True

    kept_codes = {br.linecode for br in branches.values() if br.linecode}
    return replace(
        feeder,
        buses=tuple(buses.values()),
        branches=tuple(branches[i] for i in order),
        linecodes={k: v for k, v in feeder.linecodes.items() if k in kept_codes},
    )


def path_to_source(feeder: Feeder, bus_id: str) -> list[Branch]:
    """Branches on the unique path from ``bus_id`` up to the source (radial feeders only)."""
    if not feeder.is_radial():
        raise ValueError("path to source is only unique on radial feeders")
    src = feeder.source.id
    parent: dict[str, tuple[str, Branch] | None] = {src: None}
    queue = deque([src])
    while queue:
        b = queue.popleft()
        for br in feeder.incident.get(b, []):
            nb = br.to_bus if br.from_bus == b else br.from_bus
            if nb not in parent:
                parent[nb] = (b, br)
                queue.append(nb)
    if bus_id not in parent:
        raise ValueError(f"bus {bus_id} not reachable from source")
    path = []
    node = bus_id
    while parent[node] is not None:
        node, br = parent[node]
        path.append(br)
    return path


def cumulative_impedance(feeder: Feeder, user: User | str) -> dict[str, tuple[float, float]]:
    """Per-phase sum of self resistance and reactance along the user's path to the source."""
    if isinstance(user, str):
        user = feeder.user_map[user]
    path = path_to_source(feeder, user.bus)
    out = {}
    for p in user.phases:
        r = x = 0.0
        for br in path:
            k = br.phase_index(p)
            r += float(br.impedance.r[k, k])
            x += float(br.impedance.x[k, k])
        out[p] = (r, x)
    return out


def _rescale(feeder: Feeder, factor: float, per_unit: bool) -> Feeder:
    branches = tuple(replace(br, impedance=br.impedance.scaled(factor)) for br in feeder.branches)
    codes = {k: Linecode(v.r_per_km * factor, v.x_per_km * factor) for k, v in feeder.linecodes.items()}
    return replace(feeder, branches=branches, linecodes=codes, per_unit=per_unit)


def to_per_unit(feeder: Feeder) -> Feeder:
    if feeder.per_unit:
        raise ValueError("feeder is already in per-unit")
    return _rescale(feeder, 1.0 / feeder.z_base(), True)


def from_per_unit(feeder: Feeder) -> Feeder:
    if not feeder.per_unit:
        raise ValueError("feeder is not in per-unit")
    return _rescale(feeder, feeder.z_base(), False)


class FeederIndex:
    """Flat orderings of bus-phases, branch-phases and user-phases."""

    def __init__(self, feeder: Feeder):
        self.feeder = feeder
        self.source = feeder.source.id
        self.bus_phases = [(b.id, p) for b in feeder.buses for p in b.phases]
        self.branch_phases = [(br.id, p) for br in feeder.branches for p in br.phases]
        self.user_phases = [(u.id, p) for u in feeder.users for p in u.phases]
        self.bp = {k: i for i, k in enumerate(self.bus_phases)}
        self.lp = {k: i for i, k in enumerate(self.branch_phases)}
        self.up = {k: i for i, k in enumerate(self.user_phases)}


# -- JSON I/O -----------------------------------------------------------------

def feeder_to_dict(feeder: Feeder) -> dict:
    if feeder.per_unit:
        feeder = from_per_unit(feeder)
    return {
        "base_power_va": feeder.base_power,
        "base_voltage_v": feeder.base_voltage,
        "buses": [
            {"id": b.id, "phases": list(b.phases), "kind": b.kind, "base_voltage_v": b.base_voltage}
            for b in feeder.buses
        ],
        "branches": [
            {
                "id": br.id,
                "from_bus": br.from_bus,
                "to_bus": br.to_bus,
                "phases": list(br.phases),
                "r_ohm": br.impedance.r.tolist(),
                "x_ohm": br.impedance.x.tolist(),
                **({"length_m": br.length} if br.length is not None else {}),
                **({"linecode": br.linecode} if br.linecode is not None else {}),
            }
            for br in feeder.branches
        ],
        "users": [{"id": u.id, "bus": u.bus, "phases": list(u.phases), "metered": u.metered} for u in feeder.users],
        "linecodes": {
            k: {"r_ohm_per_km": v.r_per_km.tolist(), "x_ohm_per_km": v.x_per_km.tolist()}
            for k, v in feeder.linecodes.items()
        },
    }


def feeder_from_dict(data: dict) -> Feeder:
    base_v = float(data.get("base_voltage_v", 230.0))
    codes = {
        k: Linecode(np.atleast_2d(v["r_ohm_per_km"]), np.atleast_2d(v["x_ohm_per_km"]))
        for k, v in data.get("linecodes", {}).items()
    }
    branches = []
    for d in data["branches"]:
        length = d.get("length_m")
        code = d.get("linecode")
        if "r_ohm" in d:
            z = ImpedanceMatrix(np.atleast_2d(d["r_ohm"]), np.atleast_2d(d["x_ohm"]), d.get("symmetric", True))
        elif code is not None and length is not None:
            z = codes[code].impedance(length)
        else:
            raise ValueError(f"branch {d['id']} has neither impedance nor linecode+length")
        branches.append(Branch(d["id"], d["from_bus"], d["to_bus"], tuple(d["phases"]), z, length, code))
    return Feeder(
        buses=tuple(
            Bus(d["id"], tuple(d["phases"]), d.get("kind", "junction"), float(d.get("base_voltage_v", base_v)))
            for d in data["buses"]
        ),
        branches=tuple(branches),
        users=tuple(User(d["id"], d["bus"], tuple(d["phases"]), bool(d.get("metered", True))) for d in data["users"]),
        base_power=float(data.get("base_power_va", 3000.0)),
        base_voltage=base_v,
        linecodes=codes,
    )


def load_feeder(path: str | Path) -> Feeder:
    return feeder_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def save_feeder(feeder: Feeder, path: str | Path) -> None:
    Path(path).write_text(json.dumps(feeder_to_dict(feeder), indent=1), encoding="utf-8")
