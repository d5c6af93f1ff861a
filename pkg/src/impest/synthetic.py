"""Synthetic feeders and load profiles used by tests, examples and the simulate command."""
from __future__ import annotations

import numpy as np

from .network import Branch, Bus, Feeder, ImpedanceMatrix, Linecode, User

THREE = ("a", "b", "c")


def sequence_linecode(r1: float, x1: float, r0: float, x0: float) -> Linecode:
    """Transposed 3x3 linecode from positive/zero sequence values (ohm/km)."""
    rs, rm = (r0 + 2 * r1) / 3.0, (r0 - r1) / 3.0
    xs, xm = (x0 + 2 * x1) / 3.0, (x0 - x1) / 3.0
    R = np.full((3, 3), rm)
    X = np.full((3, 3), xm)
    np.fill_diagonal(R, rs)
    np.fill_diagonal(X, xs)
    return Linecode(R, X)


# cable data in the range of the European LV test feeder library; all satisfy the
# default ratio bounds of the transposed impedance estimation
TRUNK_CODES = {
    "trunk_95": sequence_linecode(0.320, 0.075, 1.120, 0.090),
    "trunk_185": sequence_linecode(0.164, 0.074, 0.580, 0.086),
    "trunk_70": sequence_linecode(0.469, 0.075, 1.581, 0.091),
}
SERVICE_CODES = {
    "service_35": Linecode(np.array([[0.868]]), np.array([[0.077]])),
    "service_16": Linecode(np.array([[1.150]]), np.array([[0.088]])),
}


def _branch(bid, f, t, phases, code_name, code, length):
    return Branch(bid, f, t, phases, code.impedance(length), float(length), code_name)


def radial_feeder(n_trunk: int, n_users: int, seed: int = 0, base_power: float = 30_000.0,
                  trunk_length=(30.0, 80.0), service_length=(10.0, 40.0), min_source_children: int = 2,
                  phases_of_users=None) -> Feeder:
    """Three-phase trunk tree with single-phase service cables to metered users.

    The source feeds at least ``min_source_children`` trunk branches, and every
    trunk bus hosts at least one service, so that no trunk bus is a degree-2
    pass-through.  Users cycle over phases a, b, c unless ``phases_of_users``
    is given.
    """
    if n_trunk < 1 or n_users < n_trunk:
        raise ValueError("need at least one trunk bus and one user per trunk bus")
    rng = np.random.default_rng(seed)
    trunk_names = sorted(TRUNK_CODES)
    buses = [Bus("src", THREE, "source")]
    branches = []
    users = []
    parents = ["src"]
    for k in range(n_trunk):
        bid = f"t{k + 1}"
        buses.append(Bus(bid, THREE))
        parent = "src" if k < min_source_children else parents[int(rng.integers(len(parents)))]
        name = trunk_names[int(rng.integers(len(trunk_names)))]
        length = float(rng.uniform(*trunk_length))
        branches.append(_branch(f"L{bid}", parent, bid, THREE, name, TRUNK_CODES[name], length))
        parents.append(bid)
    hosts = [f"t{k + 1}" for k in range(n_trunk)]
    hosts += [hosts[int(rng.integers(n_trunk))] for _ in range(n_users - n_trunk)]
    svc_names = sorted(SERVICE_CODES)
    for i, host in enumerate(hosts):
        ph = phases_of_users[i] if phases_of_users is not None else THREE[i % 3]
        bid, uid = f"u{i + 1}", f"h{i + 1}"
        buses.append(Bus(bid, (ph,), "user_connection"))
        name = svc_names[int(rng.integers(len(svc_names)))]
        length = float(rng.uniform(*service_length))
        branches.append(_branch(f"S{bid}", host, bid, (ph,), name, SERVICE_CODES[name], length))
        users.append(User(uid, bid, (ph,)))
    codes = {**TRUNK_CODES, **SERVICE_CODES}
    used = {br.linecode for br in branches}
    return Feeder(tuple(buses), tuple(branches), tuple(users), base_power=base_power,
                  linecodes={k: v for k, v in codes.items() if k in used})


def desk_feeder(seed: int = 7) -> Feeder:
    """25 buses, 12 single-phase users: the desk-scale stand-in for the reduced test feeder."""
    return radial_feeder(12, 12, seed=seed, base_power=30_000.0)


def random_chain(n_buses: int, seed: int = 0, three_phase: bool | None = None) -> Feeder:
    """Chain source -> ... with users at the end and at a few intermediate buses."""
    rng = np.random.default_rng(seed)
    if three_phase is None:
        three_phase = bool(rng.integers(2))
    phases = THREE if three_phase else ("a",)
    codes = TRUNK_CODES if three_phase else SERVICE_CODES
    names = sorted(codes)
    buses = [Bus("b0", phases, "source")]
    branches, users = [], []
    for k in range(1, n_buses):
        buses.append(Bus(f"b{k}", phases))
        name = names[int(rng.integers(len(names)))]
        branches.append(_branch(f"l{k}", f"b{k - 1}", f"b{k}", phases, name, codes[name], float(rng.uniform(5, 60))))
    loaded = sorted({n_buses - 1} | set(int(i) for i in rng.choice(np.arange(1, n_buses), size=min(3, n_buses - 1),
                                                                  replace=False)))
    for k in loaded:
        users.append(User(f"h{k}", f"b{k}", phases))
    buses = [Bus(b.id, b.phases, "user_connection") if int(b.id[1:]) in loaded else b for b in buses]
    used = {br.linecode for br in branches}
    return Feeder(tuple(buses), tuple(branches), tuple(users), base_power=30_000.0,
                  linecodes={k: v for k, v in codes.items() if k in used})


def resistive_fixture() -> Feeder:
    """Five-bus single-phase resistive network with users at 1' and 2'.

    One metre of the linecode is one ohm.  Branch 0 feeds bus 1 from the
    source, 1' is a service from bus 1, branch 2 continues to bus 2 and 2' is a
    service from bus 2.
    """
    lc = Linecode(np.array([[1000.0]]), np.array([[0.0]]))
    ph = ("a",)
    buses = (
        Bus("0", ph, "source"), Bus("1", ph), Bus("1p", ph, "user_connection"),
        Bus("2", ph), Bus("2p", ph, "user_connection"),
    )
    branches = (
        _branch("l0", "0", "1", ph, "unit", lc, 1.0),
        _branch("l1p", "1", "1p", ph, "unit", lc, 1.0),
        _branch("l2", "1", "2", ph, "unit", lc, 1.0),
        _branch("l2p", "2", "2p", ph, "unit", lc, 0.5),
    )
    users = (User("u1", "1p", ph), User("u2", "2p", ph))
    return Feeder(buses, branches, users, base_power=3000.0, linecodes={"unit": lc})


def eltf_like(seed: int = 0, n_users: int = 55, n_trunk: int = 53, total_buses: int = 906) -> Feeder:
    """Unreduced feeder shaped like the European LV test feeder.

    The reduced form has ``1 + n_trunk + n_users`` buses.  Every reduced branch
    is split into short series segments of the same cable until the bus count
    reaches ``total_buses``.
    """
    reduced = radial_feeder(n_trunk, n_users, seed=seed, base_power=30_000.0, min_source_children=1)
    rng = np.random.default_rng(seed + 1)
    extra = total_buses - len(reduced.buses)
    if extra < 0:
        raise ValueError("total_buses smaller than the reduced feeder")
    cuts = rng.multinomial(extra, np.full(len(reduced.branches), 1.0 / len(reduced.branches)))
    buses = list(reduced.buses)
    branches = []
    for br, k in zip(reduced.branches, cuts):
        if k == 0:
            branches.append(br)
            continue
        fractions = np.diff(np.concatenate([[0.0], np.sort(rng.uniform(0, 1, k)), [1.0]]))
        fractions = np.maximum(fractions, 1e-3)
        fractions /= fractions.sum()
        code = reduced.linecodes[br.linecode]
        prev = br.from_bus
        for s, frac in enumerate(fractions):
            last = s == len(fractions) - 1
            nxt = br.to_bus if last else f"{br.id}_j{s + 1}"
            if not last:
                buses.append(Bus(nxt, br.phases))
            # the first piece keeps the branch id so reduction restores it
            bid = br.id if s == 0 else f"{br.id}_s{s}"
            branches.append(_branch(bid, prev, nxt, br.phases, br.linecode, code, br.length * frac))
            prev = nxt
    return Feeder(tuple(buses), tuple(branches), reduced.users, base_power=reduced.base_power,
                  linecodes=reduced.linecodes)


def perturb_lengths(feeder: Feeder, rel: float, seed: int = 0) -> Feeder:
    """Copy with every branch length scaled by an independent uniform factor in [1-rel, 1+rel]."""
    rng = np.random.default_rng(seed)
    branches = []
    for br in feeder.branches:
        if br.length is None or br.linecode is None:
            branches.append(br)
            continue
        length = br.length * float(rng.uniform(1 - rel, 1 + rel))
        branches.append(Branch(br.id, br.from_bus, br.to_bus, br.phases,
                               feeder.linecodes[br.linecode].impedance(length), length, br.linecode))
    return Feeder(feeder.buses, tuple(branches), feeder.users, feeder.base_power, feeder.base_voltage,
                  feeder.linecodes)


def untransposed_variant(feeder: Feeder, spread: float = 0.15, seed: int = 0) -> Feeder:
    """Copy whose three-phase matrices get distinct (still symmetric) entries."""
    rng = np.random.default_rng(seed)
    branches = []
    for br in feeder.branches:
        if len(br.phases) != 3:
            branches.append(br)
            continue
        f = 1.0 + spread * rng.uniform(-1, 1, (3, 3))
        f = (f + f.T) / 2
        z = ImpedanceMatrix(br.impedance.r * f, br.impedance.x * f)
        branches.append(Branch(br.id, br.from_bus, br.to_bus, br.phases, z, br.length, None))
    used = {br.linecode for br in branches}
    return Feeder(feeder.buses, tuple(branches), feeder.users, feeder.base_power, feeder.base_voltage,
                  {k: v for k, v in feeder.linecodes.items() if k in used})


def load_profiles(users, n_steps: int, seed: int = 0, step_min: float = 5.0, peak_w=(1500.0, 4000.0),
                  base_w=(150.0, 500.0)) -> dict[tuple[str, str], np.ndarray]:
    """Winter heat-pump-like active power per (user, phase) in watt.

    Each user has a base load, a morning and an evening peak with random
    timing, and short-term fluctuation; three-phase users split evenly.
    """
    rng = np.random.default_rng(seed)
    hours = np.arange(n_steps) * step_min / 60.0
    out = {}
    for u in users:
        peak = rng.uniform(*peak_w)
        base = rng.uniform(*base_w)
        m_h, e_h = rng.normal(7.5, 1.0), rng.normal(18.5, 1.5)
        day = hours % 24.0
        shape = (np.exp(-0.5 * ((day - m_h) / 1.3) ** 2) * 0.8
                 + np.exp(-0.5 * ((day - e_h) / 2.0) ** 2)
                 + 0.35 * (1 + np.cos(2 * np.pi * (day - 3.0) / 24.0)) / 2)
        cycling = 0.25 * (rng.uniform(0, 1, n_steps) > 0.5)
        noise = rng.normal(0.0, 0.08, n_steps)
        p = base + peak * np.clip(shape * (0.8 + cycling) + noise, 0.0, None) / 1.6
        for ph in u.phases:
            out[(u.id, ph)] = p / len(u.phases)
    return out
