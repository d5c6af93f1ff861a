"""Smart-meter measurement sets: synthesis, noise, aggregation, selection, CSV I/O."""
from __future__ import annotations

import csv
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable

import numpy as np

logger = logging.getLogger(__name__)

KINDS = ("P", "Q", "VM")
CSV_HEADER = ["user_id", "timestep", "kind", "phase", "value", "sigma"]


def _kind(kind: str) -> str:
    k = "VM" if kind in ("Vmag", "vmag", "VM", "vm") else kind.upper()
    if k not in KINDS:
        raise ValueError(f"unknown measurement kind {kind!r}")
    return k


@dataclass(frozen=True, slots=True)
class MeasurementSample:
    user_id: str
    timestep: int
    kind: str
    phase: str
    value: float
    sigma: float

    @property
    def key(self) -> tuple[str, int, str, str]:
        return (self.user_id, self.timestep, self.kind, self.phase)


@dataclass(frozen=True)
class MeasurementSet:
    samples: tuple[MeasurementSample, ...]
    duration_min: float = 15.0
    provenance: str = "synthetic"

    def __post_init__(self):
        samples = tuple(self.samples)
        object.__setattr__(self, "samples", samples)
        seen = set()
        for s in samples:
            if s.key in seen:
                raise ValueError(f"duplicate measurement {s.key}")
            seen.add(s.key)

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    @property
    def timesteps(self) -> list[int]:
        return sorted({s.timestep for s in self.samples})

    def by_timestep(self) -> dict[int, list[MeasurementSample]]:
        out: dict[int, list[MeasurementSample]] = defaultdict(list)
        for s in self.samples:
            out[s.timestep].append(s)
        return dict(sorted(out.items()))

    def restrict(self, steps: Iterable[int]) -> "MeasurementSet":
        keep = set(steps)
        return replace(self, samples=tuple(s for s in self.samples if s.timestep in keep))

    def renumbered(self) -> "MeasurementSet":
        """Same samples with timesteps mapped to 0..T-1 in ascending order."""
        m = {t: i for i, t in enumerate(self.timesteps)}
        return replace(self, samples=tuple(replace(s, timestep=m[s.timestep]) for s in self.samples))

    def lookup(self) -> dict[tuple[str, int, str, str], MeasurementSample]:
        return {s.key: s for s in self.samples}

    def check(self, feeder) -> None:
        users = feeder.user_map
        for s in self.samples:
            if s.user_id not in users:
                raise ValueError(f"measurement for unknown user {s.user_id}")
            if s.phase not in users[s.user_id].phases:
                raise ValueError(f"measurement on phase {s.phase} which user {s.user_id} does not have")
            if not s.sigma > 0:
                raise ValueError(f"non-positive sigma for {s.key}")


@dataclass(frozen=True)
class NoiseModel:
    """Gaussian meter noise; sigma is one third of the accuracy-class maximum error."""

    accuracy_class: float = 0.005
    basis: str = "relative_to_reference"
    reference: dict[str, float] = field(default_factory=dict)  # kind -> value, or (kind, user) -> value
    seed: int = 0

    def __post_init__(self):
        if self.accuracy_class < 0:
            raise ValueError("accuracy class must be non-negative")
        if self.basis not in ("relative_to_reading", "relative_to_reference"):
            raise ValueError(f"unknown noise basis {self.basis!r}")

    def sigma(self, sample: MeasurementSample) -> float:
        if self.basis == "relative_to_reading":
            base = abs(sample.value)
        else:
            ref = self.reference
            base = ref.get((sample.kind, sample.user_id), ref.get(sample.kind))
            if base is None:
                raise KeyError(f"no noise reference for {sample.kind} of {sample.user_id}")
        return self.accuracy_class / 3.0 * base


def derive_reactive(p, cos_phi: float):
    """Reactive power for a fixed power factor: Q = P tan(acos(cos_phi))."""
    if not 0 < cos_phi <= 1:
        raise ValueError("cos_phi must lie in (0, 1]")
    return np.asarray(p) * math.tan(math.acos(cos_phi)) if not np.isscalar(p) else p * math.tan(math.acos(cos_phi))


def _sample_rng(seed: int, s: MeasurementSample) -> np.random.Generator:
    # one independent stream per (user, timestep, kind, phase) keeps output order-free
    words = [seed & 0xFFFFFFFF, s.timestep, KINDS.index(s.kind), "abc".index(s.phase)]
    words += list(s.user_id.encode())
    return np.random.default_rng(np.random.SeedSequence(words))


def add_noise(clean: MeasurementSet, model: NoiseModel) -> MeasurementSet:
    out = []
    for s in clean.samples:
        sigma = model.sigma(s)
        if model.accuracy_class == 0:
            out.append(s)
            continue
        err = _sample_rng(model.seed, s).normal(0.0, sigma)
        out.append(replace(s, value=s.value + err, sigma=sigma))
    return replace(clean, samples=tuple(out))


def with_sigma(ms: MeasurementSet, model: NoiseModel) -> MeasurementSet:
    """Attach the model's sigma to each sample without perturbing the values."""
    return replace(ms, samples=tuple(replace(s, sigma=model.sigma(s)) for s in ms.samples))


@dataclass(frozen=True)
class AggregationReport:
    dropped: tuple[int, ...]


def aggregate(five_min: MeasurementSet, group: int = 3) -> tuple[MeasurementSet, AggregationReport]:
    """Average groups of ``group`` consecutive steps (0-2 -> 0, 3-5 -> 1, ...)."""
    buckets: dict[tuple[str, int, str, str], list[MeasurementSample]] = defaultdict(list)
    for s in five_min.samples:
        buckets[(s.user_id, s.timestep // group, s.kind, s.phase)].append(s)
    out_steps: dict[int, list[MeasurementSample]] = defaultdict(list)
    incomplete = set()
    for (uid, t, kind, ph), group_samples in buckets.items():
        if len(group_samples) < group:
            incomplete.add(t)
            continue
        vals = np.array([g.value for g in group_samples])
        sig = np.array([g.sigma for g in group_samples])
        sigma = float(np.sqrt(np.sum(sig**2))) / group
        out_steps[t].append(MeasurementSample(uid, t, kind, ph, float(vals.mean()), sigma))
    samples = [s for t in sorted(out_steps) if t not in incomplete for s in out_steps[t]]
    if incomplete:
        logger.warning("dropped %d incomplete aggregation groups", len(incomplete))
    return (
        replace(five_min, samples=tuple(samples), duration_min=five_min.duration_min * group),
        AggregationReport(tuple(sorted(incomplete))),
    )


@dataclass(frozen=True)
class SelectionReport:
    kept: tuple[int, ...]
    excluded: tuple[int, ...]  # steps with missing voltage samples
    drops: dict


def voltage_drops(ms: MeasurementSet, feeder) -> tuple[dict[int, float], list[int]]:
    """Largest (nominal - measured) voltage per timestep and the steps lacking voltage samples."""
    expected = {(u.id, p) for u in feeder.metered_users for p in u.phases}
    nominal = {u.id: feeder.bus_map[u.bus].base_voltage for u in feeder.users}
    drops, missing = {}, []
    for t, samples in ms.by_timestep().items():
        vm = {(s.user_id, s.phase): s.value for s in samples if s.kind == "VM"}
        if not expected <= set(vm):
            missing.append(t)
            continue
        drops[t] = max(nominal[u] - v for (u, _), v in vm.items())
    return drops, missing


def select_steps(ms: MeasurementSet, feeder, n: int) -> tuple[MeasurementSet, SelectionReport]:
    """Keep the ``n`` timesteps with the largest measured voltage drop."""
    drops, missing = voltage_drops(ms, feeder)
    if missing:
        logger.warning("excluding %d timesteps with missing voltage samples", len(missing))
    if n > len(drops):
        raise ValueError(f"requested {n} timesteps but only {len(drops)} are available")
    ranked = sorted(drops, key=lambda t: (-drops[t], t))
    kept = tuple(sorted(ranked[:n]))
    return ms.restrict(kept), SelectionReport(kept, tuple(missing), drops)


def split(ms: MeasurementSet, train_steps, validation_steps) -> tuple[MeasurementSet, MeasurementSet]:
    train_steps, validation_steps = set(train_steps), set(validation_steps)
    overlap = train_steps & validation_steps
    if overlap:
        raise ValueError(f"train and validation steps overlap: {sorted(overlap)[:10]}")
    return ms.restrict(train_steps), ms.restrict(validation_steps)


# -- CSV ----------------------------------------------------------------------

class MeasurementFormatError(ValueError):
    pass


def save_csv(ms: MeasurementSet, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for s in ms.samples:
            w.writerow([s.user_id, s.timestep, s.kind, s.phase, repr(float(s.value)), repr(float(s.sigma))])


def load_csv(path: str | Path, duration_min: float = 15.0, provenance: str = "imported") -> MeasurementSet:
    samples = []
    errors = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != CSV_HEADER:
            missing = [c for c in CSV_HEADER if header is None or c not in [h.strip() for h in header]]
            raise MeasurementFormatError(f"{path}: bad header {header}; missing columns {missing}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                if len(row) != 6:
                    raise ValueError(f"expected 6 fields, got {len(row)}")
                uid, t, kind, ph, val, sig = row
                kind = _kind(kind)
                if ph not in ("a", "b", "c"):
                    raise ValueError(f"bad phase {ph!r}")
                sigma = float(sig)
                if not sigma > 0:
                    raise ValueError("sigma must be positive")
                samples.append(MeasurementSample(uid, int(t), kind, ph, float(val), sigma))
            except ValueError as exc:
                errors.append(f"line {lineno}: {exc}")
    if errors:
        raise MeasurementFormatError(f"{path}: malformed rows\n" + "\n".join(errors[:20]))
    return MeasurementSet(tuple(samples), duration_min, provenance)


# -- synthesis from power flow ---------------------------------------------------

def from_powerflow(feeder, state, injections, metered_only: bool = True, duration_min: float = 5.0,
                   step_offset: int = 0) -> MeasurementSet:
    """Noiseless P, Q and |U| samples for every metered user phase (sigma set to 1, replace later)."""
    vm = state.vmag()
    bp = {k: i for i, k in enumerate(state.bus_phases)}
    col = {k: i for i, k in enumerate(injections.columns)}
    samples = []
    users = [u for u in feeder.users if u.metered or not metered_only]
    for t in range(state.n_steps):
        for u in users:
            for p in u.phases:
                k = col.get((u.id, p))
                pv = float(injections.p[t, k]) if k is not None else 0.0
                qv = float(injections.q[t, k]) if k is not None else 0.0
                tt = t + step_offset
                samples.append(MeasurementSample(u.id, tt, "P", p, pv, 1.0))
                samples.append(MeasurementSample(u.id, tt, "Q", p, qv, 1.0))
                samples.append(MeasurementSample(u.id, tt, "VM", p, float(vm[t, bp[(u.bus, p)]]), 1.0))
    return MeasurementSet(tuple(samples), duration_min, "synthetic")


def default_noise_reference(feeder, p_profiles: dict[tuple[str, str], np.ndarray]) -> dict:
    """Nominal voltage for |U|; per-user maximum |P| for P and Q."""
    ref: dict = {"VM": feeder.base_voltage}
    peak: dict[str, float] = defaultdict(float)
    for (uid, _), series in p_profiles.items():
        peak[uid] = max(peak[uid], float(np.max(np.abs(series))) if len(series) else 0.0)
    for uid, v in peak.items():
        v = v if v > 0 else 1.0
        ref[("P", uid)] = v
        ref[("Q", uid)] = v
    for u in feeder.users:
        ref[("VM", u.id)] = feeder.bus_map[u.bus].base_voltage
    return ref
