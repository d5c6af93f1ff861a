"""Small builders shared by the test modules."""
from __future__ import annotations

import numpy as np

from impest import measurements as ms
from impest import powerflow as pf
from impest import synthetic as syn
from impest.network import Branch, Bus, Feeder, ImpedanceMatrix, Linecode, User


def two_bus(r: float = 1.0, x: float = 0.0, base_power: float = 3000.0) -> Feeder:
    """Source and one single-phase user bus joined by an r + jx ohm branch."""
    lc = Linecode(np.array([[r * 1000.0]]), np.array([[x * 1000.0]]))
    return Feeder(
        (Bus("s", ("a",), "source"), Bus("u", ("a",), "user_connection")),
        (Branch("l", "s", "u", ("a",), lc.impedance(1.0), 1.0, "lc"),),
        (User("h", "u", ("a",)),),
        base_power=base_power,
        linecodes={"lc": lc},
    )


def injections_for(feeder: Feeder, n_steps: int, seed: int = 0, scale: float = 1.0,
                   model: str = pf.CONSTANT_POWER) -> pf.InjectionSpec:
    """Profile-shaped demand on every user phase, ``n_steps`` rows spread over a day."""
    prof = syn.load_profiles(feeder.users, 288, seed=seed)
    cols = tuple(sorted(prof))
    stride = max(1, 288 // n_steps)
    p = np.array([prof[c] for c in cols]).T[::stride][:n_steps] * scale
    return pf.InjectionSpec(cols, p, ms.derive_reactive(p, 0.97), model)


def noiseless_case(feeder: Feeder, n_steps: int, seed: int = 0, scale: float = 1.0):
    """(injections, power-flow state, measurement set with class-0.5 sigmas but exact values)."""
    inj = injections_for(feeder, n_steps, seed, scale)
    state = pf.solve(feeder, inj)
    clean = ms.from_powerflow(feeder, state, inj, duration_min=15.0)
    ref = ms.default_noise_reference(feeder, {c: inj.p[:, k] for k, c in enumerate(inj.columns)})
    return inj, state, ms.with_sigma(clean, ms.NoiseModel(reference=ref))


def resistive_measurements(sigma_v: float = 0.383, sigma_p: float = 1.0) -> ms.MeasurementSet:
    """U1' = 230 V, U2' = 228 V, I1' = 1 A, I2' = 2 A on the resistive fixture, as P, Q and |U| samples."""
    S = ms.MeasurementSample
    return ms.MeasurementSet((
        S("u1", 0, "P", "a", 230.0 * 1.0, sigma_p), S("u1", 0, "Q", "a", 0.0, sigma_p),
        S("u1", 0, "VM", "a", 230.0, sigma_v),
        S("u2", 0, "P", "a", 228.0 * 2.0, sigma_p), S("u2", 0, "Q", "a", 0.0, sigma_p),
        S("u2", 0, "VM", "a", 228.0, sigma_v),
    ))


def resistive_lengths(feeder: Feeder, lengths: dict[str, float]) -> Feeder:
    lc = feeder.linecodes["unit"]
    return feeder.with_impedances({k: lc.impedance(v) for k, v in lengths.items()}, lengths)


def dc_oracle(lengths: dict[str, float], i1: float = 1.0, i2: float = 2.0, u0: float = 234.0) -> dict[str, float]:
    """Hand-written DC node voltages of the fixture (1 m = 1 ohm, no reactance)."""
    u1 = u0 - (i1 + i2) * lengths["l0"]
    u1p = u1 - i1 * lengths["l1p"]
    u2 = u1 - i2 * lengths["l2"]
    u2p = u2 - i2 * lengths["l2p"]
    return {"0": u0, "1": u1, "1p": u1p, "2": u2, "2p": u2p}


def random_impedance(rng, n: int, scale: float = 0.1) -> ImpedanceMatrix:
    a = rng.uniform(0.1, 1.0, (n, n)) * scale
    return ImpedanceMatrix((a + a.T) / 2, (a + a.T) / 4)
