import numpy as np
import pytest

from impest import network as nw
from impest import powerflow as pf
from impest import synthetic as syn

from helpers import dc_oracle, resistive_lengths, injections_for, two_bus


def single(user_phases, p, q=None, model=pf.CONSTANT_POWER):
    p = np.atleast_2d(np.asarray(p, dtype=float))
    q = np.zeros_like(p) if q is None else np.atleast_2d(np.asarray(q, dtype=float))
    return pf.InjectionSpec(tuple(user_phases), p, q, model)


def test_zero_injection_gives_source_voltage_everywhere(small_feeder):
    cols = tuple((u.id, p) for u in small_feeder.users for p in u.phases)
    st = pf.solve(small_feeder, single(cols, np.zeros(len(cols))))
    src = pf.balanced_source(230.0)
    for (bus, ph), v in zip(st.bus_phases, st.voltage[0]):
        assert abs(v - src[ph]) < 1e-12  # exact up to the per-unit round trip
    assert np.all(st.branch_current == 0)


def test_two_bus_constant_current_ohms_law():
    st = pf.solve(two_bus(r=1.0), single([("h", "a")], [230.0], model=pf.CONSTANT_CURRENT),
                  source_voltage={"a": 230.0})
    assert abs(st.v("u", "a")[0]) == pytest.approx(229.0, abs=1e-9)
    assert abs(st.user_current[0, 0]) == pytest.approx(1.0, abs=1e-9)


def test_two_bus_constant_power_matches_quadratic():
    # P = U (230 - U) / R has root U = (230 + sqrt(230^2 - 4 R P)) / 2
    r, p = 2.0, 1000.0
    st = pf.solve(two_bus(r=r), single([("h", "a")], [p]), source_voltage={"a": 230.0})
    want = (230.0 + np.sqrt(230.0**2 - 4 * r * p)) / 2
    assert abs(st.v("u", "a")[0]) == pytest.approx(want, abs=1e-8)


@pytest.mark.parametrize("lengths", [
    {"l0": 1.0, "l1p": 1.0, "l2": 1.0, "l2p": 0.5},
    {"l0": 1 / 3, "l1p": 3.0, "l2": 2.0, "l2p": 0.5},
])
def test_resistive_fixture_matches_dc_oracle(resistive, lengths):
    oracle = dc_oracle(lengths)
    assert oracle["1p"] == pytest.approx(230.0) and oracle["2p"] == pytest.approx(228.0)
    inj = single([("u1", "a"), ("u2", "a")], [230.0, 460.0], model=pf.CONSTANT_CURRENT)
    st = pf.solve(resistive_lengths(resistive, lengths), inj, source_voltage={"a": 234.0})
    for bus, v in oracle.items():
        assert st.v(bus, "a")[0].real == pytest.approx(v, abs=1e-9)
        assert abs(st.v(bus, "a")[0].imag) < 1e-9


def test_residual_norm_of_solution_is_below_tolerance(small_feeder):
    inj = injections_for(small_feeder, 4, seed=1)
    st = pf.solve(small_feeder, inj, tol=1e-10)
    assert pf.residual_norm(small_feeder, st, inj) <= 1e-10


def test_residual_norm_detects_voltage_perturbation():
    f = two_bus(r=1.0)
    inj = single([("h", "a")], [1000.0], [200.0])
    st = pf.solve(f, inj)
    v = st.voltage.copy()
    v[0, st.bus_phases.index(("u", "a"))] += 1e-3 * 230.0
    bad = pf.StateSolution(st.bus_phases, st.branch_phases, st.user_phases, v, st.branch_current,
                           st.user_current, user_buses=st.user_buses)
    # the Ohm row moves by the perturbation, the load rows by it times the user current
    i_pu = st.user_current[0, 0] / ((f.base_power / 3) / f.base_voltage)
    want = 1e-3 * max(1.0, abs(i_pu.real), abs(i_pu.imag))
    assert pf.residual_norm(f, bad, inj) == pytest.approx(want, rel=1e-6)
    assert want >= 1e-4


def test_residual_norm_with_zero_currents_is_load_current():
    f = two_bus(r=1.0)
    inj = single([("h", "a")], [460.0], model=pf.CONSTANT_CURRENT)
    st = pf.solve(f, inj)
    flat = np.full_like(st.voltage, 230.0)
    zero = pf.StateSolution(st.bus_phases, st.branch_phases, st.user_phases, flat,
                            np.zeros_like(st.branch_current), np.zeros_like(st.user_current),
                            user_buses=st.user_buses)
    i_base = (f.base_power / 3) / f.base_voltage
    assert pf.residual_norm(f, zero, inj) == pytest.approx(2.0 / i_base, rel=1e-12)


def test_complex_power_balance(small_feeder):
    inj = injections_for(small_feeder, 3, seed=5, scale=3.0)
    st = pf.solve(small_feeder, inj, tol=1e-12)
    src = small_feeder.source.id
    s_base = small_feeder.base_power / 3
    for t in range(st.n_steps):
        supply = loss = 0.0
        for br in small_feeder.branches:
            i = np.array([st.branch_current[t, st.branch_phases.index((br.id, p))] for p in br.phases])
            loss += i.conj() @ br.impedance.z @ i
            if br.from_bus == src:
                u = np.array([st.v(src, p)[t] for p in br.phases])
                supply += u @ i.conj()
        load = np.sum(inj.p[t] + 1j * inj.q[t])
        assert abs(supply - load - loss) / s_base < 1e-8


def test_phase_rotation_equivariance():
    rot = {"a": "b", "b": "c", "c": "a"}
    base = ("a", "b", "c", "a", "b")
    f1 = syn.radial_feeder(3, 5, seed=6, phases_of_users=base)
    f2 = syn.radial_feeder(3, 5, seed=6, phases_of_users=tuple(rot[p] for p in base))
    inj1 = injections_for(f1, 2, seed=2, scale=2.0)
    inj2 = pf.InjectionSpec(tuple((u, rot[p]) for u, p in inj1.columns), inj1.p, inj1.q)
    s1, s2 = pf.solve(f1, inj1, tol=1e-12), pf.solve(f2, inj2, tol=1e-12)
    for bus in f1.buses:
        for p in bus.phases:
            np.testing.assert_allclose(np.abs(s2.v(bus.id, rot[p])), np.abs(s1.v(bus.id, p)), rtol=1e-10)


def test_threaded_solve_equals_serial(small_feeder):
    inj = injections_for(small_feeder, 6, seed=3)
    a, b = pf.solve(small_feeder, inj), pf.solve(small_feeder, inj, workers=3)
    np.testing.assert_array_equal(a.voltage, b.voltage)


def test_overload_raises_power_flow_error():
    with pytest.raises(pf.PowerFlowError) as err:
        pf.solve(two_bus(r=5.0), single([("h", "a")], [[1000.0], [1e5]]))
    assert err.value.timestep == 1


def test_rejects_per_unit_feeder_and_unknown_user(small_feeder):
    cols = (("h1", "a"),)
    with pytest.raises(ValueError):
        pf.solve(nw.to_per_unit(small_feeder), single(cols, [100.0]))
    with pytest.raises(ValueError):
        pf.solve(small_feeder, single((("nobody", "a"),), [100.0]))
    with pytest.raises(ValueError):
        pf.solve(small_feeder, single((("h1", "b"),), [100.0]))


def test_injection_spec_shape_checks():
    with pytest.raises(ValueError):
        pf.InjectionSpec((("h", "a"),), np.zeros((2, 2)), np.zeros((2, 2)))
    with pytest.raises(ValueError):
        pf.InjectionSpec((("h", "a"),), np.zeros((1, 1)), np.zeros((1, 1)), "constant_impedance")
