import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from impest import measurements as ms
from impest import pipeline
from impest import powerflow as pf
from impest.measurements import MeasurementSample as S
from impest.measurements import MeasurementSet

SIGMA_VM = 0.005 / 3 * 230.0


def vm_set(values, user="h1", phase="a", sigma=1.0):
    return MeasurementSet(tuple(S(user, t, "VM", phase, float(v), sigma) for t, v in enumerate(values)),
                          duration_min=5.0)


def flat_vm(n_users, n_steps, value=230.0):
    return MeasurementSet(tuple(S(f"h{u}", t, "VM", "a", value, 1.0)
                                for u in range(n_users) for t in range(n_steps)))


# -- reactive power ------------------------------------------------------------

def test_reactive_power_at_097():
    assert ms.derive_reactive(1000.0, 0.97) == pytest.approx(250.6, abs=0.05)


@pytest.mark.parametrize("p, cos_phi", [(1000.0, 1.0), (0.0, 0.97)])
def test_reactive_power_zero_cases(p, cos_phi):
    assert ms.derive_reactive(p, cos_phi) == 0.0


def test_reactive_power_vectorised_and_validated():
    np.testing.assert_allclose(ms.derive_reactive(np.array([1000.0, 2000.0]), 0.97), [250.6, 501.2], atol=0.1)
    for bad in (0.0, 1.5):
        with pytest.raises(ValueError):
            ms.derive_reactive(1.0, bad)


# -- noise ---------------------------------------------------------------------

def test_noise_class_zero_is_identity():
    clean = flat_vm(3, 4)
    assert ms.add_noise(clean, ms.NoiseModel(accuracy_class=0.0, reference={"VM": 230.0})) == clean


def test_voltage_sigma_for_half_percent_class():
    model = ms.NoiseModel(accuracy_class=0.005, reference={"VM": 230.0})
    assert model.sigma(S("h", 0, "VM", "a", 231.0, 1.0)) == pytest.approx(0.383, abs=5e-4)


def test_relative_to_reading_basis():
    model = ms.NoiseModel(accuracy_class=0.03, basis="relative_to_reading")
    assert model.sigma(S("h", 0, "P", "a", -500.0, 1.0)) == pytest.approx(5.0)


def test_noise_model_validation():
    with pytest.raises(ValueError):
        ms.NoiseModel(accuracy_class=-0.1)
    with pytest.raises(ValueError):
        ms.NoiseModel(basis="absolute")
    with pytest.raises(KeyError):
        ms.NoiseModel(reference={}).sigma(S("h", 0, "P", "a", 1.0, 1.0))


def test_noise_is_reproducible_and_seed_dependent():
    clean = flat_vm(4, 25)
    a = ms.add_noise(clean, ms.NoiseModel(reference={"VM": 230.0}, seed=3))
    b = ms.add_noise(clean, ms.NoiseModel(reference={"VM": 230.0}, seed=3))
    c = ms.add_noise(clean, ms.NoiseModel(reference={"VM": 230.0}, seed=4))
    assert [s.value for s in a] == [s.value for s in b]
    assert [s.value for s in a] != [s.value for s in c]
    assert all(s.sigma == pytest.approx(SIGMA_VM) for s in a)


def test_noise_does_not_depend_on_sample_order():
    clean = flat_vm(3, 10)
    model = ms.NoiseModel(reference={"VM": 230.0}, seed=9)
    fwd = ms.add_noise(clean, model).lookup()
    rev = ms.add_noise(MeasurementSet(clean.samples[::-1]), model).lookup()
    assert all(fwd[k].value == rev[k].value for k in fwd)


def test_with_sigma_keeps_values():
    clean = flat_vm(2, 3, value=229.5)
    out = ms.with_sigma(clean, ms.NoiseModel(reference={"VM": 230.0}))
    assert [s.value for s in out] == [229.5] * 6
    assert all(s.sigma == pytest.approx(SIGMA_VM) for s in out)


# -- aggregation -----------------------------------------------------------------

def test_aggregate_mean_of_three():
    out, rep = ms.aggregate(vm_set([1.0, 2.0, 3.0]))
    assert [s.value for s in out] == [2.0] and rep.dropped == ()
    assert out.duration_min == 15.0


def test_aggregate_of_identical_inputs():
    out, _ = ms.aggregate(vm_set([229.1] * 6))
    assert [s.value for s in out] == pytest.approx([229.1, 229.1])


def test_aggregate_sigma_scales_with_root_three():
    out, _ = ms.aggregate(vm_set([230.0] * 3, sigma=0.383))
    assert out.samples[0].sigma == pytest.approx(0.221, abs=5e-4)


def test_aggregate_drops_incomplete_group():
    out, rep = ms.aggregate(vm_set([1.0, 2.0, 3.0, 4.0, 5.0]))
    assert out.timesteps == [0] and rep.dropped == (1,)


def test_aggregated_noise_has_reduced_sigma():
    n_groups = 10_000
    clean = MeasurementSet(tuple(S(f"h{g % 10}", t, "VM", "a", 230.0, 1.0)
                                 for g in range(10) for t in range(3 * n_groups // 10)))
    noisy = ms.add_noise(clean, ms.NoiseModel(reference={"VM": 230.0}, seed=2))
    agg, _ = ms.aggregate(noisy)
    assert len(agg) == n_groups
    sigma_out = SIGMA_VM / np.sqrt(3)
    assert all(s.sigma == pytest.approx(sigma_out) for s in agg)
    chi2 = sum((s.value - 230.0) ** 2 for s in agg) / sigma_out**2
    lo, hi = stats.chi2.ppf([0.005, 0.995], n_groups)
    assert lo < chi2 < hi


# -- selection and split ------------------------------------------------------------

class _Feeder:
    """The two attributes ``select_steps`` reads from a feeder."""

    def __init__(self, users):
        from impest.network import Bus, User

        self.metered_users = [User(u, f"b{u}", ("a",)) for u in users]
        self.users = self.metered_users
        self.bus_map = {f"b{u}": Bus(f"b{u}", ("a",)) for u in users}


def test_select_all_is_identity():
    data = flat_vm(2, 5)
    out, rep = ms.select_steps(data, _Feeder(["h0", "h1"]), 5)
    assert out == data and rep.kept == (0, 1, 2, 3, 4)


def test_select_keeps_largest_drop():
    data = vm_set([225.0, 229.0])
    out, _ = ms.select_steps(data, _Feeder(["h1"]), 1)
    assert out.timesteps == [0]


def test_select_matches_full_sort(rng):
    values = rng.uniform(215.0, 232.0, (50, 3))
    data = MeasurementSet(tuple(S(f"h{u}", t, "VM", "a", float(values[t, u]), 1.0)
                                for t in range(50) for u in range(3)))
    out, rep = ms.select_steps(data, _Feeder(["h0", "h1", "h2"]), 10)
    drops = 230.0 - values.min(axis=1)
    assert out.timesteps == sorted(np.argsort(-drops, kind="stable")[:10].tolist())
    kept, discarded = set(out.timesteps), set(range(50)) - set(out.timesteps)
    assert min(rep.drops[t] for t in kept) >= max(rep.drops[t] for t in discarded)


def test_select_breaks_ties_by_step_index():
    out, _ = ms.select_steps(vm_set([228.0, 229.0, 228.0, 228.0]), _Feeder(["h1"]), 2)
    assert out.timesteps == [0, 2]


def test_select_excludes_steps_with_missing_voltage():
    data = MeasurementSet(tuple(s for s in flat_vm(2, 4, 220.0) if not (s.user_id == "h1" and s.timestep == 2)))
    out, rep = ms.select_steps(data, _Feeder(["h0", "h1"]), 3)
    assert rep.excluded == (2,) and out.timesteps == [0, 1, 3]
    with pytest.raises(ValueError):
        ms.select_steps(data, _Feeder(["h0", "h1"]), 4)


def test_split_two_hundred_plus_ten():
    data = flat_vm(1, 210)
    train, val = ms.split(data, range(200), range(200, 210))
    assert len(train.timesteps) == 200 and len(val.timesteps) == 10
    assert not set(train.timesteps) & set(val.timesteps)


def test_split_with_empty_validation():
    data = flat_vm(1, 5)
    train, val = ms.split(data, range(5), [])
    assert train == data and len(val) == 0


def test_split_rejects_overlap():
    with pytest.raises(ValueError, match="overlap"):
        ms.split(flat_vm(1, 5), [0, 1, 2], [2, 3])


# -- sets and CSV ----------------------------------------------------------------------

def test_duplicate_samples_rejected():
    s = S("h", 0, "VM", "a", 230.0, 1.0)
    with pytest.raises(ValueError, match="duplicate"):
        MeasurementSet((s, s))


def test_check_against_feeder(small_feeder):
    user = small_feeder.users[0]
    ok = MeasurementSet((S(user.id, 0, "P", user.phases[0], 1.0, 1.0),))
    ok.check(small_feeder)
    other = next(p for p in "abc" if p not in user.phases)
    for bad in (S("ghost", 0, "P", "a", 1.0, 1.0), S(user.id, 0, "P", other, 1.0, 1.0),
                S(user.id, 0, "P", user.phases[0], 1.0, 0.0)):
        with pytest.raises(ValueError):
            MeasurementSet((bad,)).check(small_feeder)


def test_renumbered_and_restrict():
    data = flat_vm(1, 6).restrict([1, 4, 5])
    assert data.timesteps == [1, 4, 5]
    assert data.renumbered().timesteps == [0, 1, 2]


sample_strategy = st.builds(
    S,
    user_id=st.text("abcdefgh0123456789_", min_size=1, max_size=6),
    timestep=st.integers(0, 10_000),
    kind=st.sampled_from(ms.KINDS),
    phase=st.sampled_from("abc"),
    value=st.floats(-1e6, 1e6, allow_nan=False),
    sigma=st.floats(1e-9, 1e3),
)


@settings(max_examples=30, deadline=None)
@given(samples=st.lists(sample_strategy, max_size=30, unique_by=lambda s: s.key))
def test_csv_round_trip(tmp_path_factory, samples):
    path = tmp_path_factory.mktemp("csv") / "m.csv"
    data = MeasurementSet(tuple(samples))
    ms.save_csv(data, path)
    assert ms.load_csv(path).samples == data.samples


def test_csv_missing_sigma_column(tmp_path):
    path = tmp_path / "m.csv"
    path.write_text("user_id,timestep,kind,phase,value\nh1,0,P,a,1.0\n")
    with pytest.raises(ms.MeasurementFormatError, match="sigma"):
        ms.load_csv(path)


def test_csv_reports_malformed_line_numbers(tmp_path):
    path = tmp_path / "m.csv"
    path.write_text("user_id,timestep,kind,phase,value,sigma\n"
                    "h1,0,P,a,1.0,0.1\n"
                    "h1,x,P,a,1.0,0.1\n"
                    "h1,1,W,a,1.0,0.1\n"
                    "h1,2,P,a,1.0,-1\n")
    with pytest.raises(ms.MeasurementFormatError) as err:
        ms.load_csv(path)
    msg = str(err.value)
    assert "line 3" in msg and "line 4" in msg and "line 5" in msg and "line 2" not in msg


def test_csv_parse_speed_ten_days_eight_users(tmp_path):
    steps = 10 * 96
    data = MeasurementSet(tuple(S(f"h{u}", t, k, "a", 230.0 + t * 1e-3, 0.4)
                                for t in range(steps) for u in range(8) for k in ms.KINDS))
    path = tmp_path / "big.csv"
    ms.save_csv(data, path)
    t0 = time.perf_counter()
    back = ms.load_csv(path)
    assert time.perf_counter() - t0 < 1.0
    assert len(back) == steps * 8 * 3


# -- synthesis ---------------------------------------------------------------------------

def test_from_powerflow_matches_state(small_case, small_feeder):
    inj, state, data = small_case
    look = data.lookup()
    for u in small_feeder.users:
        for p in u.phases:
            k = inj.columns.index((u.id, p))
            for t in range(state.n_steps):
                assert look[(u.id, t, "P", p)].value == inj.p[t, k]
                assert look[(u.id, t, "VM", p)].value == pytest.approx(abs(state.v(u.bus, p)[t]), rel=1e-15)


def test_noiseless_simulation_matches_power_flow(small_feeder):
    settings_ = pipeline.SimulationSettings(n_train=5, n_validation=2, n_steps_5min=60, noise=False, seed=1)
    sim = pipeline.simulate(small_feeder, settings_)
    cols = tuple(sorted(sim.profiles))
    p = np.array([sim.profiles[c] for c in cols]).T
    state = pf.solve(small_feeder, pf.InjectionSpec(cols, p, ms.derive_reactive(p, 0.97)), tol=1e-12)
    look = sim.aggregated.lookup()
    for u in small_feeder.users:
        for ph in u.phases:
            vm = np.abs(state.v(u.bus, ph)).reshape(-1, 3).mean(axis=1)
            pm = p[:, cols.index((u.id, ph))].reshape(-1, 3).mean(axis=1)
            for t in sim.train_steps + sim.validation_steps:
                assert look[(u.id, t, "VM", ph)].value == pytest.approx(vm[t], abs=1e-10 * 230.0)
                assert look[(u.id, t, "P", ph)].value == pytest.approx(pm[t], rel=1e-12)
