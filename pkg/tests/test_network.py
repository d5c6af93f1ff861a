from dataclasses import replace

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.sparse.csgraph import breadth_first_order

from impest import network as nw
from impest import synthetic as syn
from impest.network import Branch, Bus, Feeder, ImpedanceMatrix, User

from helpers import two_bus


def codes(feeder):
    return {v.code for v in nw.validate(feeder)}


# -- validate --------------------------------------------------------------------

def test_well_formed_two_bus_has_no_violations():
    assert nw.validate(two_bus()) == []


def test_two_sources_reported():
    f = two_bus()
    f = replace(f, buses=(f.buses[0], replace(f.buses[1], kind="source")))
    assert "multiple sources" in codes(f)


def test_missing_source_reported():
    f = two_bus()
    f = replace(f, buses=(replace(f.buses[0], kind="junction"), f.buses[1]))
    assert "no source" in codes(f)


def test_branch_phase_not_on_bus():
    f = Feeder(
        (Bus("s", ("a", "b", "c"), "source"), Bus("u", ("b", "c"))),
        (Branch("l", "s", "u", ("a",), ImpedanceMatrix([[0.1]], [[0.01]])),),
        (),
    )
    assert "phase mismatch" in codes(f)


def test_user_phase_not_on_bus():
    f = two_bus()
    f = replace(f, users=(User("h", "u", ("b",)),))
    assert "phase mismatch" in codes(f)


@pytest.mark.parametrize("mutate, code", [
    (lambda f: replace(f, branches=(replace(f.branches[0], to_bus="nowhere"),)), "unknown bus"),
    (lambda f: replace(f, branches=(replace(f.branches[0], to_bus="s"),)), "self loop"),
    (lambda f: replace(f, branches=(replace(f.branches[0], length=-1.0),)), "negative length"),
    (lambda f: replace(f, branches=(replace(f.branches[0], linecode="missing"),)), "unknown linecode"),
    (lambda f: replace(f, branches=(replace(f.branches[0], length=2.0),)), "linecode mismatch"),
    (lambda f: replace(f, branches=(replace(f.branches[0], impedance=ImpedanceMatrix(np.eye(3), np.eye(3))),)),
     "dimension mismatch"),
    (lambda f: replace(f, branches=(replace(f.branches[0], impedance=ImpedanceMatrix([[np.nan]], [[0.0]]),
                                            linecode=None),)), "non-finite"),
    (lambda f: replace(f, buses=f.buses + (Bus("island", ("a",)),)), "disconnected"),
    (lambda f: replace(f, buses=f.buses + (f.buses[1],)), "duplicate id"),
    (lambda f: replace(f, buses=(replace(f.buses[0], phases=("b", "a")), f.buses[1])), "phase order"),
])
def test_invariant_violations(mutate, code):
    assert code in codes(mutate(two_bus()))


def test_asymmetric_matrix_tagged_symmetric():
    r = np.array([[1.0, 0.2, 0.1], [0.3, 1.0, 0.1], [0.1, 0.1, 1.0]])
    f = Feeder(
        (Bus("s", ("a", "b", "c"), "source"), Bus("u", ("a", "b", "c"))),
        (Branch("l", "s", "u", ("a", "b", "c"), ImpedanceMatrix(r, r)),),
        (),
    )
    assert "asymmetric" in codes(f)


def test_phase_set_canonicalises_and_rejects():
    assert nw.phase_set(["c", "a"]) == ("a", "c")
    for bad in ([], ["a", "a"], ["d"]):
        with pytest.raises(ValueError):
            nw.phase_set(bad)


# -- reduce ----------------------------------------------------------------------

def test_series_merge_of_chain():
    f = syn.random_chain(3, seed=0, three_phase=False)
    f = replace(f, users=(User("h2", "b2", ("a",)),),
                buses=tuple(replace(b, kind="junction") if b.id == "b1" else b for b in f.buses))
    z1, z2 = (br.impedance for br in f.branches)
    red = nw.reduce(f)
    assert [b.id for b in red.buses] == ["b0", "b2"]
    (br,) = red.branches
    assert (br.from_bus, br.to_bus) == ("b0", "b2")
    np.testing.assert_allclose(br.impedance.r, z1.r + z2.r, rtol=0, atol=1e-15)
    np.testing.assert_allclose(br.impedance.x, z1.x + z2.x, rtol=0, atol=1e-15)
    assert br.length == pytest.approx(f.branches[0].length + f.branches[1].length)


def test_linecode_kept_only_when_shared():
    lc_a, lc_b = syn.SERVICE_CODES["service_16"], syn.SERVICE_CODES["service_35"]
    ph = ("a",)
    buses = (Bus("s", ph, "source"), Bus("m", ph), Bus("u", ph, "user_connection"))
    users = (User("h", "u", ph),)

    def feeder(second):
        return Feeder(buses, (
            Branch("l1", "s", "m", ph, lc_a.impedance(10.0), 10.0, "service_16"),
            Branch("l2", "m", "u", ph, (lc_a if second == "service_16" else lc_b).impedance(5.0), 5.0, second),
        ), users, linecodes={"service_16": lc_a, "service_35": lc_b})

    same = nw.reduce(feeder("service_16")).branches[0]
    mixed = nw.reduce(feeder("service_35")).branches[0]
    assert same.linecode == "service_16" and same.length == 15.0
    assert mixed.linecode is None and mixed.length == 15.0
    assert nw.validate(nw.reduce(feeder("service_16"))) == []


def test_merge_series_rejects_incompatible_phases():
    a = Branch("a", "s", "m", ("a",), ImpedanceMatrix([[1.0]], [[0.0]]))
    b = Branch("b", "m", "u", ("a", "b", "c"), ImpedanceMatrix(np.eye(3), np.eye(3)))
    with pytest.raises(ValueError, match="incompatible"):
        nw.merge_series(a, b, "m")


def test_reduce_keeps_branching_user_and_source_buses():
    f = syn.radial_feeder(4, 6, seed=2)
    red = nw.reduce(f)
    assert {b.id for b in red.buses} == {b.id for b in f.buses}


def test_eltf_like_reduces_to_109_buses():
    f = syn.eltf_like(seed=0)
    assert len(f.buses) == 906 and len(f.branches) == 905
    red = nw.reduce(f)
    assert (len(red.buses), len(red.branches)) == (109, 108)
    assert nw.validate(red) == []


@settings(max_examples=25, deadline=None)
@given(n=st.integers(2, 30), seed=st.integers(0, 10_000))
def test_reduce_properties_on_random_chains(n, seed):
    f = syn.random_chain(n, seed=seed)
    red = nw.reduce(f)
    # idempotent, users preserved, cumulative impedance unchanged
    again = nw.reduce(red)
    assert [b.id for b in again.buses] == [b.id for b in red.buses]
    assert [br.id for br in again.branches] == [br.id for br in red.branches]
    assert sorted(u.bus for u in red.metered_users) == sorted(u.bus for u in f.metered_users)
    for u in f.users:
        before, after = nw.cumulative_impedance(f, u), nw.cumulative_impedance(red, u.id)
        for p in before:
            np.testing.assert_allclose(after[p], before[p], rtol=1e-12, atol=1e-15)


# -- cumulative impedance ------------------------------------------------------------

def test_cumulative_impedance_on_resistive_fixture(resistive):
    r = {br.id: br.impedance.r[0, 0] for br in resistive.branches}
    assert nw.cumulative_impedance(resistive, "u2")["a"][0] == pytest.approx(r["l0"] + r["l2"] + r["l2p"])
    assert nw.cumulative_impedance(resistive, "u1")["a"][0] == pytest.approx(r["l0"] + r["l1p"])


def test_cumulative_impedance_single_branch():
    f = two_bus(r=0.5, x=0.1)
    assert nw.cumulative_impedance(f, "h") == {"a": pytest.approx((0.5, 0.1))}


def _graph_walk_oracle(feeder, user):
    """Sum diagonal entries along scipy's BFS predecessor chain from the source."""
    ids = [b.id for b in feeder.buses]
    pos = {b: i for i, b in enumerate(ids)}
    edge = {}
    rows, cols = [], []
    for br in feeder.branches:
        i, j = pos[br.from_bus], pos[br.to_bus]
        rows += [i, j]
        cols += [j, i]
        edge[frozenset((i, j))] = br
    g = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(len(ids), len(ids)))
    _, pred = breadth_first_order(g, pos[feeder.source.id], directed=False)
    out = {}
    for p in user.phases:
        node, r, x = pos[user.bus], 0.0, 0.0
        while pred[node] >= 0:
            br = edge[frozenset((node, pred[node]))]
            k = br.phases.index(p)
            r += br.impedance.r[k, k]
            x += br.impedance.x[k, k]
            node = pred[node]
        out[p] = (r, x)
    return out


def test_cumulative_impedance_matches_graph_walk():
    f = syn.radial_feeder(10, 14, seed=8)
    for u in f.users:
        got, want = nw.cumulative_impedance(f, u), _graph_walk_oracle(f, u)
        for p in want:
            np.testing.assert_allclose(got[p], want[p], rtol=1e-13)


def test_cumulative_impedance_rejects_meshed_feeder(resistive):
    mesh = replace(resistive, branches=resistive.branches + (
        Branch("loop", "0", "2", ("a",), ImpedanceMatrix([[1.0]], [[0.0]])),))
    with pytest.raises(ValueError, match="radial"):
        nw.cumulative_impedance(mesh, "u2")


# -- per-unit --------------------------------------------------------------------

def test_z_base_for_one_kva_per_phase():
    assert nw.z_base(230.0, 3000.0) == pytest.approx(52.9)


def test_one_per_unit_is_z_base_ohm():
    lc = nw.Linecode(np.array([[1000.0]]), np.array([[0.0]]))
    f = Feeder((Bus("s", ("a",), "source"), Bus("u", ("a",))),
               (Branch("l", "s", "u", ("a",), ImpedanceMatrix([[1.0]], [[0.0]])),), (), per_unit=True,
               linecodes={"lc": lc})
    assert nw.from_per_unit(f).branches[0].impedance.r[0, 0] == pytest.approx(52.9)


@pytest.mark.parametrize("v, s", [(0.0, 3000.0), (230.0, 0.0), (-230.0, 3000.0)])
def test_z_base_rejects_bad_bases(v, s):
    with pytest.raises(ValueError):
        nw.z_base(v, s)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), base_power=st.floats(1e2, 1e6))
def test_per_unit_round_trip(seed, base_power):
    f = replace(syn.radial_feeder(3, 5, seed=seed), base_power=base_power)
    back = nw.from_per_unit(nw.to_per_unit(f))
    for a, b in zip(f.branches, back.branches):
        np.testing.assert_allclose(b.impedance.r, a.impedance.r, rtol=1e-14, atol=0)
        np.testing.assert_allclose(b.impedance.x, a.impedance.x, rtol=1e-14, atol=0)


def test_per_unit_conversion_is_not_repeatable(small_feeder):
    with pytest.raises(ValueError):
        nw.to_per_unit(nw.to_per_unit(small_feeder))
    with pytest.raises(ValueError):
        nw.from_per_unit(small_feeder)


# -- serialisation ---------------------------------------------------------------------

def test_json_round_trip(tmp_path, small_feeder):
    path = tmp_path / "f.json"
    nw.save_feeder(small_feeder, path)
    back = nw.load_feeder(path)
    assert nw.feeder_to_dict(back) == nw.feeder_to_dict(small_feeder)
    assert nw.validate(back) == []


def test_json_stores_si_even_for_per_unit_feeder(small_feeder):
    a, b = nw.feeder_to_dict(nw.to_per_unit(small_feeder)), nw.feeder_to_dict(small_feeder)
    for da, db in zip(a["branches"], b["branches"]):
        np.testing.assert_allclose(da["r_ohm"], db["r_ohm"], rtol=1e-14)
        np.testing.assert_allclose(da["x_ohm"], db["x_ohm"], rtol=1e-14)
