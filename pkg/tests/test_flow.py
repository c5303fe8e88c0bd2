import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kamscar.diophantine import build_lattice
from kamscar.errors import ConfigError, DegeneratePair, InsufficientData, PreconditionError
from kamscar.flow import (
    FlowConfig,
    FlowWorkspace,
    TSubset,
    ab_sets,
    crossing_set,
    derived_constants,
    epsilon_scaling_fit,
    isolated,
    n1_n2_report,
    spacing_audit_arrays,
)
from kamscar.hamiltonian import builtin_flat_torus


# --------------------------------------------------------------------------- TSubset

intervals = st.lists(
    st.tuples(st.floats(0, 1, allow_nan=False), st.floats(0, 1, allow_nan=False)).map(lambda p: (min(p), max(p))),
    max_size=6,
)


def _indicator(S, grid):
    return np.array([t in S for t in grid])


@settings(max_examples=60, deadline=None)
@given(intervals, intervals)
def test_tsubset_inclusion_exclusion(a, b):
    A, B = TSubset(tuple(a), 0.0, 1.0), TSubset(tuple(b), 0.0, 1.0)
    lhs = A.union(B).measure() + A.intersection(B).measure()
    assert lhs == pytest.approx(A.measure() + B.measure(), abs=1e-12)
    assert A.difference(B).measure() == pytest.approx(A.measure() - A.intersection(B).measure(), abs=1e-12)
    assert A.complement().measure() == pytest.approx(1.0 - A.measure(), abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(intervals, intervals)
def test_tsubset_pointwise(a, b):
    A, B = TSubset(tuple(a), 0.0, 1.0), TSubset(tuple(b), 0.0, 1.0)
    grid = np.linspace(0.0005, 0.9995, 401)
    ia, ib = _indicator(A, grid), _indicator(B, grid)
    # interval endpoints may land on grid points, where open sets differ
    ends = np.array([x for iv in a + b for x in iv])
    far = np.array([np.all(np.abs(ends - g) > 1e-9) for g in grid]) if len(ends) else np.ones(len(grid), bool)
    assert np.array_equal(_indicator(A.union(B), grid)[far], (ia | ib)[far])
    assert np.array_equal(_indicator(A.intersection(B), grid)[far], (ia & ib)[far])
    assert np.array_equal(_indicator(A.difference(B), grid)[far], (ia & ~ib)[far])


def test_tsubset_normalises():
    S = TSubset(((0.5, 0.7), (0.1, 0.3), (0.25, 0.4)), 0.0, 1.0)
    assert S.intervals == ((0.1, 0.4), (0.5, 0.7))
    assert S.measure() == pytest.approx(0.5)
    assert TSubset.empty().measure() == 0.0


# --------------------------------------------------------------------------- constants and crossings


def test_derived_constants(H):
    C1, C2, S = derived_constants(H, 0.2)
    assert S == pytest.approx(2.0)
    assert C1 == pytest.approx((0.2 / 4) ** 0.25)
    assert C2 == pytest.approx(math.sqrt(0.2))


def test_gamma_must_exceed_seven_halves():
    with pytest.raises(ConfigError):
        FlowConfig(gamma=3.5)


def test_crossing_set_analytic_example(H):
    cfg = FlowConfig(h_list=(0.1,), t0=0.3)
    C = crossing_set(H, (4, 3), (5, 1), 0.1, cfg)
    assert len(C.intervals) == 1
    lo, hi = C.intervals[0]
    assert lo == pytest.approx((0.01 - 1e-4) / 0.035, abs=1e-14)
    assert hi == pytest.approx((0.01 + 1e-4) / 0.035, abs=1e-14)
    assert C.measure() == pytest.approx(2e-4 / 0.035, abs=1e-12)
    # brute-force scan of the gap
    t = np.linspace(0, 0.3, 3_000_001)
    gap = np.abs((0.25 + 0.06 * t) - (0.26 + 0.025 * t))
    assert np.count_nonzero(gap < 1e-4) * (t[1] - t[0]) == pytest.approx(C.measure(), rel=1e-4)


def test_crossing_outside_range_is_empty(H):
    cfg = FlowConfig(h_list=(0.1,), t0=0.2)
    assert crossing_set(H, (4, 3), (5, 1), 0.1, cfg).measure() == 0.0


def test_crossing_set_preconditions(H):
    cfg = FlowConfig(h_list=(0.1,))
    with pytest.raises(PreconditionError):
        crossing_set(H, (4, 3), (4, 3), 0.1, cfg)
    flat = builtin_flat_torus(0.0)
    with pytest.raises(DegeneratePair):
        crossing_set(flat, (8, 1), (7, 4), 0.1, cfg)
    # parallel levels far apart never cross
    assert crossing_set(flat, (4, 3), (5, 1), 0.1, cfg).measure() == 0.0


# --------------------------------------------------------------------------- audits


def test_spacing_audit_vacuous_single_point(H):
    lat = build_lattice(H.domain, 0.1)
    memb = np.zeros(len(lat), bool)
    memb[lat.index((9, 1))] = True
    mu = np.sum(lat.actions**2, axis=1)
    audit = spacing_audit_arrays(lat, memb, mu, 0 * mu, 0.0, 0.01, 1.0)
    assert audit.passed and audit.n_pairs == 0


def test_spacing_audit_flags_coincidence(H):
    lat = build_lattice(H.domain, 0.1)
    memb = np.ones(len(lat), bool)
    mu = np.sum(lat.actions**2, axis=1)
    # |I_m - I_n| = 0.1 sqrt(10) needs C1 h^{3/4} >= 0.316, i.e. C1 >= 1.78
    audit = spacing_audit_arrays(lat, memb, mu, 0 * mu, 0.0, 2.0, 0.1)
    pairs = {(v.m, v.n) for v in audit.violations}
    assert ((8, 1), (7, 4)) in pairs and ((7, 4), (8, 1)) in pairs


@pytest.fixture(scope="module")
def ws_coarse():
    return FlowWorkspace(builtin_flat_torus(), FlowConfig(h_list=(0.1,), n_t=10))


def test_ab_sets_unperturbed_without_coincidences():
    ws = FlowWorkspace(builtin_flat_torus(0.0), FlowConfig(h_list=(0.1,), n_t=10))
    r = ab_sets(ws, (4, 3), 0.1)
    assert r.B == r.A and r.A.measure() > 0
    r = ab_sets(ws, (8, 1), 0.1)  # partner (7, 4) is degenerate for every t
    assert r.B.measure() == 0.0


def test_ab_ratio_perturbed(ws_coarse):
    r = ab_sets(ws_coarse, (4, 3), 0.1)
    assert 0 <= r.B.measure() <= r.A.measure()


def test_isolated():
    mu = np.array([0.0, 1e-5, 1.0, 2.0])
    memb = np.array([True, True, True, False])
    assert isolated(mu, memb, 1e-4).tolist() == [False, False, True, False]


def test_n1_n2_at_degenerate_time(ws_coarse):
    rep = n1_n2_report(ws_coarse, 0.1, [0.0])
    assert rep.N1[0] == 45
    assert rep.N2[0] < rep.N1[0]
    rep = n1_n2_report(ws_coarse, 0.1)
    assert np.all(rep.N2 <= rep.N1)


def test_epsilon_fit():
    h = np.array([1 / 16, 1 / 32, 1 / 64, 1 / 128])
    fit = epsilon_scaling_fit(h, 3 * h**0.25)
    assert fit.slope == pytest.approx(0.25, abs=1e-6) and fit.consistent
    flat = epsilon_scaling_fit(h, np.full(4, 0.1))
    assert flat.slope == pytest.approx(0.0, abs=1e-9) and flat.flat and not flat.consistent
    with pytest.raises(InsufficientData):
        epsilon_scaling_fit(h[:2], h[:2])
