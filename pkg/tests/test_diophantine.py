import math

import numpy as np
import pytest

from kamscar.diophantine import (
    DiophantineParams,
    build_lattice,
    diophantine_check,
    diophantine_mask,
    index_set_members,
    measure_estimate,
    monte_carlo_measure,
    nonresonant_action_set,
    NonresonantActionSet,
    weyl_density_report,
)
from kamscar.errors import ConfigError, DegenerateFrequencyMap, ResolutionError
from kamscar.hamiltonian import ActionRect, builtin_flat_torus, frequency_map


def brute_force_ok(w, kappa, tau, k_max):
    """Direct scan over all integer vectors of norm <= k_max."""
    r = np.arange(-k_max, k_max + 1)
    K1, K2 = np.meshgrid(r, r, indexing="ij")
    n = np.hypot(K1, K2)
    keep = (n > 0) & (n <= k_max)
    return bool(np.all(np.abs(w[0] * K1[keep] + w[1] * K2[keep]) >= kappa / n[keep] ** tau))


def test_check_against_brute_force():
    p = DiophantineParams(0.05, 2.0, 40)
    rng = np.random.default_rng(3)
    W = rng.uniform(0.2, 2.0, (300, 2))
    got = diophantine_mask(W[:, 0], W[:, 1], p)
    want = np.array([brute_force_ok(w, 0.05, 2.0, 40) for w in W])
    assert np.array_equal(got, want)
    assert 0 < want.sum() < len(want)


def test_rational_direction_fails_with_witness():
    cert = diophantine_check((1.0, 2.0), DiophantineParams(0.2))
    assert not cert
    assert cert.witness == (2, -1)


def test_golden_direction_passes():
    phi = (1 + math.sqrt(5)) / 2
    cert = diophantine_check((1.0, phi), DiophantineParams(0.2))
    assert cert and cert.witness is None
    assert cert.tail_bound == pytest.approx(0.2 / 200**2)


def test_params_validation():
    with pytest.raises(ConfigError):
        DiophantineParams(0.0)
    with pytest.raises(ConfigError):
        DiophantineParams(0.1, tau=1.0)


def test_lattice_count_and_offset():
    H = builtin_flat_torus()
    lat = build_lattice(H.domain, 0.1)
    assert len(lat) == 45
    assert (4, 3) in lat and (3, 4) not in lat
    shifted = build_lattice(H.domain, 0.1, 0.25)
    assert np.allclose(shifted.action((4, 3)), [0.425, 0.325])


def test_nonresonant_measure_matches_monte_carlo():
    H = builtin_flat_torus()
    p = DiophantineParams(0.2)
    E = nonresonant_action_set(H, 0.01, p, spacing=1 / 512)

    def indicator(x, y):
        inside = H.domain.contains(x, y)
        w1, w2 = frequency_map(H, (x, y), 0.01)
        return inside & diophantine_mask(w1, w2, p)

    mc, err = monte_carlo_measure(indicator, (0.1, 0.1), (1.0, 1.0), 200_000, seed=5)
    assert abs(E.measure() - mc) < 4 * err + 2e-3
    assert E.phase_space_measure() == pytest.approx((2 * np.pi) ** 2 * E.measure())


def test_monte_carlo_disk_area():
    val, err = monte_carlo_measure(lambda x, y: x**2 + y**2 < 1, (-1, -1), (1, 1), 400_000, seed=0)
    assert abs(val - math.pi) < 4 * err


def test_measure_estimate_default_cell():
    assert measure_estimate(np.ones((4, 4))) == 1.0
    assert measure_estimate([True, False], 0.25) == 0.25


def test_index_set_resolution_guard():
    H = builtin_flat_torus()
    E = nonresonant_action_set(H, 0.01, DiophantineParams(0.2), spacing=0.05)
    with pytest.raises(ResolutionError):
        index_set_members(build_lattice(H.domain, 0.1), E)


def test_members_use_distance_field():
    H = builtin_flat_torus()
    E = nonresonant_action_set(H, 0.01, DiophantineParams(0.2), spacing=1 / 256)
    lat = build_lattice(H.domain, 1 / 16)
    memb = index_set_members(lat, E)
    inside_cells = E.masked_points()
    for i in np.flatnonzero(memb)[:20]:
        d = np.min(np.linalg.norm(inside_cells - lat.actions[i], axis=1))
        assert d < 1 / 16 + 1e-12


def test_degenerate_frequency_map():
    from kamscar.hamiltonian import FourierPolyHamiltonian

    c = np.zeros((2, 2, 1), complex)
    c[1, 0, 0] = 1.0
    c[0, 1, 0] = 2.0  # linear H0: frequency map is constant
    H = FourierPolyHamiltonian({(0, 0): c}, ActionRect((0, 0), (1, 1)))
    with pytest.raises(DegenerateFrequencyMap):
        nonresonant_action_set(H, 0.0, DiophantineParams(0.2), spacing=0.1)


def test_binary_round_trip(tmp_path):
    H = builtin_flat_torus()
    E = nonresonant_action_set(H, 0.02, DiophantineParams(0.2), spacing=1 / 64)
    E.to_binary(tmp_path / "e.bin")
    F = NonresonantActionSet.from_binary(tmp_path / "e.bin", t=0.02)
    assert np.array_equal(E.mask, F.mask)
    assert F.measure() == E.measure()


def test_weyl_density_report_shape():
    H = builtin_flat_torus()
    rep = weyl_density_report(H, 0.01, DiophantineParams(0.2), [1 / 8, 1 / 16, 1 / 32])
    assert [r.h for r in rep.rows] == [1 / 8, 1 / 16, 1 / 32]
    assert all(r.count > 0 for r in rep.rows)
    with pytest.raises(ValueError):
        weyl_density_report(H, 0.01, DiophantineParams(0.2), [1 / 8, 1 / 16])
