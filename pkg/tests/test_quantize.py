from math import comb

import numpy as np
import pytest

from kamscar import quantize
from kamscar.errors import BoundaryContamination, DimensionMismatch, PreconditionError, SymmetryViolation
from kamscar.hamiltonian import FourierPolySymbol, builtin_flat_torus, flat_torus_domain, shift_angles
from kamscar.quantize import (
    EigenWindowResult,
    build_operator,
    build_quasimode,
    build_truncation,
    cached_eigensolve,
    eigensolve_window,
    matrix_element,
    overlap,
    residual_norm,
)


def mccoy_entry(table, k, m, h, t):
    """<e_{m+k}, Op(I^a e^{ik.theta}) e_m> from the symmetric (McCoy) ordering.

    Per axis, I^a e^{ik theta} quantizes to 2^-a sum_j C(a, j) D^j e^{ik theta} D^(a-j)
    with D e_m = h m e_m, so no midpoint rule enters the oracle.
    """
    total = 0j
    for (a, b, d), c in np.ndenumerate(table):
        if c == 0:
            continue
        f = c * t**d
        for deg, mm, kk in ((a, m[0], k[0]), (b, m[1], k[1])):
            f *= sum(comb(deg, j) * (h * (mm + kk)) ** j * (h * mm) ** (deg - j) for j in range(deg + 1)) / 2**deg
        total += f
    return total


def random_symbol(seed):
    rng = np.random.default_rng(seed)
    terms = {}
    for k in [(0, 0), (1, 0), (1, -2), (0, 3)]:
        c = rng.normal(size=(3, 4, 2)) + 1j * rng.normal(size=(3, 4, 2))
        if k == (0, 0):
            c = c.real + 0j
        terms[k] = c
        terms[(-k[0], -k[1])] = np.conj(c)
    return FourierPolySymbol(terms, flat_torus_domain())


@pytest.mark.parametrize("seed", [0, 1])
def test_weyl_matrix_matches_mccoy_ordering(seed):
    a = random_symbol(seed)
    trunc = build_truncation(builtin_flat_torus(), 0.1, E_cut=0.3, rho=1.0)
    mat = build_operator(a, 0.1, 0.37, trunc).dense()
    ref = np.zeros_like(mat)
    for j, m in enumerate(trunc.modes):
        for k in a.support:
            i = trunc.get(m + np.asarray(k))
            if i is not None:
                ref[i, j] += mccoy_entry(a.coeff(k), k, m, 0.1, 0.37)
    assert np.allclose(mat, ref, atol=1e-12 * np.abs(ref).max())
    assert np.abs(mat - mat.conj().T).max() <= 1e-14 * np.abs(mat).max()


def test_matrix_element_values(H):
    assert matrix_element(H, (4, 3), (4, 3), 0.1, 0.01).real == pytest.approx(0.25 + 0.01 * 0.06)
    assert matrix_element(H, (4, 3), (6, 3), 0.1, 0.01) == pytest.approx(0.01 / 4 * 0.5 * 0.3)
    assert matrix_element(H, (4, 3), (5, 3), 0.1, 0.01) == 0


def test_unperturbed_spectrum_is_exact(H):
    trunc = build_truncation(H, 0.1, E_cut=1.0)
    # window edge kept off the integer levels h^2 |m|^2
    res = eigensolve_window(build_operator(H, 0.1, 0.0, trunc), 0.0, 0.995)
    ref = np.sort([0.01 * (m1 * m1 + m2 * m2) for m1, m2 in trunc.modes if m1 * m1 + m2 * m2 <= 99])
    assert np.allclose(res.values, ref, atol=1e-15)
    assert len(res) == len(ref)


def test_window_includes_both_endpoints(H):
    trunc = build_truncation(H, 0.1, E_cut=1.0)
    res = eigensolve_window(build_operator(H, 0.1, 0.0, trunc), 0.25, 0.26)
    assert np.count_nonzero(np.isclose(res.values, 0.25)) == 12
    assert np.count_nonzero(np.isclose(res.values, 0.26)) == 8


def test_gauge_covariance(H):
    trunc = build_truncation(H, 1 / 16, E_cut=1.0, rho=2.0)
    a = eigensolve_window(build_operator(H, 1 / 16, 0.1, trunc), 0.0, 1.0)
    b = eigensolve_window(build_operator(shift_angles(H, (0.7, 0.7)), 1 / 16, 0.1, trunc), 0.0, 1.0)
    assert np.allclose(a.values, b.values, atol=1e-12)


def test_asymmetric_symbol_refused(H):
    trunc = build_truncation(H, 0.1, E_cut=0.5)
    c = np.zeros((1, 1, 1), complex)
    c[0, 0, 0] = 1.0
    bad = FourierPolySymbol({(0, 0): c, (1, 0): c.copy(), (-1, 0): 2 * c}, flat_torus_domain(), check=False)
    with pytest.raises(SymmetryViolation):
        build_operator(bad, 0.1, 0.0, trunc)


def test_eigenpairs_and_completeness(H):
    trunc = build_truncation(H, 0.1, E_cut=0.6, rho=1.0)
    mat = build_operator(H, 0.1, 0.3, trunc)
    res = eigensolve_window(mat, -1.0, 10.0, check_shell=False)
    assert len(res) == mat.dim
    U = np.stack([res.vector(j) for j in range(len(res))], axis=1)
    assert np.allclose(U.conj().T @ U, np.eye(mat.dim), atol=1e-10)
    e = np.zeros(mat.dim)
    e[trunc.index((4, 3))] = 1.0
    assert np.sum(np.abs(res.overlaps(e)) ** 2) == pytest.approx(1.0, abs=1e-12)
    assert res.residuals.max() < 1e-12


def test_degenerate_pair_window_count(H):
    trunc = build_truncation(H, 0.1, E_cut=1.0)
    res = eigensolve_window(build_operator(H, 0.1, 0.0, trunc), 0.0, 1.0)
    assert np.count_nonzero(np.abs(res.values - 0.65) <= 1e-4 / 3) >= 2


def test_lanczos_path_agrees(H, monkeypatch):
    trunc = build_truncation(H, 1 / 16, E_cut=1.0)
    mat = build_operator(H, 1 / 16, 0.2, trunc)
    dense = eigensolve_window(mat, 0.4, 0.6)
    monkeypatch.setattr(quantize, "DENSE_LIMIT", 4)
    lanczos = eigensolve_window(mat, 0.4, 0.6)
    assert np.allclose(dense.values, lanczos.values, atol=1e-10)


def test_shell_contamination_detected(H):
    trunc = build_truncation(H, 0.1, E_cut=1.0, rho=1.0)
    with pytest.raises(BoundaryContamination):
        eigensolve_window(build_operator(H, 0.1, 0.0, trunc), 0.0, 1.0)


def test_binary_round_trip_and_cache(H, tmp_path):
    trunc = build_truncation(H, 0.1, E_cut=1.0)
    a = cached_eigensolve(H, 0.1, 0.05, trunc, 0.2, 0.8, directory=tmp_path)
    assert len(list(tmp_path.glob("*.eig"))) == 1
    b = cached_eigensolve(H, 0.1, 0.05, trunc, 0.2, 0.8, directory=tmp_path)
    assert a.to_bytes() == b.to_bytes()
    c = EigenWindowResult.from_bytes(a.to_bytes())
    assert np.array_equal(c.values, a.values) and np.array_equal(c.val, a.val)
    with pytest.raises(ValueError):
        EigenWindowResult.from_bytes(b"junk")


def test_quasimode_exact_at_zero_coupling(H):
    trunc = build_truncation(H, 0.1, E_cut=1.0)
    mat = build_operator(H, 0.1, 0.0, trunc)
    v = build_quasimode(H, (3, 4), 0.0, 0.1, trunc)
    assert residual_norm(mat, v, 0.25) < 1e-15


def test_quasimode_first_order_coefficient(H):
    trunc = build_truncation(H, 0.1, E_cut=1.0)
    v = build_quasimode(H, (3, 4), 0.01, 0.1, trunc)
    c = v.coeffs / v.coeffs[trunc.index((3, 4))]
    # t c_(2,0)(midpoint) / (E_m - E_{m+k}) = 0.01 * (0.4 * 0.4 / 4) / (0.25 - 0.41)
    assert c[trunc.index((5, 4))] == pytest.approx(0.01 * 0.04 / -0.16)


def test_overlap_and_dimensions(H):
    trunc = build_truncation(H, 0.1, E_cut=1.0)
    v = build_quasimode(H, (3, 4), 0.01, 0.1, trunc)
    assert abs(overlap(v, v)) == pytest.approx(1.0)
    assert abs(overlap(v, 1j * v.coeffs)) == pytest.approx(1.0)
    with pytest.raises(DimensionMismatch):
        overlap(v.coeffs, v.coeffs[:-1])
    with pytest.raises(PreconditionError):
        build_quasimode(H, (100, 0), 0.01, 0.1, trunc)
