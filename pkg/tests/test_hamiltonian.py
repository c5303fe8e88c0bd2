import numpy as np
import pytest

from kamscar.errors import ConfigError, SymmetryViolation
from kamscar.hamiltonian import (
    ActionRect,
    FourierPolyHamiltonian,
    angle_average_dtH,
    builtin_flat_torus,
    dumps,
    eval_symbol,
    flat_torus_domain,
    frequency_map,
    hamiltonian_from_dict,
    hessian_det,
    load,
    save,
    shift_angles,
    transversality_det,
)


def test_domain_membership_and_area():
    D = flat_torus_domain()
    assert D.contains(0.5, 0.1)
    assert not D.contains(0.5, 0.5)  # diagonal excluded
    assert not D.contains(0.3, 0.4)
    assert D.area == pytest.approx(0.405, abs=1e-12)


def test_symbol_matches_closed_form(H):
    rng = np.random.default_rng(1)
    th = rng.uniform(0, 2 * np.pi, (2, 50))
    I = rng.uniform(0.1, 1, (2, 50))
    t = 0.07
    ref = I[0] ** 2 + I[1] ** 2 + t * np.cos(th[0]) ** 2 * I[0] * I[1]
    assert np.allclose(eval_symbol(H, th, I, t), ref, atol=1e-14)


def test_angle_average_by_quadrature(H):
    th = 2 * np.pi * np.arange(64) / 64
    T1, T2 = np.meshgrid(th, th, indexing="ij")
    I = (0.7, 0.2)
    eps = 1e-6
    num = (eval_symbol(H, (T1, T2), (np.full_like(T1, I[0]), np.full_like(T1, I[1])), eps)
           - eval_symbol(H, (T1, T2), (np.full_like(T1, I[0]), np.full_like(T1, I[1])), 0.0)) / eps
    assert angle_average_dtH(H, I) == pytest.approx(num.mean(), rel=1e-6)
    assert angle_average_dtH(H, I) == pytest.approx(0.07, abs=1e-15)


def test_transversality_closed_form(H):
    I1, I2 = np.meshgrid(np.linspace(0.1, 1, 7), np.linspace(0.1, 1, 7))
    assert np.allclose(transversality_det(H, (I1, I2)), I1**2 - I2**2, atol=1e-14)
    assert hessian_det(H, (0.4, 0.2)) == pytest.approx(4.0)


def test_frequency_map(H):
    w = frequency_map(H, (0.6, 0.3), 0.1)
    assert np.allclose(w, [1.2 + 0.1 * 0.15, 0.6 + 0.1 * 0.3])


def test_asymmetric_symbol_rejected():
    c = np.zeros((1, 1, 1), complex)
    c[0, 0, 0] = 1.0
    with pytest.raises(SymmetryViolation):
        FourierPolyHamiltonian({(0, 0): c, (1, 0): c.copy()}, flat_torus_domain())


def test_missing_integrable_part_rejected():
    c = np.ones((1, 1, 1), complex)
    with pytest.raises(ConfigError):
        FourierPolyHamiltonian({(1, 0): c, (-1, 0): c.copy()}, flat_torus_domain())


def test_round_trip(tmp_path, H):
    path = tmp_path / "h.json"
    save(H, path)
    assert dumps(load(path)) == dumps(H)
    doc = H.to_dict()
    doc["terms"][0]["coeffs"][0][4] = 0.5  # imaginary part breaks the symmetry
    with pytest.raises(ConfigError):
        hamiltonian_from_dict(doc)


def test_shift_angles_is_translation(H):
    alpha = (0.7, -0.3)
    G = shift_angles(H, alpha)
    th = (0.4, 1.1)
    I = (0.8, 0.3)
    assert eval_symbol(G, th, I, 0.2) == pytest.approx(eval_symbol(H, (th[0] + alpha[0], th[1] + alpha[1]), I, 0.2))


def test_empty_rectangle_rejected():
    with pytest.raises(ConfigError):
        ActionRect((0.5, 0.1), (0.5, 1.0))


def test_unperturbed_model_has_no_coupling():
    H0 = builtin_flat_torus(0.0)
    assert angle_average_dtH(H0, (0.5, 0.2)) == 0.0
