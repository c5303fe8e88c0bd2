"""Full-pipeline operation examples whose stated targets are not met at desk scale.

They are kept at the stated tolerances and marked xfail with the measured
numbers, so a future change that meets them shows up as XPASS.
"""
import numpy as np
import pytest

from kamscar.diophantine import DiophantineParams, weyl_density_report
from kamscar.flow import FlowConfig, FlowWorkspace, epsilon_scaling_fit, n1_n2_report


@pytest.fixture(scope="module")
def weyl(H):
    return weyl_density_report(H, 0.01, DiophantineParams(0.2), [1 / 16, 1 / 32, 1 / 64])


def test_weyl_density_converges_monotonically(weyl):
    ratios = [r.ratio for r in weyl.rows]
    assert weyl.monotone
    assert all(r > 1 for r in ratios)  # the L h neighbourhood overcounts E_kappa


@pytest.mark.xfail(reason="measured ratios 1.28, 1.24, 1.21: the L h neighbourhood of E_kappa "
                          "shrinks onto it only slowly in h", strict=True)
def test_weyl_density_tolerances(weyl):
    for row, tol in zip(weyl.rows, (0.20, 0.12, 0.08)):
        assert abs(row.ratio - 1) <= tol


@pytest.mark.slow
@pytest.mark.xfail(reason="on the rational t grid exact level coincidences dominate 1 - N2/N1, "
                          "which then grows like h^-1 instead of decaying like h^{1/4}", strict=True)
def test_epsilon_fit_pipeline(H):
    hs = (1 / 16, 1 / 32, 1 / 64, 1 / 128)
    ws = FlowWorkspace(H, FlowConfig(h_list=hs))
    bad = [n1_n2_report(ws, h).bad_level_fraction for h in hs]
    fit = epsilon_scaling_fit(hs, bad)
    assert -0.25 <= fit.slope <= 0.75, f"slope {fit.slope:.3f}, bad-level fractions {np.round(bad, 5)}"
