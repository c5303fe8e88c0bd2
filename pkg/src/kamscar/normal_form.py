"""First-order integrable normal form, quasieigenvalues and the eta map.

At the implemented order the integrable part of the normal form is

    K0(I, t) = H0(I) + t * Qbar(I),

where Qbar is the angle average of dH/dt at t = 0.  Quasieigenvalues are
K0 evaluated on the action lattice, so they are affine in t.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np
from scipy.spatial import cKDTree

from .diophantine import ActionLattice
from .errors import OutOfDomain, PreconditionError, SingularEta, SmallDivisor
from .hamiltonian import ActionRect, FourierPolyHamiltonian, frequency_map


@dataclass(frozen=True)
class NormalFormExpansion:
    """K0 = H0 + t Qbar; K_1 = 0 and no higher h-corrections by default."""

    H: FourierPolyHamiltonian
    order_t: int = 1
    order_h: int = 0

    def __call__(self, I, t):
        return k0_eval(self.H, I, t)

    def dt(self, I, t=0.0):
        return self.H.Qbar(I[0], I[1])


def k0_eval(H: FourierPolyHamiltonian, I, t, h: float | None = None):
    """H0(I) + t Qbar(I).  ``h`` is accepted for interface symmetry; K_1 = 0."""
    out = H.H0(I[0], I[1]) + t * H.Qbar(I[0], I[1])
    return float(out) if np.ndim(out) == 0 else out


def eta_map(H: FourierPolyHamiltonian, I, t, h: float | None = None):
    """I -> (K0(I, t), dK0/dt(I, t))."""
    return k0_eval(H, I, t), _scalar(H.Qbar(I[0], I[1]))


def _scalar(x):
    return float(x) if np.ndim(x) == 0 else x


@dataclass(frozen=True)
class QuasiEigenvalue:
    m: Tuple[int, int]
    I_m: Tuple[float, float]
    mu: float
    dmu_dt: float
    t: float
    h: float


def quasieigenvalue(H: FourierPolyHamiltonian, m, t: float, lattice: ActionLattice) -> QuasiEigenvalue:
    I = lattice.action(m)
    if not lattice.domain.contains(I[0], I[1]):
        raise OutOfDomain(f"I_m = {tuple(I)} lies outside the action domain")
    return QuasiEigenvalue(
        (int(m[0]), int(m[1])),
        (float(I[0]), float(I[1])),
        k0_eval(H, I, t),
        float(H.Qbar(I[0], I[1])),
        float(t),
        lattice.h,
    )


@dataclass
class QuasiSpectrum:
    """Quasieigenvalue table for a whole lattice at one t."""

    m: np.ndarray
    I: np.ndarray
    mu: np.ndarray
    dmu_dt: np.ndarray
    t: float
    h: float

    def __len__(self):
        return len(self.mu)

    def subset(self, keep) -> "QuasiSpectrum":
        return QuasiSpectrum(self.m[keep], self.I[keep], self.mu[keep], self.dmu_dt[keep], self.t, self.h)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["m1", "m2", "I1", "I2", "t", "h", "mu", "dmu_dt"])
            for (a, b), (x, y), mu, d in zip(self.m, self.I, self.mu, self.dmu_dt):
                w.writerow([int(a), int(b), repr(float(x)), repr(float(y)), repr(self.t), repr(self.h),
                            repr(float(mu)), repr(float(d))])


def quasi_spectrum(H: FourierPolyHamiltonian, lattice: ActionLattice, t: float) -> QuasiSpectrum:
    I = lattice.actions
    q = H.Qbar(I[:, 0], I[:, 1]) if len(I) else np.zeros(0)
    mu = H.H0(I[:, 0], I[:, 1]) + t * q if len(I) else np.zeros(0)
    return QuasiSpectrum(lattice.points.copy(), I.copy(), np.asarray(mu, float), np.asarray(q, float), float(t), lattice.h)


# ---------------------------------------------------------------------------
# bilipschitz constants


@dataclass(frozen=True)
class BilipschitzCertificate:
    G1: float
    G2: float
    pair_G1: Tuple[Tuple[float, float], Tuple[float, float]]
    pair_G2: Tuple[Tuple[float, float], Tuple[float, float]]
    n_pairs: int


def _eta_jacobian(H, I1, I2, t):
    a1, a2 = H.grad(H.h0_table, I1, I2)
    b1, b2 = H.grad(H.qbar_table, I1, I2)
    J = np.empty(np.shape(I1) + (2, 2))
    J[..., 0, 0] = a1 + t * b1
    J[..., 0, 1] = a2 + t * b2
    J[..., 1, 0] = b1
    J[..., 1, 1] = b2
    return J


def _pt(x) -> Tuple[float, float]:
    return (float(x[0]), float(x[1]))


def _sample_points(D: ActionRect, n: int, rng) -> np.ndarray:
    pts = [D.polygon()]
    step = 0.05
    gx = np.arange(D.lo[0], D.hi[0] + 1e-12, step)
    gy = np.arange(D.lo[1], D.hi[1] + 1e-12, step)
    GX, GY = np.meshgrid(gx, gy, indexing="ij")
    pts.append(np.stack([GX.ravel(), GY.ravel()], axis=1))
    lo, hi = np.asarray(D.lo), np.asarray(D.hi)
    got = 0
    rand = []
    while got < n:
        c = lo + (hi - lo) * rng.random((2 * n, 2))
        c = c[D.contains(c[:, 0], c[:, 1])]
        rand.append(c)
        got += len(c)
    pts.append(np.concatenate(rand)[:n])
    P = np.concatenate(pts)
    # polygon vertices on open edges are not contained; nudge them inward by a hair
    cen = P.mean(axis=0)
    out = ~D.contains(P[:, 0], P[:, 1])
    P[out] = P[out] + 1e-9 * (cen - P[out])
    return P[D.contains(P[:, 0], P[:, 1])]


def bilipschitz_constants(
    H: FourierPolyHamiltonian,
    D_sub: ActionRect,
    t: float,
    h: float | None = None,
    n_samples: int = 2000,
    seed: int = 0,
) -> BilipschitzCertificate:
    """Empirical G1 <= |dI|/|d eta| <= G2 over sampled pairs of D_sub.

    Pairs are drawn at random; the infinitesimal limit (close pairs) is
    covered by the extreme singular values of the eta Jacobian at the sample
    points, domain vertices included.  Exact collisions eta(I) = eta(I')
    with I != I' raise SingularEta.
    """
    if n_samples < 1000:
        raise PreconditionError("n_samples must be >= 1000 pairs")
    rng = np.random.default_rng(seed)
    P = _sample_points(D_sub, n_samples, rng)
    K, Q = eta_map(H, (P[:, 0], P[:, 1]), t)
    E = np.stack([K, Q], axis=1)

    tree = cKDTree(E)
    for i, j in sorted(tree.query_pairs(1e-12)):
        if np.linalg.norm(P[i] - P[j]) > 1e-8:
            pair = (_pt(P[i]), _pt(P[j]))
            raise SingularEta(f"eta is not injective: eta{pair[0]} = eta{pair[1]}", pair)

    i = rng.integers(0, len(P), n_samples)
    j = rng.integers(0, len(P), n_samples)
    keep = i != j
    i, j = i[keep], j[keep]
    dI = np.linalg.norm(P[i] - P[j], axis=1)
    dE = np.linalg.norm(E[i] - E[j], axis=1)
    if np.any(dE <= 1e-14 * dI):
        k = int(np.argmin(dE / dI))
        pair = (_pt(P[i[k]]), _pt(P[j[k]]))
        raise SingularEta("eta collapses a sampled pair", pair)
    ratio = dI / dE

    J = _eta_jacobian(H, P[:, 0], P[:, 1], t)
    s = np.linalg.svd(J, compute_uv=False)
    if np.any(s[:, 1] <= 1e-14 * s[:, 0]):
        k = int(np.argmin(s[:, 1]))
        raise SingularEta(f"eta Jacobian is singular at I = {_pt(P[k])}", (_pt(P[k]), _pt(P[k])))
    loc_min = 1.0 / s[:, 0]
    loc_max = 1.0 / s[:, 1]

    kmin, kmax = int(np.argmin(ratio)), int(np.argmax(ratio))
    lmin, lmax = int(np.argmin(loc_min)), int(np.argmax(loc_max))
    if ratio[kmin] <= loc_min[lmin]:
        G1, pair1 = ratio[kmin], (_pt(P[i[kmin]]), _pt(P[j[kmin]]))
    else:
        G1, pair1 = loc_min[lmin], (_pt(P[lmin]), _pt(P[lmin]))
    if ratio[kmax] >= loc_max[lmax]:
        G2, pair2 = ratio[kmax], (_pt(P[i[kmax]]), _pt(P[j[kmax]]))
    else:
        G2, pair2 = loc_max[lmax], (_pt(P[lmax]), _pt(P[lmax]))
    return BilipschitzCertificate(float(G1), float(G2), pair1, pair2, int(len(ratio)))


# ---------------------------------------------------------------------------
# homological equation


@dataclass
class HomologicalSolution:
    I: Tuple[float, float]
    omega: Tuple[float, float]
    coeffs: Dict[Tuple[int, int], complex] = field(default_factory=dict)
    min_divisor: float = np.inf
    residual: Optional[float] = None

    def S(self, th1, th2):
        out = np.zeros(np.broadcast(np.asarray(th1), np.asarray(th2)).shape, complex)
        for k, s in self.coeffs.items():
            out = out + s * np.exp(1j * (k[0] * th1 + k[1] * th2))
        return out.real

    def omega_dS(self, th1, th2):
        """omega . grad_theta S."""
        out = np.zeros(np.broadcast(np.asarray(th1), np.asarray(th2)).shape, complex)
        w = self.omega
        for k, s in self.coeffs.items():
            out = out + 1j * (w[0] * k[0] + w[1] * k[1]) * s * np.exp(1j * (k[0] * th1 + k[1] * th2))
        return out.real


def homological_residual(H: FourierPolyHamiltonian, sol: HomologicalSolution, n_grid: int = 128) -> float:
    """sup over an angle grid of |omega . dS - (Q - Qbar)|, Q = dH/dt at t = 0."""
    th = 2 * np.pi * np.arange(n_grid) / n_grid
    T1, T2 = np.meshgrid(th, th, indexing="ij")
    I1, I2 = sol.I
    Q = np.zeros(T1.shape, complex)
    for k in H.support:
        Q = Q + H.dt_term(k, I1, I2) * np.exp(1j * (k[0] * T1 + k[1] * T2))
    qbar = H.Qbar(I1, I2)
    return float(np.max(np.abs(sol.omega_dS(T1, T2) - (Q.real - qbar))))


def homological_solve(
    H: FourierPolyHamiltonian,
    I,
    k_trunc: float = np.inf,
    divisor_tol: float = 1e-6,
    verify: bool = True,
    verify_tol: float = 1e-8,
) -> HomologicalSolution:
    """s_k = Qhat_k / (i <omega(I), k>) for 0 < |k| <= k_trunc.

    With this sign the generating function satisfies
    omega . grad_theta S = Q - Qbar.
    """
    I = (float(I[0]), float(I[1]))
    w = frequency_map(H, I, 0.0)
    sol = HomologicalSolution(I, (float(w[0]), float(w[1])))
    for k in H.support:
        if k == (0, 0) or np.hypot(*k) > k_trunc:
            continue
        q = complex(H.dt_term(k, I[0], I[1]))
        if q == 0:
            continue
        div = w[0] * k[0] + w[1] * k[1]
        if abs(div) < divisor_tol:
            raise SmallDivisor(k, abs(div))
        sol.min_divisor = min(sol.min_divisor, abs(div))
        sol.coeffs[k] = q / (1j * div)
    if verify:
        sol.residual = homological_residual(H, sol)
        if sol.residual > verify_tol:
            raise PreconditionError(f"homological residual {sol.residual:.3g} above {verify_tol:g}")
    return sol
