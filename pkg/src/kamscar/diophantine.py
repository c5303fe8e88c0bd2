"""Diophantine frequencies, nonresonant action sets and the quasimode lattice."""
from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import ConfigError, DegenerateFrequencyMap, ResolutionError
from .hamiltonian import ActionRect, FourierPolyHamiltonian, frequency_map

TWO_PI_SQ = (2.0 * np.pi) ** 2

# Offset (in cell units) of the point where each grid cell is probed.  Cell
# centres of a regular grid are rational, and at t = 0 a rational action has a
# rational, hence exactly resonant, frequency; an irrational offset avoids
# that systematic bias without changing the cell layout.
PROBE_OFFSET = (math.sqrt(2.0) - 1.5, math.sqrt(5.0) - 2.5)


@dataclass(frozen=True)
class DiophantineParams:
    kappa: float
    tau: float = 2.0
    k_max: int = 200
    boundary_margin: float = 0.0

    def __post_init__(self):
        if not self.kappa > 0:
            raise ConfigError("kappa must be positive")
        if not self.tau > 1:
            raise ConfigError("tau must exceed n - 1 = 1")
        if int(self.k_max) != self.k_max or self.k_max < 8:
            raise ConfigError("k_max must be an integer >= 8")
        if self.boundary_margin < 0:
            raise ConfigError("boundary_margin must be >= 0")

    @property
    def tail_bound(self) -> float:
        """Threshold kappa / k_max^tau below which nothing was tested."""
        return self.kappa / self.k_max**self.tau


@dataclass(frozen=True)
class DiophantineCertificate:
    passed: bool
    witness: Optional[Tuple[int, int]]
    k_max: int
    tail_bound: float
    boundary_checked: bool = False

    def __bool__(self):
        return self.passed


def _canonical(k1: int, k2: int) -> Tuple[int, int]:
    if k1 < 0 or (k1 == 0 and k2 < 0):
        return -k1, -k2
    return k1, k2


def _scan(w1, w2, p: DiophantineParams, want_witness: bool = False):
    """Candidate search for violations of |<w,k>| >= kappa/|k|^tau, |k| <= k_max.

    For every value j of the k-component paired with the smaller frequency
    component, only integers of the other component lying within
    kappa/(|k|^tau |w_dom|) of -j*w_small/w_dom can violate, so the scan is
    O(k_max) per frequency instead of O(k_max^2).  Exact for |k| <= k_max.
    """
    w1 = np.atleast_1d(np.asarray(w1, float)).ravel()
    w2 = np.atleast_1d(np.asarray(w2, float)).ravel()
    n = w1.size
    ok = np.ones(n, bool)
    best_n2 = np.full(n, np.inf)
    best_k = np.zeros((n, 2), dtype=np.int64)

    dom1 = np.abs(w1) >= np.abs(w2)
    wd = np.where(dom1, w1, w2)
    ws = np.where(dom1, w2, w1)
    zero = wd == 0
    ok[zero] = False
    if want_witness and np.any(zero):
        best_n2[zero] = 1.0
        best_k[zero] = (0, 1)
    live = ~zero
    if not np.any(live):
        return ok, best_k, best_n2
    wd_l, ws_l, dom1_l = wd[live], ws[live], dom1[live]
    idx = np.nonzero(live)[0]
    abs_min = float(np.min(np.abs(wd_l)))
    kmax2 = p.k_max**2

    def record(viol, kd, j):
        if not np.any(viol):
            return
        ok[idx[viol]] = False
        if want_witness:
            n2 = kd[viol] ** 2 + j**2
            sel = idx[viol]
            k1 = np.where(dom1_l[viol], kd[viol], j)
            k2 = np.where(dom1_l[viol], j, kd[viol])
            better = n2 < best_n2[sel]
            tie = n2 == best_n2[sel]
            for s, a, b, nn, bt, ti in zip(sel, k1, k2, n2, better, tie):
                cand = _canonical(int(a), int(b))
                if bt or (ti and cand < tuple(best_k[s])):
                    best_n2[s] = nn
                    best_k[s] = cand

    # j = 0: k = (0, kd) with kd > 0 along the dominant axis
    kd_top = min(p.k_max, int((p.kappa / abs_min) ** (1.0 / (p.tau + 1.0))) + 1)
    for kd in range(1, kd_top + 1):
        kd_arr = np.full(wd_l.shape, kd, dtype=float)
        viol = np.abs(kd * wd_l) < p.kappa / float(kd) ** p.tau
        record(viol, kd_arr, 0)

    for j in range(1, p.k_max + 1):
        x = -j * ws_l / wd_l
        base = np.rint(x)
        r_max = p.kappa / j**p.tau / abs_min
        c = min(int(math.floor(r_max + 0.5)), p.k_max)
        for off in range(-c, c + 1):
            kd = base + off
            n2 = kd * kd + j * j
            viol = (n2 <= kmax2) & (np.abs(j * ws_l + kd * wd_l) < p.kappa / n2 ** (p.tau / 2.0))
            record(viol, kd, j)
    return ok, best_k, best_n2


def _polyline_distance(points: np.ndarray, polyline: np.ndarray) -> np.ndarray:
    tree = cKDTree(polyline)
    d, _ = tree.query(points)
    return d


def diophantine_check(omega: Sequence[float], p: DiophantineParams, frequency_boundary: np.ndarray | None = None):
    """Certify |<omega,k>| >= kappa/|k|^tau for all 0 < |k| <= k_max.

    Returns a certificate whose ``witness`` is the shortest violating k
    (canonical sign k1 >= 0), or None on a pass.  When ``frequency_boundary``
    (a densely sampled polyline of the boundary of the frequency domain) is
    given and ``p.boundary_margin > 0``, the boundary clause is checked too.
    """
    w = np.asarray(omega, float)
    if not np.all(np.isfinite(w)):
        raise ValueError("omega must be finite")
    ok, best_k, _ = _scan(w[0], w[1], p, want_witness=True)
    checked = False
    if ok[0] and p.boundary_margin > 0 and frequency_boundary is not None:
        checked = True
        if _polyline_distance(w[None, :], np.asarray(frequency_boundary))[0] < p.boundary_margin:
            return DiophantineCertificate(False, None, p.k_max, p.tail_bound, True)
    witness = None if ok[0] else (int(best_k[0, 0]), int(best_k[0, 1]))
    return DiophantineCertificate(bool(ok[0]), witness, p.k_max, p.tail_bound, checked)


def diophantine_mask(w1, w2, p: DiophantineParams) -> np.ndarray:
    """Vectorized pass/fail of the (truncated) Diophantine condition."""
    shape = np.shape(w1)
    ok, _, _ = _scan(w1, w2, p)
    return ok.reshape(shape)


# ---------------------------------------------------------------------------
# action lattice


@dataclass
class ActionLattice:
    h: float
    theta_over_4: Tuple[float, float]
    domain: ActionRect
    points: np.ndarray  # (N, 2) integer indices m
    actions: np.ndarray = field(init=False)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.int64).reshape(-1, 2)
        self.actions = self.h * (self.points + np.asarray(self.theta_over_4, float))
        self._index = {(int(a), int(b)): i for i, (a, b) in enumerate(self.points)}

    def __len__(self):
        return len(self.points)

    def index(self, m) -> int:
        return self._index[(int(m[0]), int(m[1]))]

    def __contains__(self, m) -> bool:
        return (int(m[0]), int(m[1])) in self._index

    def action(self, m) -> np.ndarray:
        return self.h * (np.asarray(m, float) + np.asarray(self.theta_over_4, float))


def build_lattice(domain: ActionRect, h: float, theta_over_4=(0.0, 0.0)) -> ActionLattice:
    """All m in Z^2 with h(m + theta/4) in the domain."""
    if not h > 0:
        raise ConfigError("h must be positive")
    off = np.broadcast_to(np.asarray(theta_over_4, float), (2,))
    lo = np.floor(np.asarray(domain.lo) / h - off).astype(int) - 1
    hi = np.ceil(np.asarray(domain.hi) / h - off).astype(int) + 1
    a, b = np.meshgrid(np.arange(lo[0], hi[0] + 1), np.arange(lo[1], hi[1] + 1), indexing="ij")
    m = np.stack([a.ravel(), b.ravel()], axis=1)
    I = h * (m + off)
    keep = domain.contains(I[:, 0], I[:, 1])
    return ActionLattice(h, (float(off[0]), float(off[1])), domain, m[keep])


# ---------------------------------------------------------------------------
# nonresonant set


@dataclass
class NonresonantActionSet:
    """Grid sample of the nonresonant actions at parameter t."""

    t: float
    origin: Tuple[float, float]  # centre of cell (0, 0)
    spacing: float
    mask: np.ndarray
    in_domain: np.ndarray
    distance_field: np.ndarray
    k_max: int = 0

    @property
    def shape(self):
        return self.mask.shape

    def centers(self):
        nx, ny = self.mask.shape
        x = self.origin[0] + self.spacing * np.arange(nx)
        y = self.origin[1] + self.spacing * np.arange(ny)
        return np.meshgrid(x, y, indexing="ij")

    @property
    def cell_area(self) -> float:
        return self.spacing**2

    def measure(self) -> float:
        """Action-space area of the nonresonant set."""
        return measure_estimate(self.mask, self.cell_area)

    def phase_space_measure(self) -> float:
        """Liouville measure of T^2 x E, i.e. (2 pi)^2 times the action area."""
        return TWO_PI_SQ * self.measure()

    def distance_at(self, I1, I2):
        """Bilinear interpolation of the distance field at arbitrary actions."""
        I1 = np.asarray(I1, float)
        I2 = np.asarray(I2, float)
        if not self.mask.any():
            return np.full(np.broadcast(I1, I2).shape, np.inf)
        coords = np.array([(I1 - self.origin[0]) / self.spacing, (I2 - self.origin[1]) / self.spacing])
        return ndimage.map_coordinates(self.distance_field, coords.reshape(2, -1), order=1, mode="nearest").reshape(
            np.shape(I1)
        )

    def masked_points(self) -> np.ndarray:
        X, Y = self.centers()
        return np.stack([X[self.mask], Y[self.mask]], axis=1)

    def to_csv(self, path) -> None:
        X, Y = self.centers()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["I1", "I2", "mask", "dist"])
            for x, y, mk, d in zip(X.ravel(), Y.ravel(), self.mask.ravel(), self.distance_field.ravel()):
                w.writerow([repr(float(x)), repr(float(y)), int(mk), repr(float(d))])

    def to_binary(self, path) -> None:
        """16-byte header (nx, ny: uint16; spacing, origin x, origin y: float32), mask u1, dist f8."""
        nx, ny = self.mask.shape
        with open(path, "wb") as fh:
            fh.write(struct.pack("<HHfff", nx, ny, self.spacing, self.origin[0], self.origin[1]))
            fh.write(self.mask.astype("<u1").tobytes())
            fh.write(self.distance_field.astype("<f8").tobytes())

    @classmethod
    def from_binary(cls, path, t: float = float("nan")) -> "NonresonantActionSet":
        raw = Path(path).read_bytes()
        nx, ny, sp, ox, oy = struct.unpack("<HHfff", raw[:16])
        n = nx * ny
        mask = np.frombuffer(raw[16 : 16 + n], dtype="<u1").astype(bool).reshape(nx, ny)
        dist = np.frombuffer(raw[16 + n : 16 + n + 8 * n], dtype="<f8").reshape(nx, ny).copy()
        return cls(t, (float(ox), float(oy)), float(sp), mask, np.ones_like(mask), dist)


def _frequency_boundary(H, t, domain: ActionRect, per_edge: int = 400) -> np.ndarray:
    v = domain.polygon()
    pts = []
    for a, b in zip(v, np.roll(v, -1, axis=0)):
        s = np.linspace(0.0, 1.0, per_edge, endpoint=False)
        pts.append(a[None, :] + s[:, None] * (b - a)[None, :])
    P = np.concatenate(pts)
    w1, w2 = frequency_map(H, (P[:, 0], P[:, 1]), t)
    return np.stack([w1, w2], axis=1)


def nonresonant_action_set(
    H: FourierPolyHamiltonian,
    t: float,
    p: DiophantineParams,
    spacing: float | None = None,
    domain: ActionRect | None = None,
) -> NonresonantActionSet:
    """Grid sample of E_kappa(t): actions whose t-deformed frequency is Diophantine."""
    domain = domain or H.domain
    if spacing is None:
        spacing = domain.side / 512.0
    nx = max(1, int(math.ceil((domain.hi[0] - domain.lo[0]) / spacing)))
    ny = max(1, int(math.ceil((domain.hi[1] - domain.lo[1]) / spacing)))
    origin = (domain.lo[0] + 0.5 * spacing, domain.lo[1] + 0.5 * spacing)
    x = origin[0] + spacing * np.arange(nx)
    y = origin[1] + spacing * np.arange(ny)
    X, Y = np.meshgrid(x, y, indexing="ij")
    inside = domain.contains(X, Y)

    Xi, Yi = X[inside], Y[inside]
    h11, h12, h22 = H.hessian(H.h0_table, Xi, Yi)
    q11, q12, q22 = H.hessian(H.qbar_table, Xi, Yi)
    a, b, c = h11 + t * q11, h12 + t * q12, h22 + t * q22
    det = a * c - b * b
    scale = np.maximum(1.0, np.abs(a) + np.abs(b) + np.abs(c)) ** 2
    if Xi.size and np.any(np.abs(det) <= 1e-12 * scale):
        k = int(np.argmin(np.abs(det)))
        raise DegenerateFrequencyMap(f"Hessian of the frequency map vanishes at I = ({Xi[k]:.6g}, {Yi[k]:.6g})")

    mask = np.zeros(X.shape, bool)
    if Xi.size:
        Pi = Xi + PROBE_OFFSET[0] * spacing
        Pj = Yi + PROBE_OFFSET[1] * spacing
        w1, w2 = frequency_map(H, (Pi, Pj), t)
        ok = diophantine_mask(w1, w2, p)
        if p.boundary_margin > 0:
            d = _polyline_distance(np.stack([w1, w2], axis=1), _frequency_boundary(H, t, domain))
            ok &= d >= p.boundary_margin
        mask[inside] = ok
    if mask.any():
        dist = ndimage.distance_transform_edt(~mask, sampling=spacing)
    else:
        dist = np.full(X.shape, np.inf)
    return NonresonantActionSet(float(t), origin, float(spacing), mask, inside, dist, p.k_max)


def index_set_members(lattice: ActionLattice, E: NonresonantActionSet, L: float = 1.0) -> np.ndarray:
    """Boolean per lattice point: dist(I_m, E) < L h."""
    if E.spacing > L * lattice.h / 4.0 * (1 + 1e-12):
        raise ResolutionError(f"grid spacing {E.spacing:.3g} exceeds L h / 4 = {L * lattice.h / 4:.3g}")
    if len(lattice) == 0:
        return np.zeros(0, bool)
    d = E.distance_at(lattice.actions[:, 0], lattice.actions[:, 1])
    return d < L * lattice.h


def index_set_Mh(lattice: ActionLattice, E: NonresonantActionSet, L: float = 1.0) -> np.ndarray:
    """Indices m (rows of an (n, 2) array) with dist(h(m + theta/4), E) < L h."""
    return lattice.points[index_set_members(lattice, E, L)]


def measure_estimate(mask, cell_area: float | None = None) -> float:
    """Cell count times cell area; the default cell area tiles the unit square."""
    mask = np.asarray(mask, bool)
    if cell_area is None:
        cell_area = 1.0 / mask.size if mask.size else 0.0
    return float(mask.sum()) * float(cell_area)


def monte_carlo_measure(indicator, lo, hi, n: int, seed: int = 0, chunk: int = 200_000):
    """Monte Carlo area of {indicator(x, y)} inside the box [lo, hi]; returns (value, stderr)."""
    rng = np.random.default_rng(seed)
    lo = np.asarray(lo, float)
    hi = np.asarray(hi, float)
    vol = float(np.prod(hi - lo))
    hits = 0
    done = 0
    while done < n:
        m = min(chunk, n - done)
        pts = lo + (hi - lo) * rng.random((m, 2))
        hits += int(np.count_nonzero(indicator(pts[:, 0], pts[:, 1])))
        done += m
    f = hits / n
    return vol * f, vol * math.sqrt(max(f * (1 - f), 0.0) / n)


@dataclass
class WeylRow:
    h: float
    count: int
    measure: float  # phase-space measure (2 pi)^2 * area(E)
    ratio: float


@dataclass
class WeylDensityReport:
    rows: List[WeylRow]
    monotone: bool
    errors: List[float]


def weyl_density_report(
    H: FourierPolyHamiltonian,
    t: float,
    p: DiophantineParams,
    h_list: Sequence[float],
    L: float = 1.0,
    theta_over_4=(0.0, 0.0),
    grid_factor: float = 1.0 / 8.0,
    E: NonresonantActionSet | None = None,
) -> WeylDensityReport:
    """#M_h (2 pi h)^2 / meas(E_kappa) for each h, with convergence diagnostics."""
    h_list = sorted((float(h) for h in h_list), reverse=True)
    if len(h_list) < 3:
        raise ValueError("weyl_density_report needs at least 3 values of h")
    if E is None:
        E = nonresonant_action_set(H, t, p, spacing=grid_factor * min(h_list))
    meas = E.phase_space_measure()
    rows = []
    for h in h_list:
        lat = build_lattice(H.domain, h, theta_over_4)
        count = int(index_set_members(lat, E, L).sum())
        ratio = count * (2 * np.pi * h) ** 2 / meas if meas > 0 else 0.0
        rows.append(WeylRow(h, count, meas, ratio))
    errors = [abs(r.ratio - 1.0) for r in rows]
    monotone = all(b <= a for a, b in zip(errors, errors[1:]))
    return WeylDensityReport(rows, monotone, errors)
