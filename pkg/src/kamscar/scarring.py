"""Window counts, the ratio R, overlap audits, torus mass and coverage."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from typing import List, Mapping, Optional, Tuple

import numpy as np
from scipy.spatial import cKDTree

from .diophantine import NonresonantActionSet
from .errors import ConfigError, CoverageError, EmptyNonresonantSet, PreconditionError
from .hamiltonian import FourierPolySymbol, eval_symbol
from .quantize import BasisTruncation, EigenWindowResult, build_operator

SCHEMA_VERSION = 1
PROJECTOR_CONSTANT = 10.0


@dataclass(frozen=True)
class ScarConfig:
    lam: float = 4.0
    L: float = 1.0
    band: Tuple[float, float] = (0.0, 2.1)
    gamma: float = 4.0
    delta_factor: float = 3.0  # delta = delta_factor * L * h unless delta is given
    delta: Optional[float] = None

    def __post_init__(self):
        if not self.lam > 1:
            raise ConfigError("lambda must exceed 1")
        if not self.band[0] < self.band[1]:
            raise ConfigError("band needs a < b")
        if self.delta is not None and not self.delta > 0:
            raise ConfigError("delta must be positive")
        if not self.L > 0:
            raise ConfigError("L must be positive")

    def delta_for(self, h: float) -> float:
        return self.delta if self.delta is not None else self.delta_factor * self.L * h

    def overlap_threshold(self, R: float) -> float:
        return 1.0 / (2 * self.lam * R)

    def mass_threshold(self, R: float) -> float:
        return 1.0 / (5 * self.lam**2 * R**2)


# ---------------------------------------------------------------------------
# counts and R


def window_counts(eigs: EigenWindowResult, mu: np.ndarray, h: float, cfg: ScarConfig,
                  centers: np.ndarray | None = None) -> np.ndarray:
    """N_m = #{E_j within h^gamma/3 of the centre of m}, for every m with mu_m in the band.

    ``centers`` defaults to ``mu``; entries whose mu lies outside the band get
    count -1.
    """
    mu = np.asarray(mu, float)
    c = mu if centers is None else np.asarray(centers, float)
    w = h**cfg.gamma
    a, b = cfg.band
    if len(mu) and (eigs.a > a - w or eigs.b < b + w):
        raise CoverageError(f"eigen window [{eigs.a}, {eigs.b}] does not cover band [{a}, {b}] with margin {w:.3g}")
    E = np.sort(eigs.values)
    lo = np.searchsorted(E, c - w / 3, side="left")
    hi = np.searchsorted(E, c + w / 3, side="right")
    counts = (hi - lo).astype(int)
    in_band = (mu >= a) & (mu <= b)
    return np.where(in_band, counts, -1)


@dataclass(frozen=True)
class RatioEstimate:
    R: float
    stderr: float
    band_volume: float
    band_volume_stderr: float
    nonresonant_measure: float


def band_volume(H: FourierPolySymbol, band: Tuple[float, float], t: float, n_mc: int = 1_000_000,
                seed: int = 0, I_box: Tuple[Tuple[float, float], Tuple[float, float]] | None = None,
                chunk: int = 250_000) -> Tuple[float, float]:
    """Liouville volume of {(theta, I): a <= H(theta, I; t) <= b} by Monte Carlo, with its standard error."""
    a, b = band
    if not a < b:
        return 0.0, 0.0
    if I_box is None:
        I_box = _sublevel_box(H, b, t)
    lo = np.array(I_box[0], float)
    hi = np.array(I_box[1], float)
    vol = (2 * np.pi) ** 2 * float(np.prod(hi - lo))
    rng = np.random.default_rng(seed)
    hits = done = 0
    while done < n_mc:
        n = min(chunk, n_mc - done)
        th = 2 * np.pi * rng.random((n, 2))
        I = lo + (hi - lo) * rng.random((n, 2))
        val = eval_symbol(H, (th[:, 0], th[:, 1]), (I[:, 0], I[:, 1]), t)
        hits += int(np.count_nonzero((val >= a) & (val <= b)))
        done += n
    f = hits / n_mc
    return vol * f, vol * math.sqrt(f * (1 - f) / n_mc)


def _sublevel_box(H, level, t, n=64):
    """Bounding box of {max_theta H <= level} found on an angle-action grid, padded by 25%."""
    r = 1.0
    th = np.linspace(0, 2 * np.pi, 9, endpoint=False)
    T1, T2 = np.meshgrid(th, th, indexing="ij")
    for _ in range(40):
        x = np.linspace(-r, r, n)
        X, Y = np.meshgrid(x, x, indexing="ij")
        low = np.full(X.shape, np.inf)
        for a1, a2 in zip(T1.ravel(), T2.ravel()):
            low = np.minimum(low, eval_symbol(H, (a1, a2), (X, Y), t))
        inside = low <= level
        rim = np.zeros_like(inside)
        rim[0, :] = rim[-1, :] = rim[:, 0] = rim[:, -1] = True
        if not np.any(inside & rim):
            if not inside.any():
                return ((-r, -r), (r, r))
            xs, ys = X[inside], Y[inside]
            step = 2 * r / (n - 1)
            pad = 0.25 * max(xs.max() - xs.min(), ys.max() - ys.min()) + 2 * step
            return ((xs.min() - pad, ys.min() - pad), (xs.max() + pad, ys.max() + pad))
        r *= 2
    raise PreconditionError("energy band is not bounded in the actions")


def r_ratio(H: FourierPolySymbol, band, E: NonresonantActionSet | float, t: float = 0.0,
            n_mc: int = 1_000_000, seed: int = 0, I_box=None) -> RatioEstimate:
    """R = vol(p^-1(band)) / vol(T^2 x E_kappa), both as Liouville volumes."""
    meas = E if isinstance(E, (int, float)) else E.phase_space_measure()
    if not meas > 0:
        raise EmptyNonresonantSet("the nonresonant action set has zero measure")
    num, err = band_volume(H, band, t, n_mc, seed, I_box)
    return RatioEstimate(num / meas, err / meas, num, err, float(meas))


@dataclass(frozen=True)
class Selection:
    members: np.ndarray  # indices into the candidate list
    proportion: float
    bound: float  # 1 - 2 / lambda


def btilde_select(counts: np.ndarray, R: float, cfg: ScarConfig, in_B: np.ndarray | None = None) -> Selection:
    """B-tilde = {m in B_h : 0 <= N_m < lambda R}."""
    counts = np.asarray(counts)
    in_B = np.ones(len(counts), bool) if in_B is None else np.asarray(in_B, bool)
    cand = in_B & (counts >= 0)
    sel = cand & (counts < cfg.lam * R)
    n = int(cand.sum())
    return Selection(np.flatnonzero(sel), float(sel.sum() / n) if n else math.nan, 1 - 2 / cfg.lam)


# ---------------------------------------------------------------------------
# overlaps and masses


@dataclass(frozen=True)
class OverlapAudit:
    max_overlap: float
    argmax: int  # index into eigs, -1 when the window is empty
    projector_sum: float
    n_window: int
    threshold: float
    projector_bound: float

    @property
    def passed(self) -> bool:
        return self.max_overlap >= self.threshold

    @property
    def projector_ok(self) -> bool:
        return self.projector_sum >= self.projector_bound


def max_overlap_audit(eigs: EigenWindowResult, v: np.ndarray, center: float, h: float, cfg: ScarConfig,
                      R: float) -> OverlapAudit:
    """Largest |<u_j, v>| over eigenvalues within h^gamma of ``center``."""
    w = h**cfg.gamma
    if center - w < eigs.a or center + w > eigs.b:
        raise CoverageError(f"eigen window does not cover [{center - w:.9g}, {center + w:.9g}]")
    j = eigs.in_window(center - w, center + w)
    if len(j):
        ov = np.abs(eigs.overlaps(v, j))
        k = int(np.argmax(ov))
        best, arg, proj = float(ov[k]), int(j[k]), float(np.sum(ov**2))
    else:
        best, arg, proj = 0.0, -1, 0.0
    return OverlapAudit(best, arg, proj, len(j), cfg.overlap_threshold(R), 1 - PROJECTOR_CONSTANT * h)


def torus_mass(u: np.ndarray, trunc: BasisTruncation, I_omega, delta: float) -> float:
    """Mass of u on modes whose action lies within ``delta`` of ``I_omega``."""
    u = np.asarray(u)
    d = np.linalg.norm(trunc.actions - np.asarray(I_omega, float), axis=1)
    return float(min(1.0, np.sum(np.abs(u[d < delta]) ** 2)))


def symbol_expectation(u: np.ndarray, a: FourierPolySymbol, trunc: BasisTruncation, t: float = 0.0) -> float:
    """<Op(a) u, u> with the Weyl rule of :func:`build_operator`."""
    a.assert_hermitian()
    mat = build_operator(a, trunc.h, t, trunc)
    return float(np.vdot(u, mat.matvec(u)).real)


@dataclass(frozen=True)
class ScarVerdict:
    passed: bool
    mass: float
    threshold: float
    margin: float


def scar_assert(u: np.ndarray, trunc: BasisTruncation, I_omega, h: float, cfg: ScarConfig, R: float) -> ScarVerdict:
    mass = torus_mass(u, trunc, I_omega, cfg.delta_for(h))
    thr = cfg.mass_threshold(R)
    return ScarVerdict(mass >= thr, mass, thr, mass / thr)


# ---------------------------------------------------------------------------
# coverage


@dataclass
class CoverageReport:
    h: List[float]
    fraction: List[float]
    bound: float
    sharper_bound: float
    persistent_fraction: float  # cells covered for each of the last three h

    @property
    def passed(self) -> bool:
        return bool(self.fraction) and self.fraction[-1] >= self.bound


def covered_cells(points: np.ndarray, E: NonresonantActionSet, radius: float) -> np.ndarray:
    """Boolean over the E_kappa cells (mask order): centre within ``radius`` of a point."""
    X, Y = E.centers()
    C = np.stack([X[E.mask], Y[E.mask]], axis=1)
    if not len(points) or not len(C):
        return np.zeros(len(C), bool)
    d, _ = cKDTree(np.asarray(points, float)).query(C, distance_upper_bound=radius)
    return d < radius


def coverage_report(selected: Mapping[float, np.ndarray], E: NonresonantActionSet, cfg: ScarConfig) -> CoverageReport:
    """Fraction of E_kappa within L h of the selected actions, per h (largest h first)."""
    hs = sorted(selected, reverse=True)
    cover = [covered_cells(selected[h], E, cfg.L * h) for h in hs]
    frac = [float(c.mean()) if len(c) else math.nan for c in cover]
    tail = cover[-3:]
    persistent = float(np.logical_and.reduce(tail).mean()) if tail and len(tail[0]) else math.nan
    return CoverageReport(hs, frac, 1 - cfg.L**2 / (math.pi * cfg.lam), 1 - cfg.L**2 / (2 * math.pi * cfg.lam),
                          persistent)


# ---------------------------------------------------------------------------
# report


@dataclass
class ScarRow:
    m: Tuple[int, int]
    I: Tuple[float, float]
    mu: float
    center: float
    N_m: int
    in_B: bool
    in_btilde: bool
    max_overlap: float = math.nan
    argmax: int = -1
    projector_sum: float = math.nan
    torus_mass: float = math.nan
    pass_overlap: Optional[bool] = None
    pass_projector: Optional[bool] = None
    pass_scar: Optional[bool] = None


@dataclass
class ScarReport:
    h: float
    t: float
    lam: float
    L: float
    delta: float
    band: Tuple[float, float]
    gamma: float
    R: float
    R_stderr: float
    overlap_threshold: float
    mass_threshold: float
    count_halfwidth: float
    overlap_halfwidth: float
    selection_proportion: float
    selection_bound: float
    rows: List[ScarRow] = field(default_factory=list)
    schema_version: int = SCHEMA_VERSION

    def audited(self) -> List[ScarRow]:
        return [r for r in self.rows if r.in_btilde]

    def to_json(self) -> str:
        doc = asdict(self)
        return json.dumps(_jsonable(doc), sort_keys=True, indent=1, allow_nan=True) + "\n"

    CSV_COLUMNS = ("m1", "m2", "I1", "I2", "mu", "N_m", "in_btilde", "max_overlap", "torus_mass",
                   "pass_overlap", "pass_scar")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.CSV_COLUMNS)
            for r in self.rows:
                w.writerow([r.m[0], r.m[1], repr(r.I[0]), repr(r.I[1]), repr(r.mu), r.N_m, int(r.in_btilde),
                            repr(r.max_overlap), repr(r.torus_mass), _flag(r.pass_overlap), _flag(r.pass_scar)])


def _flag(x):
    return "" if x is None else int(bool(x))


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating, float)):
        return None if not math.isfinite(float(x)) else float(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x
