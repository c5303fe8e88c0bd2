"""Spectral-flow statistics of the quasieigenvalues under the parameter t.

Quasieigenvalues are affine in t, ``mu_m(t) = a_m + b_m t``, so every set of
parameters where two of them come within ``h**gamma`` is a single open
interval found by a linear solve.  Only membership of ``m`` in the index set
M_h(t) needs the t grid.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, replace
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree

from .diophantine import (
    ActionLattice,
    DiophantineParams,
    build_lattice,
    index_set_members,
    nonresonant_action_set,
)
from .errors import ConfigError, DegeneratePair, InsufficientData, PreconditionError
from .hamiltonian import FourierPolyHamiltonian, grid_points, hessian_opnorm
from .normal_form import quasi_spectrum


# ---------------------------------------------------------------------------
# interval sets


@dataclass(frozen=True)
class TSubset:
    """Finite union of open intervals inside (lo, hi), kept sorted and disjoint."""

    intervals: Tuple[Tuple[float, float], ...] = ()
    lo: float = 0.0
    hi: float = math.inf

    def __post_init__(self):
        object.__setattr__(self, "intervals", _normalize(self.intervals, self.lo, self.hi))

    @classmethod
    def empty(cls, lo=0.0, hi=math.inf) -> "TSubset":
        return cls((), lo, hi)

    @classmethod
    def full(cls, lo, hi) -> "TSubset":
        return cls(((lo, hi),), lo, hi)

    def measure(self) -> float:
        return float(sum(b - a for a, b in self.intervals))

    def __bool__(self):
        return bool(self.intervals)

    def __contains__(self, t) -> bool:
        return any(a < t < b for a, b in self.intervals)

    def _like(self, ivs) -> "TSubset":
        return TSubset(tuple(ivs), self.lo, self.hi)

    def union(self, other: "TSubset") -> "TSubset":
        return self._like(self.intervals + other.intervals)

    def intersection(self, other: "TSubset") -> "TSubset":
        out = []
        i = j = 0
        A, B = self.intervals, other.intervals
        while i < len(A) and j < len(B):
            a = max(A[i][0], B[j][0])
            b = min(A[i][1], B[j][1])
            if a < b:
                out.append((a, b))
            if A[i][1] < B[j][1]:
                i += 1
            else:
                j += 1
        return self._like(out)

    def complement(self) -> "TSubset":
        out, cur = [], self.lo
        for a, b in self.intervals:
            if a > cur:
                out.append((cur, a))
            cur = max(cur, b)
        if self.hi > cur:
            out.append((cur, self.hi))
        return self._like(out)

    def difference(self, other: "TSubset") -> "TSubset":
        return self.intersection(other.complement())

    def to_json(self) -> list:
        return [[a, b] for a, b in self.intervals]


def _normalize(ivs, lo, hi):
    clipped = sorted((max(float(a), lo), min(float(b), hi)) for a, b in ivs)
    out: List[Tuple[float, float]] = []
    for a, b in clipped:
        if not a < b:
            continue
        if out and a <= out[-1][1]:
            out[-1] = (out[-1][0], max(out[-1][1], b))
        else:
            out.append((a, b))
    return tuple(out)


# ---------------------------------------------------------------------------
# configuration


def derived_constants(H: FourierPolyHamiltonian, kappa: float, n_grid: int = 64) -> Tuple[float, float, float]:
    """(C1, C2, S) with S the sup of the Hessian norm of H0 over the domain."""
    X, Y = grid_points(H.domain, n_grid)
    S = float(np.max(hessian_opnorm(H, (X, Y)))) if X.size else 0.0
    if not S > 0:
        raise PreconditionError("Hessian of H0 vanishes on the domain")
    return (kappa / (2 * S)) ** 0.25, math.sqrt(kappa * S / 2), S


@dataclass
class FlowConfig:
    gamma: float = 4.0
    t0: float = 0.2
    n_t: int = 50
    h_list: Tuple[float, ...] = (1 / 16, 1 / 32, 1 / 64)
    kappa: float = 0.2
    tau: float = 2.0
    k_max: int = 200
    C1: Optional[float] = None
    C2: Optional[float] = None
    eps_c: float = 1.0
    L: float = 1.0
    grid_factor: float = 1 / 8
    theta_over_4: Tuple[float, float] = (0.0, 0.0)
    c1_tilde: float = 1.0

    def __post_init__(self):
        if not self.gamma > 3.5:
            raise ConfigError("gamma must exceed 7/2")
        if not self.t0 > 0 or self.n_t < 1:
            raise ConfigError("need t0 > 0 and n_t >= 1")
        if not self.h_list or any(not h > 0 for h in self.h_list):
            raise ConfigError("h_list must be nonempty and positive")
        self.h_list = tuple(sorted((float(h) for h in self.h_list), reverse=True))
        if not 0 < self.grid_factor <= 0.25:
            raise ConfigError("grid_factor must lie in (0, 1/4]")

    @property
    def params(self) -> DiophantineParams:
        return DiophantineParams(self.kappa, self.tau, self.k_max)

    @property
    def t_grid(self) -> np.ndarray:
        return self.t0 * np.arange(1, self.n_t + 1) / self.n_t

    @property
    def dt(self) -> float:
        return self.t0 / self.n_t

    def eps(self, h: float) -> float:
        return self.eps_c * h ** (self.gamma / 2 - 1.75)

    def with_constants(self, H: FourierPolyHamiltonian) -> "FlowConfig":
        if self.C1 is not None and self.C2 is not None:
            return self
        c1, c2, _ = derived_constants(H, self.kappa)
        return replace(self, C1=self.C1 if self.C1 is not None else c1, C2=self.C2 if self.C2 is not None else c2)


class FlowWorkspace:
    """Lattices and t-grid memberships shared by the flow audits.

    The nonresonant set is built once per grid t at spacing
    ``grid_factor * min(h_list)`` and reduced immediately to lattice
    memberships for every h, so the masks are never held all at once.
    """

    def __init__(self, H: FourierPolyHamiltonian, cfg: FlowConfig):
        self.H = H
        self.cfg = cfg.with_constants(H)
        self.lattices: Dict[float, ActionLattice] = {
            h: build_lattice(H.domain, h, self.cfg.theta_over_4) for h in self.cfg.h_list
        }
        self._members: Dict[float, np.ndarray] | None = None
        self._mu: Dict[float, Tuple[np.ndarray, np.ndarray]] = {}

    @property
    def spacing(self) -> float:
        return self.cfg.grid_factor * min(self.cfg.h_list)

    def affine(self, h: float) -> Tuple[np.ndarray, np.ndarray]:
        """(mu at t=0, dmu/dt) over the lattice of step h."""
        if h not in self._mu:
            q = quasi_spectrum(self.H, self.lattices[h], 0.0)
            self._mu[h] = (q.mu, q.dmu_dt)
        return self._mu[h]

    def members_at(self, h: float, t: float) -> np.ndarray:
        E = nonresonant_action_set(self.H, t, self.cfg.params, spacing=self.spacing)
        return index_set_members(self.lattices[h], E, self.cfg.L)

    def members(self, h: float) -> np.ndarray:
        """Boolean (n_t, N) table: row i marks m in M_h(t_i)."""
        if self._members is None:
            tables = {hh: [] for hh in self.cfg.h_list}
            for t in self.cfg.t_grid:
                E = nonresonant_action_set(self.H, float(t), self.cfg.params, spacing=self.spacing)
                for hh in self.cfg.h_list:
                    tables[hh].append(index_set_members(self.lattices[hh], E, self.cfg.L))
            self._members = {hh: np.array(v).reshape(len(self.cfg.t_grid), -1) for hh, v in tables.items()}
        return self._members[h]


# ---------------------------------------------------------------------------
# spacing audit


@dataclass
class SpacingViolation:
    m: Tuple[int, int]
    n: Tuple[int, int]
    t: float
    h: float
    gap: float
    threshold: float


@dataclass
class SpacingAudit:
    h: float
    t: float
    C1: float
    C2: float
    n_pairs: int
    violations: List[SpacingViolation]
    min_ratio: float  # min |mu_m - mu_n| / h^{3/2}
    min_speed_ratio: float  # min |dmu_m - dmu_n| / h^{3/4}

    @property
    def passed(self) -> bool:
        return not self.violations


def spacing_audit_arrays(
    lattice: ActionLattice,
    members: np.ndarray,
    mu: np.ndarray,
    dmu: np.ndarray,
    t: float,
    C1: float,
    C2: float,
) -> SpacingAudit:
    """Ordered pairs m != n, n in M_h(t), |I_m - I_n| <= C1 h^{3/4}; flag |mu_m - mu_n| < C2 h^{3/2}."""
    h = lattice.h
    radius = C1 * h**0.75
    thr = C2 * h**1.5
    viol: List[SpacingViolation] = []
    min_ratio = math.inf
    min_speed = math.inf
    n_pairs = 0
    if len(lattice):
        tree = cKDTree(lattice.actions)
        pairs = tree.query_pairs(radius * (1 + 1e-12), output_type="ndarray")
        if len(pairs):
            # both orientations; keep those whose second index is a member
            P = np.concatenate([pairs, pairs[:, ::-1]])
            P = P[members[P[:, 1]]]
            P = P[np.lexsort((lattice.points[P[:, 1], 1], lattice.points[P[:, 1], 0],
                              lattice.points[P[:, 0], 1], lattice.points[P[:, 0], 0]))]
            n_pairs = len(P)
            if n_pairs:
                gap = np.abs(mu[P[:, 0]] - mu[P[:, 1]])
                min_ratio = float(gap.min() / h**1.5)
                min_speed = float(np.abs(dmu[P[:, 0]] - dmu[P[:, 1]]).min() / h**0.75)
                for i in np.flatnonzero(gap < thr):
                    a, b = P[i]
                    viol.append(SpacingViolation(tuple(map(int, lattice.points[a])), tuple(map(int, lattice.points[b])),
                                                 float(t), h, float(gap[i]), thr))
    return SpacingAudit(h, float(t), C1, C2, n_pairs, viol, min_ratio, min_speed)


def spacing_audit(ws: FlowWorkspace, h: float, t: float, members: np.ndarray | None = None) -> SpacingAudit:
    lat = ws.lattices[h]
    if members is None:
        members = ws.members_at(h, t)
    mu0, dmu = ws.affine(h)
    return spacing_audit_arrays(lat, members, mu0 + t * dmu, dmu, t, ws.cfg.C1, ws.cfg.C2)


def write_violations_csv(audits: Iterable[SpacingAudit], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["m1", "m2", "n1", "n2", "t", "h", "gap", "threshold"])
        for a in audits:
            for v in a.violations:
                w.writerow([*v.m, *v.n, repr(v.t), repr(v.h), repr(v.gap), repr(v.threshold)])


# ---------------------------------------------------------------------------
# crossing sets


def _crossing_bounds(a, b, width, lo, hi):
    """Vectorized {t in (lo, hi): |a + b t| < width}; returns (start, end, degenerate)."""
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    tiny = 1e-15 * np.maximum(1.0, np.abs(a))
    flat = np.abs(b) <= 1e-15
    with np.errstate(divide="ignore", invalid="ignore"):
        r1 = (-width - a) / b
        r2 = (width - a) / b
    start = np.where(flat, np.where(np.abs(a) < width, lo, hi), np.minimum(r1, r2))
    end = np.where(flat, np.where(np.abs(a) < width, hi, lo), np.maximum(r1, r2))
    start = np.clip(start, lo, hi)
    end = np.clip(end, lo, hi)
    degenerate = flat & (np.abs(a) <= tiny)
    return start, end, degenerate


def crossing_set(H: FourierPolyHamiltonian, m, n, h: float, cfg: FlowConfig, lattice: ActionLattice | None = None) -> TSubset:
    """{t in (0, t0): |mu_m(t) - mu_n(t)| < h^gamma} from the exact linear solve."""
    m = (int(m[0]), int(m[1]))
    n = (int(n[0]), int(n[1]))
    if m == n:
        raise PreconditionError("crossing_set needs m != n")
    lattice = lattice or build_lattice(H.domain, h, cfg.theta_over_4)
    Im, In = lattice.action(m), lattice.action(n)
    for I in (Im, In):
        if not H.domain.contains(I[0], I[1]):
            raise PreconditionError(f"I = {tuple(I)} lies outside the action domain")
    a = float(H.H0(*Im) - H.H0(*In))
    b = float(H.Qbar(*Im) - H.Qbar(*In))
    s, e, deg = _crossing_bounds(a, b, h**cfg.gamma, 0.0, cfg.t0)
    if deg:
        raise DegeneratePair(f"mu_{m} and mu_{n} coincide for every t")
    return TSubset(((float(s), float(e)),), 0.0, cfg.t0)


@dataclass
class WindowedCrossing:
    m: Tuple[int, int]
    n: Tuple[int, int]
    t_star: float
    fraction: float
    c2_tilde: float


def windowed_crossing_audit(ws: FlowWorkspace, h: float, n_triples: int = 200, seed: int = 0) -> List[WindowedCrossing]:
    """Sample triples (m, n, t*) with |mu_m - mu_n|(t*) < h^gamma and m in M_h(t*).

    For each, the fraction of [t* -/+ c1_tilde h^{3/4}] covered by C_{m,n},
    divided by h^{3/4}, and the constant it implies against h^{gamma - 3/2}.
    """
    cfg = ws.cfg
    lat = ws.lattices[h]
    mu0, dmu = ws.affine(h)
    width = h**cfg.gamma
    a = mu0[:, None] - mu0[None, :]
    b = dmu[:, None] - dmu[None, :]
    s, e, deg = _crossing_bounds(a, b, width, 0.0, cfg.t0)
    np.fill_diagonal(e, 0.0)
    iu = np.argwhere((e > s) & ~deg)
    rng = np.random.default_rng(seed)
    rng.shuffle(iu)
    out: List[WindowedCrossing] = []
    half = cfg.c1_tilde * h**0.75
    memb = ws.members(h)
    for i, j in iu:
        if len(out) >= n_triples:
            break
        t_star = float(0.5 * (s[i, j] + e[i, j]))
        cell = min(max(int(math.ceil(t_star / cfg.dt)) - 1, 0), cfg.n_t - 1)
        if not memb[cell, i]:
            continue
        C = TSubset(((s[i, j], e[i, j]),), 0.0, cfg.t0)
        win = TSubset(((t_star - half, t_star + half),), 0.0, cfg.t0)
        frac = C.intersection(win).measure() / h**0.75
        out.append(WindowedCrossing(tuple(map(int, lat.points[i])), tuple(map(int, lat.points[j])), t_star,
                                    frac, frac / h ** (cfg.gamma - 1.5)))
    return out


# ---------------------------------------------------------------------------
# A_m and B_m


@dataclass
class ABResult:
    m: Tuple[int, int]
    A: TSubset
    B: TSubset

    @property
    def ratio(self) -> float:
        a = self.A.measure()
        return self.B.measure() / a if a > 0 else math.nan


def _membership_intervals(col: np.ndarray, t_grid: np.ndarray, dt: float):
    return [(t - dt, t) for t, on in zip(t_grid, col) if on]


def ab_sets(ws: FlowWorkspace, m, h: float) -> ABResult:
    return ab_table(ws, h, only=[m])[0]


def ab_table(ws: FlowWorkspace, h: float, only: Sequence | None = None) -> List[ABResult]:
    """A_m from the grid cells (t_i - dt, t_i] where m is in M_h(t_i); B_m = A_m minus all crossings."""
    cfg = ws.cfg
    lat = ws.lattices[h]
    memb = ws.members(h)
    mu0, dmu = ws.affine(h)
    width = h**cfg.gamma
    idx = range(len(lat)) if only is None else [lat.index(m) for m in only]
    out = []
    for i in idx:
        A = TSubset(tuple(_membership_intervals(memb[:, i], cfg.t_grid, cfg.dt)), 0.0, cfg.t0)
        s, e, deg = _crossing_bounds(mu0[i] - mu0, dmu[i] - dmu, width, 0.0, cfg.t0)
        deg[i] = False
        e[i] = s[i]
        cuts = [(0.0, cfg.t0)] if deg.any() else [(float(a), float(b)) for a, b in zip(s, e) if b > a]
        B = A.difference(TSubset(tuple(cuts), 0.0, cfg.t0))
        out.append(ABResult(tuple(map(int, lat.points[i])), A, B))
    return out


# ---------------------------------------------------------------------------
# N1 / N2


def isolated(mu: np.ndarray, members: np.ndarray, width: float, pool: np.ndarray | None = None) -> np.ndarray:
    """members & (no other level within ``width``), looking at all levels in ``pool`` (default all)."""
    pool_mu = mu if pool is None else mu[pool]
    order = np.sort(pool_mu)
    left = np.searchsorted(order, mu - width, side="right")
    right = np.searchsorted(order, mu + width, side="left")
    # each level sees itself once when it belongs to the pool
    self_count = np.ones(len(mu), int) if pool is None else pool.astype(int)
    return members & ((right - left - self_count) == 0)


@dataclass
class FlowReport:
    h: float
    t: np.ndarray
    N1: np.ndarray
    N2: np.ndarray
    eps: float

    @property
    def good(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            r = np.where(self.N1 > 0, self.N2 / np.maximum(self.N1, 1), 1.0)
        return r > 1 - self.eps

    @property
    def good_fraction(self) -> float:
        return float(self.good.mean()) if len(self.t) else math.nan

    @property
    def bad_level_fraction(self) -> float:
        """mean over t of 1 - N2/N1."""
        r = np.where(self.N1 > 0, 1 - self.N2 / np.maximum(self.N1, 1), 0.0)
        return float(r.mean()) if len(self.t) else math.nan

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "h", "N1", "N2", "good"])
            for t, a, b, g in zip(self.t, self.N1, self.N2, self.good):
                w.writerow([repr(float(t)), repr(self.h), int(a), int(b), int(g)])


def n1_n2_report(ws: FlowWorkspace, h: float, t_values: Sequence[float] | None = None) -> FlowReport:
    """N1 = #M_h(t), N2 = #{m in M_h(t) isolated by h^gamma from every other level in the domain}."""
    cfg = ws.cfg
    mu0, dmu = ws.affine(h)
    if t_values is None:
        t_values = cfg.t_grid
        memb = ws.members(h)
    else:
        memb = np.array([ws.members_at(h, float(t)) for t in t_values]).reshape(len(t_values), -1)
    N1, N2 = [], []
    for row, t in zip(memb, t_values):
        N1.append(int(row.sum()))
        N2.append(int(isolated(mu0 + t * dmu, row, h**cfg.gamma).sum()))
    return FlowReport(h, np.asarray(t_values, float), np.array(N1), np.array(N2), cfg.eps(h))


# ---------------------------------------------------------------------------
# epsilon scaling


@dataclass(frozen=True)
class EpsilonFit:
    slope: float
    intercept: float
    target: float
    band: float
    n_points: int

    @property
    def flat(self) -> bool:
        return abs(self.slope) < 1e-9

    @property
    def within_band(self) -> bool:
        return abs(self.slope - self.target) <= self.band

    @property
    def consistent(self) -> bool:
        """In the band and showing actual decay with h."""
        return self.within_band and not self.flat


def epsilon_scaling_fit(h_values: Sequence[float], y: Sequence[float], gamma: float = 4.0, band: float = 0.5) -> EpsilonFit:
    """Least-squares slope of log y against log h over the positive entries."""
    h = np.asarray(h_values, float)
    y = np.asarray(y, float)
    keep = (h > 0) & (y > 0) & np.isfinite(y)
    if keep.sum() < 3:
        raise InsufficientData(f"need >= 3 values of h with positive data, have {int(keep.sum())}")
    slope, intercept = np.polyfit(np.log(h[keep]), np.log(y[keep]), 1)
    return EpsilonFit(float(slope), float(intercept), gamma / 2 - 1.75, band, int(keep.sum()))


def intervals_json(results: Iterable[ABResult]) -> str:
    doc = [{"m": list(r.m), "A": r.A.to_json(), "B": r.B.to_json()} for r in results]
    return json.dumps(doc, sort_keys=True)
