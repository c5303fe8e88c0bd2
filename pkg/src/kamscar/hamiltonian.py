"""Perturbed integrable Hamiltonians on T^2 x D in action-angle form.

A symbol is stored as a finite Fourier series in the angles,

    H(theta, I; t) = sum_k c_k(I, t) exp(i k . theta),

where every coefficient c_k is a polynomial in (I1, I2, t).  Coefficients are
dense tables ``c[a, b, d]`` multiplying ``I1**a * I2**b * t**d``, so all
derivatives in I and t are exact.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Sequence, Tuple

import numpy as np
from numpy.polynomial import polynomial as P

from .errors import ConfigError, SymmetryViolation

Wave = Tuple[int, int]

SYMMETRY_RTOL = 1e-12
MAX_T_DEGREE = 4


@dataclass(frozen=True)
class ActionRect:
    """Convex action domain: a closed rectangle cut by strict half-planes.

    Each constraint ``(a1, a2, b)`` keeps the points with ``a1*I1 + a2*I2 < b``.
    """

    lo: Tuple[float, float]
    hi: Tuple[float, float]
    constraints: Tuple[Tuple[float, float, float], ...] = ()

    def __post_init__(self):
        lo = tuple(float(x) for x in self.lo)
        hi = tuple(float(x) for x in self.hi)
        cons = tuple(tuple(float(x) for x in c) for c in self.constraints)
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        object.__setattr__(self, "constraints", cons)
        if not (lo[0] < hi[0] and lo[1] < hi[1]):
            raise ConfigError(f"empty action rectangle {lo} x {hi}")
        if any(len(c) != 3 for c in cons):
            raise ConfigError("constraints must be (a1, a2, b) triples")
        if self.area <= 0.0:
            raise ConfigError("action domain has zero area")

    def contains(self, I1, I2):
        I1 = np.asarray(I1, dtype=float)
        I2 = np.asarray(I2, dtype=float)
        inside = (I1 >= self.lo[0]) & (I1 <= self.hi[0]) & (I2 >= self.lo[1]) & (I2 <= self.hi[1])
        for a1, a2, b in self.constraints:
            inside &= a1 * I1 + a2 * I2 < b
        return inside

    def polygon(self) -> np.ndarray:
        """Vertices (counter-clockwise) of the closure of the domain."""
        poly = [
            (self.lo[0], self.lo[1]),
            (self.hi[0], self.lo[1]),
            (self.hi[0], self.hi[1]),
            (self.lo[0], self.hi[1]),
        ]
        for a1, a2, b in self.constraints:
            poly = _clip_halfplane(poly, a1, a2, b)
            if not poly:
                break
        return np.array(poly, dtype=float).reshape(-1, 2)

    @property
    def area(self) -> float:
        v = self.polygon()
        if len(v) < 3:
            return 0.0
        x, y = v[:, 0], v[:, 1]
        return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))

    @property
    def side(self) -> float:
        return max(self.hi[0] - self.lo[0], self.hi[1] - self.lo[1])

    def boundary_distance(self, I1, I2):
        """Euclidean distance from points inside the domain to its boundary."""
        I1 = np.asarray(I1, dtype=float)
        I2 = np.asarray(I2, dtype=float)
        d = np.minimum.reduce([I1 - self.lo[0], self.hi[0] - I1, I2 - self.lo[1], self.hi[1] - I2])
        for a1, a2, b in self.constraints:
            d = np.minimum(d, (b - a1 * I1 - a2 * I2) / np.hypot(a1, a2))
        return d

    def to_dict(self) -> dict:
        return {"lo": list(self.lo), "hi": list(self.hi), "constraints": [list(c) for c in self.constraints]}

    @classmethod
    def from_dict(cls, doc: dict) -> "ActionRect":
        try:
            return cls(tuple(doc["lo"]), tuple(doc["hi"]), tuple(tuple(c) for c in doc.get("constraints", ())))
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed domain document: {exc}") from exc


def _clip_halfplane(poly, a1, a2, b):
    out = []
    n = len(poly)
    for i in range(n):
        p, q = poly[i], poly[(i + 1) % n]
        fp = a1 * p[0] + a2 * p[1] - b
        fq = a1 * q[0] + a2 * q[1] - b
        if fp <= 0:
            out.append(p)
        if fp * fq < 0:
            s = fp / (fp - fq)
            out.append((p[0] + s * (q[0] - p[0]), p[1] + s * (q[1] - p[1])))
    return out


def _as_table(c) -> np.ndarray:
    c = np.asarray(c, dtype=complex)
    if c.ndim != 3:
        raise ConfigError("coefficient tables must be 3-d (deg I1, deg I2, deg t)")
    return c


def polyval(table: np.ndarray, I1, I2, t=0.0):
    """Evaluate a (I1, I2, t) coefficient table with broadcasting."""
    x, y, z = np.broadcast_arrays(np.asarray(I1, float), np.asarray(I2, float), np.asarray(t, float))
    return P.polyval3d(x, y, z, table)


def _deriv(table: np.ndarray, axis: int) -> np.ndarray:
    if table.shape[axis] == 1:
        shape = list(table.shape)
        shape[axis] = 1
        return np.zeros(shape, dtype=table.dtype)
    return P.polyder(table, axis=axis)


@dataclass
class FourierPolySymbol:
    """Real symbol written as a finite Fourier series with polynomial coefficients."""

    terms: Dict[Wave, np.ndarray]
    domain: ActionRect
    name: str = ""
    check: bool = field(default=True, repr=False)

    def __post_init__(self):
        self.terms = {(int(k[0]), int(k[1])): _as_table(c) for k, c in self.terms.items()}
        if self.check:
            self.assert_hermitian()

    # structure -----------------------------------------------------------
    @property
    def support(self) -> list:
        return sorted(self.terms)

    @property
    def bandwidth(self) -> float:
        return max((np.hypot(*k) for k in self.terms), default=0.0)

    def coeff(self, k: Wave) -> np.ndarray | None:
        return self.terms.get((int(k[0]), int(k[1])))

    def hermitian_defect(self) -> float:
        worst = 0.0
        for k, c in self.terms.items():
            partner = self.terms.get((-k[0], -k[1]))
            scale = max(1.0, float(np.max(np.abs(c))))
            if partner is None:
                if np.any(np.abs(c) > 0):
                    return np.inf
                continue
            a, b = _pad_pair(c, np.conj(partner))
            worst = max(worst, float(np.max(np.abs(a - b))) / scale)
        return worst

    def is_hermitian(self) -> bool:
        return self.hermitian_defect() <= SYMMETRY_RTOL

    def assert_hermitian(self):
        defect = self.hermitian_defect()
        if defect > SYMMETRY_RTOL:
            raise SymmetryViolation(f"c_(-k) != conj(c_k): defect {defect:.3g} in symbol {self.name!r}")

    # evaluation ------------------------------------------------------------
    def term(self, k: Wave, I1, I2, t=0.0):
        c = self.coeff(k)
        if c is None:
            return np.zeros(np.broadcast(np.asarray(I1), np.asarray(I2), np.asarray(t)).shape, complex)
        return polyval(c, I1, I2, t)

    def dt_term(self, k: Wave, I1, I2):
        """d/dt c_k(I, t) at t = 0."""
        c = self.coeff(k)
        if c is None or c.shape[2] < 2:
            return np.zeros(np.broadcast(np.asarray(I1), np.asarray(I2)).shape, complex)
        return polyval(c[:, :, 1:2], I1, I2, 0.0)

    def to_dict(self) -> dict:
        terms = []
        for k in self.support:
            c = self.terms[k]
            coeffs = [
                [int(a), int(b), int(d), float(c[a, b, d].real), float(c[a, b, d].imag)]
                for a, b, d in zip(*np.nonzero(c))
            ]
            terms.append({"k": [k[0], k[1]], "coeffs": coeffs})
        return {"name": self.name, "domain": self.domain.to_dict(), "terms": terms}


def _pad_pair(a, b):
    shape = tuple(max(x, y) for x, y in zip(a.shape, b.shape))
    pa = np.zeros(shape, complex)
    pb = np.zeros(shape, complex)
    pa[: a.shape[0], : a.shape[1], : a.shape[2]] = a
    pb[: b.shape[0], : b.shape[1], : b.shape[2]] = b
    return pa, pb


class FourierPolyHamiltonian(FourierPolySymbol):
    """Perturbed integrable Hamiltonian: only the k = 0 term survives at t = 0."""

    def __post_init__(self):
        super().__post_init__()
        if (0, 0) not in self.terms:
            raise ConfigError("Hamiltonian needs a k = 0 term (the integrable part)")
        for k, c in self.terms.items():
            if c.shape[2] > MAX_T_DEGREE + 1 and np.any(c[:, :, MAX_T_DEGREE + 1 :]):
                raise ConfigError(f"t-degree above {MAX_T_DEGREE} in term {k}")
            if self.check and k != (0, 0) and np.any(np.abs(c[:, :, 0]) > 0):
                raise ConfigError(f"term {k} does not vanish at t = 0; H(.;0) must be integrable")
        self._h0 = self.terms[(0, 0)][:, :, 0].real[:, :, None].copy()
        c0 = self.terms[(0, 0)]
        if c0.shape[2] > 1:
            self._qbar = c0[:, :, 1].real[:, :, None].copy()
        else:
            self._qbar = np.zeros_like(self._h0)

    @property
    def h0_table(self) -> np.ndarray:
        return self._h0

    @property
    def qbar_table(self) -> np.ndarray:
        return self._qbar

    def H0(self, I1, I2):
        return polyval(self._h0, I1, I2).real

    def Qbar(self, I1, I2):
        return polyval(self._qbar, I1, I2).real

    def grad(self, table, I1, I2):
        return (
            polyval(_deriv(table, 0), I1, I2).real,
            polyval(_deriv(table, 1), I1, I2).real,
        )

    def hessian(self, table, I1, I2):
        d1 = _deriv(table, 0)
        d2 = _deriv(table, 1)
        return (
            polyval(_deriv(d1, 0), I1, I2).real,
            polyval(_deriv(d1, 1), I1, I2).real,
            polyval(_deriv(d2, 1), I1, I2).real,
        )


# ---------------------------------------------------------------------------
# operations


def eval_symbol(H: FourierPolySymbol, theta, I, t=0.0):
    """Real value of the symbol at angles ``theta`` and actions ``I``."""
    th1, th2 = np.asarray(theta[0], float), np.asarray(theta[1], float)
    I1, I2 = np.asarray(I[0], float), np.asarray(I[1], float)
    total = 0.0 + 0.0j
    for k in H.support:
        total = total + H.term(k, I1, I2, t) * np.exp(1j * (k[0] * th1 + k[1] * th2))
    total = np.asarray(total)
    bad = np.abs(total.imag) > SYMMETRY_RTOL * (1.0 + np.abs(total.real))
    if np.any(bad):
        raise SymmetryViolation(f"symbol {H.name!r} takes non-real values (max imag {np.max(np.abs(total.imag)):.3g})")
    out = total.real
    return float(out) if out.ndim == 0 else out


def angle_average_dtH(H: FourierPolyHamiltonian, I):
    """Angle average of dH/dt at t = 0; only the k = 0 coefficient survives."""
    out = H.Qbar(I[0], I[1])
    return float(out) if np.ndim(out) == 0 else out


def frequency_map(H: FourierPolyHamiltonian, I, t=0.0):
    """Gradient in I of H0(I) + t * Qbar(I)."""
    g0 = H.grad(H.h0_table, I[0], I[1])
    gq = H.grad(H.qbar_table, I[0], I[1])
    w1 = g0[0] + t * gq[0]
    w2 = g0[1] + t * gq[1]
    if np.ndim(w1) == 0:
        return np.array([float(w1), float(w2)])
    return w1, w2


def transversality_det(H: FourierPolyHamiltonian, I):
    """det[grad H0; grad Qbar]; nonzero iff the two gradients are independent."""
    a1, a2 = H.grad(H.h0_table, I[0], I[1])
    b1, b2 = H.grad(H.qbar_table, I[0], I[1])
    out = a1 * b2 - a2 * b1
    return float(out) if np.ndim(out) == 0 else out


def hessian_det(H: FourierPolyHamiltonian, I):
    h11, h12, h22 = H.hessian(H.h0_table, I[0], I[1])
    out = h11 * h22 - h12 * h12
    return float(out) if np.ndim(out) == 0 else out


def hessian_opnorm(H: FourierPolyHamiltonian, I):
    """Spectral norm of the (symmetric) Hessian of H0."""
    h11, h12, h22 = H.hessian(H.h0_table, I[0], I[1])
    mean = 0.5 * (h11 + h22)
    rad = np.sqrt(0.25 * (h11 - h22) ** 2 + h12**2)
    return np.maximum(np.abs(mean + rad), np.abs(mean - rad))


def flat_torus_domain() -> ActionRect:
    """0.1 <= I2 < I1 <= 1: one side of the swap-symmetry diagonal."""
    return ActionRect((0.1, 0.1), (1.0, 1.0), ((-1.0, 1.0, 0.0),))


def builtin_flat_torus(t_coupling_form: float = 1.0, domain: ActionRect | None = None) -> FourierPolyHamiltonian:
    """|I|^2 + s t cos^2(theta1) I1 I2 with coupling scale ``s``.

    cos^2 = 1/2 + e^{2i theta1}/4 + e^{-2i theta1}/4 gives
    c_0 = I1^2 + I2^2 + (s t/2) I1 I2 and c_(+-2,0) = (s t/4) I1 I2.
    """
    s = float(t_coupling_form)
    c0 = np.zeros((3, 3, 2), complex)
    c0[2, 0, 0] = 1.0
    c0[0, 2, 0] = 1.0
    c0[1, 1, 1] = s / 2.0
    c2 = np.zeros((2, 2, 2), complex)
    c2[1, 1, 1] = s / 4.0
    terms = {(0, 0): c0, (2, 0): c2, (-2, 0): c2.copy()}
    return FourierPolyHamiltonian(terms, domain or flat_torus_domain(), name="flat_torus")


def shift_angles(H: FourierPolySymbol, alpha: Sequence[float]) -> FourierPolySymbol:
    """Return H(theta + alpha, I; t): multiplies c_k by exp(i k . alpha)."""
    terms = {k: c * np.exp(1j * (k[0] * alpha[0] + k[1] * alpha[1])) for k, c in H.terms.items()}
    return type(H)(terms, H.domain, name=H.name, check=H.check)


# ---------------------------------------------------------------------------
# serialization


def hamiltonian_from_dict(doc: dict, cls=FourierPolyHamiltonian) -> FourierPolySymbol:
    try:
        domain = ActionRect.from_dict(doc["domain"])
        raw = doc["terms"]
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"malformed Hamiltonian document: {exc}") from exc
    terms: Dict[Wave, np.ndarray] = {}
    for entry in raw:
        try:
            k = (int(entry["k"][0]), int(entry["k"][1]))
            rows = [tuple(r) for r in entry["coeffs"]]
        except (KeyError, TypeError, IndexError) as exc:
            raise ConfigError(f"malformed term entry {entry!r}") from exc
        if k in terms:
            raise ConfigError(f"duplicate term k = {k}")
        if not rows:
            continue
        shape = [1 + max(int(r[i]) for r in rows) for i in range(3)]
        c = np.zeros(shape, complex)
        for a, b, d, re, im in rows:
            if min(a, b, d) < 0:
                raise ConfigError("negative polynomial degree")
            c[int(a), int(b), int(d)] += complex(re, im)
        terms[k] = c
    try:
        return cls(terms, domain, name=str(doc.get("name", "")))
    except SymmetryViolation as exc:
        raise ConfigError(f"asymmetric term map rejected: {exc}") from exc


def dumps(H: FourierPolySymbol) -> str:
    return json.dumps(H.to_dict(), sort_keys=True, separators=(",", ":"))


def save(H: FourierPolySymbol, path) -> None:
    Path(path).write_text(json.dumps(H.to_dict(), sort_keys=True, indent=2) + "\n")


def load(path) -> FourierPolyHamiltonian:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not a JSON document ({exc})") from exc
    return hamiltonian_from_dict(doc)


def grid_points(domain: ActionRect, n: int) -> Tuple[np.ndarray, np.ndarray]:
    """Points of an n x n grid over the bounding box that lie in the domain."""
    x = np.linspace(domain.lo[0], domain.hi[0], n)
    y = np.linspace(domain.lo[1], domain.hi[1], n)
    I1, I2 = np.meshgrid(x, y, indexing="ij")
    keep = domain.contains(I1, I2)
    return I1[keep], I2[keep]

