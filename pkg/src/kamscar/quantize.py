"""Weyl quantization on the Fourier basis of the 2-torus and windowed eigensolves.

The basis vector ``e_m`` is exp(i m . theta) / (2 pi).  The Weyl quantization
of ``exp(i k . theta) p(I)`` maps ``e_m`` to ``p(h (m + k/2 + theta/4)) e_{m+k}``,
so the operator matrix has one band per Fourier mode of the symbol.
"""
from __future__ import annotations

import hashlib
import io
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.sparse import csgraph
from scipy.sparse.linalg import ArpackNoConvergence, eigsh

from .errors import (
    BoundaryContamination,
    DimensionMismatch,
    NearDegeneracy,
    PreconditionError,
    SolverFailure,
    SymmetryViolation,
)
from .hamiltonian import FourierPolyHamiltonian, FourierPolySymbol, dumps, polyval

HERMITIAN_TOL = 1e-14
SHELL_FRACTION = 0.9
SHELL_MASS_TOL = 1e-6
DENSE_LIMIT = 3000


def _offset(theta_over_4) -> np.ndarray:
    return np.broadcast_to(np.asarray(theta_over_4, float), (2,)).copy()


# ---------------------------------------------------------------------------
# truncation


@dataclass
class BasisTruncation:
    """Finite set of Fourier modes: an energy ball of H0, or an explicit lattice ball.

    With ``radius`` set, the basis is ``{m : |m| <= radius}``; otherwise it is
    ``{m : H0(h (m + theta/4)) <= E_cut * rho}``.  The outer shell used for the
    contamination diagnostic is the last 10% of the same criterion.
    """

    h: float
    E_cut: float = 1.0
    rho: float = 1.5
    radius: Optional[float] = None
    theta_over_4: Tuple[float, float] = (0.0, 0.0)
    modes: np.ndarray = field(init=False, repr=False)
    shell: np.ndarray = field(init=False, repr=False)
    _index: Dict[Tuple[int, int], int] = field(init=False, repr=False)

    def build(self, H0) -> "BasisTruncation":
        if not self.h > 0:
            raise PreconditionError("h must be positive")
        off = _offset(self.theta_over_4)
        if self.radius is not None:
            r = int(np.ceil(self.radius)) + 1
            a, b = np.meshgrid(np.arange(-r, r + 1), np.arange(-r, r + 1), indexing="ij")
            m = np.stack([a.ravel(), b.ravel()], axis=1)
            norm = np.hypot(m[:, 0], m[:, 1])
            keep = norm <= self.radius
            m = m[keep]
            shell = norm[keep] > SHELL_FRACTION * self.radius
        else:
            if not (self.E_cut > 0 and self.rho >= 1):
                raise PreconditionError("need E_cut > 0 and rho >= 1")
            level = self.E_cut * self.rho
            m, val = _sublevel_modes(H0, self.h, off, level)
            shell = val > SHELL_FRACTION * level
        order = np.lexsort((m[:, 1], m[:, 0]))
        self.modes = m[order].astype(np.int64)
        self.shell = shell[order]
        self._index = {(int(x), int(y)): i for i, (x, y) in enumerate(self.modes)}
        return self

    def __len__(self):
        return len(self.modes)

    def index(self, m) -> int:
        return self._index[(int(m[0]), int(m[1]))]

    def get(self, m) -> Optional[int]:
        return self._index.get((int(m[0]), int(m[1])))

    def __contains__(self, m) -> bool:
        return (int(m[0]), int(m[1])) in self._index

    def lookup(self, ms: np.ndarray) -> np.ndarray:
        """Row index of each mode in ``ms`` (shape (n, 2)), or -1 when absent."""
        ms = np.asarray(ms, np.int64).reshape(-1, 2)
        if not len(self.modes):
            return np.full(len(ms), -1, np.int64)
        keys = _encode(self.modes)
        q = _encode(ms)
        pos = np.clip(np.searchsorted(keys, q), 0, len(keys) - 1)
        return np.where(keys[pos] == q, pos, -1).astype(np.int64)

    @property
    def actions(self) -> np.ndarray:
        return self.h * (self.modes + _offset(self.theta_over_4))

    def key(self) -> dict:
        return {
            "h": repr(float(self.h)),
            "E_cut": repr(float(self.E_cut)),
            "rho": repr(float(self.rho)),
            "radius": None if self.radius is None else repr(float(self.radius)),
            "theta_over_4": [repr(float(x)) for x in _offset(self.theta_over_4)],
        }

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.key(), sort_keys=True).encode()).hexdigest()


def _encode(m: np.ndarray) -> np.ndarray:
    # order-preserving for the (m1, m2) lexicographic sort
    return (m[:, 0].astype(np.int64) << 32) + m[:, 1].astype(np.int64)


def _sublevel_modes(H0, h, off, level):
    """All m with H0(h(m + off)) <= level, found by growing a box until its rim is empty."""
    r = 4
    while True:
        a, b = np.meshgrid(np.arange(-r, r + 1), np.arange(-r, r + 1), indexing="ij")
        m = np.stack([a.ravel(), b.ravel()], axis=1)
        I = h * (m + off)
        val = np.asarray(H0(I[:, 0], I[:, 1]), float)
        keep = val <= level
        rim = (np.abs(m[:, 0]) == r) | (np.abs(m[:, 1]) == r)
        if not np.any(keep & rim):
            return m[keep], val[keep]
        if r > 1 << 16:
            raise PreconditionError("energy sublevel set of H0 is not bounded")
        r *= 2


def build_truncation(H: FourierPolyHamiltonian, h: float, E_cut: float = 1.0, rho: float = 1.5,
                     radius: float | None = None, theta_over_4=(0.0, 0.0)) -> BasisTruncation:
    return BasisTruncation(h, E_cut, rho, radius, tuple(_offset(theta_over_4))).build(H.H0)


# ---------------------------------------------------------------------------
# operator


def matrix_element(H: FourierPolySymbol, m, m_prime, h: float, t: float, theta_over_4=(0.0, 0.0)) -> complex:
    """<e_{m'}, Op(H) e_m> = c_{m'-m}(h((m + m')/2 + theta/4), t)."""
    k = (int(m_prime[0]) - int(m[0]), int(m_prime[1]) - int(m[1]))
    c = H.coeff(k)
    if c is None:
        return 0j
    off = _offset(theta_over_4)
    I = h * (0.5 * (np.asarray(m, float) + np.asarray(m_prime, float)) + off)
    return complex(polyval(c, I[0], I[1], t))


@dataclass
class HermitianOperatorMatrix:
    """Banded storage: for each wave vector k, the column indices j with
    j -> row index of m_j + k and the corresponding values."""

    trunc: BasisTruncation
    h: float
    t: float
    bands: Dict[Tuple[int, int], Tuple[np.ndarray, np.ndarray, np.ndarray]]

    @property
    def dim(self) -> int:
        return len(self.trunc)

    @property
    def bandwidth(self) -> float:
        return max((float(np.hypot(*k)) for k, b in self.bands.items() if len(b[0])), default=0.0)

    def to_sparse(self) -> sp.csr_matrix:
        rows, cols, vals = [], [], []
        for r, c, v in self.bands.values():
            rows.append(r)
            cols.append(c)
            vals.append(v)
        n = self.dim
        if not rows:
            return sp.csr_matrix((n, n), dtype=complex)
        A = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
        return A.tocsr()

    def dense(self) -> np.ndarray:
        return self.to_sparse().toarray()

    def diagonal(self) -> np.ndarray:
        d = np.zeros(self.dim)
        if (0, 0) in self.bands:
            r, c, v = self.bands[(0, 0)]
            d[r] = v.real
        return d

    def matvec(self, v: np.ndarray) -> np.ndarray:
        return self.to_sparse() @ v

    def hermitian_defect(self) -> float:
        A = self.to_sparse()
        D = A - A.getH()
        return float(np.max(np.abs(D.data))) if D.nnz else 0.0


def build_operator(H: FourierPolySymbol, h: float, t: float, trunc: BasisTruncation,
                   theta_over_4=None) -> HermitianOperatorMatrix:
    """Assemble the Weyl quantization of H on the truncated basis."""
    if theta_over_4 is not None and not np.allclose(_offset(theta_over_4), _offset(trunc.theta_over_4)):
        raise PreconditionError("theta_over_4 differs from the truncation's offset")
    if abs(trunc.h - h) > 1e-15 * h:
        raise PreconditionError("truncation was built for a different h")
    off = _offset(trunc.theta_over_4)
    modes = trunc.modes
    bands = {}
    for k in H.support:
        rows = trunc.lookup(modes + np.asarray(k))
        cols = np.flatnonzero(rows >= 0)
        rows = rows[cols]
        I = h * (modes[cols] + 0.5 * np.asarray(k) + off)
        vals = np.asarray(polyval(H.coeff(k), I[:, 0], I[:, 1], t), complex).reshape(-1)
        nz = vals != 0
        bands[k] = (rows[nz], cols[nz], vals[nz])
    mat = HermitianOperatorMatrix(trunc, h, float(t), bands)
    scale = max(1.0, max((float(np.max(np.abs(v))) for _, _, v in bands.values() if len(v)), default=1.0))
    defect = mat.hermitian_defect()
    if defect > HERMITIAN_TOL * scale:
        raise SymmetryViolation(f"assembled matrix is not Hermitian (defect {defect:.3g})")
    return mat


# ---------------------------------------------------------------------------
# eigensolve


@dataclass
class EigenWindowResult:
    """Eigenpairs with eigenvalue in [a, b].

    Eigenvector j is stored sparsely: basis indices ``idx[ptr[j]:ptr[j+1]]``
    with coefficients ``val[ptr[j]:ptr[j+1]]`` (the support of its block).
    """

    a: float
    b: float
    dim: int
    values: np.ndarray
    ptr: np.ndarray
    idx: np.ndarray
    val: np.ndarray
    residuals: np.ndarray
    shell_mass: np.ndarray
    h: float = float("nan")
    t: float = float("nan")
    trunc_digest: str = ""

    def __len__(self):
        return len(self.values)

    def vector(self, j: int) -> np.ndarray:
        u = np.zeros(self.dim, complex)
        s = slice(self.ptr[j], self.ptr[j + 1])
        u[self.idx[s]] = self.val[s]
        return u

    def overlaps(self, v: np.ndarray, js: np.ndarray | None = None) -> np.ndarray:
        """<u_j, v> for every stored eigenvector, or only for the indices ``js``."""
        v = np.asarray(v)
        if v.shape != (self.dim,):
            raise DimensionMismatch(f"vector of length {v.shape} against basis of {self.dim}")
        if js is not None:
            return np.array([np.vdot(self.val[self.ptr[j] : self.ptr[j + 1]], v[self.idx[self.ptr[j] : self.ptr[j + 1]]])
                             for j in np.asarray(js, int)], dtype=complex)
        if not len(self.values):
            return np.zeros(0, complex)
        prod = np.conj(self.val) * v[self.idx]
        out = np.add.reduceat(prod, self.ptr[:-1])
        out[np.diff(self.ptr) == 0] = 0
        return out

    def in_window(self, lo: float, hi: float) -> np.ndarray:
        return np.flatnonzero((self.values >= lo) & (self.values <= hi))

    def coefficient_table(self, j: int, trunc: BasisTruncation) -> Dict[Tuple[int, int], complex]:
        s = slice(self.ptr[j], self.ptr[j + 1])
        return {tuple(map(int, trunc.modes[i])): complex(c) for i, c in zip(self.idx[s], self.val[s])}

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("j,E,residual,shell_mass\n")
            for j, (e, r, s) in enumerate(zip(self.values, self.residuals, self.shell_mass)):
                fh.write(f"{j},{e!r},{r!r},{s!r}\n")

    # binary container ----------------------------------------------------
    MAGIC = b"KSEIGv1\n"

    def to_bytes(self) -> bytes:
        header = {
            "h": self.h, "t": self.t, "window": [self.a, self.b], "dimension": int(self.dim),
            "truncation": self.trunc_digest, "n": int(len(self.values)), "nnz": int(len(self.idx)),
        }
        hb = json.dumps(header, sort_keys=True).encode()
        buf = io.BytesIO()
        buf.write(self.MAGIC)
        buf.write(struct.pack("<I", len(hb)))
        buf.write(hb)
        for arr, dt in ((self.values, "<f8"), (self.residuals, "<f8"), (self.shell_mass, "<f8"),
                        (self.ptr, "<i8"), (self.idx, "<i8"), (self.val, "<c16")):
            buf.write(np.ascontiguousarray(arr, dtype=dt).tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "EigenWindowResult":
        if not raw.startswith(cls.MAGIC):
            raise ValueError("not an eigen-window container")
        pos = len(cls.MAGIC)
        (n_h,) = struct.unpack("<I", raw[pos : pos + 4])
        pos += 4
        hd = json.loads(raw[pos : pos + n_h])
        pos += n_h
        n, nnz = hd["n"], hd["nnz"]
        out = []
        for count, dt, size in ((n, "<f8", 8), (n, "<f8", 8), (n, "<f8", 8), (n + 1, "<i8", 8),
                                (nnz, "<i8", 8), (nnz, "<c16", 16)):
            out.append(np.frombuffer(raw[pos : pos + count * size], dtype=dt).copy())
            pos += count * size
        values, res, shell, ptr, idx, val = out
        return cls(hd["window"][0], hd["window"][1], hd["dimension"], values, ptr, idx, val, res, shell,
                   hd["h"], hd["t"], hd["truncation"])


def _components(A: sp.csr_matrix):
    pattern = sp.csr_matrix((np.ones(A.nnz), A.indices, A.indptr), shape=A.shape)
    n_comp, labels = csgraph.connected_components(pattern, directed=False)
    order = np.argsort(labels, kind="stable")
    bounds = np.searchsorted(labels[order], np.arange(n_comp + 1))
    return [order[bounds[i] : bounds[i + 1]] for i in range(n_comp)]


def _solve_block(B, a, b):
    n = B.shape[0]
    if n <= DENSE_LIMIT:
        M = B.toarray()
        try:
            w, V = sla.eigh(M, subset_by_value=(np.nextafter(a, -np.inf), b), driver="evr")
        except (sla.LinAlgError, ValueError) as exc:
            raise SolverFailure(f"dense eigensolve failed on a block of size {n}: {exc}") from exc
        # eigh's value window is half-open (a, b]; include E == a
        keep = (w >= a) & (w <= b)
        return w[keep], V[:, keep]
    return _solve_large(B, a, b)


def _solve_large(B, a, b):
    """Shift-invert Lanczos around the window centre, widened until both ends are passed."""
    n = B.shape[0]
    sigma = 0.5 * (a + b)
    k = min(64, n - 2)
    while True:
        try:
            w, V = eigsh(B, k=k, sigma=sigma, which="LM", tol=1e-13)
        except ArpackNoConvergence as exc:
            raise SolverFailure(f"Lanczos did not converge on a block of size {n}") from exc
        if (w.min() < a and w.max() > b) or k >= n - 2:
            keep = (w >= a) & (w <= b)
            order = np.argsort(w[keep])
            return w[keep][order], V[:, keep][:, order]
        k = min(2 * k, n - 2)


def eigensolve_window(mat: HermitianOperatorMatrix, a: float, b: float, tol: float = 1e-10,
                      check_shell: bool = True) -> EigenWindowResult:
    """All eigenpairs with eigenvalue in [a, b], one connected block of the matrix at a time."""
    if a > b:
        raise PreconditionError("window needs a <= b")
    A = mat.to_sparse()
    diag = mat.diagonal()
    vals, ptr, idx, coef = [], [0], [], []
    for comp in _components(A):
        if len(comp) == 1:
            e = diag[comp[0]]
            if a <= e <= b:
                vals.append(e)
                idx.append(comp)
                coef.append(np.ones(1, complex))
                ptr.append(ptr[-1] + 1)
            continue
        B = A[comp][:, comp]
        w, V = _solve_block(B, a, b)
        for j in range(len(w)):
            v = V[:, j]
            # fix the global phase so runs are reproducible
            p = int(np.argmax(np.abs(v)))
            v = v * (abs(v[p]) / v[p])
            vals.append(float(w[j]))
            idx.append(comp)
            coef.append(v.astype(complex))
            ptr.append(ptr[-1] + len(comp))
    values = np.asarray(vals, float)
    ptr = np.asarray(ptr, np.int64)
    idx = np.concatenate(idx).astype(np.int64) if idx else np.zeros(0, np.int64)
    coef = np.concatenate(coef) if coef else np.zeros(0, complex)

    order = np.argsort(values, kind="stable")
    if len(order):
        seg = [(ptr[j], ptr[j + 1]) for j in order]
        idx = np.concatenate([idx[s:e] for s, e in seg])
        coef = np.concatenate([coef[s:e] for s, e in seg])
        ptr = np.concatenate([[0], np.cumsum([e - s for s, e in seg])]).astype(np.int64)
        values = values[order]

    res = EigenWindowResult(a, b, mat.dim, values, ptr, idx, coef, np.zeros(len(values)), np.zeros(len(values)),
                            mat.h, mat.t, mat.trunc.digest())
    shell = mat.trunc.shell
    scale = max(1.0, float(np.max(np.abs(diag))) if len(diag) else 1.0)
    for j in range(len(values)):
        s = slice(ptr[j], ptr[j + 1])
        u = np.zeros(mat.dim, complex)
        u[idx[s]] = coef[s]
        res.residuals[j] = float(np.linalg.norm(A @ u - values[j] * u))
        res.shell_mass[j] = float(np.sum(np.abs(coef[s][shell[idx[s]]]) ** 2))
    if len(values) and res.residuals.max() > tol * scale:
        j = int(np.argmax(res.residuals))
        raise SolverFailure(f"eigenpair residual {res.residuals[j]:.3g} above {tol * scale:.3g} at E = {values[j]:.6g}")
    if check_shell and len(values) and res.shell_mass.max() > SHELL_MASS_TOL:
        j = int(np.argmax(res.shell_mass))
        raise BoundaryContamination(
            f"eigenvector at E = {values[j]:.6g} has mass {res.shell_mass[j]:.3g} on the outer truncation shell"
        )
    return res


# ---------------------------------------------------------------------------
# on-disk cache


def cache_dir() -> Path:
    return Path(os.environ.get("KAMSCAR_CACHE_DIR", Path.home() / ".cache" / "kamscar"))


def eigen_cache_key(H: FourierPolySymbol, h: float, t: float, trunc: BasisTruncation, a: float, b: float) -> str:
    doc = {"H": dumps(H), "h": repr(float(h)), "t": repr(float(t)), "trunc": trunc.key(),
           "window": [repr(float(a)), repr(float(b))]}
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


def cached_eigensolve(H: FourierPolySymbol, h: float, t: float, trunc: BasisTruncation, a: float, b: float,
                      tol: float = 1e-10, directory: Path | None = None) -> EigenWindowResult:
    """eigensolve_window with results kept on disk under a content hash; writes are atomic."""
    directory = Path(directory) if directory is not None else cache_dir()
    path = directory / f"{eigen_cache_key(H, h, t, trunc, a, b)}.eig"
    if path.exists():
        return EigenWindowResult.from_bytes(path.read_bytes())
    res = eigensolve_window(build_operator(H, h, t, trunc), a, b, tol)
    directory.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    with os.fdopen(fd, "wb") as fh:
        fh.write(res.to_bytes())
    os.replace(tmp, path)
    return res


# ---------------------------------------------------------------------------
# quasimodes


@dataclass
class QuasimodeVector:
    m: Tuple[int, int]
    coeffs: np.ndarray  # over the truncation basis, unit norm
    order: int
    t: float

    def rayleigh(self, mat) -> float:
        """<v, P v> for a HermitianOperatorMatrix or an assembled sparse matrix."""
        A = mat.to_sparse() if isinstance(mat, HermitianOperatorMatrix) else mat
        return float(np.vdot(self.coeffs, A @ self.coeffs).real)


def build_quasimode(H: FourierPolyHamiltonian, m, t: float, h: float, trunc: BasisTruncation,
                    k_trunc: float = np.inf, divisor_tol: float | None = None) -> QuasimodeVector:
    """First-order Rayleigh-Schroedinger correction of e_m using exact Weyl matrix elements."""
    m = (int(m[0]), int(m[1]))
    if m not in trunc:
        raise PreconditionError(f"m = {m} is outside the basis truncation")
    off = _offset(trunc.theta_over_4)
    Im = h * (np.asarray(m, float) + off)
    E0 = float(H.H0(*Im))
    if divisor_tol is None:
        divisor_tol = 1e-8 * max(1.0, abs(E0))
    v = np.zeros(len(trunc), complex)
    v[trunc.index(m)] = 1.0
    for k in H.support:
        if k == (0, 0) or np.hypot(*k) > k_trunc:
            continue
        n = (m[0] + k[0], m[1] + k[1])
        mid = h * (np.asarray(m, float) + 0.5 * np.asarray(k) + off)
        c1 = complex(H.dt_term(k, mid[0], mid[1]))
        if c1 == 0:
            continue
        In = h * (np.asarray(n, float) + off)
        den = E0 - float(H.H0(*In))
        if abs(den) < divisor_tol:
            raise NearDegeneracy(k, abs(den))
        j = trunc.get(n)
        if j is None:
            raise PreconditionError(f"coupled mode {n} is outside the basis truncation")
        v[j] += t * c1 / den
    v /= np.linalg.norm(v)
    return QuasimodeVector(m, v, 1, float(t))


def residual_norm(mat: HermitianOperatorMatrix, v, mu: float) -> float:
    v = v.coeffs if isinstance(v, QuasimodeVector) else np.asarray(v)
    if v.shape != (mat.dim,):
        raise DimensionMismatch(f"vector of length {v.shape} against basis of {mat.dim}")
    return float(np.linalg.norm(mat.matvec(v) - mu * v))


def overlap(u, v) -> complex:
    """sum conj(u_k) v_k."""
    u = np.asarray(u.coeffs if isinstance(u, QuasimodeVector) else u)
    v = np.asarray(v.coeffs if isinstance(v, QuasimodeVector) else v)
    if u.shape != v.shape:
        raise DimensionMismatch(f"shapes {u.shape} and {v.shape} differ")
    return complex(np.vdot(u, v))
