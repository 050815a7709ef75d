"""Log-conductivity random fields from a truncated Karhunen-Loeve expansion.

Only the separable exponential covariance is supported. Its 1-D eigenpairs
are analytic up to the roots of a transcendental equation, and the 2-D pairs
are products of the per-axis pairs, so K and its spatial gradients can be
evaluated exactly at any point.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FIELD_FORMAT = "tgnn-field"
FIELD_VERSION = 1

SCAN_SUBDIVISION = 10
BISECT_MAX_ITER = 200
BISECT_ABS_TOL = 1e-12


class RootFindingError(RuntimeError):
    pass


@dataclass(frozen=True)
class CovarianceSpec:
    variance: float = 1.0
    corr_len_x: float = 408.0
    corr_len_y: float = 408.0
    domain_len_x: float = 1020.0
    domain_len_y: float = 1020.0
    mean_logk: float = 0.0

    def __post_init__(self):
        if not self.variance > 0:
            raise ValueError(f"variance must be > 0, got {self.variance}")
        for name in ("corr_len_x", "corr_len_y", "domain_len_x", "domain_len_y"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0, got {getattr(self, name)}")


@dataclass(frozen=True)
class EigenMode1D:
    omega: float
    lam: float
    axis: str
    eta: float
    length: float

    @property
    def norm(self) -> float:
        return 1.0 / math.sqrt((self.eta**2 * self.omega**2 + 1.0) * self.length / 2.0 + self.eta)


def characteristic(omega, eta: float, L: float):
    """g(w) = (eta^2 w^2 - 1) sin(wL) - 2 eta w cos(wL); its positive roots give the modes."""
    return (eta**2 * omega**2 - 1.0) * np.sin(omega * L) - 2.0 * eta * omega * np.cos(omega * L)


def _bisect(eta: float, L: float, lo: float, hi: float) -> float:
    glo = characteristic(lo, eta, L)
    for _ in range(BISECT_MAX_ITER):
        mid = 0.5 * (lo + hi)
        if hi - lo <= BISECT_ABS_TOL and hi - lo <= 4 * np.spacing(mid):
            return mid
        if mid == lo or mid == hi:
            return mid
        gmid = characteristic(mid, eta, L)
        if gmid == 0.0:
            return mid
        if (gmid < 0) == (glo < 0):
            lo, glo = mid, gmid
        else:
            hi = mid
    raise RootFindingError(
        f"bisection did not converge in {BISECT_MAX_ITER} iterations on bracket [{lo!r}, {hi!r}]"
    )


def solve_characteristic_roots(eta: float, L: float, n: int) -> list[float]:
    """Return the ``n`` smallest positive roots of the characteristic equation.

    A uniform scan with step pi/(10 L) locates sign changes; each bracket is then
    refined by bisection.
    """
    if not (eta > 0 and L > 0):
        raise ValueError("eta and L must be positive")
    if n < 0:
        raise ValueError("n must be >= 0")
    roots: list[float] = []
    if n == 0:
        return roots
    step = math.pi / (SCAN_SUBDIVISION * L)
    # g(w) ~ -w (L + 2 eta) near 0, so the scan may start one step out
    k = 1
    a = step
    ga = characteristic(a, eta, L)
    chunk = SCAN_SUBDIVISION * 64
    while len(roots) < n:
        w = step * np.arange(k + 1, k + 1 + chunk)
        g = characteristic(w, eta, L)
        prev = np.concatenate(([ga], g[:-1]))
        left = np.concatenate(([a], w[:-1]))
        for idx in np.nonzero(np.signbit(prev) != np.signbit(g))[0]:
            if prev[idx] == 0.0:
                continue
            roots.append(_bisect(eta, L, float(left[idx]), float(w[idx])))
            if len(roots) == n:
                break
        k += chunk
        a, ga = float(w[-1]), float(g[-1])
    return roots


def eigenvalue_1d(omega, eta: float, variance: float = 1.0):
    return 2.0 * eta * variance / (eta**2 * np.asarray(omega) ** 2 + 1.0)


def eigenfunction_1d(mode: EigenMode1D, x):
    """Value and first derivative of the normalized 1-D eigenfunction at ``x``."""
    x = np.asarray(x, dtype=float)
    w, eta = mode.omega, mode.eta
    c = mode.norm
    s, co = np.sin(w * x), np.cos(w * x)
    f = c * (eta * w * co + s)
    df = c * (-eta * w * w * s + w * co)
    return f, df


def axis_modes(eta: float, L: float, count: int, variance: float, axis: str) -> list[EigenMode1D]:
    return [
        EigenMode1D(omega=w, lam=float(eigenvalue_1d(w, eta, variance)), axis=axis, eta=eta, length=L)
        for w in solve_characteristic_roots(eta, L, count)
    ]


@dataclass(frozen=True)
class KLMode:
    lam: float
    j: int
    k: int
    x_mode: EigenMode1D
    y_mode: EigenMode1D


@dataclass(frozen=True)
class KLBasis2D:
    spec: CovarianceSpec
    modes: tuple[KLMode, ...]

    @property
    def n_terms(self) -> int:
        return len(self.modes)

    @property
    def eigenvalues(self) -> np.ndarray:
        return np.array([m.lam for m in self.modes])

    def captured_variance_fraction(self) -> float:
        """Fraction of the total field variance (sigma^2 Lx Ly) kept by the truncation."""
        s = self.spec
        return float(self.eigenvalues.sum() / (s.variance * s.domain_len_x * s.domain_len_y))


MAX_POOL_GROWTH = 8


def build_basis_2d(spec: CovarianceSpec, n_terms: int) -> KLBasis2D:
    """Combine per-axis modes into the ``n_terms`` largest 2-D products."""
    if n_terms < 1:
        raise ValueError("n_terms must be >= 1")
    pool = math.ceil(math.sqrt(n_terms)) + 10
    for _ in range(MAX_POOL_GROWTH):
        xm = axis_modes(spec.corr_len_x, spec.domain_len_x, pool + 1, spec.variance, "x")
        ym = axis_modes(spec.corr_len_y, spec.domain_len_y, pool + 1, spec.variance, "y")
        lx = np.array([m.lam for m in xm[:pool]])
        ly = np.array([m.lam for m in ym[:pool]])
        prod = np.outer(lx, ly) / spec.variance
        jj, kk = np.meshgrid(np.arange(pool), np.arange(pool), indexing="ij")
        # sort by -lambda, then j, then k
        order = np.lexsort((kk.ravel(), jj.ravel(), -prod.ravel()))[:n_terms]
        smallest = prod.ravel()[order[-1]]
        # largest product that would use a mode outside the pool
        outside = max(xm[pool].lam * ym[0].lam, xm[0].lam * ym[pool].lam) / spec.variance
        if len(order) == n_terms and smallest > outside:
            modes = tuple(
                KLMode(
                    lam=float(prod.ravel()[o]),
                    j=int(jj.ravel()[o]) + 1,
                    k=int(kk.ravel()[o]) + 1,
                    x_mode=xm[jj.ravel()[o]],
                    y_mode=ym[kk.ravel()[o]],
                )
                for o in order
            )
            return KLBasis2D(spec=spec, modes=modes)
        pool *= 2
    raise RootFindingError(f"per-axis pool of {pool} modes still cannot cover {n_terms} terms")


def sample_xi(seed: int, n: int) -> np.ndarray:
    if n < 1:
        raise ValueError("n must be >= 1")
    return np.random.default_rng(seed).standard_normal(n)


@dataclass(frozen=True, eq=False)
class ConductivityField:
    """One realization K = exp(Z) of the expansion, fixed by its coordinates ``xi``."""

    basis: KLBasis2D
    xi: np.ndarray
    seed: int | None = None
    _coef: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        xi = np.asarray(self.xi, dtype=float)
        if xi.shape != (self.basis.n_terms,):
            raise ValueError(f"xi has length {xi.size}, basis has {self.basis.n_terms} terms")
        object.__setattr__(self, "xi", xi)
        object.__setattr__(self, "_coef", np.sqrt(self.basis.eigenvalues) * xi)

    @classmethod
    def from_seed(cls, basis: KLBasis2D, seed: int) -> "ConductivityField":
        return cls(basis, sample_xi(seed, basis.n_terms), seed=seed)

    def logk(self, x, y):
        """Z, dZ/dx, dZ/dy at the given points (broadcast together)."""
        x, y = np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float))
        z = np.full(x.shape, self.basis.spec.mean_logk)
        zx = np.zeros(x.shape)
        zy = np.zeros(x.shape)
        for c, m in zip(self._coef, self.basis.modes):
            fx, dfx = eigenfunction_1d(m.x_mode, x)
            fy, dfy = eigenfunction_1d(m.y_mode, y)
            z += c * fx * fy
            zx += c * dfx * fy
            zy += c * fx * dfy
        return z, zx, zy

    def conductivity(self, x, y):
        """K, dK/dx, dK/dy at the given points."""
        z, zx, zy = self.logk(x, y)
        k = np.exp(z)
        return k, k * zx, k * zy

    def on_grid(self, grid) -> np.ndarray:
        """K at the cell centers of ``grid``, shape (ny, nx)."""
        xc, yc = grid.centers()
        X, Y = np.meshgrid(xc, yc)
        return self.conductivity(X, Y)[0]

    def save(self, path, grid=None) -> None:
        path = Path(path)
        path.write_text(dumps_field(self, grid))

    @classmethod
    def load(cls, path) -> "ConductivityField":
        return loads_field(Path(path).read_text())


_SPEC_KEYS = ("variance", "corr_len_x", "corr_len_y", "domain_len_x", "domain_len_y", "mean_logk")


def dumps_field(fld: ConductivityField, grid=None) -> str:
    s = fld.basis.spec
    lines = [f"{FIELD_FORMAT} {FIELD_VERSION}"]
    lines += [f"{k} {getattr(s, k)!r}" for k in _SPEC_KEYS]
    lines.append(f"n_terms {fld.basis.n_terms}")
    lines.append(f"seed {'none' if fld.seed is None else fld.seed}")
    lines.append("xi")
    lines += [repr(float(v)) for v in fld.xi]
    if grid is not None:
        z = fld.logk(*np.meshgrid(*grid.centers()))[0]
        lines.append(f"grid {grid.nx} {grid.ny} {grid.dx!r} {grid.dy!r}")
        lines += [",".join(repr(float(v)) for v in row) for row in z]
    return "\n".join(lines) + "\n"


def loads_field(text: str) -> ConductivityField:
    lines = text.splitlines()
    head = lines[0].split()
    if len(head) != 2 or head[0] != FIELD_FORMAT:
        raise ValueError("not a field document")
    if int(head[1]) != FIELD_VERSION:
        raise ValueError(f"unsupported field version {head[1]}")
    vals = {}
    i = 1
    while lines[i] != "xi":
        key, value = lines[i].split(None, 1)
        vals[key] = value
        i += 1
    spec = CovarianceSpec(**{k: float(vals[k]) for k in _SPEC_KEYS})
    n = int(vals["n_terms"])
    xi = np.array([float(v) for v in lines[i + 1 : i + 1 + n]])
    seed = None if vals["seed"] == "none" else int(vals["seed"])
    return ConductivityField(build_basis_2d(spec, n), xi, seed=seed)
