"""Bravais lattices, point-defect reference configurations and domains."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from .hamiltonian import ConfigurationError


class InvalidDefectError(ValueError):
    """Defect site or position lies outside the declared core ball."""


@dataclass(frozen=True)
class BravaisLattice:
    """Lattice ``A Z^d``; columns of ``A`` are the lattice vectors."""

    A: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        if A.shape[0] != A.shape[1] or A.shape[0] not in (1, 2, 3):
            raise ValueError("A must be a square matrix of size 1, 2 or 3")
        if abs(np.linalg.det(A)) < 1e-12:
            raise ValueError("lattice matrix is singular")
        object.__setattr__(self, "A", A)

    @classmethod
    def cubic(cls, d: int, a: float = 1.0) -> "BravaisLattice":
        return cls(a * np.eye(d))

    @property
    def dim(self) -> int:
        return self.A.shape[0]

    def points_in_ball(self, radius: float, center=None) -> np.ndarray:
        """Lattice points with ``|x - center| <= radius``, lexicographically sorted."""
        c = np.zeros(self.dim) if center is None else np.asarray(center, float)
        smin = np.linalg.svd(self.A, compute_uv=False).min()
        reach = int(math.ceil((radius + np.linalg.norm(c)) / smin)) + 1
        axes = [np.arange(-reach, reach + 1)] * self.dim
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, self.dim)
        pts = grid @ self.A.T
        keep = np.linalg.norm(pts - c, axis=1) <= radius + 1e-12
        return lexsorted(pts[keep])


def lexsorted(points: np.ndarray) -> np.ndarray:
    pts = np.asarray(points, dtype=float)
    rounded = np.round(pts, 12)
    order = np.lexsort(rounded.T[::-1])
    return pts[order]


@dataclass(frozen=True)
class DefectKind:
    """``none``, ``vacancy`` (removes ``where``) or ``interstitial`` (adds ``where``)."""

    name: str = "none"
    where: tuple = ()

    def __post_init__(self):
        if self.name not in ("none", "vacancy", "interstitial"):
            raise ValueError(f"unknown defect kind {self.name!r}")

    @classmethod
    def vacancy(cls, site=None):
        return cls("vacancy", tuple(np.atleast_1d(site if site is not None else 0.0).astype(float)))

    @classmethod
    def interstitial(cls, position):
        return cls("interstitial", tuple(np.atleast_1d(position).astype(float)))


@dataclass(frozen=True)
class ReferenceConfig:
    sites: np.ndarray
    lattice: BravaisLattice
    defect: DefectKind = field(default_factory=DefectKind)
    defect_core_radius: float = 0.0

    @property
    def n_sites(self) -> int:
        return len(self.sites)

    @property
    def dim(self) -> int:
        return self.lattice.dim

    def radii(self) -> np.ndarray:
        return np.linalg.norm(self.sites, axis=1)


def build_point_defect(lattice: BravaisLattice, R_total: float, kind: DefectKind | None = None,
                       core_radius: float = 1.0) -> ReferenceConfig:
    """All lattice sites in ``B_{R_total}`` with the defect applied at the core."""
    kind = kind or DefectKind()
    if R_total <= core_radius:
        raise ValueError("R_total must exceed the defect core radius")
    sites = lattice.points_in_ball(R_total)
    if kind.name == "none":
        return ReferenceConfig(sites, lattice, kind, core_radius)
    where = np.asarray(kind.where, dtype=float)
    if where.shape != (lattice.dim,):
        raise InvalidDefectError("defect position has the wrong dimension")
    if np.linalg.norm(where) > core_radius:
        raise InvalidDefectError("defect lies outside the core ball")
    if kind.name == "vacancy":
        hit = np.flatnonzero(np.linalg.norm(sites - where, axis=1) < 1e-9)
        if len(hit) != 1:
            raise InvalidDefectError("vacancy position is not a lattice site")
        sites = np.delete(sites, hit[0], axis=0)
    else:
        if np.min(np.linalg.norm(sites - where, axis=1)) < 1e-9:
            raise InvalidDefectError("interstitial coincides with a lattice site")
        sites = lexsorted(np.vstack([sites, where]))
    return ReferenceConfig(sites, lattice, kind, core_radius)


def buffer_width(R: float, c_b: float = 4.0, minimum: float = 8.0) -> float:
    """Clamped buffer ``R_b = max(minimum, c_b log R)``."""
    return max(minimum, c_b * math.log(R))


def partition_clamped(ref: ReferenceConfig, R: float, R_b: float):
    """Indices of free sites (``|l| <= R``) and clamped sites (``R < |l| <= R + R_b``).

    Sites beyond ``R + R_b`` are in neither set.
    """
    if R <= 0 or R_b <= 0:
        raise ValueError("R and R_b must be positive")
    r = ref.radii()
    free = np.flatnonzero(r <= R + 1e-12)
    clamped = np.flatnonzero((r > R + 1e-12) & (r <= R + R_b + 1e-12))
    return free, clamped


def clamped_domain(lattice: BravaisLattice, R: float, R_b: float | None = None,
                   kind: DefectKind | None = None, core_radius: float = 1.0):
    """Reference sites of ``B_{R+R_b}`` and the boolean free-site mask."""
    R_b = buffer_width(R) if R_b is None else R_b
    ref = build_point_defect(lattice, R + R_b, kind, core_radius)
    free, _ = partition_clamped(ref, R, R_b)
    mask = np.zeros(ref.n_sites, dtype=bool)
    mask[free] = True
    return ref, mask


def torus_sites(lattice: BravaisLattice, L: int, kind: DefectKind | None = None):
    """Sites of the periodic cell ``A [0, L)^d`` centred on the origin.

    Returns ``(sites, B_cell)``; the defect is applied at the origin.
    """
    d = lattice.dim
    half = L // 2
    grid = np.array(list(itertools.product(range(-half, L - half), repeat=d)), dtype=float)
    sites = lexsorted(grid @ lattice.A.T)
    kind = kind or DefectKind()
    if kind.name == "vacancy":
        hit = np.flatnonzero(np.linalg.norm(sites - np.asarray(kind.where), axis=1) < 1e-9)
        if len(hit) != 1:
            raise InvalidDefectError("vacancy position is not a lattice site")
        sites = np.delete(sites, hit[0], axis=0)
    elif kind.name == "interstitial":
        sites = lexsorted(np.vstack([sites, np.asarray(kind.where, float)]))
    return sites, L * lattice.A


def torus_distance(p, q, B_cell, Rc: float | None = None) -> float:
    """Minimum-image distance ``min_a |p - q + B a|`` over ``a`` in ``{-1,0,1}^d``.

    Positions are first reduced into the cell. With ``Rc`` given, a cell
    narrower than ``2 Rc`` raises ``ConfigurationError``.
    """
    B = np.atleast_2d(np.asarray(B_cell, dtype=float))
    from .hamiltonian import cell_widths

    if Rc is not None and np.any(cell_widths(B.T) <= 2 * Rc):
        raise ConfigurationError("cell must be wider than 2*Rc")
    diff = np.atleast_1d(np.asarray(p, float) - np.asarray(q, float))
    frac = np.linalg.solve(B, diff)
    diff = B @ (frac - np.round(frac))
    best = np.inf
    for alpha in itertools.product((-1, 0, 1), repeat=B.shape[0]):
        best = min(best, float(np.linalg.norm(diff + B @ np.array(alpha))))
    return best


# ---------------------------------------------------------------------------
# Displacement seminorms
# ---------------------------------------------------------------------------

def truncation_radius(gamma: float, tol: float = 1e-16) -> float:
    """Smallest radius with ``exp(-2 gamma r) < tol``."""
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    return -math.log(tol) / (2.0 * gamma)


def strain_weights(sites: np.ndarray, gamma: float):
    """Pairs ``(l, k)`` with ``|k - l| < R_trunc`` and weights ``exp(-2 gamma |k-l|)``."""
    sites = _column(sites)
    tree = cKDTree(sites)
    rt = truncation_radius(gamma)
    m = tree.sparse_distance_matrix(tree, rt, output_type="ndarray")
    keep = m["i"] != m["j"]
    i, j, r = m["i"][keep].astype(int), m["j"][keep].astype(int), m["v"][keep]
    return i, j, np.exp(-2.0 * gamma * r)


def site_strain(sites, u, gamma: float) -> np.ndarray:
    """Per-site ``|Du(l)|_gamma`` with differences taken over the given sites."""
    sites = _column(sites)
    u = _column(u)
    i, j, w = strain_weights(sites, gamma)
    d2 = np.sum((u[j] - u[i]) ** 2, axis=1) * w
    return np.sqrt(np.bincount(i, d2, len(sites)))


@dataclass(frozen=True)
class Seminorms:
    per_site: np.ndarray
    l2: float
    l1: float


def seminorms(sites, u, gamma: float, subset=None) -> Seminorms:
    """``|Du(l)|_gamma`` per site and the ``l2`` / ``l1`` aggregates over ``subset``."""
    per = site_strain(sites, u, gamma)
    sel = per if subset is None else per[np.asarray(subset)]
    return Seminorms(per, float(np.sqrt(np.sum(sel ** 2))), float(np.sum(sel)))


def _column(a) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    return a[:, None] if a.ndim == 1 else a


# ---------------------------------------------------------------------------
# Configurations
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Violation:
    i: int
    j: int
    ratio: float


@dataclass(frozen=True)
class ValidationReport:
    ok: bool
    worst_ratio: float
    violations: tuple

    def __bool__(self):
        return self.ok


def validate_configuration(sites, u, m_accum: float, Rc: float | None = None) -> ValidationReport:
    """Check ``|y(l) - y(k)| >= m |l - k|`` over all pairs (or pairs within ``Rc``).

    Never raises; the report lists every violating pair.
    """
    sites = _column(sites)
    y = sites + _column(u)
    n = len(sites)
    if n < 2:
        return ValidationReport(True, 1.0, ())
    if Rc is None:
        iu, ju = np.triu_indices(n, 1)
    else:
        pairs = np.vstack([cKDTree(sites).query_pairs(Rc, output_type="ndarray").reshape(-1, 2),
                           cKDTree(y).query_pairs(Rc, output_type="ndarray").reshape(-1, 2)])
        pairs = np.unique(np.sort(pairs, axis=1), axis=0)
        iu, ju = pairs[:, 0], pairs[:, 1]
    ref = np.linalg.norm(sites[ju] - sites[iu], axis=1)
    cur = np.linalg.norm(y[ju] - y[iu], axis=1)
    if not len(ref):
        return ValidationReport(True, 1.0, ())
    ratio = cur / ref
    bad = np.flatnonzero(ratio < m_accum)
    viol = tuple(Violation(int(iu[b]), int(ju[b]), float(ratio[b])) for b in bad)
    return ValidationReport(not viol, float(ratio.min()), viol)


@dataclass(frozen=True)
class DefectConfiguration:
    """Reference sites, displacement and boundary regime.

    ``free`` marks sites that may move; clamped sites keep ``u = 0``.
    ``periods`` lists the translation vectors of periodic directions.
    """

    sites: np.ndarray
    u: np.ndarray
    free: np.ndarray
    periods: np.ndarray | None = None
    bc: str = "clamped"

    @property
    def positions(self) -> np.ndarray:
        return _column(self.sites) + _column(self.u)

    @property
    def n_sites(self) -> int:
        return len(self.sites)

    def with_u(self, u) -> "DefectConfiguration":
        u = np.array(_column(u), dtype=float)
        if np.any(u[~self.free] != 0):
            raise ValueError("clamped sites must have zero displacement")
        return replace(self, u=u)

    def write_table(self, path) -> None:
        """Text table ``index, l_*, u_*, clamped``."""
        s, u = _column(self.sites), _column(self.u)
        d = s.shape[1]
        names = ["index"] + [f"l_{a}" for a in "xyz"[:d]] + [f"u_{a}" for a in "xyz"[:u.shape[1]]]
        names.append("clamped")
        rows = np.column_stack([np.arange(len(s)), s, u, (~self.free).astype(int)])
        np.savetxt(path, rows, fmt="%.17g", delimiter=",", header=",".join(names), comments="# ")

    @classmethod
    def read_table(cls, path, u_dim: int | None = None) -> "DefectConfiguration":
        with open(path) as fh:
            header = fh.readline().lstrip("# ").strip().split(",")
        data = np.loadtxt(path, delimiter=",", ndmin=2)
        ls = [k for k, h in enumerate(header) if h.startswith("l_")]
        us = [k for k, h in enumerate(header) if h.startswith("u_")]
        return cls(data[:, ls], data[:, us], data[:, -1] == 0)


def clamped_configuration(lattice: BravaisLattice, R: float, R_b: float | None = None,
                          kind: DefectKind | None = None) -> DefectConfiguration:
    ref, mask = clamped_domain(lattice, R, R_b, kind)
    return DefectConfiguration(ref.sites, np.zeros_like(ref.sites), mask)


def torus_configuration(lattice: BravaisLattice, L: int,
                        kind: DefectKind | None = None) -> DefectConfiguration:
    sites, B = torus_sites(lattice, L, kind)
    return DefectConfiguration(sites, np.zeros_like(sites), np.ones(len(sites), bool),
                               periods=B.T, bc="torus")
