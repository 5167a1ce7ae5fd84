"""Tight-binding Hamiltonian assembly and its position derivatives.

Interactions are held as a bond list: one entry per unordered interaction
``(i, j, s)`` meaning site ``i`` sees the image ``y[j] + s`` of site ``j``.
Open clusters only have ``s = 0``; periodic geometries add lattice shifts
and self-image entries ``i == j``. Each entry contributes ``hop`` to both
``H[i, j]`` and ``H[j, i]`` and ``rho`` to both on-site densities.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from .model import ModelParams, hop, hop_prime, ons, ons_prime, rho, rho_prime


class ConfigurationError(ValueError):
    """Geometry violates a precondition of the requested assembly."""


@dataclass(frozen=True)
class Bonds:
    i: np.ndarray
    j: np.ndarray
    vec: np.ndarray  # y[j] + shift - y[i]
    n_sites: int

    @property
    def r(self) -> np.ndarray:
        return np.linalg.norm(self.vec, axis=1)

    @property
    def moving(self) -> np.ndarray:
        """Mask of entries whose length depends on the configuration."""
        return self.i != self.j


def _as_positions(y) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    return y


def cell_widths(periods: np.ndarray) -> np.ndarray:
    """Distance between opposite faces of the cell spanned by ``periods``."""
    periods = np.atleast_2d(periods)
    widths = []
    for a in range(len(periods)):
        others = np.delete(periods, a, axis=0)
        v = periods[a]
        if len(others):
            # component of v orthogonal to the span of the other vectors
            q, _ = np.linalg.qr(others.T)
            v = v - q @ (q.T @ v)
        widths.append(np.linalg.norm(v))
    return np.array(widths)


def neighbour_bonds(y, Rc: float, periods=None, *, strict_torus: bool = False) -> Bonds:
    """All interactions closer than ``Rc``.

    ``periods`` is a ``(p, D)`` array of translation vectors (rows). With
    ``strict_torus`` the cell must be wider than ``2 Rc`` in every periodic
    direction so that each pair interacts through at most one image.
    """
    y = _as_positions(y)
    n, dim = y.shape
    if periods is None or len(np.atleast_2d(periods)) == 0:
        tree = cKDTree(y)
        pairs = tree.query_pairs(Rc, output_type="ndarray")
        if len(pairs) == 0:
            pairs = np.zeros((0, 2), dtype=int)
        i, j = pairs[:, 0], pairs[:, 1]
        return Bonds(i, j, y[j] - y[i], n)

    periods = np.atleast_2d(np.asarray(periods, dtype=float))
    if periods.shape[1] != dim:
        raise ConfigurationError("period vectors must match the position dimension")
    widths = cell_widths(periods)
    if strict_torus and np.any(widths <= 2 * Rc):
        raise ConfigurationError(
            f"cell width {widths.min():.4g} must exceed 2*Rc = {2 * Rc:.4g}"
        )
    # wrap every site by a lattice translation of the cell; interactions are
    # sums over all images, so this does not change the model
    coef = np.linalg.lstsq(periods.T, y.T, rcond=None)[0].T
    wrapped = y - np.floor(coef) @ periods
    reach = 1 + np.ceil(Rc / widths).astype(int)
    tree = cKDTree(wrapped)
    is_, js, vs = [], [], []
    for alpha in itertools.product(*[range(-k, k + 1) for k in reach]):
        alpha = np.array(alpha)
        nz = np.flatnonzero(alpha)
        if len(nz) and alpha[nz[0]] < 0:
            continue  # (i, j, -s) duplicates (j, i, s)
        shift = alpha @ periods
        if not len(nz):
            pairs = tree.query_pairs(Rc, output_type="ndarray")
            if len(pairs) == 0:
                continue
            a, b = pairs[:, 0], pairs[:, 1]
        else:
            other = cKDTree(wrapped + shift)
            m = tree.sparse_distance_matrix(other, Rc, output_type="ndarray")
            if len(m) == 0:
                continue
            a, b = m["i"].astype(int), m["j"].astype(int)
        is_.append(a)
        js.append(b)
        vs.append(wrapped[b] + shift - wrapped[a])
    if not is_:
        return Bonds(np.zeros(0, int), np.zeros(0, int), np.zeros((0, dim)), n)
    i = np.concatenate(is_)
    j = np.concatenate(js)
    vec = np.concatenate(vs)
    keep = np.linalg.norm(vec, axis=1) < Rc
    order = np.lexsort((j[keep], i[keep]))
    return Bonds(i[keep][order], j[keep][order], vec[keep][order], n)


def onsite_density(bonds: Bonds, p: ModelParams) -> np.ndarray:
    w = rho(bonds.r, p) if len(bonds.i) else np.zeros(0)
    n = bonds.n_sites
    return np.bincount(bonds.i, w, n) + np.bincount(bonds.j, w, n)


def assemble(y, p: ModelParams, periods=None, *, bonds: Bonds | None = None,
             strict_torus: bool = False) -> np.ndarray:
    """Dense symmetric Hamiltonian for positions ``y``."""
    if bonds is None:
        bonds = neighbour_bonds(y, p.Rc, periods, strict_torus=strict_torus)
    n = bonds.n_sites
    H = np.zeros((n, n))
    if len(bonds.i):
        t = hop(bonds.r, p)
        np.add.at(H, (bonds.i, bonds.j), t)
        np.add.at(H, (bonds.j, bonds.i), t)
    H[np.diag_indices(n)] += ons(onsite_density(bonds, p), p)
    return H


def assemble_open(y, p: ModelParams) -> np.ndarray:
    """Hamiltonian of a finite cluster (no periodic images)."""
    return assemble(y, p)


def assemble_torus(y, B_cell, p: ModelParams) -> np.ndarray:
    """Hamiltonian of the torus model with supercell columns ``B_cell``.

    Requires every cell width to exceed ``2 Rc``.
    """
    B = np.atleast_2d(np.asarray(B_cell, dtype=float))
    return assemble(y, p, B.T, strict_torus=True)


def _bond_coefficients(bonds: Bonds, p: ModelParams, P_bond, P_diag):
    """Scalar ``dTr(P H)/dr`` per bond at fixed ``P``."""
    r = bonds.r
    z = onsite_density(bonds, p)
    dz = ons_prime(z, p)
    c = 2.0 * P_bond * hop_prime(r, p)
    c = c + (P_diag[bonds.i] * dz[bonds.i] + P_diag[bonds.j] * dz[bonds.j]) * rho_prime(r, p)
    return np.where(bonds.moving, c, 0.0)


def trace_gradient(bonds: Bonds, p: ModelParams, P_bond, P_diag) -> np.ndarray:
    """Gradient of ``Tr(P H(y))`` in ``y`` with the matrix ``P`` held fixed.

    ``P_bond[e]`` is ``P[i_e, j_e]`` and ``P_diag`` the diagonal of ``P``.
    Returns an ``(N, D)`` array.
    """
    n, dim = bonds.n_sites, bonds.vec.shape[1]
    grad = np.zeros((n, dim))
    if not len(bonds.i):
        return grad
    r = bonds.r
    c = _bond_coefficients(bonds, p, P_bond, P_diag)
    unit = bonds.vec / r[:, None]
    contrib = c[:, None] * unit
    for a in range(dim):
        grad[:, a] += np.bincount(bonds.j, contrib[:, a], n)
        grad[:, a] -= np.bincount(bonds.i, contrib[:, a], n)
    return grad


def d_hamiltonian(y, p: ModelParams, m: int, axis: int, periods=None,
                  bonds: Bonds | None = None) -> sp.csr_matrix:
    """Analytic ``dH/d[y(m)]_axis`` as a sparse symmetric matrix."""
    y = _as_positions(y)
    n, dim = y.shape
    if not 0 <= m < n:
        raise IndexError(f"site {m} out of range for {n} sites")
    if not 0 <= axis < dim:
        raise IndexError(f"axis {axis} out of range for dimension {dim}")
    if bonds is None:
        bonds = neighbour_bonds(y, p.Rc, periods)
    rows, cols, vals = [], [], []
    if len(bonds.i):
        r = bonds.r
        touch = bonds.moving & ((bonds.i == m) | (bonds.j == m))
        # d r_e / d y_m along axis: +unit if m is the j end, -unit if the i end
        sgn = np.where(bonds.j == m, 1.0, 0.0) - np.where(bonds.i == m, 1.0, 0.0)
        dr = sgn * bonds.vec[:, axis] / r
        dr = np.where(touch, dr, 0.0)
        sel = np.flatnonzero(touch)
        dh = hop_prime(r[sel], p) * dr[sel]
        rows += [bonds.i[sel], bonds.j[sel]]
        cols += [bonds.j[sel], bonds.i[sel]]
        vals += [dh, dh]
        z = onsite_density(bonds, p)
        dz = ons_prime(z, p)
        drho = rho_prime(r[sel], p) * dr[sel]
        rows += [bonds.i[sel], bonds.j[sel]]
        cols += [bonds.i[sel], bonds.j[sel]]
        vals += [dz[bonds.i[sel]] * drho, dz[bonds.j[sel]] * drho]
    if not rows:
        return sp.csr_matrix((n, n))
    D = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    )
    return D.tocsr()


def bloch_hamiltonian(p: ModelParams, lattice, k, chunk: int = 1 << 20):
    """Scalar Bloch Hamiltonian of the homogeneous lattice at wavevector ``k``.

    ``lattice`` is a ``(D, D)`` matrix whose columns are lattice vectors.
    Accepts a single ``k`` (shape ``(D,)``) or a stack ``(M, D)``.
    """
    vecs = lattice_vectors_within(lattice, p.Rc)
    r = np.linalg.norm(vecs, axis=1)
    z = rho(r, p).sum() if len(r) else 0.0
    onsite = ons(z, p)
    k = np.asarray(k, dtype=float)
    single = k.ndim == 1
    k = np.atleast_2d(k)
    if not len(r):
        out = np.full(len(k), float(onsite))
        return out[0] if single else out
    t = hop(r, p)
    out = np.empty(len(k))
    step = max(1, chunk // len(r))
    for a in range(0, len(k), step):
        val = onsite + np.exp(1j * k[a:a + step] @ vecs.T) @ t
        if np.max(np.abs(val.imag)) > 1e-12:
            raise ArithmeticError("Bloch Hamiltonian is not real; lattice lacks inversion symmetry?")
        out[a:a + step] = val.real
    return float(out[0]) if single else out


def lattice_vectors_within(lattice, radius: float) -> np.ndarray:
    """Nonzero lattice vectors ``A n`` with ``|A n| < radius``."""
    A = np.atleast_2d(np.asarray(lattice, dtype=float))
    dim = A.shape[0]
    # bound the integer range through the smallest singular value of A
    smin = np.linalg.svd(A, compute_uv=False).min()
    nmax = int(np.ceil(radius / smin))
    grid = np.array(list(itertools.product(range(-nmax, nmax + 1), repeat=dim)), dtype=float)
    vecs = grid @ A.T
    r = np.linalg.norm(vecs, axis=1)
    keep = (r > 0) & (r < radius)
    return vecs[keep]
