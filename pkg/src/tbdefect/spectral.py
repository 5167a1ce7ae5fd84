"""Eigendecomposition and resolvent contour quadrature of matrix functions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .model import QoIKind, kernel


class QuadratureError(RuntimeError):
    """Contour quadrature did not reach its tolerance."""


class IllConditionedError(ValueError):
    """Resolvent requested too close to the spectrum."""


@dataclass(frozen=True)
class SpectralData:
    """Ascending eigenvalues and orthonormal eigenvectors (columns)."""

    values: np.ndarray
    vectors: np.ndarray

    @property
    def size(self) -> int:
        return len(self.values)

    def weights(self, site: int) -> np.ndarray:
        """Local density-of-states weights ``[psi_s]_l^2``."""
        return self.vectors[site] ** 2


def _check_symmetric(H: np.ndarray) -> np.ndarray:
    H = np.asarray(H, dtype=float)
    if H.ndim != 2 or H.shape[0] != H.shape[1]:
        raise ValueError("matrix must be square")
    scale = max(1.0, float(np.max(np.abs(H)))) if H.size else 1.0
    if not np.allclose(H, H.T, rtol=0.0, atol=1e-12 * scale):
        raise ValueError("matrix is not symmetric")
    return H


def eig_sym(H) -> SpectralData:
    """Full symmetric eigendecomposition.

    Each eigenvector is signed so that its first entry above ``1e-12`` in
    magnitude is positive.
    """
    H = _check_symmetric(H)
    lam, psi = np.linalg.eigh(H)
    big = np.abs(psi) > 1e-12
    first = np.argmax(big, axis=0)
    signs = np.sign(psi[first, np.arange(psi.shape[1])])
    signs[signs == 0] = 1.0
    return SpectralData(lam, psi * signs)


@dataclass(frozen=True)
class Contour:
    """Counter-clockwise rectangle ``[lo, hi] x [-h, h]`` in the complex plane.

    Sides are split into Gauss-Legendre panels of fixed order; ``n_panels``
    is the number of panels on the shortest side and doubles on refinement.
    """

    lo: float
    hi: float
    half_height: float
    n_panels: int = 2
    order: int = 16

    @classmethod
    def around(cls, values, beta: float, margin: float = 1.0, height_fraction: float = 0.5,
               n_panels: int = 2) -> "Contour":
        values = np.asarray(values, dtype=float)
        return cls(values.min() - margin, values.max() + margin,
                   height_fraction * np.pi / beta, n_panels)

    def validate(self, beta: float, values=None) -> None:
        if not 0 < self.half_height < np.pi / beta:
            raise ValueError("contour half-height must lie in (0, pi/beta)")
        if values is not None:
            v = np.asarray(values)
            if v.min() <= self.lo or v.max() >= self.hi:
                raise ValueError("contour must enclose the spectrum")

    @property
    def n_nodes(self) -> int:
        return len(self.nodes()[0])

    def refined(self) -> "Contour":
        return Contour(self.lo, self.hi, self.half_height, 2 * self.n_panels, self.order)

    def nodes(self):
        """Quadrature nodes ``z`` and weights ``w`` such that ``sum w f(z)`` approximates the loop integral."""
        h = self.half_height
        corners = [complex(self.lo, -h), complex(self.hi, -h),
                   complex(self.hi, h), complex(self.lo, h)]
        x, wx = np.polynomial.legendre.leggauss(self.order)
        short = min(self.hi - self.lo, 2 * h)
        zs, ws = [], []
        for a, b in zip(corners, corners[1:] + corners[:1]):
            length = abs(b - a)
            npan = max(1, int(np.ceil(self.n_panels * length / short)))
            edges = np.linspace(0.0, 1.0, npan + 1)
            for s0, s1 in zip(edges[:-1], edges[1:]):
                t = 0.5 * (s1 - s0) * x + 0.5 * (s1 + s0)
                zs.append(a + (b - a) * t)
                ws.append((b - a) * 0.5 * (s1 - s0) * wx)
        return np.concatenate(zs), np.concatenate(ws)


def _resolvent_traces(H: np.ndarray, z: np.ndarray, site: int | None) -> np.ndarray:
    n = H.shape[0]
    out = np.empty(len(z), dtype=complex)
    eye = np.eye(n)
    for k, zk in enumerate(z):
        lu = sla.lu_factor(H - zk * eye, check_finite=False)
        if site is None:
            out[k] = np.trace(sla.lu_solve(lu, eye, check_finite=False))
        else:
            e = np.zeros(n)
            e[site] = 1.0
            out[k] = sla.lu_solve(lu, e, check_finite=False)[site]
    return out


def _contour_qoi(H, kind, tau, beta, contour, site, tol, max_nodes):
    H = _check_symmetric(H)
    kind = QoIKind.parse(kind)
    if contour is None:
        contour = Contour.around(np.linalg.eigvalsh(H), beta)
    contour.validate(beta)
    prev = None
    while True:
        z, w = contour.nodes()
        if len(z) > max_nodes:
            raise QuadratureError(f"no convergence with {max_nodes} nodes")
        vals = kernel(kind, z, tau, beta) * _resolvent_traces(H, z, site) * w
        # fixed-order pairwise summation keeps results bit-stable
        total = float(np.real(-np.sum(vals) / (2j * np.pi)))
        if prev is not None and abs(total - prev) <= tol * max(1.0, abs(total)):
            return total
        prev = total
        contour = contour.refined()


def trace_qoi_contour(H, kind, tau: float, beta: float, contour: Contour | None = None,
                      tol: float = 1e-10, max_nodes: int = 1 << 14) -> float:
    """``-(1/2 pi i) \\oint a(z, tau) Tr (H - z)^{-1} dz`` with panel doubling."""
    return _contour_qoi(H, kind, tau, beta, contour, None, tol, max_nodes)


def local_qoi_contour(H, site: int, kind, tau: float, beta: float,
                      contour: Contour | None = None, tol: float = 1e-10,
                      max_nodes: int = 1 << 14) -> float:
    """Contour value of the local QoI at ``site`` via the diagonal resolvent entry."""
    n = np.asarray(H).shape[0]
    if not 0 <= site < n:
        raise IndexError(f"site {site} out of range")
    return _contour_qoi(H, kind, tau, beta, contour, site, tol, max_nodes)


def resolvent_decay_probe(H, z: complex, site: int, positions=None):
    """Distances and magnitudes ``|[(H - z)^{-1}]_{l k}|`` for all ``k``.

    Without ``positions`` the index distance ``|k - l|`` is used.
    """
    H = _check_symmetric(H)
    n = H.shape[0]
    gap = np.min(np.abs(np.linalg.eigvalsh(H) - z))
    if abs(np.imag(z)) == 0 or gap < 1e-8:
        raise IllConditionedError("z is too close to the spectrum")
    e = np.zeros(n)
    e[site] = 1.0
    col = np.linalg.solve(H - z * np.eye(n), e)
    if positions is None:
        r = np.abs(np.arange(n) - site).astype(float)
    else:
        p = np.asarray(positions, dtype=float)
        p = p[:, None] if p.ndim == 1 else p
        r = np.linalg.norm(p - p[site], axis=1)
    return r, np.abs(col)
