"""Anti-plane screw dislocation in a projected two-dimensional lattice.

Each site ``l`` of the in-plane lattice carries the 3D position
``(l, u0(l) + u(l))``. The crystal is periodic along ``e3`` with period
``b3``; every pair interacts through all of its out-of-plane images within
the cutoff, so the Hamiltonian only sees heights modulo ``b3``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .equilibrium import (EquilibriumProblem, SolverOptions, homogeneous_force_constants,
                          solve_canonical)
from .lattice import BravaisLattice, InvalidDefectError, lexsorted, site_strain, torus_sites
from .model import ModelParams, QoIKind
from .observables import ElectronicState, fermi_level_bloch, local_qoi

TRIANGULAR = np.array([[1.0, 0.5], [0.0, math.sqrt(3.0) / 2.0]])

# Anti-plane stable parameters for the triangular lattice with b3 = 2: the
# diagonal images at distance sqrt(1 + b3^2) fall outside the cutoff.
SCREW_PARAMS = ModelParams(q_hop=2.0, q_rho=4.0, c1=0.05, Rc=1.6)


def _eta(s):
    """Smooth step: 0 for ``s <= 0``, 1 for ``s >= 1``."""
    s = np.clip(np.asarray(s, float), 0.0, 1.0)
    with np.errstate(divide="ignore", over="ignore"):
        a = np.where(s > 0, np.exp(-1.0 / np.where(s > 0, s, 1.0)), 0.0)
        b = np.where(s < 1, np.exp(-1.0 / np.where(s < 1, 1.0 - s, 1.0)), 0.0)
    return a / (a + b)


@dataclass(frozen=True)
class ScrewDislocation:
    """Core ``x_hat``, Burgers component ``b3`` and the projected lattice.

    ``b12`` is the in-plane Burgers vector; it is zero for a pure screw and
    then the slip relabelling is the identity.
    """

    lattice: BravaisLattice = field(default_factory=lambda: BravaisLattice(TRIANGULAR))
    b3: float = 2.0
    core: tuple = (0.5, math.sqrt(3.0) / 6.0)
    r_core: float = 2.0
    b12: tuple = (0.0, 0.0)
    cut: str = "right"

    def __post_init__(self):
        if self.lattice.dim != 2:
            raise ValueError("the projected lattice must be two-dimensional")
        if not self.b3 > 0:
            raise ValueError("b3 must be positive")
        if self.cut not in ("right", "left"):
            raise ValueError("cut must be 'right' or 'left'")
        self.check_cut(50.0)

    @property
    def x_hat(self) -> np.ndarray:
        return np.asarray(self.core, float)

    @property
    def crystal(self) -> np.ndarray:
        """3D lattice matrix: the projected lattice plus ``b3 e3``."""
        A3 = np.zeros((3, 3))
        A3[:2, :2] = self.lattice.A
        A3[2, 2] = self.b3
        return A3

    @property
    def periods(self) -> np.ndarray:
        return np.array([[0.0, 0.0, self.b3]])

    def check_cut(self, radius: float) -> None:
        """Raise if a site within ``radius`` of the core lies on the branch cut."""
        pts = self.lattice.points_in_ball(radius, self.x_hat)
        on_line = np.abs(pts[:, 1] - self.x_hat[1]) < 1e-9
        side = pts[:, 0] >= self.x_hat[0] if self.cut == "right" else pts[:, 0] <= self.x_hat[0]
        if np.any(on_line & side):
            raise InvalidDefectError("branch cut passes through a lattice site")

    # -- predictor ----------------------------------------------------------

    def angle(self, x) -> np.ndarray:
        """``arg(x - x_hat)`` in ``(0, 2 pi)`` (right cut) or ``(-pi, pi)`` (left cut)."""
        d = np.atleast_2d(np.asarray(x, float)) - self.x_hat
        if np.any(np.hypot(d[:, 0], d[:, 1]) == 0):
            raise ValueError("predictor is singular at the core")
        th = np.arctan2(d[:, 1], d[:, 0])
        if self.cut == "right":
            th = np.where(th <= 0, th + 2 * np.pi, th)
        return th

    def xi(self, x) -> np.ndarray:
        """Core-regularised in-plane map; the identity when ``b12 = 0``."""
        x = np.atleast_2d(np.asarray(x, float))
        b12 = np.asarray(self.b12, float)
        if not np.any(b12):
            return x.copy()
        r = np.linalg.norm(x - self.x_hat, axis=1)
        return x - np.outer(_eta(r / self.r_core) * self.angle(x) / (2 * np.pi), b12)

    def predictor(self, x) -> np.ndarray:
        """Out-of-plane displacement ``u0(x) = b3 arg(x - x_hat) / (2 pi)``."""
        x = np.atleast_2d(np.asarray(x, float))
        if np.any(self.b12):
            raise NotImplementedError("only the pure screw predictor is implemented")
        return self.b3 * self.angle(x) / (2 * np.pi)

    def slipped_predictor(self, x) -> np.ndarray:
        """``S0 u0``: the predictor shifted by ``-b3`` below the slip plane."""
        x = np.atleast_2d(np.asarray(x, float))
        below = x[:, 1] < self.x_hat[1]
        return self.predictor(x) - np.where(below, self.b3, 0.0)

    def in_slip_region(self, x) -> np.ndarray:
        """Sites of ``Omega_Gamma``, where the slipped predictor is smooth."""
        x = np.atleast_2d(np.asarray(x, float))
        return x[:, 0] > self.x_hat[0] + self.r_core + self.b12[0]

    # -- strains ------------------------------------------------------------

    def elastic_strain(self, sites, offsets) -> np.ndarray:
        """``e_rho(l)`` for every site (rows) and lattice offset (columns)."""
        sites = np.atleast_2d(np.asarray(sites, float))
        offsets = np.atleast_2d(np.asarray(offsets, float))
        out = np.empty((len(sites), len(offsets)))
        slip = self.in_slip_region(sites)
        for c, rho in enumerate(offsets):
            plain = self.predictor(sites + rho) - self.predictor(sites)
            slipped = self.slipped_predictor(sites + rho) - self.slipped_predictor(sites)
            out[:, c] = np.where(slip, slipped, plain)
        return out

    def nearest_offsets(self) -> np.ndarray:
        """The shortest nonzero lattice vectors."""
        pts = self.lattice.points_in_ball(1.5 * np.linalg.norm(self.lattice.A[:, 0]))
        r = np.linalg.norm(pts, axis=1)
        rmin = r[r > 1e-12].min()
        return pts[np.abs(r - rmin) < 1e-9]


def slip_map(disl: ScrewDislocation, sites, u, inverse: bool = False) -> np.ndarray:
    """``S u`` (or ``S* u``): relabel the lower half-plane by ``-b12`` (``+b12``)."""
    sites = np.atleast_2d(np.asarray(sites, float))
    u = np.asarray(u, float)
    b12 = np.asarray(disl.b12, float)
    if not np.any(b12):
        return u.copy()
    index = {tuple(np.round(s, 9)): k for k, s in enumerate(sites)}
    out = np.full_like(u, np.nan)
    sign = 1.0 if inverse else -1.0
    for k, s in enumerate(sites):
        src = s if s[1] > disl.x_hat[1] else s + sign * b12
        j = index.get(tuple(np.round(src, 9)))
        if j is not None:
            out[k] = u[j]
    return out


def predictor_strain_decay(disl: ScrewDislocation, radius: float):
    """``(|l - x_hat|, max_sigma |e_sigma(l)|)`` over nearest-neighbour ``sigma``."""
    sites = disl.lattice.points_in_ball(radius, disl.x_hat)
    e = disl.elastic_strain(sites, disl.nearest_offsets())
    return np.linalg.norm(sites - disl.x_hat, axis=1), np.max(np.abs(e), axis=1)


# ---------------------------------------------------------------------------
# Finite domain
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DislocationDomain:
    """Sites of ``B_{R+R_b}(x_hat)`` with the predictor and the free mask."""

    disl: ScrewDislocation
    sites: np.ndarray
    free: np.ndarray
    u0: np.ndarray

    @property
    def base(self) -> np.ndarray:
        return np.column_stack([self.sites, self.u0])

    def positions(self, u=None) -> np.ndarray:
        y = self.base
        if u is not None:
            y[:, 2] += np.asarray(u, float).reshape(-1)
        return y

    def write_predictor(self, path) -> None:
        rows = np.column_stack([np.arange(len(self.sites)), self.sites, self.u0])
        np.savetxt(path, rows, fmt="%.17g", delimiter=",", header="index,l_x,l_y,u0_z",
                   comments="# ")


def dislocation_domain(disl: ScrewDislocation, R: float, R_b: float) -> DislocationDomain:
    if R <= 0 or R_b <= 0:
        raise ValueError("R and R_b must be positive")
    disl.check_cut(R + R_b + 1.0)
    sites = lexsorted(disl.lattice.points_in_ball(R + R_b, disl.x_hat))
    r = np.linalg.norm(sites - disl.x_hat, axis=1)
    return DislocationDomain(disl, sites, r <= R + 1e-12, disl.predictor(sites))


def dislocation_problem(domain: DislocationDomain, params: ModelParams,
                        Ne: float | None = None) -> EquilibriumProblem:
    """Canonical anti-plane problem: only the heights of free sites move."""
    return EquilibriumProblem(domain.base, domain.free, params, Ne=Ne,
                              periods=domain.disl.periods, axes=(2,), sites=domain.sites)


def screw_fermi_level(disl: ScrewDislocation, params: ModelParams, **kw):
    """Homogeneous Fermi level of the projected crystal (``k3 = 0`` only)."""
    return fermi_level_bloch(params, disl.crystal, fixed_axes=(2,), **kw)


def screw_force_constants(disl: ScrewDislocation, params: ModelParams, L: int = 16,
                          radius: float = 6.0, tau: float | None = None):
    """Anti-plane force constants of the homogeneous crystal, from a torus."""
    sites, B = torus_sites(disl.lattice, L)
    base = np.column_stack([sites, np.zeros(len(sites))])
    periods = np.zeros((3, 3))
    periods[:2, :2] = B.T
    periods[2, 2] = disl.b3
    origin = int(np.argmin(np.linalg.norm(sites, axis=1)))
    return homogeneous_force_constants(params, sites, base, periods, (2,), origin, radius, tau)


def solve_dislocation(disl: ScrewDislocation, params: ModelParams, R: float, R_b: float,
                      Ne: float | None = None, tau0: float | None = None,
                      options: SolverOptions | None = None):
    """Relax the corrector ``u`` around the predictor; returns ``(domain, solution)``."""
    domain = dislocation_domain(disl, R, R_b)
    problem = dislocation_problem(domain, params, Ne)
    opts = options or SolverOptions()
    if problem.n_unknowns > opts.dense_max and opts.force_constants is None:
        opts = replace(opts, force_constants=screw_force_constants(disl, params))
    return domain, solve_canonical(problem, tau0=tau0, options=opts)


def corrector_strain(domain: DislocationDomain, u, gamma: float) -> np.ndarray:
    """Per-site ``|D'u(l)|_gamma``; ``D' = D`` for a pure screw."""
    u = slip_map(domain.disl, domain.sites, np.asarray(u, float).reshape(-1))
    return site_strain(domain.sites, u, gamma)


# ---------------------------------------------------------------------------
# Slip invariance
# ---------------------------------------------------------------------------

def stencil_positions(sites, site: int, differences) -> np.ndarray:
    """3D positions seen from ``site`` when its height differences are ``differences``."""
    sites = np.atleast_2d(np.asarray(sites, float))
    return np.column_stack([sites, np.asarray(differences, float)])


def slip_invariance_gap(domain: DislocationDomain, params: ModelParams, u, site: int,
                        tau: float, kind=QoIKind.GRAND) -> float:
    """``|A_l(D(u0 + u)) - A_l(e + D'u)|`` at one site.

    Both stencils are turned into height fields relative to ``site`` and the
    local QoI is evaluated on each; away from the cut they coincide
    identically, across it they differ by the slip ``b3``.
    """
    disl = domain.disl
    u = np.asarray(u, float).reshape(-1)
    s = domain.sites
    offsets = s - s[site]
    raw = (domain.u0 + u) - (domain.u0[site] + u[site])
    e = disl.elastic_strain(s[site:site + 1], offsets)[0]
    du = slip_map(disl, s, u) - u[site]
    a = local_qoi(ElectronicState(stencil_positions(s, site, raw), params, disl.periods).spec,
                  site, kind, tau, params.beta)
    b = local_qoi(ElectronicState(stencil_positions(s, site, e + du), params, disl.periods).spec,
                  site, kind, tau, params.beta)
    return abs(a - b)
