"""Total and local QoIs, chemical potentials and the homogeneous Fermi level."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .hamiltonian import assemble, bloch_hamiltonian, lattice_vectors_within, neighbour_bonds
from .lattice import BravaisLattice, torus_sites
from .model import SPIN, ModelParams, QoIKind, fermi, fermi_prime, hop, kernel, ons, rho
from .spectral import SpectralData, eig_sym


class ElectronCountError(ValueError):
    """Electron count outside ``(0, 2N)``."""


def total_qoi(spec: SpectralData, kind, tau: float, beta: float) -> float:
    """``sum_s a(lambda_s, tau)``."""
    return float(np.sum(kernel(kind, spec.values, tau, beta)))


def local_qoi(spec: SpectralData, site: int, kind, tau: float, beta: float) -> float:
    """``sum_s a(lambda_s, tau) [psi_s]_l^2``."""
    if not 0 <= site < spec.size:
        raise IndexError(f"site {site} out of range")
    return float(kernel(kind, spec.values, tau, beta) @ spec.weights(site))


def local_qois(spec: SpectralData, kind, tau: float, beta: float) -> np.ndarray:
    """All local QoIs at once."""
    return (spec.vectors ** 2) @ kernel(kind, spec.values, tau, beta)


def electron_count(values, tau: float, beta: float) -> float:
    return float(SPIN * np.sum(fermi(np.asarray(values) - tau, beta)))


def count_slope(values, tau: float, beta: float) -> float:
    """``dN/dtau = -2 sum f'(lambda - tau)``, strictly positive."""
    return float(-SPIN * np.sum(fermi_prime(np.asarray(values) - tau, beta)))


@dataclass(frozen=True)
class ChemicalPotential:
    mu: float
    residual: float
    iterations: int


def solve_mu(values, Ne: float, beta: float, guess: float | None = None,
             tol: float = 1e-12) -> ChemicalPotential:
    """Unique ``mu`` with ``N(mu) = Ne``; bracketed, safeguarded Newton.

    ``values`` may be eigenvalues or a ``SpectralData``. The iteration stops
    once ``|N - Ne| <= tol * max(1, Ne)``.
    """
    lam = np.asarray(values.values if isinstance(values, SpectralData) else values, float)
    n = len(lam)
    if not 0 < Ne < SPIN * n:
        raise ElectronCountError(f"need 0 < Ne < {SPIN * n:g}, got {Ne!r}")
    lo, hi = lam.min() - 10.0 / beta, lam.max() + 10.0 / beta
    while electron_count(lam, lo, beta) > Ne:
        lo -= 10.0 / beta
    while electron_count(lam, hi, beta) < Ne:
        hi += 10.0 / beta
    mu = 0.5 * (lo + hi) if guess is None or not lo < guess < hi else float(guess)
    target = tol * max(1.0, Ne)
    for it in range(1, 201):
        res = electron_count(lam, mu, beta) - Ne
        if abs(res) <= target:
            return ChemicalPotential(mu, abs(res), it)
        if res > 0:
            hi = mu
        else:
            lo = mu
        slope = count_slope(lam, mu, beta)
        step = mu - res / slope if slope > 0 else np.nan
        # fall back to bisection when Newton leaves the bracket
        mu = step if lo < step < hi else 0.5 * (lo + hi)
        if hi - lo <= 4 * np.finfo(float).eps * max(1.0, abs(mu)):
            break
    res = electron_count(lam, mu, beta) - Ne
    return ChemicalPotential(mu, abs(res), it)


# ---------------------------------------------------------------------------
# Configuration-level convenience
# ---------------------------------------------------------------------------

@dataclass
class ElectronicState:
    """Hamiltonian and spectrum of one configuration."""

    positions: np.ndarray
    params: ModelParams
    periods: np.ndarray | None = None
    bonds: object = field(init=False)
    H: np.ndarray = field(init=False)
    spec: SpectralData = field(init=False)

    def __post_init__(self):
        y = np.asarray(self.positions, float)
        self.positions = y[:, None] if y.ndim == 1 else y
        self.bonds = neighbour_bonds(self.positions, self.params.Rc, self.periods)
        self.H = assemble(self.positions, self.params, bonds=self.bonds)
        self.spec = eig_sym(self.H)

    @property
    def beta(self) -> float:
        return self.params.beta

    def qoi(self, kind, tau: float) -> float:
        return total_qoi(self.spec, kind, tau, self.beta)

    def mu(self, Ne: float, guess: float | None = None) -> ChemicalPotential:
        return solve_mu(self.spec, Ne, self.beta, guess)


def grand_potential(positions, params: ModelParams, tau: float, periods=None) -> float:
    """``G(y, tau) = sum_s g(lambda_s, tau)``."""
    return ElectronicState(positions, params, periods).qoi(QoIKind.GRAND, tau)


def helmholtz_energy(positions, params: ModelParams, Ne: float, periods=None,
                     tau: float | None = None) -> float:
    """Helmholtz free energy ``E(y) = E(y, mu(y))``, or ``E(y, tau)`` if ``tau`` is given."""
    st = ElectronicState(positions, params, periods)
    if tau is None:
        tau = st.mu(Ne).mu
    return st.qoi(QoIKind.HELMHOLTZ, tau)


# ---------------------------------------------------------------------------
# Homogeneous Fermi level
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FermiLevelHom:
    mu_hom: float
    method: str
    resolution: int
    history: tuple = ()


def _half_filling_level(band: np.ndarray, beta: float) -> float:
    band = np.asarray(band, float).ravel()

    def excess(mu):
        return np.mean(fermi(band - mu, beta)) - 0.5

    lo, hi = band.min() - 10.0 / beta, band.max() + 10.0 / beta
    return brentq(excess, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=200)


def _midpoint_grid(n_k: int, dim: int, fixed_axes=()) -> np.ndarray:
    """Fractional midpoint grid on ``[0,1)^dim``; ``fixed_axes`` only sample 0."""
    axes = []
    for a in range(dim):
        axes.append(np.zeros(1) if a in fixed_axes else (np.arange(n_k) + 0.5) / n_k)
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


def bloch_band(params: ModelParams, lattice, n_k: int, fixed_axes=()) -> np.ndarray:
    """Band energies on the midpoint grid of the first Brillouin zone."""
    A = np.atleast_2d(np.asarray(lattice, float))
    recip = 2 * np.pi * np.linalg.inv(A).T  # columns b_j with a_i . b_j = 2 pi delta_ij
    frac = _midpoint_grid(n_k, A.shape[0], fixed_axes)
    return bloch_hamiltonian(params, A, frac @ recip.T)


def fermi_level_bloch(params: ModelParams, lattice, n_k: int = 16, tol: float = 1e-10,
                      max_n_k: int | None = None, fixed_axes=()) -> FermiLevelHom:
    """Solve ``mean_k f(lambda(k) - mu) = 1/2`` on doubling midpoint grids.

    ``fixed_axes`` lists reciprocal directions sampled only at ``k = 0``.
    """
    A = np.atleast_2d(np.asarray(lattice, float))
    dim = A.shape[0] - len(fixed_axes)
    if max_n_k is None:
        max_n_k = {0: 1, 1: 1 << 16, 2: 1 << 11, 3: 1 << 7}[dim]
    history = []
    prev = None
    while True:
        mu = _half_filling_level(bloch_band(params, A, n_k, fixed_axes), params.beta)
        history.append((n_k, mu))
        if dim == 0 or (prev is not None and abs(mu - prev) <= tol) or 2 * n_k > max_n_k:
            return FermiLevelHom(mu, "bloch-quadrature", n_k, tuple(history))
        prev = mu
        n_k *= 2


def torus_row(params: ModelParams, lattice, L: int, fixed_axes=()):
    """First row of the homogeneous torus Hamiltonian of side ``L``, as an array
    indexed by lattice offsets (shape ``(L,)*d``), assembled in real space."""
    A = np.atleast_2d(np.asarray(lattice, float))
    d = A.shape[0]
    shape = tuple(1 if a in fixed_axes else L for a in range(d))
    cell = A * np.array(shape, float)[None, :]
    # neighbours of the origin: every lattice offset within Rc, reduced mod the cell
    vecs = lattice_vectors_within(A, params.Rc)
    row = np.zeros(shape)
    if len(vecs):
        ints = np.rint(np.linalg.solve(A, vecs.T).T).astype(int)
        r = np.linalg.norm(vecs, axis=1)
        np.add.at(row, tuple((ints % np.array(shape)).T), hop(r, params))
        row[(0,) * d] += ons(rho(r, params).sum(), params)
    else:
        row[(0,) * d] += ons(0.0, params)
    return row, cell


def torus_band(params: ModelParams, lattice, L: int, fixed_axes=()) -> np.ndarray:
    """Spectrum of the homogeneous torus via the FFT of its circulant row."""
    row, _ = torus_row(params, lattice, L, fixed_axes)
    band = np.fft.fftn(row)
    if np.max(np.abs(band.imag)) > 1e-10:
        raise ArithmeticError("torus spectrum is not real")
    return band.real.ravel()


def fermi_level_supercell(params: ModelParams, lattice, sizes, fixed_axes=(),
                          dense_limit: int = 1200) -> FermiLevelHom:
    """Half-filling chemical potential of homogeneous tori of increasing size.

    Small cells are assembled and diagonalised densely; larger ones use the
    circulant structure. The last size is reported (its successors shrink
    geometrically for this analytic band).
    """
    A = np.atleast_2d(np.asarray(lattice, float))
    d = A.shape[0]
    history = []
    for L in sorted(sizes):
        n_sites = L ** (d - len(fixed_axes))
        if n_sites <= dense_limit and not fixed_axes:
            sites, B = torus_sites(BravaisLattice(A), L)
            H = assemble(sites, params, B.T, strict_torus=True)
            lam = np.linalg.eigvalsh(H)
        else:
            lam = torus_band(params, A, L, fixed_axes)
        mu = solve_mu(lam, float(len(lam)), params.beta).mu
        history.append((L, mu))
    return FermiLevelHom(history[-1][1], "supercell-extrapolation", history[-1][0], tuple(history))


def homogeneous_stress(params: ModelParams, lattice, n_k: int = 1024, h: float = 1e-6,
                       fixed_axes=()) -> float:
    """Per-site ``dG/ds`` under the uniform dilation ``A -> s A`` at ``s = 1``.

    The chemical potential is held at the half-filling level of the undeformed
    lattice; a negative value means the lattice would rather expand.
    """
    A = np.atleast_2d(np.asarray(lattice, float))
    mu = _half_filling_level(bloch_band(params, A, n_k, fixed_axes), params.beta)

    def g(s):
        band = bloch_band(params, s * A, n_k, fixed_axes)
        return float(np.mean(kernel(QoIKind.GRAND, band, mu, params.beta)))

    return (g(1 + h) - g(1 - h)) / (2 * h)


def stress_free_c1(params: ModelParams, lattice, n_k: int = 1024, fixed_axes=()) -> float:
    """On-site coupling ``c1`` for which ``homogeneous_stress`` vanishes.

    The stress is affine in ``c1`` (the on-site shift moves the band and the
    Fermi level together), so two evaluations suffice.
    """
    s0 = homogeneous_stress(params.with_(c1=0.0), lattice, n_k, fixed_axes=fixed_axes)
    s1 = homogeneous_stress(params.with_(c1=1.0), lattice, n_k, fixed_axes=fixed_axes)
    return s0 / (s0 - s1)
