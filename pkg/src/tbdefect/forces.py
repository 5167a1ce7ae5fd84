"""Hellmann-Feynman forces, count gradients and the coupled Jacobian."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .hamiltonian import Bonds, d_hamiltonian, trace_gradient
from .model import SPIN, ModelParams, fermi, fermi_prime
from .observables import ElectronicState, count_slope, solve_mu
from .spectral import SpectralData


def density_entries(spec: SpectralData, bonds: Bonds, weights: np.ndarray, chunk: int = 4096):
    """Entries of ``P = Psi diag(w) Psi^T`` on the bond list and the diagonal."""
    psi = spec.vectors
    pw = psi * weights
    diag = np.einsum("is,is->i", pw, psi)
    out = np.empty(len(bonds.i))
    for a in range(0, len(bonds.i), chunk):
        i = bonds.i[a:a + chunk]
        j = bonds.j[a:a + chunk]
        out[a:a + chunk] = np.einsum("es,es->e", pw[i], psi[j])
    return out, diag


def weighted_gradient(state: ElectronicState, weights: np.ndarray) -> np.ndarray:
    """``sum_s w_s <psi_s| dH/dy |psi_s>`` for every site and axis."""
    P_bond, P_diag = density_entries(state.spec, state.bonds, weights)
    return trace_gradient(state.bonds, state.params, P_bond, P_diag)


def force(state: ElectronicState, tau: float) -> np.ndarray:
    """Grand-canonical force ``F = -dG/dy`` at fixed ``tau`` on all sites."""
    w = SPIN * fermi(state.spec.values - tau, state.beta)
    return -weighted_gradient(state, w)


def force_on(config, params: ModelParams, tau: float) -> np.ndarray:
    """Forces on free sites of a configuration; clamped rows are zero."""
    st = ElectronicState(config.positions, params, config.periods)
    F = force(st, tau)
    F[~config.free] = 0.0
    return F


def grad_helmholtz(state: ElectronicState, Ne: float, guess: float | None = None):
    """Gradient of the canonical energy ``E(y)``; equals ``-force`` at ``mu(y)``.

    Returns ``(gradient, mu)``.
    """
    mu = state.mu(Ne, guess).mu
    return -force(state, mu), mu


def dN_dtau(spec: SpectralData, tau: float, beta: float) -> float:
    return count_slope(spec.values, tau, beta)


def dN_du(state: ElectronicState, tau: float) -> np.ndarray:
    """``dN/dy = 2 sum_s f'(lambda_s - tau) <psi_s| dH/dy |psi_s>``."""
    w = SPIN * fermi_prime(state.spec.values - tau, state.beta)
    return weighted_gradient(state, w)


def gradient_by_matrices(state: ElectronicState, weights: np.ndarray, sites=None) -> np.ndarray:
    """``sum_s w_s <psi_s| dH/dy |psi_s>`` from explicit derivative matrices.

    Independent of the bond-list route used by ``weighted_gradient``; slower.
    """
    n, dim = state.positions.shape
    sites = range(n) if sites is None else sites
    psi = state.spec.vectors
    G = np.zeros((n, dim))
    for m in sites:
        for a in range(dim):
            D = d_hamiltonian(state.positions, state.params, m, a, bonds=state.bonds)
            G[m, a] = np.sum(weights * np.einsum("is,is->s", psi, D @ psi))
    return G


@dataclass(frozen=True)
class CoupledJacobian:
    """Blocks of ``d(-F, N/Ne - 1)/d(u_free, tau)``."""

    duF: np.ndarray  # d F / d u, symmetrised
    dtauF: np.ndarray
    duN: np.ndarray
    dtauN: float
    Ne: float
    asymmetry: float

    @property
    def matrix(self) -> np.ndarray:
        n = len(self.dtauF)
        J = np.empty((n + 1, n + 1))
        J[:n, :n] = -self.duF
        J[:n, n] = -self.dtauF
        J[n, :n] = self.duN / self.Ne
        J[n, n] = self.dtauN / self.Ne
        return J


def free_coordinates(free: np.ndarray, dim: int) -> np.ndarray:
    """Flat indices (site-major) of free displacement coordinates."""
    sites = np.flatnonzero(free)
    return (sites[:, None] * dim + np.arange(dim)).ravel()


def coupled_jacobian(config, params: ModelParams, tau: float, Ne: float,
                     fd_step: float | None = None, state: ElectronicState | None = None,
                     asym_tol: float = 1e-5) -> CoupledJacobian:
    """Dense coupled Jacobian; ``dF/du`` by central differences of analytic forces."""
    y = config.positions
    dim = y.shape[1]
    coords = free_coordinates(config.free, dim)
    if state is None:
        state = ElectronicState(y, params, config.periods)
    h = fd_step if fd_step is not None else 1e-5 * (1.0 + float(np.max(np.abs(config.u), initial=0.0)))
    cols = []
    for c in coords:
        yp, ym = y.copy(), y.copy()
        yp.flat[c] += h
        ym.flat[c] -= h
        Fp = force(ElectronicState(yp, params, config.periods), tau).ravel()[coords]
        Fm = force(ElectronicState(ym, params, config.periods), tau).ravel()[coords]
        cols.append((Fp - Fm) / (2 * h))
    K = np.array(cols).T if cols else np.zeros((0, 0))
    asym = float(np.max(np.abs(K - K.T), initial=0.0))
    if asym > asym_tol:
        warnings.warn(f"force-constant asymmetry {asym:.2e}; finite-difference step too coarse?")
    K = 0.5 * (K + K.T)
    duN = dN_du(state, tau).ravel()[coords]
    # d/dtau of the force weights 2 f(lambda - tau) is -2 f'(lambda - tau)
    dw = -SPIN * fermi_prime(state.spec.values - tau, state.beta)
    free_sites = np.flatnonzero(config.free)
    dtauF = -gradient_by_matrices(state, dw, free_sites).ravel()[coords]
    return CoupledJacobian(K, dtauF, duN, dN_dtau(state.spec, tau, state.beta), Ne, asym)


def mu_of(state: ElectronicState, Ne: float, guess=None) -> float:
    return solve_mu(state.spec, Ne, state.beta, guess).mu
