import numpy as np
import pytest

from tbdefect.forces import (coupled_jacobian, dN_du, force, force_on, grad_helmholtz,
                             gradient_by_matrices)
from tbdefect.lattice import DefectConfiguration
from tbdefect.model import SPIN, ModelParams, fermi
from tbdefect.observables import ElectronicState, grand_potential
from tbdefect.studies import random_cluster

P = ModelParams()


@pytest.fixture(scope="module", params=[1, 2])
def cluster(request):
    y = random_cluster(request.param, 13, np.random.default_rng(request.param))
    st = ElectronicState(y, P)
    return y, st, st.mu(13.0).mu


def test_force_is_minus_gradient_of_grand_potential(cluster):
    y, st, tau = cluster
    F = force(st, tau)
    h = 1e-5
    for idx in [(0, 0), (6, 0), (12, y.shape[1] - 1)]:
        yp, ym = y.copy(), y.copy()
        yp[idx] += h
        ym[idx] -= h
        fd = -(grand_potential(yp, P, tau) - grand_potential(ym, P, tau)) / (2 * h)
        assert F[idx] == pytest.approx(fd, rel=1e-6, abs=1e-9)


def test_forces_balance(cluster):
    _, st, tau = cluster
    assert np.allclose(force(st, tau).sum(axis=0), 0.0, atol=1e-12)


def test_ring_forces_vanish():
    st = ElectronicState(np.arange(10.0), P, [[10.0]])
    assert np.allclose(force(st, 0.3), 0.0, atol=1e-13)


def test_bond_route_matches_matrix_route(cluster):
    _, st, tau = cluster
    w = SPIN * fermi(st.spec.values - tau, st.beta)
    assert np.allclose(-force(st, tau), gradient_by_matrices(st, w), atol=1e-12)


def test_canonical_gradient_is_force_at_mu(cluster):
    _, st, _ = cluster
    g, mu = grad_helmholtz(st, 13.0)
    assert np.allclose(g, -force(st, mu))


def test_clamped_rows_are_zero():
    y = np.arange(6.0)[:, None]
    free = np.array([0, 1, 1, 1, 1, 0], bool)
    cfg = DefectConfiguration(y, 0.01 * y, free)
    F = force_on(cfg, P, 0.2)
    assert np.all(F[~free] == 0)


def test_cross_derivative_identity(cluster):
    y, st, tau = cluster
    cfg = DefectConfiguration(y, np.zeros_like(y), np.ones(len(y), bool), bc="open")
    J = coupled_jacobian(cfg, P, tau, 13.0, state=st)
    assert np.max(np.abs(J.dtauF - J.duN)) <= 1e-8
    assert J.asymmetry < 1e-6
    assert np.allclose(J.duN, dN_du(st, tau).ravel())
    # d_tau F by a finite difference in tau
    h = 1e-6
    fd = (force(st, tau + h) - force(st, tau - h)).ravel() / (2 * h)
    assert np.allclose(J.dtauF, fd, atol=1e-7)
    assert J.matrix.shape == (y.size + 1, y.size + 1)
