import numpy as np
import pytest

from tbdefect.hamiltonian import (ConfigurationError, assemble, bloch_hamiltonian, d_hamiltonian,
                                  lattice_vectors_within, neighbour_bonds)
from tbdefect.model import ModelParams, hop, ons, rho
from tbdefect.studies import TRIANGULAR, random_cluster

P = ModelParams()


def test_open_chain_is_tridiagonal():
    H = assemble(np.arange(6.0), P)
    assert np.allclose(np.diag(H, 1), -1.0)
    assert np.allclose(np.triu(H, 2), 0.0)
    assert np.allclose(np.diag(H)[1:-1], 2 * P.c1)
    assert np.allclose(np.diag(H)[[0, -1]], P.c1)


def test_ring_is_circulant():
    H = assemble(np.arange(8.0), P, periods=[[8.0]])
    assert np.allclose(np.diag(H), 2 * P.c1)
    assert H[0, 7] == pytest.approx(-1.0)
    assert len(neighbour_bonds(np.arange(8.0)[:, None], P.Rc, [[8.0]]).i) == 8


def test_strict_torus_rejects_small_cells():
    with pytest.raises(ConfigurationError):
        assemble(np.arange(3.0), P, periods=[[3.0]], strict_torus=True)


def test_self_images_enter_density_only():
    # one site in a period-1 cell sees its own images at distance 1
    H = assemble(np.zeros(1), P, periods=[[1.0]])
    assert H[0, 0] == pytest.approx(ons(2 * rho(1.0, P), P) + 2 * hop(1.0, P))


def test_hamiltonian_derivative_matches_difference():
    rng = np.random.default_rng(3)
    y = random_cluster(2, 12, rng)
    h = 1e-6
    for m, a in [(0, 0), (5, 1), (11, 0)]:
        yp, ym = y.copy(), y.copy()
        yp[m, a] += h
        ym[m, a] -= h
        fd = (assemble(yp, P) - assemble(ym, P)) / (2 * h)
        assert np.allclose(d_hamiltonian(y, P, m, a).toarray(), fd, atol=1e-7)


def test_derivative_index_checks():
    with pytest.raises(IndexError):
        d_hamiltonian(np.arange(3.0), P, 3, 0)


def test_bloch_chain_band():
    k = np.linspace(-np.pi, np.pi, 9)[:, None]
    assert np.allclose(bloch_hamiltonian(P, np.eye(1), k), 2 * P.c1 - 2 * np.cos(k[:, 0]))
    assert isinstance(bloch_hamiltonian(P, np.eye(1), np.array([0.3])), float)


def test_triangular_shell():
    vecs = lattice_vectors_within(TRIANGULAR, P.Rc)
    assert len(vecs) == 6 and np.allclose(np.linalg.norm(vecs, axis=1), 1.0)
    assert bloch_hamiltonian(P, TRIANGULAR, np.zeros(2)) == pytest.approx(6 * P.c1 - 6)
