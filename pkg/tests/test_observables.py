import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tbdefect.lattice import BravaisLattice
from tbdefect.model import ModelParams, QoIKind, ons, rho
from tbdefect.observables import (ElectronCountError, ElectronicState, electron_count,
                                  fermi_level_bloch, fermi_level_supercell, grand_potential,
                                  helmholtz_energy, homogeneous_stress, local_qois, solve_mu,
                                  stress_free_c1)
from tbdefect.studies import TRIANGULAR, random_cluster

P = ModelParams()
MU_CHAIN = 0.1584945478  # = ons(2 rho(1)) = 2 c1, by particle-hole symmetry
MU_TRIANGULAR = 1.3033825788964073


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10 ** 6), st.floats(0.05, 0.95))
def test_solve_mu_hits_count(seed, frac):
    lam = np.sort(np.random.default_rng(seed).normal(size=20))
    Ne = frac * 40
    mu = solve_mu(lam, Ne, 10.0).mu
    assert electron_count(lam, mu, 10.0) == pytest.approx(Ne, abs=1e-10 * Ne)


def test_mu_is_monotone_in_count():
    lam = np.linspace(-2, 2, 15)
    mus = [solve_mu(lam, n, 10.0).mu for n in (5.0, 10.0, 15.0, 20.0)]
    assert np.all(np.diff(mus) > 0)


@pytest.mark.parametrize("Ne", [0.0, 40.0, -1.0])
def test_count_outside_range(Ne):
    with pytest.raises(ElectronCountError):
        solve_mu(np.zeros(20), Ne, 10.0)


@pytest.mark.parametrize("N", [8, 16, 32])
def test_ring_half_filling_symmetry(N):
    st_ = ElectronicState(np.arange(float(N)), P, [[float(N)]])
    mu = st_.mu(float(N)).mu
    assert abs(mu - ons(2 * rho(1.0, P), P)) <= 1e-10


def test_local_qois_sum_to_total():
    st_ = ElectronicState(random_cluster(2, 15, np.random.default_rng(1)), P)
    for kind in QoIKind:
        assert local_qois(st_.spec, kind, 0.5, P.beta).sum() == pytest.approx(st_.qoi(kind, 0.5))


def test_helmholtz_legendre_relation():
    y = random_cluster(1, 12, np.random.default_rng(2))
    st_ = ElectronicState(y, P)
    mu = st_.mu(12.0).mu
    E = helmholtz_energy(y, P, 12.0)
    assert E == pytest.approx(mu * 12.0 + grand_potential(y, P, mu), abs=1e-10)


def test_chain_fermi_level():
    f = fermi_level_bloch(P, np.eye(1))
    assert f.mu_hom == pytest.approx(MU_CHAIN, abs=1e-10)
    assert fermi_level_supercell(P, np.eye(1), [64, 256]).mu_hom == pytest.approx(MU_CHAIN, abs=1e-10)


def test_triangular_fermi_level():
    f = fermi_level_bloch(P, TRIANGULAR)
    assert f.mu_hom == pytest.approx(MU_TRIANGULAR, abs=1e-9)
    g = fermi_level_supercell(P, TRIANGULAR, [32, 64, 128, 256])
    assert abs(f.mu_hom - g.mu_hom) <= 1e-8


def test_default_c1_is_stress_free():
    assert stress_free_c1(P, np.eye(1)) == pytest.approx(P.c1, abs=1e-9)
    assert abs(homogeneous_stress(P, np.eye(1))) < 1e-8
    assert homogeneous_stress(P, BravaisLattice(TRIANGULAR).A) < 0
