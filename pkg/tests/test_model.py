import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tbdefect.model import (ModelParams, QoIKind, cutoff, cutoff_prime, entropy, fermi,
                            fermi_prime, hop, hop_prime, kernel, kernel_dx, log_one_minus_fermi,
                            ons, rho, rho_prime)

P = ModelParams()
energies = st.floats(-20, 20, allow_nan=False)


def test_fermi_half_at_zero():
    assert fermi(0.0, 10.0) == 0.5


def test_fermi_overflow_safe():
    assert fermi(1e4, 10.0) == 0.0
    assert fermi(-1e4, 10.0) == 1.0
    assert np.isfinite(log_one_minus_fermi(-1e4, 10.0))


@given(energies, st.floats(0.5, 50))
def test_fermi_particle_hole(x, beta):
    assert fermi(x, beta) + fermi(-x, beta) == pytest.approx(1.0, abs=1e-15)


@given(energies, energies, st.floats(1, 40))
def test_helmholtz_is_tau_n_plus_g(x, tau, beta):
    e = kernel(QoIKind.HELMHOLTZ, x, tau, beta)
    rhs = tau * kernel(QoIKind.NUMBER, x, tau, beta) + kernel(QoIKind.GRAND, x, tau, beta)
    assert e == pytest.approx(rhs, abs=1e-12 * (1 + abs(x) + abs(tau)))


@pytest.mark.parametrize("kind", list(QoIKind))
def test_kernel_derivative_matches_difference(kind):
    x = np.linspace(-2, 2, 41)
    h = 1e-6
    fd = (kernel(kind, x + h, 0.3, 10.0) - kernel(kind, x - h, 0.3, 10.0)) / (2 * h)
    assert np.allclose(kernel_dx(kind, x, 0.3, 10.0), fd, atol=1e-6)


def test_grand_derivative_is_twice_occupation():
    x = np.linspace(-1, 1, 7)
    assert np.allclose(kernel_dx(QoIKind.GRAND, x, 0.0, 10.0), 2 * fermi(x, 10.0))


def test_complex_helmholtz_continues_real_values():
    x = np.linspace(-1.5, 1.5, 9)
    real = kernel(QoIKind.HELMHOLTZ, x, 0.2, 10.0)
    cplx = kernel(QoIKind.HELMHOLTZ, x + 0j, 0.2, 10.0)
    assert np.allclose(cplx.real, real, atol=1e-13) and np.allclose(cplx.imag, 0)


def test_fermi_prime_matches_difference():
    x = np.linspace(-1, 1, 11)
    fd = (fermi(x + 1e-7, 5.0) - fermi(x - 1e-7, 5.0)) / 2e-7
    assert np.allclose(fermi_prime(x, 5.0), fd, atol=1e-7)


def test_entropy_endpoints_and_domain():
    assert entropy(0.0) == 0.0 and entropy(1.0) == 0.0
    assert entropy(0.5) == pytest.approx(-np.log(2))
    with pytest.raises(ValueError):
        entropy(1.5)


def test_cutoff_plateau_and_support():
    Rc = 1.6
    assert cutoff(0.5, Rc) == 1.0 and cutoff(0.7 * Rc, Rc) == 1.0
    assert cutoff(Rc, Rc) == 0.0 and cutoff(3.0, Rc) == 0.0
    r = np.linspace(0.7 * Rc, Rc, 50)
    assert np.all(np.diff(cutoff(r, Rc)) <= 0)


def test_cutoff_derivative_and_smooth_ends():
    Rc = 1.6
    r = np.linspace(1.0, 1.7, 71)
    fd = (cutoff(r + 1e-7, Rc) - cutoff(r - 1e-7, Rc)) / 2e-7
    assert np.allclose(cutoff_prime(r, Rc), fd, atol=1e-6)
    assert cutoff_prime(0.7 * Rc, Rc) == 0.0 and cutoff_prime(Rc, Rc) == 0.0


def test_radial_functions_at_unit_distance():
    assert hop(1.0, P) == pytest.approx(-P.t0)
    assert rho(1.0, P) == pytest.approx(1.0)
    assert hop(1.6, P) == 0.0 and rho(2.0, P) == 0.0


@pytest.mark.parametrize("fn, dfn", [(hop, hop_prime), (rho, rho_prime)])
def test_radial_derivatives(fn, dfn):
    r = np.linspace(0.6, 1.7, 45)
    fd = (fn(r + 1e-7, P) - fn(r - 1e-7, P)) / 2e-7
    assert np.allclose(dfn(r, P), fd, atol=1e-6)


def test_radial_functions_reject_nonpositive_distance():
    with pytest.raises(ValueError):
        hop(0.0, P)


def test_onsite_is_affine():
    assert ons(2.0, P) == pytest.approx(P.eps0 + 2 * P.c1)
    with pytest.raises(ValueError):
        ons(-1.0, P)


@pytest.mark.parametrize("bad", [dict(beta=0.0), dict(Rc=0.5), dict(m_accum=0.0),
                                 dict(t0=-1.0), dict(spin_factor=1.0)])
def test_params_validation(bad):
    with pytest.raises(ValueError):
        ModelParams(**bad)


def test_params_round_trip_and_unknown_keys():
    assert ModelParams.from_dict(P.as_dict()) == P
    with pytest.raises(KeyError):
        ModelParams.from_dict({"gamma": 1.0})


def test_qoi_kind_parsing():
    assert QoIKind.parse("n") is QoIKind.NUMBER
    assert QoIKind.parse("Grand") is QoIKind.GRAND
    with pytest.raises(ValueError):
        QoIKind.parse("entropy")


@settings(max_examples=30)
@given(st.floats(0.1, 0.9))
def test_strip_width(frac):
    p = ModelParams(beta=1 / frac)
    assert p.strip == pytest.approx(np.pi * frac)
