import math

import numpy as np
import pytest

from tbdefect.dislocation import (SCREW_PARAMS, DislocationDomain, ScrewDislocation,
                                  corrector_strain, dislocation_domain, predictor_strain_decay,
                                  screw_fermi_level, slip_invariance_gap, slip_map,
                                  solve_dislocation)
from tbdefect.lattice import InvalidDefectError
from tbdefect.studies import fit_rate

D = ScrewDislocation()
MU_SCREW = 1.127898935496408


def test_predictor_jumps_by_burgers_across_cut():
    x = D.x_hat
    above = D.predictor([x + [3.0, 1e-9]])[0]
    below = D.predictor([x + [3.0, -1e-9]])[0]
    assert below - above == pytest.approx(D.b3)
    left_a = D.predictor([x + [-3.0, 1e-9]])[0]
    left_b = D.predictor([x + [-3.0, -1e-9]])[0]
    assert left_a == pytest.approx(left_b, abs=1e-9)


def test_left_cut_moves_the_jump():
    L = ScrewDislocation(cut="left")
    x = L.x_hat
    assert L.predictor([x + [3.0, 1e-9]])[0] == pytest.approx(L.predictor([x + [3.0, -1e-9]])[0], abs=1e-9)


def test_slipped_predictor_is_smooth_across_cut():
    x = D.x_hat
    a = D.slipped_predictor([x + [3.0, 1e-9]])[0]
    b = D.slipped_predictor([x + [3.0, -1e-9]])[0]
    assert a == pytest.approx(b, abs=1e-8)


def test_pure_screw_has_inert_in_plane_maps():
    pts = D.lattice.points_in_ball(4.0, D.x_hat)
    assert np.array_equal(D.xi(pts), pts)
    u = np.random.default_rng(0).normal(size=len(pts))
    assert np.array_equal(slip_map(D, pts, u), u)
    edge = ScrewDislocation(b12=(1.0, 0.0))
    assert not np.allclose(edge.xi(pts), pts)
    with pytest.raises(NotImplementedError):
        edge.predictor(pts)


def test_cut_through_lattice_row_rejected():
    with pytest.raises(InvalidDefectError):
        ScrewDislocation(core=(0.5, 0.0))


def test_invalid_parameters():
    with pytest.raises(ValueError):
        ScrewDislocation(b3=0.0)
    with pytest.raises(ValueError):
        ScrewDislocation(cut="up")
    with pytest.raises(ValueError):
        D.predictor([D.x_hat])


def test_predictor_strain_decays_like_inverse_distance():
    r, e = predictor_strain_decay(D, 30.0)
    m = r > D.r_core + 1.0
    assert fit_rate(r[m], e[m]).slope == pytest.approx(-1.0, abs=0.2)


def test_elastic_strain_is_continuous_across_cut():
    offsets = D.nearest_offsets()
    assert len(offsets) == 6
    pts = D.lattice.points_in_ball(12.0, D.x_hat)
    e = D.elastic_strain(pts, offsets)
    r = np.linalg.norm(pts - D.x_hat, axis=1)
    # far from the core every bond strain is small, including bonds across the cut
    assert np.max(np.abs(e[r > 6])) < D.b3 / (2 * math.pi) * 0.3


def test_screw_fermi_level():
    assert screw_fermi_level(D, SCREW_PARAMS).mu_hom == pytest.approx(MU_SCREW, abs=1e-8)


def test_slip_invariance():
    dom = dislocation_domain(D, 6.0, 2.0)
    u = np.random.default_rng(0).normal(0.0, 0.05, len(dom.sites)) * dom.free
    slip = np.flatnonzero(D.in_slip_region(dom.sites))
    assert len(slip)
    for s in slip[:3]:
        assert slip_invariance_gap(dom, SCREW_PARAMS, u, int(s), MU_SCREW) <= 1e-8


def test_domain_and_predictor_dump(tmp_path):
    dom = dislocation_domain(D, 4.0, 2.0)
    assert isinstance(dom, DislocationDomain)
    assert dom.positions().shape == (len(dom.sites), 3)
    dom.write_predictor(tmp_path / "u0.csv")
    back = np.loadtxt(tmp_path / "u0.csv", delimiter=",")
    assert np.array_equal(back[:, 3], dom.u0)


def test_small_relaxation_converges():
    dom, sol = solve_dislocation(D, SCREW_PARAMS, 4.0, 2.0, tau0=MU_SCREW)
    assert sol.converged
    assert np.all(sol.u[~dom.free] == 0)
    assert np.all(sol.u[:, :2] == 0)
    strain = corrector_strain(dom, sol.u[:, 2], 1.0)
    assert strain.shape == (len(dom.sites),) and np.all(np.isfinite(strain))
