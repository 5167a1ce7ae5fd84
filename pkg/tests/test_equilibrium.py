import numpy as np
import pytest

from tbdefect.equilibrium import (EquilibriumProblem, SolverOptions, check_grand_forces,
                                  homogeneous_force_constants, residual, solve_canonical,
                                  solve_grand_canonical)
from tbdefect.lattice import BravaisLattice, DefectKind, clamped_configuration, torus_configuration
from tbdefect.model import ModelParams
from tbdefect.observables import ElectronCountError

P = ModelParams()
CHAIN = BravaisLattice.cubic(1)
MU_CHAIN = 2 * P.c1


@pytest.fixture(scope="module")
def vacancy():
    cfg = clamped_configuration(CHAIN, 10, 8, DefectKind.vacancy([0.0]))
    prob = EquilibriumProblem.from_config(cfg, P)
    return cfg, prob, solve_canonical(prob, tau0=MU_CHAIN)


@pytest.fixture(scope="module")
def chain_fc():
    tc = torus_configuration(CHAIN, 80)
    return homogeneous_force_constants(P, tc.sites, tc.positions, tc.periods, (0,), 0, 30.0)


def test_canonical_vacancy_converges(vacancy):
    cfg, prob, sol = vacancy
    assert sol.converged
    assert sol.force_residual <= 1e-9 and sol.count_residual <= 1e-10
    assert np.all(sol.u[~cfg.free] == 0)


def test_vacancy_relaxation_is_odd(vacancy):
    cfg, _, sol = vacancy
    x = cfg.sites[:, 0]
    order, mirror = np.argsort(x), np.argsort(-x)
    assert np.allclose(sol.u[order, 0], -sol.u[mirror, 0], atol=1e-9)


def test_canonical_solution_is_grand_equilibrium_at_mu(vacancy):
    _, prob, sol = vacancy
    assert check_grand_forces(prob, sol) <= 1e-9
    gc = solve_grand_canonical(prob, tau=sol.mu)
    assert np.allclose(gc.u, sol.u, atol=1e-8)


def test_residual_at_solution(vacancy):
    _, prob, sol = vacancy
    F, count = residual(prob, sol.u, sol.mu)
    assert np.max(np.abs(F)) <= 1e-9 and abs(count) <= 1e-10


def test_krylov_path_matches_dense(vacancy, chain_fc):
    _, prob, sol = vacancy
    krylov = solve_canonical(prob, tau0=MU_CHAIN,
                             options=SolverOptions(dense_max=0, force_constants=chain_fc))
    assert np.allclose(krylov.u, sol.u, atol=1e-8)
    assert krylov.mu == pytest.approx(sol.mu, abs=1e-10)


def test_force_constants_sum_rule():
    # a rigid translation of the whole torus costs nothing
    tc = torus_configuration(CHAIN, 30)
    fc = homogeneous_force_constants(P, tc.sites, tc.positions, tc.periods, (0,), 15, 15.0)
    assert len(fc.offsets) == 30
    assert abs(fc.blocks.sum()) < 1e-6
    assert fc.blocks[np.argmin(np.abs(fc.offsets[:, 0]))][0, 0] > 0


def test_electron_count_precondition():
    cfg = clamped_configuration(CHAIN, 5, 8)
    with pytest.raises(ElectronCountError):
        EquilibriumProblem.from_config(cfg, P, Ne=2.0 * cfg.n_sites)


def test_grand_problem_needs_tau():
    cfg = clamped_configuration(CHAIN, 5, 8)
    with pytest.raises(ValueError):
        EquilibriumProblem.from_config(cfg, P, mode="grand")


def test_homogeneous_torus_is_an_equilibrium():
    tc = torus_configuration(CHAIN, 12)
    free = tc.free.copy()
    free[0] = False
    from dataclasses import replace
    prob = EquilibriumProblem.from_config(replace(tc, free=free), P)
    sol = solve_canonical(prob)
    assert sol.iterations <= 1 and np.allclose(sol.u, 0)
    assert sol.mu == pytest.approx(MU_CHAIN, abs=1e-10)
