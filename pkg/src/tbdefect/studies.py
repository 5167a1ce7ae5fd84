"""Thermodynamic-limit studies: sweeps over the domain size and rate fits.

Every sweep returns a ``StudyResult`` whose records are appended (and, if a
``RecordLog`` is given, written) as each domain size finishes, so a failed
solve leaves the earlier records intact.
"""

from __future__ import annotations

import csv
import itertools
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from functools import cached_property

import numpy as np
from scipy.stats import special_ortho_group

from .dislocation import (SCREW_PARAMS, ScrewDislocation, corrector_strain, predictor_strain_decay,
                          screw_fermi_level, screw_force_constants, slip_invariance_gap,
                          solve_dislocation)
from .equilibrium import (EquilibriumProblem, NonConvergenceError, SolverOptions,
                          homogeneous_force_constants, solve_canonical, solve_grand_canonical)
from .forces import coupled_jacobian, force, grad_helmholtz
from .hamiltonian import d_hamiltonian
from .lattice import (BravaisLattice, DefectConfiguration, DefectKind, buffer_width,
                      clamped_configuration, seminorms, torus_configuration)
from .model import ModelParams, QoIKind, kernel, kernel_dx
from .observables import (ElectronicState, fermi_level_bloch, grand_potential, helmholtz_energy,
                          local_qois)
from .spectral import Contour, trace_qoi_contour

TRIANGULAR = np.array([[1.0, 0.5], [0.0, math.sqrt(3.0) / 2.0]])


class InsufficientDataError(ValueError):
    """Fewer than four points remain for a rate fit."""


# ---------------------------------------------------------------------------
# Rate fitting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RateFit:
    slope: float
    intercept: float
    correlation: float
    n_points: int
    discarded: int


def fit_rate(x, y, mode: str = "loglog", discard: int = 0, min_points: int = 4) -> RateFit:
    """Least-squares line through ``(log x, log y)`` or ``(x, log y)``.

    The first ``discard`` points (smallest ``x``) are dropped. ``correlation``
    is the magnitude of the Pearson coefficient of the transformed data; the
    sign lives in ``slope``.
    """
    x = np.asarray(x, float)
    y = np.abs(np.asarray(y, float))
    order = np.argsort(x)
    x, y = x[order][discard:], y[order][discard:]
    keep = np.isfinite(x) & np.isfinite(y) & (y > 0)
    x, y = x[keep], y[keep]
    if len(x) < min_points:
        raise InsufficientDataError(f"need at least {min_points} points, have {len(x)}")
    if mode == "loglog":
        if np.any(x <= 0):
            raise ValueError("log-log fit needs positive abscissae")
        X = np.log(x)
    elif mode == "semilog":
        X = x
    else:
        raise ValueError(f"unknown fit mode {mode!r}")
    Y = np.log(y)
    slope, intercept = np.polyfit(X, Y, 1)
    corr = abs(float(np.corrcoef(X, Y)[0, 1])) if np.ptp(X) > 0 and np.ptp(Y) > 0 else 1.0
    return RateFit(float(slope), float(intercept), corr, len(x), discard)


# ---------------------------------------------------------------------------
# Records
# ---------------------------------------------------------------------------

@dataclass
class StudyRecord:
    R: float
    N: int
    Ne: float
    mu: float
    mu_error: float
    du_error: float = math.nan
    iterations: int = 0
    force_residual: float = math.nan
    count_residual: float = math.nan


RECORD_FIELDS = [f.name for f in fields(StudyRecord)]


class RecordLog:
    """Append-only CSV of study records, flushed after every row.

    ``header`` lines are written as ``#`` comments before the column names.
    """

    def __init__(self, path, header=()):
        self.path = path
        with open(path, "w", newline="") as fh:
            for line in header:
                fh.write(f"# {line}\n")
            csv.writer(fh).writerow(RECORD_FIELDS)

    def append(self, rec: StudyRecord) -> None:
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow([format_value(getattr(rec, k)) for k in RECORD_FIELDS])


def format_value(v) -> str:
    """17 significant digits for floats, so that rows are bit-stable."""
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


@dataclass
class StudyResult:
    name: str
    records: list = field(default_factory=list)
    rate_theory: float = math.nan
    threshold: float = math.nan
    fit: RateFit | None = None
    error: str | None = None

    def column(self, key: str) -> np.ndarray:
        return np.array([getattr(r, key) for r in self.records], float)

    @property
    def passed(self) -> bool:
        return self.fit is not None and self.error is None and self.fit.slope <= self.threshold

    def summary(self) -> dict:
        return {
            "study": self.name,
            "rate_theory": self.rate_theory,
            "rate_fitted": None if self.fit is None else self.fit.slope,
            "correlation": None if self.fit is None else self.fit.correlation,
            "threshold": self.threshold,
            "discarded": None if self.fit is None else self.fit.discarded,
            "n_records": len(self.records),
            "error": self.error,
            "pass": self.passed,
        }


# ---------------------------------------------------------------------------
# Point-defect sweeps
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PointDefectSetup:
    """Lattice, model and boundary regime for a point-defect sweep.

    Clamped domains use ``R_b = max(buffer_min, buffer_c log R)``; tori use
    ``L = 2 R`` cells per direction, with the site farthest from the defect
    pinned against rigid translation.
    """

    lattice: BravaisLattice
    params: ModelParams = ModelParams()
    kind: DefectKind = field(default_factory=DefectKind)
    bc: str = "clamped"
    gamma: float = 1.0
    buffer_c: float = 4.0
    buffer_min: float = 8.0
    fc_cells: int = 80
    fc_radius: float = 30.0
    dense_max: int = 160

    @classmethod
    def chain_vacancy(cls, params: ModelParams | None = None, **kw) -> "PointDefectSetup":
        return cls(BravaisLattice.cubic(1), params or ModelParams(), DefectKind.vacancy([0.0]), **kw)

    @classmethod
    def triangular_vacancy(cls, params: ModelParams | None = None, **kw) -> "PointDefectSetup":
        kw = {"buffer_c": 0.0, "buffer_min": 2.0, "fc_cells": 24, "fc_radius": 8.0, **kw}
        return cls(BravaisLattice(TRIANGULAR), params or ModelParams(),
                   DefectKind.vacancy([0.0, 0.0]), **kw)

    @property
    def dim(self) -> int:
        return self.lattice.dim

    @property
    def rate_theory(self) -> float:
        return -min(1.0, self.dim / 2)

    @property
    def mu_threshold(self) -> float:
        """Accepted fitted slope: 0.1 of slack in 1D, 0.2 in 2D."""
        return self.rate_theory + (0.1 if self.dim == 1 else 0.2)

    def buffer(self, R: float) -> float:
        return buffer_width(R, self.buffer_c, self.buffer_min) if self.buffer_c > 0 else self.buffer_min

    @cached_property
    def mu_hom(self) -> float:
        return fermi_level_bloch(self.params, self.lattice.A).mu_hom

    @cached_property
    def force_constants(self):
        tc = torus_configuration(self.lattice, self.fc_cells)
        sites = tc.sites.reshape(len(tc.sites), -1)
        origin = int(np.argmin(np.linalg.norm(sites, axis=1)))
        return homogeneous_force_constants(self.params, sites, tc.positions, tc.periods,
                                           tuple(range(self.dim)), origin, self.fc_radius)

    def configuration(self, R: float) -> DefectConfiguration:
        if self.bc == "clamped":
            return clamped_configuration(self.lattice, R, self.buffer(R), self.kind)
        if self.bc == "torus":
            cfg = torus_configuration(self.lattice, int(round(2 * R)), self.kind)
            free = cfg.free.copy()
            sites = cfg.sites.reshape(len(cfg.sites), -1)
            free[int(np.argmax(np.linalg.norm(sites, axis=1)))] = False
            return replace(cfg, free=free)
        raise ValueError(f"unknown boundary regime {self.bc!r}")

    def options(self, n_unknowns: int) -> SolverOptions:
        if n_unknowns <= self.dense_max:
            return SolverOptions(dense_max=self.dense_max)
        return SolverOptions(dense_max=self.dense_max, force_constants=self.force_constants)

    @cached_property
    def solutions(self) -> dict:
        """Finished solves keyed by ``(R, mode, ne_offset, tau)``."""
        return {}

    def __getstate__(self):
        # workers get the setup without the parent's finished solves
        state = dict(self.__dict__)
        state.pop("solutions", None)
        return state

    def solve(self, R: float, mode: str = "canonical", ne_offset: float = 0.0,
              tau: float | None = None):
        """Relax at domain size ``R``; returns ``(configuration, solution)``.

        Results are memoised per setup, so studies sharing a sweep reuse it.
        """
        key = (float(R), mode, float(ne_offset), tau)
        if key not in self.solutions:
            self.solutions[key] = self._solve(R, mode, ne_offset, tau)
        return self.solutions[key]

    def _solve(self, R, mode, ne_offset, tau):
        cfg = self.configuration(R)
        if mode == "canonical":
            prob = EquilibriumProblem.from_config(cfg, self.params, Ne=cfg.n_sites + ne_offset)
            sol = solve_canonical(prob, tau0=self.mu_hom, options=self.options(prob.n_unknowns))
        elif mode == "grand":
            t = self.mu_hom if tau is None else tau
            prob = EquilibriumProblem.from_config(cfg, self.params, mode="grand", tau=t)
            sol = solve_grand_canonical(prob, options=self.options(prob.n_unknowns))
        else:
            raise ValueError(f"unknown mode {mode!r}")
        return cfg, sol


def _record(setup: PointDefectSetup, R, cfg, sol, Ne, du_error=math.nan) -> StudyRecord:
    mu = sol.mu if sol.mu is not None else setup.mu_hom
    return StudyRecord(float(R), cfg.n_sites, float(Ne), float(mu), abs(mu - setup.mu_hom),
                       float(du_error), sol.iterations, sol.force_residual, sol.count_residual)


def _solve_job(args):
    setup, R, mode, ne_offset = args
    return setup._solve(R, mode, ne_offset, None)


def _solve_all(setup, Rs, mode="canonical", ne_offset=0.0, workers: int = 1):
    """Yield ``(R, cfg, sol)`` in increasing ``R``; stops at the first failure."""
    jobs = [(setup, R, mode, ne_offset) for R in Rs
            if (float(R), mode, float(ne_offset), None) not in setup.solutions]
    if workers > 1 and len(jobs) > 1:
        setup.mu_hom, setup.force_constants  # computed once, then pickled with the setup
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for job, out in zip(jobs, pool.map(_solve_job, jobs)):
                setup.solutions[(float(job[1]), mode, float(ne_offset), None)] = out
        for R in Rs:
            yield (R, *setup.solve(R, mode, ne_offset))
    else:
        for R in Rs:
            yield (R, *setup.solve(R, mode, ne_offset))


def mu_convergence_study(setup: PointDefectSetup, Rs, ne_offset: float = 0.0, discard: int = 2,
                         threshold: float | None = None, log: RecordLog | None = None,
                         workers: int = 1) -> StudyResult:
    """``|mu_R - mu_hom|`` against ``R`` for canonical relaxations."""
    Rs = sorted(Rs)
    theory = setup.rate_theory
    res = StudyResult(f"mu-{setup.bc}-d{setup.dim}", rate_theory=theory,
                      threshold=setup.mu_threshold if threshold is None else threshold)
    try:
        for R, cfg, sol in _solve_all(setup, Rs, "canonical", ne_offset, workers):
            rec = _record(setup, R, cfg, sol, cfg.n_sites + ne_offset)
            res.records.append(rec)
            if log:
                log.append(rec)
    except NonConvergenceError as err:
        res.error = str(err)
        return res
    res.fit = _safe_fit(res.column("R"), res.column("mu_error"), discard)
    return res


def _safe_fit(x, y, discard, mode="loglog"):
    """Fit after dropping up to ``discard`` leading points, keeping at least four."""
    keep = max(0, min(discard, len(x) - 4))
    try:
        return fit_rate(x, y, mode, keep)
    except InsufficientDataError:
        return None


def _extend(sites_from, u_from, sites_to) -> np.ndarray:
    """Displacement on ``sites_to``, zero where ``sites_from`` has no site."""
    index = {tuple(np.round(s, 9)): k for k, s in enumerate(sites_from)}
    out = np.zeros((len(sites_to), u_from.shape[1]))
    for k, s in enumerate(sites_to):
        j = index.get(tuple(np.round(s, 9)))
        if j is not None:
            out[k] = u_from[j]
    return out


def displacement_convergence_study(setup: PointDefectSetup, Rs, R_ref: float | None = None,
                                   discard: int = 2, threshold: float = -0.35,
                                   log: RecordLog | None = None, workers: int = 1) -> StudyResult:
    """``||D u_R - D u_ref||`` with ``u_ref`` solved at ``R_ref = 2 max(Rs)``."""
    Rs = sorted(Rs)
    R_ref = 2 * Rs[-1] if R_ref is None else R_ref
    res = StudyResult(f"disp-{setup.bc}-d{setup.dim}", rate_theory=setup.rate_theory,
                      threshold=threshold)
    try:
        ref_cfg, ref = setup.solve(R_ref)
        ref_sites = ref_cfg.sites.reshape(len(ref_cfg.sites), -1)
        for R, cfg, sol in _solve_all(setup, Rs, "canonical", 0.0, workers):
            u = _extend(cfg.sites.reshape(len(cfg.sites), -1), sol.u, ref_sites)
            err = seminorms(ref_sites, u - ref.u, setup.gamma).l2
            rec = _record(setup, R, cfg, sol, cfg.n_sites, err)
            res.records.append(rec)
            if log:
                log.append(rec)
    except NonConvergenceError as err:
        res.error = str(err)
        return res
    res.fit = _safe_fit(res.column("R"), res.column("du_error"), discard)
    return res


def ensemble_equivalence_study(setup: PointDefectSetup, Rs, discard: int = 2,
                               threshold: float = -0.35, log: RecordLog | None = None,
                               workers: int = 1) -> StudyResult:
    """``||D(u_gc - u_can)||`` with the grand-canonical solve at ``tau = mu_hom``.

    ``mu_error`` holds the canonical ``|mu_R - mu_hom|``.
    """
    Rs = sorted(Rs)
    res = StudyResult(f"ensemble-{setup.bc}-d{setup.dim}", rate_theory=setup.rate_theory,
                      threshold=threshold)
    try:
        can = list(_solve_all(setup, Rs, "canonical", 0.0, workers))
        gc = list(_solve_all(setup, Rs, "grand", 0.0, workers))
        for (R, cfg, c), (_, _, g) in zip(can, gc):
            sites = cfg.sites.reshape(len(cfg.sites), -1)
            err = seminorms(sites, g.u - c.u, setup.gamma).l2
            rec = _record(setup, R, cfg, c, cfg.n_sites, err)
            res.records.append(rec)
            if log:
                log.append(rec)
    except NonConvergenceError as err:
        res.error = str(err)
        return res
    res.fit = _safe_fit(res.column("R"), res.column("du_error"), discard)
    return res


def count_insensitivity_study(setup: PointDefectSetup, Rs, offset: float = -2.0,
                              discard: int = 2, threshold: float = -0.4,
                              log: RecordLog | None = None, workers: int = 1):
    """``|mu_R(Ne = N) - mu_R(Ne = N + offset)|`` against ``R``.

    Returns ``(difference study, study at Ne = N, study at Ne = N + offset)``.
    """
    base = mu_convergence_study(setup, Rs, 0.0, discard, workers=workers)
    shifted = mu_convergence_study(setup, Rs, offset, discard, workers=workers)
    res = StudyResult(f"count-{setup.bc}-d{setup.dim}", rate_theory=setup.rate_theory,
                      threshold=threshold, error=base.error or shifted.error)
    for a, b in zip(base.records, shifted.records):
        rec = replace(b, du_error=abs(a.mu - b.mu))
        res.records.append(rec)
        if log:
            log.append(rec)
    if res.error is None:
        res.fit = _safe_fit(res.column("R"), res.column("du_error"), discard)
    return res, base, shifted


def decay_profile(sites, u, gamma: float, center=None, r_min: float = 1.0,
                  r_max: float | None = None):
    """Per-site ``|Du(l)|_gamma`` against ``|l - center|`` with a log-log fit.

    Returns ``(r, strain, fit)`` where the fit covers ``r_min <= r <= r_max``.
    """
    sites = np.asarray(sites, float).reshape(len(sites), -1)
    c = np.zeros(sites.shape[1]) if center is None else np.asarray(center, float)
    r = np.linalg.norm(sites - c, axis=1)
    strain = seminorms(sites, u, gamma).per_site
    r_max = r.max() if r_max is None else r_max
    m = (r >= r_min) & (r <= r_max)
    return r, strain, fit_rate(r[m], strain[m])


# ---------------------------------------------------------------------------
# Locality probes
# ---------------------------------------------------------------------------

def local_qoi_derivatives(state: ElectronicState, site: int, kind, tau: float, sites_m,
                          axis: int = 0) -> np.ndarray:
    """``dA_l / d[y(m)]_axis`` for every ``m`` in ``sites_m``.

    First-order perturbation in the eigenbasis: with ``M = Psi^T H' Psi`` and
    the divided differences ``D_st`` of the kernel,
    ``dA_l = sum_st D_st psi_s(l) psi_t(l) M_st``.
    """
    lam, psi = state.spec.values, state.spec.vectors
    a = kernel(kind, lam, tau, state.beta)
    da = kernel_dx(kind, lam, tau, state.beta)
    diff = lam[:, None] - lam[None, :]
    close = np.abs(diff) < 1e-10
    D = np.where(close, 0.5 * (da[:, None] + da[None, :]),
                 (a[:, None] - a[None, :]) / np.where(close, 1.0, diff))
    row = psi[site]
    W = D * np.outer(row, row)
    out = []
    for m in sites_m:
        Hp = d_hamiltonian(state.positions, state.params, int(m), axis, bonds=state.bonds)
        M = psi.T @ (Hp @ psi)
        out.append(float(np.sum(W * M)))
    return np.array(out)


@dataclass(frozen=True)
class DecayTable:
    r: np.ndarray
    values: np.ndarray
    fit: RateFit

    @property
    def rate(self) -> float:
        """Decay constant ``gamma_fit = -slope`` of the semilog fit."""
        return -self.fit.slope


def locality_probe(positions, params: ModelParams, site: int, kind=QoIKind.NUMBER,
                   tau: float | None = None, sites_m=None, periods=None) -> DecayTable:
    """``max_i |dA_l / d[y(m)]_i|`` against ``r_lm`` with a semilog fit.

    Distances are minimum-image when ``periods`` is given. Derivatives that
    vanish by symmetry (below ``1e-12`` of the largest) are kept in the table
    but left out of the fit.
    """
    st = ElectronicState(positions, params, periods)
    y = st.positions
    if tau is None:
        tau = st.mu(float(len(y))).mu
    sites_m = np.arange(len(y)) if sites_m is None else np.asarray(sites_m)
    vals = np.max(np.abs([local_qoi_derivatives(st, site, kind, tau, sites_m, a)
                          for a in range(y.shape[1])]), axis=0)
    r = _min_image_distance(y[sites_m] - y[site], periods)
    m = (r > 0) & (vals > 1e-12 * vals.max())
    return DecayTable(r, vals, fit_rate(r[m], vals[m], "semilog"))


def _min_image_distance(diff, periods=None) -> np.ndarray:
    if periods is None:
        return np.linalg.norm(diff, axis=1)
    P = np.atleast_2d(np.asarray(periods, float))
    shifts = np.array(list(itertools.product((-1, 0, 1), repeat=len(P)))) @ P
    return np.min(np.linalg.norm(diff[:, None, :] + shifts[None, :, :], axis=2), axis=1)


def pointwise_limit_probe(lattice: BravaisLattice, params: ModelParams, Rs, kind=QoIKind.NUMBER,
                          tau: float | None = None, displacement=None, shape: str = "ball"):
    """``A_0`` on nested domains ``Omega_R`` around the origin, against the largest.

    ``displacement`` maps reference sites to displacements (default zero).
    ``shape`` is ``"ball"``, ``"box"`` or ``"skew"`` (the box stretched to
    ``-R <= x_1 <= 2R``); every shape contains ``B_R``. Returns ``(values, DecayTable)``; the
    table holds ``|A_0(R) - A_0(R_max)|`` for the smaller domains.
    """
    Rs = sorted(Rs)
    if tau is None:
        tau = fermi_level_bloch(params, lattice.A).mu_hom
    values = []
    for R in Rs:
        if shape == "ball":
            sites = lattice.points_in_ball(R)
        elif shape in ("box", "skew"):
            hi = np.full(lattice.dim, float(R))
            if shape == "skew":
                hi[0] = 2.0 * R
            sites = lattice.points_in_ball(float(np.linalg.norm(hi)))
            sites = sites[np.all((sites >= -R - 1e-12) & (sites <= hi + 1e-12), axis=1)]
        else:
            raise ValueError(f"unknown domain shape {shape!r}")
        y = sites if displacement is None else sites + np.asarray(displacement(sites), float)
        centre = int(np.argmin(np.linalg.norm(sites, axis=1)))
        st = ElectronicState(y, params)
        values.append(float(local_qois(st.spec, kind, tau, params.beta)[centre]))
    values = np.array(values)
    diffs = np.abs(values[:-1] - values[-1])
    return values, DecayTable(np.array(Rs[:-1], float), diffs,
                              fit_rate(np.array(Rs[:-1], float), diffs, "semilog"))


# ---------------------------------------------------------------------------
# Identity and invariance suites
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Check:
    name: str
    value: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(self.value <= self.tol)


def random_cluster(dim: int, n: int, rng, jitter: float = 0.1) -> np.ndarray:
    """``n`` sites nearest the origin of the unit chain or triangular lattice, jittered."""
    lat = BravaisLattice.cubic(1) if dim == 1 else BravaisLattice(TRIANGULAR)
    pts = lat.points_in_ball(2.0 + n ** (1 / dim))
    pts = pts[np.argsort(np.linalg.norm(pts, axis=1), kind="stable")[:n]]
    return pts + rng.uniform(-jitter, jitter, pts.shape)


def _rel(a, b) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))


def identity_suite(params: ModelParams | None = None, seed: int = 0) -> list:
    """Algebraic identities on random 10-20 site clusters in 1D and 2D."""
    p = params or ModelParams()
    rng = np.random.default_rng(seed)
    checks = []
    for dim in (1, 2):
        y = random_cluster(dim, int(rng.integers(10, 21)), rng)
        st = ElectronicState(y, p)
        Ne = float(len(y))
        tau = st.mu(Ne).mu
        lam, beta = st.spec.values, p.beta
        tag = f"d{dim}"
        # (a) e = tau n + g, per eigenvalue
        e = kernel(QoIKind.HELMHOLTZ, lam, tau, beta)
        rhs = tau * kernel(QoIKind.NUMBER, lam, tau, beta) + kernel(QoIKind.GRAND, lam, tau, beta)
        checks.append(Check(f"{tag} e = tau n + g", float(np.max(np.abs(e - rhs))), 1e-12))
        # (b) d/dx g against a central difference
        x = rng.uniform(lam.min() - 1, lam.max() + 1, 16)
        h = 1e-6
        fd = (kernel(QoIKind.GRAND, x + h, tau, beta) - kernel(QoIKind.GRAND, x - h, tau, beta)) / (2 * h)
        checks.append(Check(f"{tag} dg/dx vs FD", _rel(kernel_dx(QoIKind.GRAND, x, tau, beta), fd), 1e-6))
        # (c) contour quadrature against eigen-sums
        for kind in QoIKind:
            ref = st.qoi(kind, tau)
            val = trace_qoi_contour(st.H, kind, tau, beta, Contour.around(lam, beta))
            checks.append(Check(f"{tag} contour {kind.name}", abs(val - ref) / max(abs(ref), 1.0), 1e-8))
        # (d) local QoIs sum to the total
        for kind in QoIKind:
            tot = st.qoi(kind, tau)
            loc = float(np.sum(local_qois(st.spec, kind, tau, beta)))
            checks.append(Check(f"{tag} sum local {kind.name}", abs(loc - tot) / max(abs(tot), 1e-300), 1e-11))
        # (e) Hellmann-Feynman force against a finite difference of G
        F = force(st, tau)
        fd = np.zeros_like(y)
        hh = 1e-5
        for idx in np.ndindex(y.shape):
            yp, ym = y.copy(), y.copy()
            yp[idx] += hh
            ym[idx] -= hh
            fd[idx] = -(grand_potential(yp, p, tau) - grand_potential(ym, p, tau)) / (2 * hh)
        checks.append(Check(f"{tag} force vs FD of G", _rel(F, fd), 1e-6))
        # (f) canonical gradient with mu re-solved
        g, _ = grad_helmholtz(st, Ne)
        fdE = np.zeros_like(y)
        for idx in np.ndindex(y.shape):
            yp, ym = y.copy(), y.copy()
            yp[idx] += hh
            ym[idx] -= hh
            fdE[idx] = (helmholtz_energy(yp, p, Ne) - helmholtz_energy(ym, p, Ne)) / (2 * hh)
        checks.append(Check(f"{tag} grad E vs FD (mu re-solved)", _rel(g, fdE), 1e-5))
        # (g) cross-derivative identity d_tau F = d_u N
        cfg = DefectConfiguration(y, np.zeros_like(y), np.ones(len(y), bool), bc="open")
        J = coupled_jacobian(cfg, p, tau, Ne, state=st)
        checks.append(Check(f"{tag} d_tau F = d_u N", float(np.max(np.abs(J.dtauF - J.duN))), 1e-8))
    return checks


def invariance_suite(params: ModelParams | None = None, seed: int = 0) -> list:
    """Isometry and permutation invariance of all local QoIs."""
    p = params or ModelParams()
    rng = np.random.default_rng(seed)
    checks = []
    for dim in (1, 2):
        y = random_cluster(dim, int(rng.integers(10, 21)), rng)
        st = ElectronicState(y, p)
        tau = st.mu(float(len(y))).mu
        Q = np.array([[-1.0]]) if dim == 1 else special_ortho_group.rvs(2, random_state=rng)
        moved = y @ Q.T + rng.normal(size=dim)
        perm = rng.permutation(len(y))
        st_iso = ElectronicState(moved, p)
        st_perm = ElectronicState(y[perm], p)
        for kind in QoIKind:
            ref = local_qois(st.spec, kind, tau, p.beta)
            iso = local_qois(st_iso.spec, kind, tau, p.beta)
            per = local_qois(st_perm.spec, kind, tau, p.beta)
            checks.append(Check(f"d{dim} isometry {kind.name}", float(np.max(np.abs(iso - ref))), 1e-10))
            checks.append(Check(f"d{dim} permutation {kind.name}",
                                float(np.max(np.abs(per - ref[perm]))), 1e-10))
    return checks


# ---------------------------------------------------------------------------
# Dislocation study
# ---------------------------------------------------------------------------

@dataclass
class DislocationStudy:
    mu: StudyResult
    predictor_fit: RateFit
    relaxed_fit: RateFit | None
    slip_gap: float
    mu_hom: float


def dislocation_study(Rs, disl: ScrewDislocation | None = None, params: ModelParams | None = None,
                      R_b: float = 2.0, gamma: float = 1.0, discard: int = 0,
                      log: RecordLog | None = None) -> DislocationStudy:
    """Predictor strain decay, slip invariance, mu convergence and relaxed strain decay."""
    disl = disl or ScrewDislocation()
    p = params or SCREW_PARAMS
    Rs = sorted(Rs)
    mu_hom = screw_fermi_level(disl, p).mu_hom
    r, e = predictor_strain_decay(disl, max(Rs))
    m = r > disl.r_core + 1.0
    predictor_fit = fit_rate(r[m], e[m])
    opts = SolverOptions(force_constants=screw_force_constants(disl, p))
    res = StudyResult("mu-dislocation-d2", rate_theory=-1.0, threshold=-0.8)
    last = None
    try:
        for R in Rs:
            domain, sol = solve_dislocation(disl, p, R, R_b, tau0=mu_hom, options=opts)
            rec = StudyRecord(float(R), len(domain.sites), float(len(domain.sites)), sol.mu,
                              abs(sol.mu - mu_hom), math.nan, sol.iterations, sol.force_residual,
                              sol.count_residual)
            res.records.append(rec)
            if log:
                log.append(rec)
            last = (domain, sol)
    except NonConvergenceError as err:
        res.error = str(err)
    if res.error is None:
        res.fit = _safe_fit(res.column("R"), res.column("mu_error"), discard)
    relaxed_fit, gap = None, math.nan
    if last is not None:
        domain, sol = last
        u = sol.u[:, 2]
        strain = corrector_strain(domain, u, gamma)
        rr = np.linalg.norm(domain.sites - disl.x_hat, axis=1)
        R = Rs[-1]
        w = (rr > disl.r_core + 1.0) & (rr <= R / 2)
        relaxed_fit = fit_rate(rr[w], strain[w])
        slip = np.flatnonzero(disl.in_slip_region(domain.sites) & (rr <= R / 2))
        probe = slip[np.argsort(rr[slip])[:3]]
        gap = max(slip_invariance_gap(domain, p, u, int(s), mu_hom) for s in probe)
    return DislocationStudy(res, predictor_fit, relaxed_fit, gap, mu_hom)
