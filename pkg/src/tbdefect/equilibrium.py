"""Canonical and grand-canonical finite-domain equilibria.

The unknowns are the free displacement coordinates and, in canonical mode,
the chemical potential. Newton steps come from a dense finite-difference
Jacobian for small systems and from preconditioned GMRES with
finite-difference Jacobian-vector products for large ones; both are
globalised by Armijo backtracking on ``|T|^2``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.spatial import cKDTree

from .forces import density_entries, force
from .hamiltonian import trace_gradient
from .lattice import validate_configuration
from .model import SPIN, ModelParams, fermi_prime
from .observables import ElectronCountError, ElectronicState, count_slope, electron_count, solve_mu


class NonConvergenceError(RuntimeError):
    """Newton iteration failed; ``best`` holds the best iterate found."""

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class StabilityError(RuntimeError):
    """Jacobian is numerically singular."""


class InterpenetrationError(ValueError):
    """A displacement violates the accumulation bound."""


@dataclass
class EquilibriumProblem:
    """Finite-domain relaxation problem.

    ``base`` are the positions at zero unknown displacement (reference sites
    plus any predictor); ``sites`` are the reference lattice sites used for
    distances in the non-interpenetration check and the preconditioner.
    ``axes`` selects which Cartesian components of ``base`` may move.
    """

    base: np.ndarray
    free: np.ndarray
    params: ModelParams
    Ne: float | None = None
    mode: str = "canonical"
    tau: float | None = None
    periods: np.ndarray | None = None
    axes: tuple | None = None
    sites: np.ndarray | None = None

    def __post_init__(self):
        b = np.asarray(self.base, float)
        self.base = b[:, None] if b.ndim == 1 else b
        self.free = np.asarray(self.free, bool)
        if self.axes is None:
            self.axes = tuple(range(self.base.shape[1]))
        if self.sites is None:
            self.sites = self.base.copy()
        if self.mode not in ("canonical", "grand"):
            raise ValueError("mode must be 'canonical' or 'grand'")
        n = len(self.base)
        if self.mode == "canonical":
            if self.Ne is None:
                self.Ne = float(n)
            if not 0 < self.Ne < SPIN * n:
                raise ElectronCountError(f"need 0 < Ne < {SPIN * n:g}, got {self.Ne!r}")
        elif self.tau is None:
            raise ValueError("grand-canonical mode needs tau")

    @classmethod
    def from_config(cls, config, params: ModelParams, **kw) -> "EquilibriumProblem":
        return cls(config.positions, config.free, params, periods=config.periods,
                   sites=np.asarray(config.sites, float).reshape(len(config.sites), -1), **kw)

    @property
    def canonical(self) -> bool:
        return self.mode == "canonical"

    @property
    def coords(self) -> np.ndarray:
        """Flat indices into the ``(N, D)`` position array of the unknowns."""
        d = self.base.shape[1]
        sites = np.flatnonzero(self.free)
        return (sites[:, None] * d + np.asarray(self.axes)).ravel()

    @property
    def n_unknowns(self) -> int:
        return len(self.coords) + (1 if self.canonical else 0)

    def positions(self, x) -> np.ndarray:
        y = self.base.copy()
        y.flat[self.coords] += x
        return y

    def displacement(self, x) -> np.ndarray:
        return self.positions(x) - self.base

    def grand(self, tau: float) -> "EquilibriumProblem":
        return replace(self, mode="grand", tau=tau)


@dataclass
class Evaluation:
    """Residual ``T = (-F, N/Ne - 1)`` at one iterate together with its state."""

    x: np.ndarray
    tau: float
    state: ElectronicState
    F: np.ndarray  # forces on the unknown coordinates
    count: float  # N/Ne - 1 (0 in grand mode)

    @property
    def T(self) -> np.ndarray:
        return np.append(-self.F, self.count) if self._canonical else -self.F

    _canonical: bool = True


def _evaluate(problem: EquilibriumProblem, x: np.ndarray, tau: float,
              check: bool = True) -> Evaluation:
    y = problem.positions(x)
    if check and np.any(x):
        rep = validate_configuration(problem.base, y - problem.base, problem.params.m_accum,
                                     Rc=problem.params.Rc) if problem.periods is None else None
        if rep is not None and not rep.ok:
            raise InterpenetrationError(f"pair ratio {rep.worst_ratio:.3f} below m_accum")
    st = ElectronicState(y, problem.params, problem.periods)
    F = force(st, tau).ravel()[problem.coords]
    if problem.canonical:
        count = electron_count(st.spec.values, tau, st.beta) / problem.Ne - 1.0
    else:
        count = 0.0
    return Evaluation(x, tau, st, F, count, problem.canonical)


def residual(problem: EquilibriumProblem, u=None, tau: float | None = None):
    """Forces on the unknowns and the normalised count residual."""
    x = np.zeros(len(problem.coords)) if u is None else _unknowns_from(problem, u)
    tau = problem.tau if tau is None else tau
    if tau is None:
        raise ValueError("tau must be given")
    ev = _evaluate(problem, x, tau)
    return ev.F, ev.count


def _unknowns_from(problem, u) -> np.ndarray:
    u = np.asarray(u, float)
    if u.ndim == 1 and len(u) == len(problem.coords):
        return u
    u = u.reshape(problem.base.shape)
    return u.ravel()[problem.coords]


# ---------------------------------------------------------------------------
# Jacobians
# ---------------------------------------------------------------------------

def _tau_blocks(problem: EquilibriumProblem, ev: Evaluation):
    """Analytic ``dF/dtau``, ``dN/du`` and ``dN/dtau`` on the unknowns."""
    st = ev.state
    w = SPIN * fermi_prime(st.spec.values - ev.tau, st.beta)
    P_bond, P_diag = density_entries(st.spec, st.bonds, w)
    duN = trace_gradient(st.bonds, problem.params, P_bond, P_diag).ravel()[problem.coords]
    # forces carry weights 2 f(lambda - tau); their tau-derivative is -2 f'
    dtauF = duN
    dtauN = count_slope(st.spec.values, ev.tau, st.beta)
    return dtauF, duN, dtauN


def dense_jacobian(problem: EquilibriumProblem, ev: Evaluation, fd_step: float | None = None):
    """Dense ``dT/d(x, tau)``; force block by central differences of analytic forces."""
    n = len(problem.coords)
    h = fd_step if fd_step is not None else 1e-5 * (1.0 + float(np.max(np.abs(ev.x), initial=0.0)))
    K = np.empty((n, n))
    for c in range(n):
        e = np.zeros(n)
        e[c] = h
        Fp = _evaluate(problem, ev.x + e, ev.tau, check=False).F
        Fm = _evaluate(problem, ev.x - e, ev.tau, check=False).F
        K[:, c] = (Fp - Fm) / (2 * h)
    K = 0.5 * (K + K.T)
    if not problem.canonical:
        return -K
    dtauF, duN, dtauN = _tau_blocks(problem, ev)
    J = np.empty((n + 1, n + 1))
    J[:n, :n] = -K
    J[:n, n] = -dtauF
    J[n, :n] = duN / problem.Ne
    J[n, n] = dtauN / problem.Ne
    return J


@dataclass
class ForceConstants:
    """Homogeneous-lattice force constants ``Phi(rho)`` keyed by site offset."""

    offsets: np.ndarray  # (M, d_ref) reference-lattice offsets
    blocks: np.ndarray  # (M, k, k) Hessian blocks over the moving axes
    radius: float


def homogeneous_force_constants(params: ModelParams, cell_sites: np.ndarray, base: np.ndarray,
                                periods: np.ndarray, axes, origin: int, radius: float,
                                tau: float | None = None, h: float = 1e-5) -> ForceConstants:
    """Hessian of ``G`` between ``origin`` and its neighbours on a homogeneous torus.

    ``cell_sites`` are reference coordinates used to label offsets.
    """
    axes = tuple(axes)
    st0 = ElectronicState(base, params, periods)
    if tau is None:
        tau = solve_mu(st0.spec, float(len(base)), params.beta).mu
    cols = []
    for a in axes:
        yp, ym = base.copy(), base.copy()
        yp[origin, a] += h
        ym[origin, a] -= h
        Fp = force(ElectronicState(yp, params, periods), tau)[:, axes]
        Fm = force(ElectronicState(ym, params, periods), tau)[:, axes]
        cols.append(-(Fp - Fm) / (2 * h))
    blocks = np.stack(cols, axis=-1)  # (N, k, k): d^2 G / dy_l,b dy_origin,a
    off = cell_sites - cell_sites[origin]
    # reduce offsets to the nearest periodic image in the reference plane
    ref_periods = _reference_periods(cell_sites, periods)
    if ref_periods is not None:
        frac = np.linalg.lstsq(ref_periods.T, off.T, rcond=None)[0].T
        off = off - np.round(frac) @ ref_periods
    keep = np.linalg.norm(off, axis=1) <= radius
    return ForceConstants(off[keep], blocks[keep], radius)


def _reference_periods(cell_sites, periods):
    if periods is None:
        return None
    d = cell_sites.shape[1]
    P = np.asarray(periods)[:, :d]
    P = P[np.linalg.norm(P, axis=1) > 0]
    return P if len(P) else None


def preconditioner_matrix(problem: EquilibriumProblem, fc: ForceConstants) -> sp.csc_matrix:
    """Sparse homogeneous Hessian restricted to the unknown coordinates."""
    free = np.flatnonzero(problem.free)
    ref = problem.sites[free]
    k = len(problem.axes)
    tree = cKDTree(ref)
    pairs = tree.sparse_distance_matrix(tree, fc.radius + 1e-9, output_type="ndarray")
    pi, pj = pairs["i"].astype(int), pairs["j"].astype(int)
    off_diag = pi != pj
    pi, pj = pi[off_diag], pj[off_diag]
    pi = np.concatenate([pi, np.arange(len(ref))])
    pj = np.concatenate([pj, np.arange(len(ref))])
    lookup = {tuple(np.round(o, 6)): b for o, b in zip(fc.offsets, fc.blocks)}
    rows, cols, vals = [], [], []
    for a, b in zip(pi, pj):
        blk = lookup.get(tuple(np.round(ref[b] - ref[a], 6)))
        if blk is None:
            continue
        for p in range(k):
            for q in range(k):
                rows.append(a * k + p)
                cols.append(b * k + q)
                vals.append(blk[p, q])
    n = len(ref) * k
    K = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsc()
    K = 0.5 * (K + K.T)
    return K.tocsc()


# ---------------------------------------------------------------------------
# Newton solver
# ---------------------------------------------------------------------------

@dataclass
class EquilibriumSolution:
    u: np.ndarray  # (N, D) displacement, zero on clamped sites
    x: np.ndarray
    mu: float | None
    force_residual: float
    count_residual: float
    iterations: int
    trace: list = field(default_factory=list)
    state: ElectronicState | None = None

    @property
    def converged(self) -> bool:
        return self.force_residual <= 1e-9 and self.count_residual <= 1e-10


@dataclass
class SolverOptions:
    max_iter: int = 100
    force_tol: float = 1e-9
    count_tol: float = 1e-10
    armijo: float = 1e-4
    max_halvings: int = 30
    dense_max: int = 160
    gmres_max: int = 400
    fd_step: float | None = None
    force_constants: ForceConstants | None = None
    reuse_jacobian: bool = True


def _merit(ev: Evaluation) -> float:
    return float(ev.T @ ev.T)


def _converged(ev: Evaluation, opts: SolverOptions) -> bool:
    f = float(np.max(np.abs(ev.F), initial=0.0))
    return f <= opts.force_tol and abs(ev.count) <= opts.count_tol


def _newton(problem: EquilibriumProblem, x0: np.ndarray, tau0: float,
            opts: SolverOptions) -> EquilibriumSolution:
    x, tau = np.array(x0, float), float(tau0)
    if problem.canonical:
        st0 = ElectronicState(problem.positions(x), problem.params, problem.periods)
        tau = solve_mu(st0.spec, problem.Ne, problem.params.beta, tau).mu
    ev = _evaluate(problem, x, tau)
    trace = [(0, float(np.max(np.abs(ev.F), initial=0.0)), abs(ev.count), 1.0)]
    n = len(problem.coords)
    use_dense = problem.n_unknowns <= opts.dense_max
    J = None
    Mfac = None
    if not use_dense:
        if opts.force_constants is None:
            raise ValueError("large problems need force constants for the preconditioner")
        Kp = preconditioner_matrix(problem, opts.force_constants)
        Mfac = spla.splu(Kp)
    best = ev
    for it in range(1, opts.max_iter + 1):
        if _converged(ev, opts):
            break
        T = ev.T
        if use_dense:
            if J is None or not opts.reuse_jacobian or it % 4 == 0 or J.shape[0] != len(T):
                J = dense_jacobian(problem, ev, opts.fd_step)
            try:
                step = np.linalg.solve(J, -T)
            except np.linalg.LinAlgError as err:
                smin = np.linalg.svd(J, compute_uv=False).min()
                raise StabilityError(f"singular Jacobian (smallest singular value {smin:.2e})") from err
        else:
            step = _gmres_step(problem, ev, Mfac, opts)
        # Armijo backtracking on |T|^2 along the Newton direction
        phi0 = _merit(ev)
        lam = 1.0
        accepted = None
        for _ in range(opts.max_halvings + 1):
            xt = x + lam * step[:n]
            tt = tau + lam * step[n] if problem.canonical else tau
            try:
                trial = _evaluate(problem, xt, tt)
            except InterpenetrationError:
                lam *= 0.5
                continue
            if _merit(trial) <= (1 - 2 * opts.armijo * lam) * phi0:
                accepted = trial
                break
            lam *= 0.5
        if accepted is None:
            J = None  # refresh the Jacobian before giving up
            if use_dense and opts.reuse_jacobian:
                J = dense_jacobian(problem, ev, opts.fd_step)
                step = np.linalg.solve(J, -T)
                xt = x + step[:n]
                tt = tau + step[n] if problem.canonical else tau
                try:
                    trial = _evaluate(problem, xt, tt)
                except InterpenetrationError:
                    trial = None
                if trial is not None and _merit(trial) < phi0:
                    accepted, lam = trial, 1.0
            if accepted is None:
                raise NonConvergenceError("line search failed", _solution(problem, best, it, trace))
        ev = accepted
        x, tau = ev.x, ev.tau
        if _merit(ev) < _merit(best):
            best = ev
        trace.append((it, float(np.max(np.abs(ev.F), initial=0.0)), abs(ev.count), lam))
    else:
        if not _converged(ev, opts):
            raise NonConvergenceError("maximum Newton iterations reached",
                                      _solution(problem, best, opts.max_iter, trace))
    return _solution(problem, ev, len(trace) - 1, trace)


def _gmres_step(problem, ev: Evaluation, Mfac, opts: SolverOptions) -> np.ndarray:
    n = len(problem.coords)
    T = ev.T
    canonical = problem.canonical
    if canonical:
        dtauF, duN, dtauN = _tau_blocks(problem, ev)
    scale = 1e-7 * (1.0 + float(np.max(np.abs(ev.x), initial=0.0)))

    def matvec(v):
        v = np.asarray(v, float).ravel()
        dv = v[:n]
        nrm = np.linalg.norm(dv)
        out = np.zeros(len(v))
        if nrm > 0:
            eps = scale / nrm
            Fp = _evaluate(problem, ev.x + eps * dv, ev.tau, check=False).F
            Fm = _evaluate(problem, ev.x - eps * dv, ev.tau, check=False).F
            out[:n] = -(Fp - Fm) / (2 * eps)
        if canonical:
            out[:n] -= dtauF * v[n]
            out[n] = (duN @ dv + dtauN * v[n]) / problem.Ne
        return out

    def precond(v):
        v = np.asarray(v, float).ravel()
        out = np.empty(len(v))
        out[:n] = Mfac.solve(v[:n])
        if canonical:
            out[n] = v[n] * problem.Ne / dtauN
        return out

    m = len(T)
    A = spla.LinearOperator((m, m), matvec=matvec, dtype=float)
    M = spla.LinearOperator((m, m), matvec=precond, dtype=float)
    # inexact Newton: the forcing term shrinks with the residual
    rtol = min(1e-2, max(1e-6, float(np.linalg.norm(T))))
    step, info = spla.gmres(A, -T, M=M, rtol=rtol, atol=0.0, restart=60,
                            maxiter=max(1, opts.gmres_max // 60))
    if info < 0:
        raise StabilityError("GMRES breakdown")
    return step


def _solution(problem, ev: Evaluation, iterations: int, trace) -> EquilibriumSolution:
    return EquilibriumSolution(
        u=problem.displacement(ev.x),
        x=ev.x.copy(),
        mu=ev.tau if problem.canonical else None,
        force_residual=float(np.max(np.abs(ev.F), initial=0.0)),
        count_residual=abs(ev.count),
        iterations=iterations,
        trace=list(trace),
        state=ev.state,
    )


def solve_canonical(problem: EquilibriumProblem, u0=None, tau0: float | None = None,
                    options: SolverOptions | None = None) -> EquilibriumSolution:
    """Solve ``-F(u, tau) = 0`` and ``N(u, tau) = Ne`` jointly."""
    if not problem.canonical:
        raise ValueError("problem is not canonical")
    opts = options or SolverOptions()
    x0 = np.zeros(len(problem.coords)) if u0 is None else _unknowns_from(problem, u0)
    if tau0 is None:
        st = ElectronicState(problem.positions(x0), problem.params, problem.periods)
        tau0 = solve_mu(st.spec, problem.Ne, problem.params.beta).mu
    return _newton(problem, x0, tau0, opts)


def solve_grand_canonical(problem: EquilibriumProblem, tau: float | None = None, u0=None,
                          options: SolverOptions | None = None) -> EquilibriumSolution:
    """Solve ``F(u, tau) = 0`` at fixed ``tau``."""
    prob = problem if (not problem.canonical and tau is None) else problem.grand(
        problem.tau if tau is None else tau)
    opts = options or SolverOptions()
    x0 = np.zeros(len(prob.coords)) if u0 is None else _unknowns_from(prob, u0)
    sol = _newton(prob, x0, prob.tau, opts)
    sol.count_residual = 0.0
    return sol


def check_grand_forces(problem: EquilibriumProblem, sol: EquilibriumSolution) -> float:
    """Max grand-canonical force at ``tau = mu`` for a canonical solution."""
    st = ElectronicState(problem.positions(sol.x), problem.params, problem.periods)
    return float(np.max(np.abs(force(st, sol.mu).ravel()[problem.coords]), initial=0.0))
