"""Two-centre tight-binding model: parameters and thermodynamic kernels.

All kernels accept real or complex arrays; complex arguments are needed for
contour quadrature and must stay inside the strip ``|Im z| < pi/beta``.
"""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

SPIN = 2.0

# Blend window: psi_c = 1 below PLATEAU * Rc, 0 above Rc.
PLATEAU = 0.7


class QoIKind(enum.Enum):
    """Selector for the three analytic quantities of interest."""

    HELMHOLTZ = "e"
    GRAND = "g"
    NUMBER = "n"

    @classmethod
    def parse(cls, value: "QoIKind | str") -> "QoIKind":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower()
        for kind in cls:
            if key in (kind.value, kind.name.lower()):
                return kind
        raise ValueError(f"unknown QoI kind {value!r}")


@dataclass(frozen=True)
class ModelParams:
    """Tight-binding kernels, cutoff and temperature.

    The defaults give a phonon-stable unit chain and unit triangular lattice
    at half filling, with nearest neighbours only (``0.7 Rc > r0`` and
    ``Rc < sqrt(3)``). ``c1`` is the value at which the half-filled unit
    chain carries no stress at ``beta = 10``, so a vacancy there relaxes
    locally instead of straining the whole domain.
    """

    r0: float = 1.0
    t0: float = 1.0
    q_hop: float = 1.0
    q_rho: float = 8.0
    eps0: float = 0.0
    c1: float = 0.0792472739
    Rc: float = 1.6
    beta: float = 10.0
    m_accum: float = 0.5
    spin_factor: float = SPIN

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if not self.Rc > self.r0 > 0:
            raise ValueError("need Rc > r0 > 0")
        if not self.m_accum > 0:
            raise ValueError("m_accum must be positive")
        if not self.t0 > 0:
            raise ValueError("t0 must be positive")
        if self.spin_factor != SPIN:
            raise ValueError("spin_factor is fixed at 2")

    @property
    def strip(self) -> float:
        """Half-width ``pi/beta`` of the analyticity strip of every kernel."""
        return np.pi / self.beta

    def with_(self, **changes) -> "ModelParams":
        return replace(self, **changes)

    def as_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, table: dict) -> "ModelParams":
        known = {f.name for f in fields(cls)}
        unknown = set(table) - known
        if unknown:
            raise KeyError(f"unknown model parameter(s): {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in table.items()})


# ---------------------------------------------------------------------------
# Fermi-Dirac function and entropy
# ---------------------------------------------------------------------------

def _exp_neg_abs(t):
    # exp(-|Re t|) with the imaginary part carried along; never overflows
    sign = np.where(np.real(t) >= 0, 1.0, -1.0)
    return np.exp(-sign * t), sign


def fermi(x, beta: float):
    """Fermi-Dirac occupation ``1/(1+exp(beta*x))``, overflow safe."""
    t = beta * np.asarray(x)
    e, sign = _exp_neg_abs(t)
    # sign>0: e/(1+e) ; sign<0: 1/(1+e)
    out = np.where(sign > 0, e / (1.0 + e), 1.0 / (1.0 + e))
    return out[()] if np.ndim(out) == 0 else out


def fermi_prime(x, beta: float):
    """Derivative ``f'(x) = -beta f(x) (1 - f(x))``."""
    t = beta * np.asarray(x)
    e, _ = _exp_neg_abs(t)
    out = -beta * e / (1.0 + e) ** 2
    return out[()] if np.ndim(out) == 0 else out


def log_one_minus_fermi(x, beta: float):
    """``ln(1 - f(x)) = -ln(1 + exp(-beta*x))``, analytic on the strip."""
    t = beta * np.asarray(x)
    e, sign = _exp_neg_abs(t)
    out = np.where(sign > 0, -np.log1p(e), t - np.log1p(e))
    return out[()] if np.ndim(out) == 0 else out


def entropy(f):
    """``S(f) = f ln f + (1-f) ln(1-f)`` with ``S(0) = S(1) = 0``."""
    f = np.asarray(f, dtype=float)
    if np.any((f < 0) | (f > 1)) or np.any(np.isnan(f)):
        raise ValueError("entropy requires occupations in [0, 1]")
    with np.errstate(divide="ignore", invalid="ignore"):
        a = np.where(f > 0, f * np.log(np.where(f > 0, f, 1.0)), 0.0)
        g = 1.0 - f
        b = np.where(g > 0, g * np.log(np.where(g > 0, g, 1.0)), 0.0)
    out = a + b
    return out[()] if np.ndim(out) == 0 else out


# ---------------------------------------------------------------------------
# QoI kernels a(x, tau)
# ---------------------------------------------------------------------------

def number_kernel(x, tau, beta):
    return SPIN * fermi(np.asarray(x) - tau, beta)


def grand_kernel(x, tau, beta):
    return (SPIN / beta) * log_one_minus_fermi(np.asarray(x) - tau, beta)


def helmholtz_kernel(x, tau, beta):
    """Entropy form ``2 x f + (2/beta) S(f)``; real arguments only."""
    x = np.asarray(x, dtype=float)
    f = fermi(x - tau, beta)
    return SPIN * x * f + (SPIN / beta) * entropy(f)


def kernel(kind, x, tau, beta):
    """Evaluate ``e``, ``g`` or ``n`` at energy ``x`` (real or complex).

    For complex ``x`` the Helmholtz kernel uses ``tau*n + g``, which is the
    analytic continuation of the entropy form.
    """
    kind = QoIKind.parse(kind)
    if kind is QoIKind.NUMBER:
        return number_kernel(x, tau, beta)
    if kind is QoIKind.GRAND:
        return grand_kernel(x, tau, beta)
    if np.iscomplexobj(x):
        return tau * number_kernel(x, tau, beta) + grand_kernel(x, tau, beta)
    return helmholtz_kernel(x, tau, beta)


def kernel_dx(kind, x, tau, beta):
    """Derivative of a kernel in its energy argument."""
    kind = QoIKind.parse(kind)
    if kind is QoIKind.NUMBER:
        return SPIN * fermi_prime(np.asarray(x) - tau, beta)
    if kind is QoIKind.GRAND:
        return SPIN * fermi(np.asarray(x) - tau, beta)
    return tau * SPIN * fermi_prime(np.asarray(x) - tau, beta) + SPIN * fermi(np.asarray(x) - tau, beta)


# ---------------------------------------------------------------------------
# Radial functions
# ---------------------------------------------------------------------------

def cutoff(r, Rc: float):
    """C^3 blend: 1 on ``[0, 0.7 Rc]``, 0 on ``[Rc, inf)``, septic in between."""
    r = np.asarray(r, dtype=float)
    r1 = PLATEAU * Rc
    x = np.clip((r - r1) / (Rc - r1), 0.0, 1.0)
    step = x ** 4 * (35.0 - 84.0 * x + 70.0 * x ** 2 - 20.0 * x ** 3)
    return 1.0 - step


def cutoff_prime(r, Rc: float):
    r = np.asarray(r, dtype=float)
    r1 = PLATEAU * Rc
    x = np.clip((r - r1) / (Rc - r1), 0.0, 1.0)
    dstep = 140.0 * x ** 3 * (1.0 - x) ** 3
    return -dstep / (Rc - r1)


def _check_r(r):
    r = np.asarray(r, dtype=float)
    if np.any(r <= 0):
        raise ValueError("distances must be positive")
    return r


def hop(r, p: ModelParams):
    r = _check_r(r)
    out = -p.t0 * np.exp(-p.q_hop * (r / p.r0 - 1.0)) * cutoff(r, p.Rc)
    return np.where(r < p.Rc, out, 0.0)


def hop_prime(r, p: ModelParams):
    r = _check_r(r)
    e = -p.t0 * np.exp(-p.q_hop * (r / p.r0 - 1.0))
    out = e * (-p.q_hop / p.r0) * cutoff(r, p.Rc) + e * cutoff_prime(r, p.Rc)
    return np.where(r < p.Rc, out, 0.0)


def rho(r, p: ModelParams):
    r = _check_r(r)
    out = np.exp(-p.q_rho * (r / p.r0 - 1.0)) * cutoff(r, p.Rc)
    return np.where(r < p.Rc, out, 0.0)


def rho_prime(r, p: ModelParams):
    r = _check_r(r)
    e = np.exp(-p.q_rho * (r / p.r0 - 1.0))
    out = e * (-p.q_rho / p.r0) * cutoff(r, p.Rc) + e * cutoff_prime(r, p.Rc)
    return np.where(r < p.Rc, out, 0.0)


def ons(z, p: ModelParams):
    z = np.asarray(z, dtype=float)
    if np.any(z < 0):
        raise ValueError("on-site density must be non-negative")
    return p.eps0 + p.c1 * z


def ons_prime(z, p: ModelParams):
    return np.full_like(np.asarray(z, dtype=float), p.c1)
