"""Constant-acceleration motion prior on SE(3) x R^12.

The state is ``{T, w, wd}``: pose, body velocity and body acceleration.
Perturbations ``gamma = [xi; eta; zeta]`` act as

    T = exp(xi^) T_bar,   w = w_bar + eta,   wd = wd_bar + zeta,

and the nominal kinematics are ``dT/dt = w^ T`` with ``dw/dt = wd`` and
white noise on jerk.  Between two stamps the mean is propagated with a
Magnus expansion of the pose ODE, and ``(F, Qk)`` come from exponentiating
the Magnus expansion of the matrix-fraction system.

The same module provides the constant-velocity (white noise on
acceleration) reduction used by the baseline estimator.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm

from . import _jit
from .errors import NonPSDError
from .se3 import (
    Pose,
    curlywedge,
    hat,
    matfun_H,
    matfun_J,
    se3_exp,
    se3_left_jacobian,
    se3_log,
)

CA_DIM = 18
CV_DIM = 12
DEFAULT_MAGNUS_ORDER = 4


@dataclass(frozen=True)
class State:
    pose: Pose
    velocity: np.ndarray
    acceleration: np.ndarray = field(default_factory=lambda: np.zeros(6))
    stamp: float = 0.0

    @classmethod
    def identity(cls, stamp: float = 0.0) -> State:
        return cls(Pose.identity(), np.zeros(6), np.zeros(6), stamp)

    def with_stamp(self, stamp: float) -> State:
        return State(self.pose, self.velocity, self.acceleration, stamp)

    def is_finite(self) -> bool:
        return bool(
            np.all(np.isfinite(self.velocity))
            and np.all(np.isfinite(self.acceleration))
            and np.all(np.isfinite(self.pose.translation))
        )


@dataclass(frozen=True)
class StateGaussian:
    mean: State
    cov: np.ndarray

    def is_valid(self, tol: float = 1e-10) -> bool:
        c = self.cov
        if np.abs(c - c.T).max() > tol * max(1.0, np.abs(c).max()):
            return False
        return bool(np.linalg.eigvalsh(0.5 * (c + c.T)).min() >= -tol)


@dataclass(frozen=True)
class DiscreteTransition:
    F: np.ndarray
    Qk: np.ndarray
    dt: float


def process_noise(sigma_linear: float = 2.0, sigma_angular: float = 1.0) -> np.ndarray:
    """Diagonal power spectral density ``diag(s_lin^2 I3, s_ang^2 I3)``."""
    return np.diag([sigma_linear**2] * 3 + [sigma_angular**2] * 3)


# --------------------------------------------------------------------------- #
# state algebra
# --------------------------------------------------------------------------- #
def state_boxplus(gamma: np.ndarray, x: State) -> State:
    gamma = np.asarray(gamma, dtype=float)
    pose = se3_exp(gamma[:6]) @ x.pose
    acc = x.acceleration + gamma[12:18] if gamma.shape[0] >= 18 else x.acceleration
    return State(pose, x.velocity + gamma[6:12], acc, x.stamp)


def state_boxminus(x1: State, x2: State, dim: int = CA_DIM) -> np.ndarray:
    """``[ln(T1 T2^-1); w1 - w2; wd1 - wd2]`` (first ``dim`` entries)."""
    xi = se3_log(x1.pose @ x2.pose.inverse())
    out = np.concatenate([xi, x1.velocity - x2.velocity, x1.acceleration - x2.acceleration])
    return out[:dim]


def coordinate_jacobian(gamma: np.ndarray) -> np.ndarray:
    """Block-diagonal ``diag(J(xi), I, I)`` relating perturbation coordinates."""
    gamma = np.asarray(gamma, dtype=float)
    dim = gamma.shape[0]
    psi = np.eye(dim)
    psi[:6, :6] = se3_left_jacobian(gamma[:6])
    return psi


# --------------------------------------------------------------------------- #
# nominal mean
# --------------------------------------------------------------------------- #
def magnus_vector(w, wd, dt: float, order: int = DEFAULT_MAGNUS_ORDER) -> np.ndarray:
    """Twist of the truncated Magnus expansion for ``dT/dt = (w + t wd)^ T``.

    ``order=3`` is the three-term expansion
    ``dt w + dt^2/2 wd + dt^3/12 [wd, w] + dt^5/240 [wd, [wd, w]]``;
    ``order=4`` (default) adds ``dt^5/720 [a0, [a0, [a0, wd]]]`` with the
    mid-interval velocity ``a0``, the only remaining degree-5 term;
    ``order=2`` drops the last commutator of ``order=3``; ``order=1`` keeps
    only the first integral.
    """
    return _jit.magnus_vector(np.asarray(w, dtype=float), np.asarray(wd, dtype=float), float(dt), int(order))


def magnus_pose_increment(w, wd, dt: float, order: int = DEFAULT_MAGNUS_ORDER) -> np.ndarray:
    """4x4 se(3) element ``S_w(dt)`` with ``T_k = exp(S_w) T_{k-1}``."""
    return hat(magnus_vector(w, wd, dt, order))


def propagate_nominal(x: State, dt: float, order: int = DEFAULT_MAGNUS_ORDER) -> State:
    rot, trans, vel = _jit.propagate_kernel(
        x.pose.rotation, x.pose.translation, x.velocity, x.acceleration, float(dt), order
    )
    return State(Pose(rot, trans), vel, x.acceleration, x.stamp + dt)


def propagate_nominal_cv(x: State, dt: float) -> State:
    """Constant-velocity mean: ``exp(dt w^) T``; acceleration is ignored and zeroed."""
    pose = se3_exp(dt * x.velocity) @ x.pose
    return State(pose, x.velocity.copy(), np.zeros(6), x.stamp + dt)


# --------------------------------------------------------------------------- #
# perturbation transition
# --------------------------------------------------------------------------- #
def magnus_adjoint_blocks(w, wd, dt: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """First-row blocks ``(S11, S12, S13)`` of the third-order expansion of ``S_A``."""
    w = np.asarray(w, dtype=float)
    wd = np.asarray(wd, dtype=float)
    h = dt
    wa = curlywedge(w)
    da = curlywedge(wd)
    comm = da @ wa - wa @ da
    s11 = h * wa + 0.5 * h * h * da + (h**3 / 12.0) * comm + (h**5 / 240.0) * (da @ comm - comm @ da)
    s12 = h * np.eye(6) + (h**3 / 12.0) * da + (h**5 / 240.0) * (da @ da)
    s13 = np.zeros((6, 6))
    return s11, s12, s13


def transition_generator(w, wd, dt: float) -> np.ndarray:
    """Full 18x18 ``S_A(dt)`` assembled from :func:`magnus_adjoint_blocks`."""
    s11, s12, s13 = magnus_adjoint_blocks(w, wd, dt)
    s = np.zeros((18, 18))
    s[:6, :6] = s11
    s[:6, 6:12] = s12
    s[:6, 12:] = s13
    s[6:12, 12:] = dt * np.eye(6)
    return s


def state_transition_closed(s11, s12, s13, dt: float) -> np.ndarray:
    """Closed-form ``exp(S_A)`` from its first-row blocks."""
    jac = matfun_J(s11)
    f = np.eye(18)
    f[:6, :6] = np.eye(6) + s11 @ jac
    f[:6, 6:12] = jac @ s12
    f[:6, 12:] = jac @ s13 + dt * matfun_H(s11) @ s12
    f[6:12, 12:] = dt * np.eye(6)
    return f


def _check_psd(qk: np.ndarray) -> None:
    tr = float(np.trace(qk))
    lo = float(np.linalg.eigvalsh(qk).min())
    if lo < -1e-8 * max(tr, 0.0) or not np.isfinite(lo):
        raise NonPSDError(f"process noise covariance has eigenvalue {lo:.3e} (trace {tr:.3e})")


def _matrix_fraction(s_a: np.ndarray, lql: np.ndarray, dt: float) -> tuple[np.ndarray, np.ndarray]:
    n = s_a.shape[0]
    s_m = np.zeros((2 * n, 2 * n))
    s_m[:n, :n] = s_a
    s_m[:n, n:] = dt * lql
    s_m[n:, n:] = -s_a.T
    e = expm(s_m)
    f = e[:n, :n]
    qk = e[:n, n:] @ f.T
    qk = 0.5 * (qk + qk.T)
    return f, qk


def discretize(w, wd, q: np.ndarray, dt: float) -> DiscreteTransition:
    """``(F, Qk)`` of the constant-acceleration prior over one interval."""
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    lql = np.zeros((18, 18))
    lql[12:, 12:] = q
    f, qk = _matrix_fraction(transition_generator(w, wd, dt), lql, dt)
    # structural rows are exact by construction
    f[6:, :] = 0.0
    f[6:12, 6:12] = np.eye(6)
    f[6:12, 12:] = dt * np.eye(6)
    f[12:, 12:] = np.eye(6)
    _check_psd(qk)
    return DiscreteTransition(f, qk, dt)


def discretize_cv(w, q: np.ndarray, dt: float) -> DiscreteTransition:
    """``(F, Qk)`` of the constant-velocity prior (12-dim perturbation)."""
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    s_a = np.zeros((12, 12))
    s_a[:6, :6] = dt * curlywedge(w)
    s_a[:6, 6:] = dt * np.eye(6)
    lql = np.zeros((12, 12))
    lql[6:, 6:] = q
    f, qk = _matrix_fraction(s_a, lql, dt)
    f[6:, :6] = 0.0
    f[6:, 6:] = np.eye(6)
    _check_psd(qk)
    return DiscreteTransition(f, qk, dt)


def nominal_jacobian(x: State, dt: float, order: int = DEFAULT_MAGNUS_ORDER) -> np.ndarray:
    """Exact derivative of :func:`propagate_nominal` w.r.t. the input perturbation.

    With ``S`` the Magnus twist, ``d exp(S + dS) = exp(J(S) dS) exp(S)`` gives
    ``[Ad(exp S), J(S) dS/dw, J(S) dS/dwd]`` for the pose rows; the
    velocity/acceleration rows are the integrator chain.  Agrees with ``F``
    from :func:`discretize` up to the expansion truncation.
    """
    w, wd, h = x.velocity, x.acceleration, dt
    s = magnus_vector(w, wd, h, order)
    wa, da = curlywedge(w), curlywedge(wd)
    ds_dw = h * np.eye(6) + (h**3 / 12.0) * da
    ds_dwd = 0.5 * h * h * np.eye(6) - (h**3 / 12.0) * wa
    if order >= 3:
        c = da @ w
        ds_dw = ds_dw + (h**5 / 240.0) * da @ da
        ds_dwd = ds_dwd + (h**5 / 240.0) * (-da @ wa - curlywedge(c))
    if order >= 4:
        a0 = w + 0.5 * h * wd
        aa = curlywedge(a0)
        v1 = aa @ wd
        v2 = aa @ v1
        # d/da0 of ad(a0)^3 wd = -ad(v2) - ad(a0) ad(v1) - ad(a0)^2 ad(wd)
        d_a0 = -curlywedge(v2) - aa @ curlywedge(v1) - aa @ aa @ da
        k = h**5 / 720.0
        ds_dw = ds_dw + k * d_a0
        ds_dwd = ds_dwd + k * (0.5 * h * d_a0 + aa @ aa @ aa)
    jac = matfun_J(curlywedge(s))
    out = np.eye(18)
    out[:6, :6] = se3_exp(s).adjoint()
    out[:6, 6:12] = jac @ ds_dw
    out[:6, 12:] = jac @ ds_dwd
    out[6:12, 12:] = h * np.eye(6)
    return out
