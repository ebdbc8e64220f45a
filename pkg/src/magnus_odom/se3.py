"""SO(3)/SE(3) primitives and the 6x6 matrix functions of the adjoint algebra.

Conventions
-----------
* A twist is a 6-vector ``xi = [rho; phi]``: translational part first,
  rotational part second.  Velocities ``[nu; omega]`` use the same layout.
* ``hat`` maps a twist to a 4x4 element of se(3); ``curlywedge`` maps it to
  the 6x6 adjoint representation ``[[phi^, rho^], [0, phi^]]``.
* Poses are perturbed on the left, ``T = exp(xi^) T_bar``.

Twists and adjoint matrices are plain ``numpy`` arrays; only the group
element gets a class, because it carries the orthonormality invariant.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import LogBranchError, StructureError

ORTHO_TOL = 1e-9
LOG_BRANCH_MARGIN = 1e-6

# Below this rotation angle the SO(3) coefficient formulas switch to Taylor
# series (the cubic coefficient loses ~1e-12 relative at 1e-2).
SO3_SMALL_ANGLE = 1e-2

# Below this angle the closed-form alpha coefficients of the 6x6 functions are
# replaced by 6-term Taylor series.  alpha_4 divides by phi^6, so its closed
# form is unusable much below ~0.1.
ADJ_SMALL_ANGLE = 0.25


# --------------------------------------------------------------------------- #
# hat / vee
# --------------------------------------------------------------------------- #
def hat3(v: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix with ``hat3(v) @ w == cross(v, w)``.

    Accepts a stack of vectors with shape ``(..., 3)``.
    """
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def vee3(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    return np.stack([m[..., 2, 1], m[..., 0, 2], m[..., 1, 0]], axis=-1)


def hat(xi: np.ndarray) -> np.ndarray:
    """4x4 se(3) matrix of a twist ``[rho; phi]``."""
    xi = np.asarray(xi, dtype=float)
    out = np.zeros(xi.shape[:-1] + (4, 4))
    out[..., :3, :3] = hat3(xi[..., 3:])
    out[..., :3, 3] = xi[..., :3]
    return out


def vee(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    return np.concatenate([m[..., :3, 3], vee3(m[..., :3, :3])], axis=-1)


def curlywedge(xi: np.ndarray) -> np.ndarray:
    """6x6 adjoint-algebra matrix ``[[phi^, rho^], [0, phi^]]``."""
    xi = np.asarray(xi, dtype=float)
    out = np.zeros(xi.shape[:-1] + (6, 6))
    phi_hat = hat3(xi[..., 3:])
    out[..., :3, :3] = phi_hat
    out[..., 3:, 3:] = phi_hat
    out[..., :3, 3:] = hat3(xi[..., :3])
    return out


def curlyvee(a: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    """Inverse of :func:`curlywedge`; raises StructureError on malformed input."""
    a = np.asarray(a, dtype=float)
    if a.shape != (6, 6):
        raise StructureError(f"expected a 6x6 matrix, got shape {a.shape}")
    scale = max(1.0, float(np.abs(a).max()))
    off = np.abs(a[3:, :3]).max()
    diag_mismatch = np.abs(a[:3, :3] - a[3:, 3:]).max()
    skew = max(np.abs(a[:3, :3] + a[:3, :3].T).max(), np.abs(a[:3, 3:] + a[:3, 3:].T).max())
    if max(off, diag_mismatch, skew) > tol * scale:
        raise StructureError(
            "matrix is not of the form [[phi^, rho^], [0, phi^]] "
            f"(lower-left {off:.2e}, diagonal mismatch {diag_mismatch:.2e}, skew {skew:.2e})"
        )
    return np.concatenate([vee3(a[:3, 3:]), vee3(a[:3, :3])])


def ad_bracket(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Lie bracket of two twists in vector form, ``curlyvee([a^, b^])``."""
    a_rho, a_phi = a[..., :3], a[..., 3:]
    b_rho, b_phi = b[..., :3], b[..., 3:]
    return np.concatenate([np.cross(a_phi, b_rho) + np.cross(a_rho, b_phi), np.cross(a_phi, b_phi)], axis=-1)


# --------------------------------------------------------------------------- #
# SO(3)
# --------------------------------------------------------------------------- #
def _so3_coeffs(theta: np.ndarray):
    """Return ``sin(t)/t, (1-cos t)/t^2, (t - sin t)/t^3`` with small-angle care."""
    theta = np.asarray(theta, dtype=float)
    small = theta < SO3_SMALL_ANGLE
    t = np.where(small, 1.0, theta)
    t2 = theta * theta
    a = np.where(small, 1.0 - t2 / 6.0 + t2 * t2 / 120.0 - t2**3 / 5040.0, np.sin(t) / t)
    half = np.sin(0.5 * t)
    b = np.where(small, 0.5 - t2 / 24.0 + t2 * t2 / 720.0 - t2**3 / 40320.0, 2.0 * half * half / (t * t))
    c = np.where(
        small,
        1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0 - t2**3 / 362880.0,
        (t - np.sin(t)) / (t * t * t),
    )
    return a, b, c


def so3_exp(phi: np.ndarray) -> np.ndarray:
    """Rodrigues formula; vectorized over leading axes."""
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi, axis=-1)
    a, b, _ = _so3_coeffs(theta)
    k = hat3(phi)
    eye = np.broadcast_to(np.eye(3), k.shape)
    return eye + a[..., None, None] * k + b[..., None, None] * (k @ k)


def so3_left_jacobian(phi: np.ndarray) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi, axis=-1)
    _, b, c = _so3_coeffs(theta)
    k = hat3(phi)
    eye = np.broadcast_to(np.eye(3), k.shape)
    return eye + b[..., None, None] * k + c[..., None, None] * (k @ k)


def so3_log(rot: np.ndarray) -> np.ndarray:
    """Rotation vector of ``rot``; raises LogBranchError within 1e-6 of pi."""
    rot = np.asarray(rot, dtype=float)
    cos_t = np.clip(0.5 * (np.trace(rot) - 1.0), -1.0, 1.0)
    theta = float(np.arccos(cos_t))
    if theta > np.pi - LOG_BRANCH_MARGIN:
        raise LogBranchError(f"rotation angle {theta:.9f} rad is within {LOG_BRANCH_MARGIN} of pi")
    w = np.array([rot[2, 1] - rot[1, 2], rot[0, 2] - rot[2, 0], rot[1, 0] - rot[0, 1]])
    if theta < SO3_SMALL_ANGLE:
        # sin(t)/t from the Taylor series, with t recovered from the skew part
        s = 0.5 * np.linalg.norm(w)
        theta = float(np.arcsin(min(s, 1.0)))
        t2 = theta * theta
        return 0.5 * w / (1.0 - t2 / 6.0 + t2 * t2 / 120.0)
    return 0.5 * theta / np.sin(theta) * w


def so3_angle(rot: np.ndarray) -> float:
    """Rotation angle of ``rot`` in [0, pi], robust near zero."""
    rot = np.asarray(rot, dtype=float)
    w = np.array([rot[2, 1] - rot[1, 2], rot[0, 2] - rot[2, 0], rot[1, 0] - rot[0, 1]])
    return float(np.arctan2(0.5 * np.linalg.norm(w), 0.5 * (np.trace(rot) - 1.0)))


def orthonormalize(rot: np.ndarray) -> np.ndarray:
    """Closest rotation matrix (polar decomposition)."""
    u, _, vt = np.linalg.svd(rot)
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, -1] *= -1
        r = u @ vt
    return r


# --------------------------------------------------------------------------- #
# SE(3)
# --------------------------------------------------------------------------- #
@dataclass(frozen=True)
class Pose:
    """Rigid transform ``p' = R p + t``."""

    rotation: np.ndarray
    translation: np.ndarray

    @classmethod
    def identity(cls) -> Pose:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> Pose:
        m = np.asarray(m, dtype=float)
        return cls(m[:3, :3].copy(), m[:3, 3].copy())

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> Pose:
        rt = self.rotation.T
        return Pose(rt.copy(), -rt @ self.translation)

    def __matmul__(self, other: Pose) -> Pose:
        rot = self.rotation @ other.rotation
        if orthonormality_error(rot) > ORTHO_TOL:
            rot = orthonormalize(rot)
        return Pose(rot, self.rotation @ other.translation + self.translation)

    def act(self, points: np.ndarray) -> np.ndarray:
        """Transform 3-vectors (shape ``(..., 3)``)."""
        return np.asarray(points) @ self.rotation.T + self.translation

    def adjoint(self) -> np.ndarray:
        """6x6 adjoint ``[[R, t^ R], [0, R]]``."""
        out = np.zeros((6, 6))
        out[:3, :3] = self.rotation
        out[3:, 3:] = self.rotation
        out[:3, 3:] = hat3(self.translation) @ self.rotation
        return out

    def log(self) -> np.ndarray:
        return se3_log(self)

    def is_valid(self, tol: float = ORTHO_TOL) -> bool:
        return (
            orthonormality_error(self.rotation) <= tol
            and abs(np.linalg.det(self.rotation) - 1.0) <= tol
            and bool(np.all(np.isfinite(self.translation)))
        )


def orthonormality_error(rot: np.ndarray) -> float:
    return float(np.linalg.norm(rot.T @ rot - np.eye(3)))


def se3_exp(xi: np.ndarray) -> Pose:
    xi = np.asarray(xi, dtype=float)
    rot = so3_exp(xi[3:])
    return Pose(rot, so3_left_jacobian(xi[3:]) @ xi[:3])


def se3_exp_batch(xi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized exponential: returns rotations ``(N,3,3)`` and translations ``(N,3)``."""
    xi = np.asarray(xi, dtype=float)
    rot = so3_exp(xi[..., 3:])
    trans = np.einsum("...ij,...j->...i", so3_left_jacobian(xi[..., 3:]), xi[..., :3])
    return rot, trans


def se3_log(pose: Pose) -> np.ndarray:
    phi = so3_log(pose.rotation)
    jac = so3_left_jacobian(phi)
    rho = np.linalg.solve(jac, pose.translation)
    return np.concatenate([rho, phi])


def adjoint_of_exp(xi: np.ndarray) -> np.ndarray:
    """``exp(xi^curlywedge)`` computed as the adjoint of ``exp(xi^)``."""
    return se3_exp(xi).adjoint()


# --------------------------------------------------------------------------- #
# 6x6 matrix functions of X = xi^curlywedge
# --------------------------------------------------------------------------- #
# Taylor coefficients in powers phi^0, phi^2, ..., phi^10
_ALPHA_TAYLOR = np.array(
    [
        [1 / 6, 0.0, -1 / 5040, 1 / 181440, -1 / 13305600, 1 / 1556755200],
        [1 / 24, 0.0, -1 / 40320, 1 / 1814400, -1 / 159667200, 1 / 21794572800],
        [1 / 120, -1 / 2520, 1 / 120960, -1 / 9979200, 1 / 1245404160, -1 / 217945728000],
        [1 / 720, -1 / 20160, 1 / 1209600, -1 / 119750400, 1 / 17435658240, -1 / 3487131648000],
    ]
)


def alpha_coefficients(phi: float, branch: str | None = None) -> np.ndarray:
    """The four coefficients ``alpha_1..alpha_4`` of the second-order function.

    ``branch`` forces ``"closed"`` or ``"taylor"``; by default the Taylor
    series is used below :data:`ADJ_SMALL_ANGLE`.
    """
    if branch is None:
        branch = "taylor" if phi < ADJ_SMALL_ANGLE else "closed"
    if branch == "taylor":
        p2 = phi * phi
        powers = p2 ** np.arange(6)
        return _ALPHA_TAYLOR @ powers
    s, c = np.sin(phi), np.cos(phi)
    p2 = phi * phi
    return np.array(
        [
            (4 * phi + phi * c - 5 * s) / (2 * phi**3),
            (2 * p2 + phi * s + 6 * c - 6) / (2 * phi**4),
            (2 * phi + phi * c - 3 * s) / (2 * phi**5),
            (p2 + phi * s + 4 * c - 4) / (2 * phi**6),
        ]
    )


def _rotation_norm(x: np.ndarray) -> float:
    return float(np.linalg.norm(vee3(0.5 * (x[:3, :3] + x[3:, 3:]))))


def _powers(x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    x2 = x @ x
    x3 = x2 @ x
    return x, x2, x3, x3 @ x


def matfun_H(x: np.ndarray, branch: str | None = None) -> np.ndarray:
    """``sum_n X^n / (n+2)!`` for an adjoint-structured 6x6 ``X``."""
    phi = _rotation_norm(x)
    a1, a2, a3, a4 = alpha_coefficients(phi, branch)
    x1, x2, x3, x4 = _powers(x)
    return 0.5 * np.eye(6) + a1 * x1 + a2 * x2 + a3 * x3 + a4 * x4


def matfun_J(x: np.ndarray, branch: str | None = None) -> np.ndarray:
    """``sum_n X^n / (n+1)!``; the SE(3) left Jacobian when ``X = xi^curlywedge``.

    Uses ``J = I + X H(X)`` with ``X^5`` folded back through the quintic
    identity ``X^5 = -2 phi^2 X^3 - phi^4 X``.
    """
    phi = _rotation_norm(x)
    a1, a2, a3, a4 = alpha_coefficients(phi, branch)
    p2 = phi * phi
    x1, x2, x3, x4 = _powers(x)
    return np.eye(6) + (0.5 - a4 * p2 * p2) * x1 + a1 * x2 + (a2 - 2 * p2 * a4) * x3 + a3 * x4


def se3_left_jacobian(xi: np.ndarray) -> np.ndarray:
    return matfun_J(curlywedge(xi))


def se3_left_jacobian_inv(xi: np.ndarray) -> np.ndarray:
    """Inverse left Jacobian from the SO(3) blocks.

    ``J^-1 = [[Jr^-1, -Jr^-1 Q Jr^-1], [0, Jr^-1]]`` where ``Q`` is the
    off-diagonal block of :func:`se3_left_jacobian`.
    """
    xi = np.asarray(xi, dtype=float)
    full = se3_left_jacobian(xi)
    jinv = np.linalg.inv(full[:3, :3])
    out = np.zeros((6, 6))
    out[:3, :3] = jinv
    out[3:, 3:] = jinv
    out[:3, 3:] = -jinv @ full[:3, 3:] @ jinv
    return out
