"""numba kernels for the per-call hot paths and the fine-step reference integrators."""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def _cross(a, b):
    out = np.empty(3)
    out[0] = a[1] * b[2] - a[2] * b[1]
    out[1] = a[2] * b[0] - a[0] * b[2]
    out[2] = a[0] * b[1] - a[1] * b[0]
    return out


@njit(cache=True)
def _bracket(a, b):
    out = np.empty(6)
    c1 = _cross(a[3:], b[:3])
    c2 = _cross(a[:3], b[3:])
    c3 = _cross(a[3:], b[3:])
    for i in range(3):
        out[i] = c1[i] + c2[i]
        out[3 + i] = c3[i]
    return out


@njit(cache=True)
def magnus_vector(w, wd, dt, order):
    """Twist whose exponential maps T(t0) to T(t0 + dt) under a linearly varying velocity."""
    h = dt
    out = h * w + 0.5 * h * h * wd
    if order >= 2:
        c = _bracket(wd, w)
        out += (h**3 / 12.0) * c
        if order >= 3:
            out += (h**5 / 240.0) * _bracket(wd, c)
            if order >= 4:
                a0 = w + 0.5 * h * wd
                out += (h**5 / 720.0) * _bracket(a0, _bracket(a0, _bracket(a0, wd)))
    return out


@njit(cache=True, inline="always")
def _br(a0, a1, a2, a3, a4, a5, b0, b1, b2, b3, b4, b5):
    # vector-form se(3) bracket [a, b] on scalars
    return (
        a4 * b2 - a5 * b1 + a1 * b5 - a2 * b4,
        a5 * b0 - a3 * b2 + a2 * b3 - a0 * b5,
        a3 * b1 - a4 * b0 + a0 * b4 - a1 * b3,
        a4 * b5 - a5 * b4,
        a5 * b3 - a3 * b5,
        a3 * b4 - a4 * b3,
    )


@njit(cache=True)
def propagate_kernel(rot, trans, w, wd, dt, order):
    """Allocation-light mean propagation: returns new rotation, translation, velocity."""
    h = dt
    w0, w1, w2, w3, w4, w5 = w[0], w[1], w[2], w[3], w[4], w[5]
    d0, d1, d2, d3, d4, d5 = wd[0], wd[1], wd[2], wd[3], wd[4], wd[5]
    hh = 0.5 * h * h
    x0 = h * w0 + hh * d0
    x1 = h * w1 + hh * d1
    x2 = h * w2 + hh * d2
    x3 = h * w3 + hh * d3
    x4 = h * w4 + hh * d4
    x5 = h * w5 + hh * d5
    if order >= 2:
        c0, c1, c2, c3, c4, c5 = _br(d0, d1, d2, d3, d4, d5, w0, w1, w2, w3, w4, w5)
        k = h * h * h / 12.0
        x0 += k * c0
        x1 += k * c1
        x2 += k * c2
        x3 += k * c3
        x4 += k * c4
        x5 += k * c5
        h5 = h * h * h * h * h
        if order >= 3:
            e0, e1, e2, e3, e4, e5 = _br(d0, d1, d2, d3, d4, d5, c0, c1, c2, c3, c4, c5)
            k = h5 / 240.0
            x0 += k * e0
            x1 += k * e1
            x2 += k * e2
            x3 += k * e3
            x4 += k * e4
            x5 += k * e5
            if order >= 4:
                m0 = w0 + 0.5 * h * d0
                m1 = w1 + 0.5 * h * d1
                m2 = w2 + 0.5 * h * d2
                m3 = w3 + 0.5 * h * d3
                m4 = w4 + 0.5 * h * d4
                m5 = w5 + 0.5 * h * d5
                v0, v1, v2, v3, v4, v5 = _br(m0, m1, m2, m3, m4, m5, d0, d1, d2, d3, d4, d5)
                v0, v1, v2, v3, v4, v5 = _br(m0, m1, m2, m3, m4, m5, v0, v1, v2, v3, v4, v5)
                v0, v1, v2, v3, v4, v5 = _br(m0, m1, m2, m3, m4, m5, v0, v1, v2, v3, v4, v5)
                k = h5 / 720.0
                x0 += k * v0
                x1 += k * v1
                x2 += k * v2
                x3 += k * v3
                x4 += k * v4
                x5 += k * v5
    # exp of the twist [x0..x5]
    t2 = x3 * x3 + x4 * x4 + x5 * x5
    theta = np.sqrt(t2)
    if theta < 1e-2:
        a = 1.0 - t2 / 6.0 + t2 * t2 / 120.0 - t2 * t2 * t2 / 5040.0
        b = 0.5 - t2 / 24.0 + t2 * t2 / 720.0 - t2 * t2 * t2 / 40320.0
        c = 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0 - t2 * t2 * t2 / 362880.0
    else:
        s = np.sin(theta)
        half = np.sin(0.5 * theta)
        a = s / theta
        b = 2.0 * half * half / t2
        c = (theta - s) / (t2 * theta)
    # K = phi^, K2 = K K (symmetric: phi phi^T - t2 I)
    k01, k02, k12 = -x5, x4, -x3
    q00 = x3 * x3 - t2
    q11 = x4 * x4 - t2
    q22 = x5 * x5 - t2
    q01 = x3 * x4
    q02 = x3 * x5
    q12 = x4 * x5
    r00 = 1.0 + b * q00
    r11 = 1.0 + b * q11
    r22 = 1.0 + b * q22
    r01 = a * k01 + b * q01
    r10 = -a * k01 + b * q01
    r02 = a * k02 + b * q02
    r20 = -a * k02 + b * q02
    r12 = a * k12 + b * q12
    r21 = -a * k12 + b * q12
    j00 = 1.0 + c * q00
    j11 = 1.0 + c * q11
    j22 = 1.0 + c * q22
    j01 = b * k01 + c * q01
    j10 = -b * k01 + c * q01
    j02 = b * k02 + c * q02
    j20 = -b * k02 + c * q02
    j12 = b * k12 + c * q12
    j21 = -b * k12 + c * q12
    p0 = j00 * x0 + j01 * x1 + j02 * x2
    p1 = j10 * x0 + j11 * x1 + j12 * x2
    p2 = j20 * x0 + j21 * x1 + j22 * x2
    new_rot = np.empty((3, 3))
    new_t = np.empty(3)
    for j in range(3):
        u0, u1, u2 = rot[0, j], rot[1, j], rot[2, j]
        new_rot[0, j] = r00 * u0 + r01 * u1 + r02 * u2
        new_rot[1, j] = r10 * u0 + r11 * u1 + r12 * u2
        new_rot[2, j] = r20 * u0 + r21 * u1 + r22 * u2
    u0, u1, u2 = trans[0], trans[1], trans[2]
    new_t[0] = r00 * u0 + r01 * u1 + r02 * u2 + p0
    new_t[1] = r10 * u0 + r11 * u1 + r12 * u2 + p1
    new_t[2] = r20 * u0 + r21 * u1 + r22 * u2 + p2
    new_w = np.empty(6)
    for i in range(6):
        new_w[i] = w[i] + h * wd[i]
    return new_rot, new_t, new_w


@njit(cache=True)
def _hat4(xi):
    m = np.zeros((4, 4))
    m[0, 1] = -xi[5]
    m[0, 2] = xi[4]
    m[1, 0] = xi[5]
    m[1, 2] = -xi[3]
    m[2, 0] = -xi[4]
    m[2, 1] = xi[3]
    m[0, 3] = xi[0]
    m[1, 3] = xi[1]
    m[2, 3] = xi[2]
    return m


@njit(cache=True)
def _project(t):
    u, _, vt = np.linalg.svd(t[:3, :3])
    r = u @ vt
    if np.linalg.det(r) < 0.0:
        for i in range(3):
            u[i, 2] = -u[i, 2]
        r = u @ vt
    t[:3, :3] = r
    return t


@njit(cache=True)
def rk4_pose(t0, w, wd, dt, substeps):
    """RK4 solution of dT/dt = (w + s wd)^ T over s in [0, dt], projected each substep."""
    t = t0.copy()
    h = dt / substeps
    for i in range(substeps):
        s = i * h
        m1 = _hat4(w + s * wd)
        m2 = _hat4(w + (s + 0.5 * h) * wd)
        m3 = _hat4(w + (s + h) * wd)
        k1 = m1 @ t
        k2 = m2 @ (t + 0.5 * h * k1)
        k3 = m2 @ (t + 0.5 * h * k2)
        k4 = m3 @ (t + h * k3)
        t = t + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        t = _project(t)
    return t


@njit(cache=True)
def _system_matrix(w, dim):
    """Perturbation dynamics matrix for velocity w; dim 18 (CA) or 12 (CV)."""
    a = np.zeros((dim, dim))
    # w^curlywedge
    a[0, 1] = -w[5]
    a[0, 2] = w[4]
    a[1, 0] = w[5]
    a[1, 2] = -w[3]
    a[2, 0] = -w[4]
    a[2, 1] = w[3]
    for i in range(3):
        for j in range(3):
            a[3 + i, 3 + j] = a[i, j]
    a[0, 4] = -w[2]
    a[0, 5] = w[1]
    a[1, 3] = w[2]
    a[1, 5] = -w[0]
    a[2, 3] = -w[1]
    a[2, 4] = w[0]
    for i in range(dim - 6):
        a[i, 6 + i] = 1.0
    return a


@njit(cache=True)
def rk4_lyapunov(p0, w, wd, lql, dt, substeps):
    """RK4 for dP/dt = A P + P A^T + L Q L^T and dPhi/dt = A Phi with A = A(w + s wd)."""
    dim = p0.shape[0]
    p = p0.copy()
    phi = np.eye(dim)
    h = dt / substeps
    for i in range(substeps):
        s = i * h
        a1 = _system_matrix(w + s * wd, dim)
        a2 = _system_matrix(w + (s + 0.5 * h) * wd, dim)
        a3 = _system_matrix(w + (s + h) * wd, dim)
        k1 = a1 @ p + p @ a1.T + lql
        q = p + 0.5 * h * k1
        k2 = a2 @ q + q @ a2.T + lql
        q = p + 0.5 * h * k2
        k3 = a2 @ q + q @ a2.T + lql
        q = p + h * k3
        k4 = a3 @ q + q @ a3.T + lql
        p = p + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        j1 = a1 @ phi
        j2 = a2 @ (phi + 0.5 * h * j1)
        j3 = a2 @ (phi + 0.5 * h * j2)
        j4 = a3 @ (phi + h * j3)
        phi = phi + (h / 6.0) * (j1 + 2.0 * j2 + 2.0 * j3 + j4)
    return p, phi


@njit(cache=True)
def _mv3(m, v, out):
    for a in range(3):
        out[a] = m[a, 0] * v[0] + m[a, 1] * v[1] + m[a, 2] * v[2]


@njit(cache=True)
def measurement_block(rot_vi, t_vi, vel, rot_sv, t_sv, points, z, whiten, polar, huber, delta, want_jac, exact_loss):
    """Whitened measurement residuals of one frame, accumulated into the pose/velocity block.

    Returns ``(cost, H, g)`` with ``H`` 12x12 and ``g`` of length 12; the
    acceleration columns of the measurement Jacobian are identically zero.
    ``exact_loss`` uses the full Hessian of the robust loss, otherwise the
    reweighted (IRLS) approximation.
    """
    n = points.shape[0]
    hmat = np.zeros((12, 12))
    gvec = np.zeros(12)
    cost = 0.0
    jv = np.zeros((3, 6))
    js = np.zeros((3, 6))
    jfull = np.zeros((4, 12))
    jw = np.zeros((4, 12))
    sp = np.zeros((3, 3))
    e = np.zeros(4)
    ew = np.zeros(4)
    gi = np.zeros(12)
    r_v = np.empty(3)
    r_s = np.empty(3)
    u_v = np.empty(3)
    u_s = np.empty(3)
    ur = np.empty(3)
    uro = np.empty(3)
    proj = np.empty(3)
    om0, om1, om2 = vel[3], vel[4], vel[5]
    for i in range(n):
        _mv3(rot_vi, points[i], r_v)
        for k in range(3):
            r_v[k] += t_vi[k]
        _mv3(rot_sv, r_v, r_s)
        for k in range(3):
            r_s[k] += t_sv[k]
        x, y, zz = r_s[0], r_s[1], r_s[2]
        n2 = x * x + y * y + zz * zz
        rng = np.sqrt(n2)
        u_v[0] = om1 * r_v[2] - om2 * r_v[1] + vel[0]
        u_v[1] = om2 * r_v[0] - om0 * r_v[2] + vel[1]
        u_v[2] = om0 * r_v[1] - om1 * r_v[0] + vel[2]
        _mv3(rot_sv, u_v, u_s)
        v = (x * u_s[0] + y * u_s[1] + zz * u_s[2]) / rng
        if polar:
            e[0] = z[i, 0] - rng
            da = z[i, 1] - np.arctan2(y, x)
            e[1] = (da + np.pi) % (2.0 * np.pi) - np.pi
            e[2] = z[i, 2] - np.arcsin(zz / rng)
        else:
            e[0] = z[i, 0] - x
            e[1] = z[i, 1] - y
            e[2] = z[i, 2] - zz
        e[3] = z[i, 3] - v
        s2 = 0.0
        for a in range(4):
            acc = 0.0
            for b in range(4):
                acc += whiten[i, a, b] * e[b]
            ew[a] = acc
            s2 += acc * acc
        s = np.sqrt(s2)
        if huber and s > delta:
            cost += delta * (s - 0.5 * delta)
            wt = delta / s
        else:
            cost += 0.5 * s2
            wt = 1.0
        if not want_jac:
            continue
        # d r_v / d xi = [I, -r_v^]
        jv[0, 0] = 1.0
        jv[1, 1] = 1.0
        jv[2, 2] = 1.0
        jv[0, 4] = r_v[2]
        jv[0, 5] = -r_v[1]
        jv[1, 3] = -r_v[2]
        jv[1, 5] = r_v[0]
        jv[2, 3] = r_v[1]
        jv[2, 4] = -r_v[0]
        for a in range(3):
            for b in range(6):
                js[a, b] = rot_sv[a, 0] * jv[0, b] + rot_sv[a, 1] * jv[1, b] + rot_sv[a, 2] * jv[2, b]
        ux, uy, uz = x / rng, y / rng, zz / rng
        us_u = u_s[0] * ux + u_s[1] * uy + u_s[2] * uz
        proj[0] = (u_s[0] - us_u * ux) / rng
        proj[1] = (u_s[1] - us_u * uy) / rng
        proj[2] = (u_s[2] - us_u * uz) / rng
        # unit^T R_sv omega^ = (R_sv^T unit x omega)^T
        for k in range(3):
            ur[k] = rot_sv[0, k] * ux + rot_sv[1, k] * uy + rot_sv[2, k] * uz
        uro[0] = ur[1] * om2 - ur[2] * om1
        uro[1] = ur[2] * om0 - ur[0] * om2
        uro[2] = ur[0] * om1 - ur[1] * om0
        if polar:
            rho2 = x * x + y * y
            rho = np.sqrt(rho2)
            sp[0, 0] = ux
            sp[0, 1] = uy
            sp[0, 2] = uz
            sp[1, 0] = -y / rho2
            sp[1, 1] = x / rho2
            sp[1, 2] = 0.0
            sp[2, 0] = -zz * x / (n2 * rho)
            sp[2, 1] = -zz * y / (n2 * rho)
            sp[2, 2] = rho / n2
            for a in range(3):
                for b in range(6):
                    jfull[a, b] = sp[a, 0] * js[0, b] + sp[a, 1] * js[1, b] + sp[a, 2] * js[2, b]
        else:
            for a in range(3):
                for b in range(6):
                    jfull[a, b] = js[a, b]
        for b in range(6):
            dxi = 0.0
            deta = 0.0
            for k in range(3):
                dxi += proj[k] * js[k, b] + uro[k] * jv[k, b]
                deta += ur[k] * jv[k, b]
            jfull[3, b] = dxi
            jfull[3, 6 + b] = deta
        for a in range(4):
            for b in range(12):
                acc = 0.0
                for k in range(4):
                    acc -= whiten[i, a, k] * jfull[k, b]
                jw[a, b] = acc
        for a in range(12):
            ga = 0.0
            for k in range(4):
                ga += jw[k, a] * ew[k]
            gi[a] = ga
            gvec[a] += wt * ga
        # on the linear branch the loss Hessian in whitened space is wt (I - e e^T / s^2)
        corr = wt / s2 if (exact_loss and wt < 1.0) else 0.0
        for a in range(12):
            for b in range(a, 12):
                acc = 0.0
                for k in range(4):
                    acc += jw[k, a] * jw[k, b]
                hmat[a, b] += wt * acc - corr * gi[a] * gi[b]
    for a in range(12):
        for b in range(a):
            hmat[a, b] = hmat[b, a]
    return cost, hmat, gvec


# --------------------------------------------------------------------------- #
# SE(3) helpers for the motion-prior terms
# --------------------------------------------------------------------------- #
_SERIES = 0.25


@njit(cache=True)
def _hat3(v):
    out = np.zeros((3, 3))
    out[0, 1] = -v[2]
    out[0, 2] = v[1]
    out[1, 0] = v[2]
    out[1, 2] = -v[0]
    out[2, 0] = -v[1]
    out[2, 1] = v[0]
    return out


@njit(cache=True)
def _curly(xi):
    out = np.zeros((6, 6))
    p = _hat3(xi[3:])
    r = _hat3(xi[:3])
    out[:3, :3] = p
    out[3:, 3:] = p
    out[:3, 3:] = r
    return out


@njit(cache=True)
def _so3_parts(phi):
    """Rotation and left Jacobian of ``phi``."""
    t2 = phi[0] * phi[0] + phi[1] * phi[1] + phi[2] * phi[2]
    theta = np.sqrt(t2)
    if theta < 1e-2:
        a = 1.0 - t2 / 6.0 + t2 * t2 / 120.0 - t2 * t2 * t2 / 5040.0
        b = 0.5 - t2 / 24.0 + t2 * t2 / 720.0 - t2 * t2 * t2 / 40320.0
        c = 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0 - t2 * t2 * t2 / 362880.0
    else:
        s = np.sin(theta)
        half = np.sin(0.5 * theta)
        a = s / theta
        b = 2.0 * half * half / t2
        c = (theta - s) / (t2 * theta)
    k = _hat3(phi)
    k2 = k @ k
    rot = np.eye(3) + a * k + b * k2
    jac = np.eye(3) + b * k + c * k2
    return rot, jac


@njit(cache=True)
def _so3_jinv(phi):
    t2 = phi[0] * phi[0] + phi[1] * phi[1] + phi[2] * phi[2]
    theta = np.sqrt(t2)
    if theta < _SERIES:
        d = 1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0 + t2 * t2 * t2 / 1209600.0
    else:
        d = 1.0 / t2 - (1.0 + np.cos(theta)) / (2.0 * theta * np.sin(theta))
    k = _hat3(phi)
    return np.eye(3) - 0.5 * k + d * (k @ k)


@njit(cache=True)
def _se3_q(xi):
    """Off-diagonal block of the SE(3) left Jacobian."""
    phi = xi[3:]
    t2 = phi[0] * phi[0] + phi[1] * phi[1] + phi[2] * phi[2]
    theta = np.sqrt(t2)
    if theta < _SERIES:
        t4 = t2 * t2
        c1 = 1.0 / 6.0 - t2 / 120.0 + t4 / 5040.0 - t4 * t2 / 362880.0 + t4 * t4 / 39916800.0
        c2 = 1.0 / 24.0 - t2 / 720.0 + t4 / 40320.0 - t4 * t2 / 3628800.0 + t4 * t4 / 479001600.0
        c3 = 1.0 / 120.0 - t2 / 2520.0 + t4 / 120960.0 - t4 * t2 / 9979200.0 + 5.0 * t4 * t4 / 6227020800.0
    else:
        s = np.sin(theta)
        c = np.cos(theta)
        c1 = (theta - s) / (t2 * theta)
        c2 = (t2 + 2.0 * c - 2.0) / (2.0 * t2 * t2)
        c3 = (2.0 * theta - 3.0 * s + theta * c) / (2.0 * t2 * t2 * theta)
    p = _hat3(phi)
    r = _hat3(xi[:3])
    pr = p @ r
    rp = r @ p
    prp = pr @ p
    return 0.5 * r + c1 * (pr + rp + prp) + c2 * (p @ pr + rp @ p - 3.0 * prp) + c3 * (prp @ p + p @ prp)


@njit(cache=True)
def se3_jl(xi):
    _, jr = _so3_parts(xi[3:])
    out = np.zeros((6, 6))
    out[:3, :3] = jr
    out[3:, 3:] = jr
    out[:3, 3:] = _se3_q(xi)
    return out


@njit(cache=True)
def se3_jl_inv(xi):
    ji = _so3_jinv(xi[3:])
    out = np.zeros((6, 6))
    out[:3, :3] = ji
    out[3:, 3:] = ji
    out[:3, 3:] = -ji @ _se3_q(xi) @ ji
    return out


@njit(cache=True)
def _so3_log(rot):
    cos_t = 0.5 * (rot[0, 0] + rot[1, 1] + rot[2, 2] - 1.0)
    cos_t = min(1.0, max(-1.0, cos_t))
    theta = np.arccos(cos_t)
    w = np.empty(3)
    w[0] = rot[2, 1] - rot[1, 2]
    w[1] = rot[0, 2] - rot[2, 0]
    w[2] = rot[1, 0] - rot[0, 1]
    if theta < 1e-2:
        s = 0.5 * np.sqrt(w[0] * w[0] + w[1] * w[1] + w[2] * w[2])
        theta = np.arcsin(min(s, 1.0))
        t2 = theta * theta
        return 0.5 * w / (1.0 - t2 / 6.0 + t2 * t2 / 120.0)
    return 0.5 * theta / np.sin(theta) * w


@njit(cache=True)
def _relative_log(rot_a, t_a, rot_b, t_b):
    """``ln(T_a T_b^-1)`` as a twist."""
    rot = rot_a @ rot_b.T
    t = t_a - rot @ t_b
    phi = _so3_log(rot)
    out = np.empty(6)
    out[:3] = _so3_jinv(phi) @ t
    out[3:] = phi
    return out


@njit(cache=True)
def _magnus_jacobian(rot_s, t_s, w, wd, h, order, ca):
    """Derivative of the propagated pose/velocity/acceleration w.r.t. the input perturbation."""
    dim = 18 if ca else 12
    out = np.eye(dim)
    wa = _curly(w)
    ds_dw = h * np.eye(6)
    if ca:
        da = _curly(wd)
        ds_dw += (h**3 / 12.0) * da
        ds_dwd = 0.5 * h * h * np.eye(6) - (h**3 / 12.0) * wa
        if order >= 3:
            ds_dw += (h**5 / 240.0) * (da @ da)
            ds_dwd += (h**5 / 240.0) * (-(da @ wa) - _curly(da @ w))
        if order >= 4:
            a0 = w + 0.5 * h * wd
            aa = _curly(a0)
            v1 = aa @ wd
            v2 = aa @ v1
            aa2 = aa @ aa
            d_a0 = -_curly(v2) - aa @ _curly(v1) - aa2 @ da
            k = h**5 / 720.0
            ds_dw += k * d_a0
            ds_dwd += k * (0.5 * h * d_a0 + aa2 @ aa)
    s = magnus_vector(w, wd, h, order) if ca else h * w
    jac = se3_jl(s)
    # Ad(exp s) = [[R, t^ R], [0, R]]
    out[:3, :3] = rot_s
    out[3:6, 3:6] = rot_s
    out[:3, 3:6] = _hat3(t_s) @ rot_s
    out[:6, 6:12] = jac @ ds_dw
    if ca:
        out[:6, 12:] = jac @ ds_dwd
        for i in range(6):
            out[6 + i, 12 + i] = h
    return out


@njit(cache=True)
def motion_error(rot_p, t_p, w_p, wd_p, rot_c, t_c, w_c, wd_c, dt, order, ca, want_jac):
    """``e = f(x_prev) ⊖ x_curr`` and its Jacobians for the CA (18) or CV (12) prior."""
    dim = 18 if ca else 12
    wd = wd_p if ca else np.zeros(6)
    rot_f, t_f, w_f = propagate_kernel(rot_p, t_p, w_p, wd, dt, order)
    e = np.empty(dim)
    xi = _relative_log(rot_f, t_f, rot_c, t_c)
    e[:6] = xi
    for i in range(6):
        e[6 + i] = w_f[i] - w_c[i]
        if ca:
            e[12 + i] = wd_p[i] - wd_c[i]
    jp = np.zeros((dim, dim))
    jc = np.zeros((dim, dim))
    if not want_jac:
        return e, jp, jc
    # exp of the Magnus twist: T_f T_p^-1
    rot_s = rot_f @ rot_p.T
    t_s = t_f - rot_s @ t_p
    f = _magnus_jacobian(rot_s, t_s, w_p, wd, dt, order, ca)
    rows = np.eye(dim)
    rows[:6, :6] = se3_jl_inv(xi)
    jp = rows @ f
    jc = -np.eye(dim)
    jc[:6, :6] = -se3_jl_inv(-xi)
    return e, jp, jc


@njit(cache=True)
def motion_blocks(rots, ts, ws, wds, dts, sqrt_info, order, ca, n_terms, want_jac, hmat, gvec):
    """Whitened motion terms ``1..n_terms`` accumulated into ``hmat``/``gvec``; returns the cost."""
    dim = 18 if ca else 12
    cost = 0.0
    for k in range(1, n_terms + 1):
        e, jp, jc = motion_error(
            rots[k - 1],
            ts[k - 1],
            ws[k - 1],
            wds[k - 1],
            rots[k],
            ts[k],
            ws[k],
            wds[k],
            dts[k - 1],
            order,
            ca,
            want_jac,
        )
        w = sqrt_info[k - 1]
        ew = w @ e
        cost += 0.5 * (ew @ ew)
        if not want_jac:
            continue
        jpw = w @ jp
        jcw = w @ jc
        a = (k - 1) * dim
        b = k * dim
        hmat[a : a + dim, a : a + dim] += jpw.T @ jpw
        hmat[a : a + dim, b : b + dim] += jpw.T @ jcw
        hmat[b : b + dim, a : a + dim] += jcw.T @ jpw
        hmat[b : b + dim, b : b + dim] += jcw.T @ jcw
        gvec[a : a + dim] += jpw.T @ ew
        gvec[b : b + dim] += jcw.T @ ew
    return cost


@njit(cache=True)
def left_update(rot, trans, xi):
    """``exp(xi^) T`` (a one-step, first-order propagation with unit step)."""
    rot_n, t_n, _ = propagate_kernel(rot, trans, xi, np.zeros(6), 1.0, 1)
    return rot_n, t_n
