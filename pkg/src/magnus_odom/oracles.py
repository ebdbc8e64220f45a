"""Reference integrators used to validate the motion prior.

None of these touch the Magnus code path: the pose ODE and the covariance
ODE are integrated with fine-step RK4, and the stochastic prior is sampled
with a geometric Euler-Maruyama scheme.
"""

from __future__ import annotations

import numpy as np

from . import _jit
from .prior import CA_DIM, State, StateGaussian, propagate_nominal, state_boxminus, state_boxplus
from .se3 import Pose, se3_exp_batch


def rk4_pose(x: State, dt: float, substeps: int = 1000) -> State:
    """Integrate ``dT/dt = (w + s wd)^ T`` with RK4 and per-substep projection."""
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    t = _jit.rk4_pose(x.pose.matrix(), x.velocity, x.acceleration, float(dt), int(substeps))
    return State(Pose.from_matrix(t), x.velocity + dt * x.acceleration, x.acceleration, x.stamp + dt)


def rk4_lyapunov(x: State, q: np.ndarray, dt: float, substeps: int = 2000, p0=None):
    """Covariance ODE ``dP/dt = A P + P A^T + L Q L^T`` and transition ``Phi``.

    ``A(s)`` is evaluated along the nominal velocity ``w + s wd``.  Returns
    ``(P(dt), Phi(dt))`` with 18x18 blocks.
    """
    lql = np.zeros((CA_DIM, CA_DIM))
    lql[12:, 12:] = q
    p0 = np.zeros((CA_DIM, CA_DIM)) if p0 is None else np.asarray(p0, dtype=float)
    return _jit.rk4_lyapunov(p0, x.velocity, x.acceleration, lql, float(dt), int(substeps))


def rk4_oracles(x: State, q: np.ndarray, dt: float, substeps: int = 1000) -> tuple[State, np.ndarray]:
    """Fine-step RK4 mean and process-noise covariance over one interval."""
    qk, _ = rk4_lyapunov(x, q, dt, substeps)
    return rk4_pose(x, dt, substeps), qk


def _sample_states(x0: StateGaussian, n: int, rng: np.random.Generator):
    gamma = rng.multivariate_normal(np.zeros(CA_DIM), x0.cov, size=n, method="eigh")
    rot_d, trans_d = se3_exp_batch(gamma[:, :6])
    rot = rot_d @ x0.mean.pose.rotation
    trans = np.einsum("nij,j->ni", rot_d, x0.mean.pose.translation) + trans_d
    vel = x0.mean.velocity + gamma[:, 6:12]
    acc = x0.mean.acceleration + gamma[:, 12:18]
    return rot, trans, vel, acc


def monte_carlo_prior(
    x0: StateGaussian,
    q: np.ndarray,
    dt: float,
    n_samples: int = 10_000,
    seed: int = 0,
    substeps: int = 200,
    chunk: int = 2500,
):
    """Sample the jerk-driven SDE and return ``(mean_state, cov, gammas)``.

    Samples start at ``gamma0 ~ N(0, P0)`` around ``x0.mean`` and are pushed
    through ``substeps`` Euler-Maruyama steps.  The returned covariance is
    the sample covariance of ``x ⊖ propagate_nominal(x0.mean, dt)``; the
    mean state is that nominal state displaced by the sample mean of the
    perturbations.  Chunks are drawn from independent child seeds so the
    result does not depend on how the work is split.
    """
    if n_samples < 100:
        raise ValueError("n_samples must be >= 100")
    if substeps < 200:
        raise ValueError("substeps must be >= 200")
    ref = propagate_nominal(x0.mean, dt)
    h = dt / substeps
    ev, vecs = np.linalg.eigh(q)
    sqrt_q = vecs * np.sqrt(np.clip(ev, 0.0, None))
    seeds = np.random.SeedSequence(seed).spawn((n_samples + chunk - 1) // chunk)
    gammas = []
    for c, ss in enumerate(seeds):
        rng = np.random.default_rng(ss)
        n = min(chunk, n_samples - c * chunk)
        rot, trans, vel, acc = _sample_states(x0, n, rng)
        for _ in range(substeps):
            # pose and velocity use the start-of-step values (explicit scheme)
            r_d, t_d = se3_exp_batch(h * vel)
            trans = np.einsum("nij,nj->ni", r_d, trans) + t_d
            rot = r_d @ rot
            vel = vel + h * acc
            acc = acc + np.sqrt(h) * rng.standard_normal((n, 6)) @ sqrt_q.T
        for i in range(n):
            xi = State(Pose(rot[i], trans[i]), vel[i], acc[i])
            gammas.append(state_boxminus(xi, ref))
    gammas = np.asarray(gammas)
    cov = np.cov(gammas, rowvar=False)
    return state_boxplus(gammas.mean(axis=0), ref), cov, gammas
