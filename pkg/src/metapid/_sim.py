"""Compiled closed-loop kernels (reference -> PID -> plant).

These loops mirror ``plant.make_reference``, ``pid.pid_step`` and
``plant.step_plant`` operation for operation; tests hold them to the
pure-Python path.
"""
import numpy as np
from numba import njit

from .pid import INTEGRAL_CLAMP
from .plant import FRICTION_EPS

DIVERGENCE_LIMIT = 10.0  # rad


@njit(cache=True, nogil=True)
def run_segment(q, qd, integ, prev_e, init, kp, ki, kd,
                inertia, damping, coulomb, gravity, tlim,
                amp, freq, phase, offset, dt, step0, n_steps,
                dist, period, err_out, qd_out, integral_clamp, eps, limit):
    """Advance one plant/controller pair ``n_steps`` control steps in place.

    ``init`` is a length-1 int array (PID initialized flag). ``dist`` holds one
    torque row per disturbance period. Returns the number of steps completed;
    fewer than ``n_steps`` means the state went non-finite or beyond
    ``limit`` rad.
    """
    n = q.shape[0]
    two_pi = 2.0 * np.pi
    for k in range(n_steps):
        s = step0 + k
        t = s * dt
        row = s // period
        if row >= dist.shape[0]:
            row = dist.shape[0] - 1
        bad = False
        for i in range(n):
            ref = amp[i] * np.sin(two_pi * freq[i] * t + phase[i]) + offset[i]
            e = ref - q[i]
            err_out[k, i] = e
            qd_out[k, i] = qd[i]
            p = prev_e[i] if init[0] else e
            acc = integ[i] + 0.5 * (e + p) * dt
            if acc > integral_clamp:
                acc = integral_clamp
            elif acc < -integral_clamp:
                acc = -integral_clamp
            integ[i] = acc
            u = kp[i] * e + ki[i] * acc + kd[i] * ((e - p) / dt)
            prev_e[i] = e
            if u > tlim[i]:
                u = tlim[i]
            elif u < -tlim[i]:
                u = -tlim[i]
            net = (u + dist[row, i] - damping[i] * qd[i]
                   - coulomb[i] * np.tanh(qd[i] / eps) - gravity[i] * np.sin(q[i]))
            qd[i] = qd[i] + (net / inertia[i]) * dt
            q[i] = q[i] + qd[i] * dt
            if not (np.isfinite(q[i]) and np.isfinite(qd[i])) or abs(q[i]) > limit:
                bad = True
        init[0] = 1
        if bad:
            return k + 1
    return n_steps


@njit(cache=True, nogil=True)
def run_segment_batch(q, qd, integ, prev_e, init, kp, ki, kd,
                      inertia, damping, coulomb, gravity, tlim,
                      amp, freq, phase, offset, dt, step0, n_steps,
                      dist, period, err_out, qd_out, integral_clamp, eps, limit, done_steps):
    """:func:`run_segment` over a leading env axis; ``step0`` is per env."""
    for b in range(q.shape[0]):
        done_steps[b] = run_segment(
            q[b], qd[b], integ[b], prev_e[b], init[b], kp[b], ki[b], kd[b],
            inertia[b], damping[b], coulomb[b], gravity[b], tlim[b],
            amp[b], freq[b], phase[b], offset[b], dt, step0[b], n_steps,
            dist[b], period, err_out[b], qd_out[b], integral_clamp, eps, limit)


class LoopState:
    """Mutable plant + PID state of one closed loop, in kernel layout."""

    __slots__ = ("q", "qd", "integ", "prev_e", "init")

    def __init__(self, q, qd):
        self.q = np.array(q, dtype=float)
        self.qd = np.array(qd, dtype=float)
        self.integ = np.zeros_like(self.q)
        self.prev_e = np.zeros_like(self.q)
        self.init = np.zeros(1, dtype=np.int64)


def simulate(model, gains, spec, state, step0, n_steps, dist=None, period=1,
             err_out=None, qd_out=None):
    """Run ``n_steps`` closed-loop steps of ``model`` under ``gains``.

    Returns ``(completed_steps, err, qd)`` where ``err``/``qd`` have shape
    (n_steps, n_joints); rows past ``completed_steps`` are unspecified.
    """
    n = model.n_joints
    if dist is None:
        dist = np.zeros((1, n))
    if err_out is None:
        err_out = np.empty((n_steps, n))
    if qd_out is None:
        qd_out = np.empty((n_steps, n))
    done = run_segment(
        state.q, state.qd, state.integ, state.prev_e, state.init,
        gains.kp, gains.ki, gains.kd,
        model.inertia_per_joint, model.viscous_damping, model.coulomb_friction,
        model.gravity_gain, model.torque_limit,
        spec.amplitude, spec.frequency, spec.phase, spec.offset, spec.dt,
        int(step0), int(n_steps), np.ascontiguousarray(dist, dtype=float), int(period),
        err_out, qd_out, INTEGRAL_CLAMP, FRICTION_EPS, DIVERGENCE_LIMIT)
    return done, err_out, qd_out
