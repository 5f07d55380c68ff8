"""Inertial states and preintegrated IMU factors.

Model: the gyroscope measures body angular rate plus a slowly walking
bias, the accelerometer measures specific force ``R_WS^T (a_W - g_W) +
b_a`` with gravity pointing along world -z.  Successive samples are
combined with the midpoint rule into relative motion increments
(rotation, velocity, position) expressed in the frame of the interval
start.  First-order Jacobians with respect to the gyro/accel biases are
carried alongside so a factor can be re-evaluated at new bias estimates
without touching the raw measurements, and a 15x15 covariance is
propagated for use as the factor weight.

Error-state ordering everywhere in this module:
``[position, orientation, velocity, gyro bias, accel bias]``.
Orientation perturbations are left-multiplicative, matching
:mod:`.geometry`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    Pose,
    Quaternion,
    box_minus,
    quat_exp,
    skew,
    so3_left_jacobian,
    so3_left_jacobian_inv,
    so3_right_jacobian,
    so3_right_jacobian_inv,
)

GRAVITY = np.array([0.0, 0.0, -9.81])


@dataclass
class ImuSample:
    t: float
    gyro: np.ndarray
    accel: np.ndarray

    def __post_init__(self) -> None:
        self.gyro = np.asarray(self.gyro, dtype=float)
        self.accel = np.asarray(self.accel, dtype=float)


@dataclass
class ImuParams:
    """Continuous-time noise densities and the sensor rate."""

    sigma_gyro: float = 1.7e-4        # rad/s/sqrt(Hz)
    sigma_accel: float = 2.0e-3       # m/s^2/sqrt(Hz)
    sigma_gyro_bias: float = 2.0e-5   # rad/s^2/sqrt(Hz)
    sigma_accel_bias: float = 3.0e-4  # m/s^3/sqrt(Hz)
    rate: float = 200.0
    max_gap_s: float = 0.1
    gravity: np.ndarray = field(default_factory=lambda: GRAVITY.copy())

    def __post_init__(self) -> None:
        self.gravity = np.asarray(self.gravity, dtype=float)


@dataclass
class NavState:
    """Pose, world-frame velocity, and the two IMU biases."""

    T_WS: Pose
    v: np.ndarray
    bg: np.ndarray
    ba: np.ndarray

    def __post_init__(self) -> None:
        self.v = np.asarray(self.v, dtype=float)
        self.bg = np.asarray(self.bg, dtype=float)
        self.ba = np.asarray(self.ba, dtype=float)

    @staticmethod
    def identity() -> "NavState":
        return NavState(Pose.identity(), np.zeros(3), np.zeros(3), np.zeros(3))

    def copy(self) -> "NavState":
        return NavState(self.T_WS.copy(), self.v.copy(), self.bg.copy(), self.ba.copy())

    def box_plus(self, delta: np.ndarray) -> "NavState":
        """Apply a 15-vector perturbation in the module's state order."""
        delta = np.asarray(delta, dtype=float)
        from .geometry import pose_box_plus

        return NavState(
            pose_box_plus(self.T_WS, delta[0:6]),
            self.v + delta[6:9],
            self.bg + delta[9:12],
            self.ba + delta[12:15],
        )


class PreintegratedImu:
    """Midpoint-rule preintegration over a sample interval.

    Construct via :func:`preintegrate`, or seed with the first sample and
    :meth:`append` the rest.
    Appending the continuation of the same sample stream reproduces a
    single integration over the full interval exactly, which is what lets
    adjacent factors be merged when an intermediate state is dropped.
    """

    def __init__(self, params: ImuParams, bg_ref: np.ndarray, ba_ref: np.ndarray,
                 first: ImuSample):
        self.params = params
        self.bg_ref = np.asarray(bg_ref, dtype=float).copy()
        self.ba_ref = np.asarray(ba_ref, dtype=float).copy()
        self.t_start = float(first.t)
        self.t_end = float(first.t)
        self.dq = Quaternion.identity()
        self.dv = np.zeros(3)
        self.dp = np.zeros(3)
        self.dphi_dbg = np.zeros((3, 3))
        self.dv_dbg = np.zeros((3, 3))
        self.dv_dba = np.zeros((3, 3))
        self.dp_dbg = np.zeros((3, 3))
        self.dp_dba = np.zeros((3, 3))
        self.P = np.zeros((15, 15))
        self.Phi = np.eye(15)  # accumulated error-state transition
        self.samples: list[ImuSample] = [first]
        self._R = np.eye(3)  # rotation_matrix() of dq, kept in step
        self._A = np.eye(15)  # transition buffer; sparsity never changes
        self._B = np.zeros((15, 12))
        self._B[9:12, 6:9] = np.eye(3)
        self._B[12:15, 9:12] = np.eye(3)
        self._W = None  # cached information()

    @property
    def delta_t(self) -> float:
        return self.t_end - self.t_start

    def append(self, sample: ImuSample) -> None:
        prev = self.samples[-1]
        dt = float(sample.t) - prev.t
        if dt <= 0.0:
            raise ValueError(f"samples must be strictly increasing in time (dt={dt})")
        if dt > self.params.max_gap_s:
            raise ValueError(
                f"gap of {dt:.4f}s between samples exceeds {self.params.max_gap_s}s"
            )

        w_mid = 0.5 * (prev.gyro + sample.gyro) - self.bg_ref
        a0 = prev.accel - self.ba_ref
        a1 = sample.accel - self.ba_ref

        R_i = self._R
        dq_next = self.dq @ quat_exp(w_mid * dt)
        R_next = dq_next.rotation_matrix()
        rho0 = R_i @ a0
        rho1 = R_next @ a1
        a_mid = 0.5 * (rho0 + rho1)
        R_mid = 0.5 * (R_i + R_next)
        RJr = R_next @ so3_right_jacobian(w_mid * dt)

        dphi_dbg_next = self.dphi_dbg - RJr * dt
        da_mid_dbg = -0.5 * (skew(rho0) @ self.dphi_dbg + skew(rho1) @ dphi_dbg_next)

        half_dt2 = 0.5 * dt * dt
        dp_dbg_next = self.dp_dbg + self.dv_dbg * dt + da_mid_dbg * half_dt2
        dp_dba_next = self.dp_dba + self.dv_dba * dt - R_mid * half_dt2
        dv_dbg_next = self.dv_dbg + da_mid_dbg * dt
        dv_dba_next = self.dv_dba - R_mid * dt

        dp_next = self.dp + self.dv * dt + a_mid * half_dt2
        dv_next = self.dv + a_mid * dt

        sk_a = skew(a_mid)
        A = self._A  # only the blocks below vary; the rest stays identity
        A[0:3, 3:6] = sk_a * -half_dt2
        A[0, 6] = A[1, 7] = A[2, 8] = dt
        A[0:3, 12:15] = R_mid * -half_dt2
        A[3:6, 9:12] = RJr * -dt
        A[6:9, 3:6] = sk_a * -dt
        A[6:9, 12:15] = R_mid * -dt

        B = self._B
        B[0:3, 3:6] = R_mid * half_dt2
        B[3:6, 0:3] = RJr * dt
        B[6:9, 3:6] = R_mid * dt

        p = self.params
        q_diag = np.empty(12)
        q_diag[0:3] = p.sigma_gyro ** 2 / dt
        q_diag[3:6] = p.sigma_accel ** 2 / dt
        q_diag[6:9] = p.sigma_gyro_bias ** 2 * dt
        q_diag[9:12] = p.sigma_accel_bias ** 2 * dt
        self.P = A @ self.P @ A.T + (B * q_diag) @ B.T
        self.Phi = A @ self.Phi

        self.dq = dq_next
        self.dv = dv_next
        self.dp = dp_next
        self.dphi_dbg = dphi_dbg_next
        self.dv_dbg = dv_dbg_next
        self.dv_dba = dv_dba_next
        self.dp_dbg = dp_dbg_next
        self.dp_dba = dp_dba_next
        self.t_end = float(sample.t)
        self.samples.append(sample)
        self._R = R_next
        self._W = None

    def corrected_deltas(self, bg: np.ndarray, ba: np.ndarray):
        """First-order bias-corrected increments ``(dq, dv, dp, u)`` where
        ``u`` is the applied rotation correction vector."""
        dbg = np.asarray(bg, dtype=float) - self.bg_ref
        dba = np.asarray(ba, dtype=float) - self.ba_ref
        u = self.dphi_dbg @ dbg
        dq_c = quat_exp(u) @ self.dq
        dv_c = self.dv + self.dv_dbg @ dbg + self.dv_dba @ dba
        dp_c = self.dp + self.dp_dbg @ dbg + self.dp_dba @ dba
        return dq_c, dv_c, dp_c, u

    def information(self) -> np.ndarray:
        if self._W is None:
            P = 0.5 * (self.P + self.P.T)
            W = np.linalg.inv(P)
            self._W = 0.5 * (W + W.T)
        return self._W

    def information_world(self, R_k: np.ndarray) -> np.ndarray:
        """Weight for the world-frame error, given the start orientation."""
        G = np.eye(15)
        G[0:3, 0:3] = R_k
        G[3:6, 3:6] = R_k
        G[6:9, 6:9] = R_k
        return G @ self.information() @ G.T


def preintegrate(samples: list[ImuSample], params: ImuParams,
                 bg: np.ndarray, ba: np.ndarray) -> PreintegratedImu:
    if len(samples) < 2:
        raise ValueError("preintegration needs at least two samples")
    pre = PreintegratedImu(params, bg, ba, samples[0])
    for s in samples[1:]:
        pre.append(s)
    return pre


def merge(a: PreintegratedImu, b: PreintegratedImu) -> PreintegratedImu:
    """One factor spanning two adjacent intervals.

    ``b`` must start at the sample ending ``a``.  The result is
    linearized at ``a``'s reference biases: ``b``'s increments are
    first-order corrected to those references and then chained in closed
    form -- rotations multiply, velocity/position transport through
    ``a``'s end rotation, bias Jacobians pick up the coupling of ``a``'s
    orientation sensitivity into ``b``'s rotated increments, and the
    covariance is pushed through ``b``'s accumulated transition.  With
    equal references this reproduces re-integrating the concatenated
    samples to numerical precision; otherwise it matches to the same
    first order as :meth:`PreintegratedImu.corrected_deltas`.
    """
    if abs(a.t_end - b.t_start) > 1e-9:
        raise ValueError("intervals are not adjacent")
    out = PreintegratedImu(a.params, a.bg_ref, a.ba_ref, a.samples[0])
    out.samples = a.samples + b.samples[1:]
    out.t_start = a.t_start
    out.t_end = b.t_end

    dq_b, dv_b, dp_b, u = b.corrected_deltas(a.bg_ref, a.ba_ref)
    dphi_dbg_b = so3_left_jacobian(u) @ b.dphi_dbg

    R_a = a._R
    T_b = b.delta_t
    Rdv = R_a @ dv_b
    Rdp = R_a @ dp_b
    out.dq = a.dq @ dq_b
    out.dv = a.dv + Rdv
    out.dp = a.dp + a.dv * T_b + Rdp
    out.dphi_dbg = a.dphi_dbg + R_a @ dphi_dbg_b
    out.dv_dbg = a.dv_dbg + R_a @ b.dv_dbg - skew(Rdv) @ a.dphi_dbg
    out.dv_dba = a.dv_dba + R_a @ b.dv_dba
    out.dp_dbg = (a.dp_dbg + a.dv_dbg * T_b + R_a @ b.dp_dbg
                  - skew(Rdp) @ a.dphi_dbg)
    out.dp_dba = a.dp_dba + a.dv_dba * T_b + R_a @ b.dp_dba

    G = np.eye(15)
    G[0:3, 0:3] = R_a
    G[3:6, 3:6] = R_a
    G[6:9, 6:9] = R_a
    Phi_b = G @ b.Phi @ G.T
    out.P = Phi_b @ a.P @ Phi_b.T + G @ b.P @ G.T
    out.Phi = Phi_b @ a.Phi
    out._R = out.dq.rotation_matrix()
    return out


def predict(state: NavState, pre: PreintegratedImu) -> NavState:
    """Propagate a nav state across the preintegrated interval."""
    dt = pre.delta_t
    g = pre.params.gravity
    dq_c, dv_c, dp_c, _ = pre.corrected_deltas(state.bg, state.ba)
    R_k = state.T_WS.q.rotation_matrix()
    q_hat = state.T_WS.q @ dq_c
    r_hat = state.T_WS.r + state.v * dt + 0.5 * g * dt * dt + R_k @ dp_c
    v_hat = state.v + g * dt + R_k @ dv_c
    return NavState(Pose(r_hat, q_hat), v_hat, state.bg.copy(), state.ba.copy())


def imu_cost(state_k: NavState, state_n: NavState, pre: PreintegratedImu) -> float:
    """``0.5 e^T W e`` of :func:`imu_error` without forming Jacobians.

    Rotating the error into the interval-start frame lets the cached
    body-frame information be used directly: ``e^T (G W G^T) e ==
    (G^T e)^T W (G^T e)``.
    """
    dt = pre.delta_t
    g = pre.params.gravity
    dq_c, dv_c, dp_c, _ = pre.corrected_deltas(state_k.bg, state_k.ba)
    R_k = state_k.T_WS.q.rotation_matrix()

    q_hat = state_k.T_WS.q @ dq_c
    r_hat = state_k.T_WS.r + state_k.v * dt + 0.5 * g * dt * dt + R_k @ dp_c
    v_hat = state_k.v + g * dt + R_k @ dv_c

    e = np.empty(15)
    e[0:3] = (r_hat - state_n.T_WS.r) @ R_k
    e[3:6] = box_minus(q_hat, state_n.T_WS.q) @ R_k
    e[6:9] = (v_hat - state_n.v) @ R_k
    e[9:12] = state_k.bg - state_n.bg
    e[12:15] = state_k.ba - state_n.ba
    W = pre.information()
    return 0.5 * float(e @ W @ e)


def imu_error(state_k: NavState, state_n: NavState, pre: PreintegratedImu):
    """Error between the prediction from ``state_k`` and ``state_n``.

    Returns ``(e, J_k, J_n, W)`` with the 15-vector error, Jacobians with
    respect to both states' perturbations, and the world-frame
    information matrix.
    """
    dt = pre.delta_t
    g = pre.params.gravity
    dq_c, dv_c, dp_c, u0 = pre.corrected_deltas(state_k.bg, state_k.ba)
    R_k = state_k.T_WS.q.rotation_matrix()

    q_hat = state_k.T_WS.q @ dq_c
    r_hat = state_k.T_WS.r + state_k.v * dt + 0.5 * g * dt * dt + R_k @ dp_c
    v_hat = state_k.v + g * dt + R_k @ dv_c

    e = np.empty(15)
    e[0:3] = r_hat - state_n.T_WS.r
    e_phi = box_minus(q_hat, state_n.T_WS.q)
    e[3:6] = e_phi
    e[6:9] = v_hat - state_n.v
    e[9:12] = state_k.bg - state_n.bg
    e[12:15] = state_k.ba - state_n.ba

    Jl_inv = so3_left_jacobian_inv(e_phi)

    J_k = np.zeros((15, 15))
    J_k[0:3, 0:3] = np.eye(3)
    J_k[0:3, 3:6] = -skew(R_k @ dp_c)
    J_k[0:3, 6:9] = np.eye(3) * dt
    J_k[0:3, 9:12] = R_k @ pre.dp_dbg
    J_k[0:3, 12:15] = R_k @ pre.dp_dba
    J_k[3:6, 3:6] = Jl_inv
    J_k[3:6, 9:12] = Jl_inv @ R_k @ so3_left_jacobian(u0) @ pre.dphi_dbg
    J_k[6:9, 3:6] = -skew(R_k @ dv_c)
    J_k[6:9, 6:9] = np.eye(3)
    J_k[6:9, 9:12] = R_k @ pre.dv_dbg
    J_k[6:9, 12:15] = R_k @ pre.dv_dba
    J_k[9:12, 9:12] = np.eye(3)
    J_k[12:15, 12:15] = np.eye(3)

    J_n = np.zeros((15, 15))
    J_n[0:3, 0:3] = -np.eye(3)
    J_n[3:6, 3:6] = -so3_right_jacobian_inv(e_phi)
    J_n[6:9, 6:9] = -np.eye(3)
    J_n[9:12, 9:12] = -np.eye(3)
    J_n[12:15, 12:15] = -np.eye(3)

    W = pre.information_world(R_k)
    return e, J_k, J_n, W


# -- sample-stream helpers ------------------------------------------------


def interpolate_sample(s0: ImuSample, s1: ImuSample, t: float) -> ImuSample:
    """Linear interpolation between two samples at time ``t``."""
    if not (s0.t <= t <= s1.t):
        raise ValueError("interpolation time outside the bracketing samples")
    if s1.t == s0.t:
        return ImuSample(t, s0.gyro.copy(), s0.accel.copy())
    a = (t - s0.t) / (s1.t - s0.t)
    return ImuSample(t, (1 - a) * s0.gyro + a * s1.gyro,
                     (1 - a) * s0.accel + a * s1.accel)


def slice_for_interval(samples: list[ImuSample], t0: float, t1: float) -> list[ImuSample]:
    """Samples covering exactly [t0, t1], interpolating the endpoints.

    Raises when the stream does not bracket the interval.
    """
    if t1 <= t0:
        raise ValueError("empty interval")
    ts = [s.t for s in samples]
    # tolerate float rounding at the stream edges (frame times are often
    # computed as k/rate and land within 1e-12 of a sample)
    if ts[0] - 1e-9 <= t0 < ts[0]:
        t0 = ts[0]
    if ts[-1] < t1 <= ts[-1] + 1e-9:
        t1 = ts[-1]
    if t0 < ts[0] or t1 > ts[-1]:
        raise ValueError("interval not covered by the sample stream")
    import bisect

    i0 = bisect.bisect_right(ts, t0) - 1
    i1 = bisect.bisect_left(ts, t1)
    out = [interpolate_sample(samples[i0], samples[min(i0 + 1, len(samples) - 1)], t0)]
    for s in samples[i0 + 1:i1]:
        if s.t > t0 + 1e-12:
            out.append(s)
    if t1 > out[-1].t + 1e-12:
        out.append(interpolate_sample(samples[i1 - 1], samples[i1], t1))
    return out


def attitude_from_gravity(accel_mean: np.ndarray) -> Quaternion:
    """Roll/pitch-only attitude from a (near) static accelerometer mean.

    The returned world-from-body rotation maps the measured specific
    force onto world +z and has no twist about the vertical axis.
    """
    a = np.asarray(accel_mean, dtype=float)
    n = np.linalg.norm(a)
    if n < 1e-9:
        raise ValueError("accelerometer mean is (near) zero; cannot level")
    a = a / n
    z = np.array([0.0, 0.0, 1.0])
    axis = np.cross(a, z)
    s = np.linalg.norm(axis)
    c = float(a @ z)
    if s < 1e-12:
        phi = np.zeros(3) if c > 0 else np.array([np.pi, 0.0, 0.0])
    else:
        phi = axis / s * np.arctan2(s, c)
    return quat_exp(phi)


def load_imu_csv(path) -> list[ImuSample]:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.shape[1] != 7:
        raise ValueError(f"expected 7 columns (t,gx,gy,gz,ax,ay,az), got {data.shape[1]}")
    return [ImuSample(float(r[0]), r[1:4].copy(), r[4:7].copy()) for r in data]


def save_imu_csv(path, samples: list[ImuSample]) -> None:
    with open(path, "w") as f:
        f.write("t,gx,gy,gz,ax,ay,az\n")
        for s in samples:
            vals = [s.t, *s.gyro, *s.accel]
            f.write(",".join("%.17g" % v for v in vals) + "\n")
