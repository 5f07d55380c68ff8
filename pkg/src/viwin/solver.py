"""Nonlinear least-squares over poses, speed/bias states and landmarks.

The graph mixes three factor types: pixel reprojections (robustified
with a Cauchy loss), preintegrated IMU terms between nav states, and
condensed two-pose terms.  Optimization is Levenberg-Marquardt with
per-block multiplicative damping (``H_bb += damping * diag(H_bb)``)
applied before the landmark blocks are eliminated with a Schur
complement, so the reduced step equals the one a dense solve of the
damped full system would produce.

Variable blocks: pose (6), speed/bias (9, ordered ``[v, bg, ba]``),
landmark (3).  Any block can be held fixed; fixed blocks contribute
residuals but no columns.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .camera import CameraRig, reprojection_error_batch
from .geometry import Pose, box_minus, pose_box_plus, so3_left_jacobian_inv
from .imu import NavState, PreintegratedImu, imu_cost, imu_error
from .marginal import TwoPoseFactor, eval_two_pose_error


@dataclass
class SolverOptions:
    max_iterations: int = 10
    initial_damping: float = 1e-4
    damping_increase: float = 10.0
    damping_decrease: float = 0.5
    max_damping: float = 1e8
    cauchy_scale: float = 3.0
    use_robust_reprojection: bool = True
    step_tolerance: float = 1e-8
    function_tolerance: float = 1e-9   # relative cost decrease


@dataclass
class OptimizeResult:
    iterations: int = 0
    initial_cost: float = 0.0
    final_cost: float = 0.0
    accepted: int = 0
    rejected: int = 0
    converged: bool = False
    final_damping: float = 0.0
    cost_history: list = field(default_factory=list)


class _Context:
    """Variable ordering and per-camera observation batches for one
    optimize().  Observations are flattened camera by camera, sorted so
    each frame's rows are contiguous; ``segs`` lists those runs for the
    dense-block scatter."""

    def __init__(self, graph: "FactorGraph"):
        self.pose_ids = [s for s in sorted(graph.poses) if s not in graph.fixed_poses]
        self.sb_ids = [s for s in sorted(graph.speed_bias)
                       if s not in graph.fixed_speed_bias]
        self.pose_off = {s: 6 * i for i, s in enumerate(self.pose_ids)}
        base = 6 * len(self.pose_ids)
        self.sb_off = {s: base + 9 * i for i, s in enumerate(self.sb_ids)}
        self.dim = base + 9 * len(self.sb_ids)

        self.all_land_ids = sorted(graph.landmarks)
        land_row = {l: k for k, l in enumerate(self.all_land_ids)}
        self.land_ids = [l for l in self.all_land_ids
                         if l not in graph.fixed_landmarks]
        free_row = {l: k for k, l in enumerate(self.land_ids)}
        self.n_land = len(self.land_ids)
        self.free_rows = np.asarray(
            [land_row[l] for l in self.land_ids], dtype=int)

        self.frames = sorted({f for f, _, _, _ in graph.reprojections})
        frame_idx = {f: i for i, f in enumerate(self.frames)}

        # pose columns coupled to landmarks: free frames with observations
        self.vis_frames = [f for f in self.frames if f in self.pose_off]
        vis_index = {f: i for i, f in enumerate(self.vis_frames)}
        self.vis_cols = np.concatenate(
            [np.arange(self.pose_off[f], self.pose_off[f] + 6)
             for f in self.vis_frames]) if self.vis_frames else np.zeros(0, int)
        self.frame_vis = np.asarray(
            [vis_index.get(f, -1) for f in self.frames], dtype=int)

        by_cam: dict[int, list] = {}
        for frame, cam, lid, uv in graph.reprojections:
            by_cam.setdefault(cam, []).append((frame, lid, uv))
        self.cam_batches = []
        for cam in sorted(by_cam):
            obs = sorted(by_cam[cam], key=lambda o: frame_idx[o[0]])
            fr = np.asarray([frame_idx[f] for f, _, _ in obs], dtype=int)
            uvs = np.asarray([uv for _, _, uv in obs], dtype=float)
            rows_all = np.asarray([land_row[l] for _, l, _ in obs], dtype=int)
            rows_free = np.asarray(
                [free_row.get(l, -1) for _, l, _ in obs], dtype=int)
            segs = []
            a = 0
            for k in range(1, len(obs) + 1):
                if k == len(obs) or fr[k] != fr[k - 1]:
                    segs.append((obs[a][0], a, k))
                    a = k
            self.cam_batches.append((cam, fr, rows_all, rows_free, uvs, segs))


class FactorGraph:
    def __init__(self, rig: CameraRig, sigma_px: float = 1.0):
        self.rig = rig
        self.sigma_px = float(sigma_px)
        self.poses: dict[int, Pose] = {}
        self.speed_bias: dict[int, np.ndarray] = {}
        self.landmarks: dict[int, np.ndarray] = {}
        self.fixed_poses: set[int] = set()
        self.fixed_speed_bias: set[int] = set()
        self.fixed_landmarks: set[int] = set()
        self.reprojections: list[tuple[int, int, int, np.ndarray]] = []
        self.imu_factors: list[tuple[int, int, PreintegratedImu]] = []
        self.two_pose_factors: list[TwoPoseFactor] = []
        self.pose_priors: list[tuple[int, Pose, np.ndarray]] = []
        self.speed_bias_priors: list[tuple[int, np.ndarray, np.ndarray]] = []

    # -- construction -----------------------------------------------------

    def set_pose(self, sid: int, pose: Pose) -> None:
        self.poses[sid] = pose

    def set_speed_bias(self, sid: int, sb: np.ndarray) -> None:
        sb = np.asarray(sb, dtype=float)
        if sb.shape != (9,):
            raise ValueError("speed/bias block must be a 9-vector [v, bg, ba]")
        self.speed_bias[sid] = sb

    def set_state(self, sid: int, state: NavState) -> None:
        self.poses[sid] = state.T_WS
        self.speed_bias[sid] = np.concatenate([state.v, state.bg, state.ba])

    def nav_state(self, sid: int) -> NavState:
        sb = self.speed_bias[sid]
        return NavState(self.poses[sid], sb[0:3], sb[3:6], sb[6:9])

    def set_landmark(self, lid: int, point: np.ndarray) -> None:
        self.landmarks[lid] = np.asarray(point, dtype=float)

    def add_reprojection(self, frame: int, cam: int, lid: int, uv: np.ndarray) -> None:
        self.reprojections.append((frame, cam, lid, np.asarray(uv, dtype=float)))

    def add_imu(self, sid_i: int, sid_j: int, pre: PreintegratedImu) -> None:
        self.imu_factors.append((sid_i, sid_j, pre))

    def add_two_pose(self, factor: TwoPoseFactor) -> None:
        self.two_pose_factors.append(factor)

    def add_pose_prior(self, sid: int, reference: Pose,
                       weights: np.ndarray) -> None:
        """Unary prior ``e = [r - r_ref, Log(q * q_ref^-1)]``.

        ``weights`` is either a 6-vector (diagonal information) or a full
        6x6 information matrix; zero rows leave the matching directions
        unconstrained, which is how the gauge is pinned in position and
        yaw while roll/pitch stay free for gravity to settle.
        """
        w = np.asarray(weights, dtype=float)
        W = np.diag(w) if w.ndim == 1 else w
        if W.shape != (6, 6):
            raise ValueError("pose prior weights must be 6-vector or 6x6")
        self.pose_priors.append((sid, reference.copy(), W))

    def add_speed_bias_prior(self, sid: int, reference: np.ndarray,
                             weights: np.ndarray) -> None:
        """Unary prior on a ``[v, bg, ba]`` block, diagonal or full 9x9.

        Mainly an anchor for the first state's biases: without it a
        single IMU interval lets the accelerometer bias impersonate a
        gravity-direction error.
        """
        ref = np.asarray(reference, dtype=float)
        w = np.asarray(weights, dtype=float)
        W = np.diag(w) if w.ndim == 1 else w
        if ref.shape != (9,) or W.shape != (9, 9):
            raise ValueError("speed/bias prior needs a 9-vector reference "
                             "and 9-vector or 9x9 weights")
        self.speed_bias_priors.append((sid, ref, W))

    def fix_pose(self, sid: int, fixed: bool = True) -> None:
        (self.fixed_poses.add if fixed else self.fixed_poses.discard)(sid)

    def fix_speed_bias(self, sid: int, fixed: bool = True) -> None:
        (self.fixed_speed_bias.add if fixed else self.fixed_speed_bias.discard)(sid)

    def fix_landmark(self, lid: int, fixed: bool = True) -> None:
        (self.fixed_landmarks.add if fixed else self.fixed_landmarks.discard)(lid)

    def copy(self) -> "FactorGraph":
        """Independent copy of all states; factors are shared (they are
        not mutated after being added)."""
        g = FactorGraph(self.rig, self.sigma_px)
        g.poses = {k: p.copy() for k, p in self.poses.items()}
        g.speed_bias = {k: v.copy() for k, v in self.speed_bias.items()}
        g.landmarks = {k: v.copy() for k, v in self.landmarks.items()}
        g.fixed_poses = set(self.fixed_poses)
        g.fixed_speed_bias = set(self.fixed_speed_bias)
        g.fixed_landmarks = set(self.fixed_landmarks)
        g.reprojections = list(self.reprojections)
        g.imu_factors = list(self.imu_factors)
        g.two_pose_factors = list(self.two_pose_factors)
        g.pose_priors = list(self.pose_priors)
        g.speed_bias_priors = list(self.speed_bias_priors)
        return g

    # -- cost -------------------------------------------------------------

    def _robust(self, s: np.ndarray, opts: SolverOptions):
        """Loss value and reweighting factor for squared normalized
        residuals ``s``."""
        if not opts.use_robust_reprojection:
            return s, np.ones_like(s)
        b2 = opts.cauchy_scale ** 2
        return b2 * np.log1p(s / b2), 1.0 / (1.0 + s / b2)

    def total_cost(self, options: SolverOptions | None = None) -> float:
        opts = options or SolverOptions()
        ctx = _Context(self)
        return self._cost(ctx, self.poses, self.speed_bias,
                          self._land_array(ctx), opts)

    def _land_array(self, ctx: _Context) -> np.ndarray:
        """Landmark values stacked in ``ctx.all_land_ids`` order."""
        if not ctx.all_land_ids:
            return np.zeros((0, 3))
        return np.asarray([self.landmarks[l] for l in ctx.all_land_ids],
                          dtype=float)

    @staticmethod
    def _frame_pose_arrays(ctx: _Context, poses):
        R = np.empty((len(ctx.frames), 3, 3))
        r = np.empty((len(ctx.frames), 3))
        for i, f in enumerate(ctx.frames):
            R[i] = poses[f].q.rotation_matrix()
            r[i] = poses[f].r
        return R, r

    def _cost(self, ctx, poses, speed_bias, land_arr, opts) -> float:
        c = 0.0
        inv_s2 = 1.0 / self.sigma_px ** 2
        if ctx.cam_batches:
            R_WS, r_WS = self._frame_pose_arrays(ctx, poses)
        for cam, fr, rows_all, _, uvs, _ in ctx.cam_batches:
            err, _ = reprojection_error_batch(
                self.rig, cam, R_WS, r_WS, fr, land_arr[rows_all], uvs,
                want_jacobians=False)
            s = (err * err).sum(axis=1) * inv_s2
            rho, _ = self._robust(s, opts)
            c += 0.5 * rho.sum()
        for i, j, pre in self.imu_factors:
            c += imu_cost(self._nav(poses, speed_bias, i),
                          self._nav(poses, speed_bias, j), pre)
        for f in self.two_pose_factors:
            e, _, _, W = eval_two_pose_error(f, poses[f.frame_r], poses[f.frame_c])
            c += 0.5 * e @ W @ e
        for sid, ref, W in self.pose_priors:
            e = self._prior_error(poses[sid], ref)
            c += 0.5 * e @ W @ e
        for sid, ref, W in self.speed_bias_priors:
            e = speed_bias[sid] - ref
            c += 0.5 * e @ W @ e
        return c

    @staticmethod
    def _prior_error(pose: Pose, ref: Pose) -> np.ndarray:
        return np.concatenate([pose.r - ref.r, box_minus(pose.q, ref.q)])

    @staticmethod
    def _nav(poses, speed_bias, sid) -> NavState:
        sb = speed_bias[sid]
        return NavState(poses[sid], sb[0:3], sb[3:6], sb[6:9])

    # -- linearization ----------------------------------------------------

    def _linearize(self, ctx: _Context, opts: SolverOptions,
                   land_arr: np.ndarray):
        D, L = ctx.dim, ctx.n_land
        V = len(ctx.vis_frames)
        H_dd = np.zeros((D, D))
        b_d = np.zeros(D)
        H_ll = np.zeros((L, 3, 3))
        H_dl = np.zeros((L, 6 * V, 3))  # columns follow ctx.vis_cols
        H_dl4 = H_dl.reshape(L, V, 6, 3)
        b_l = np.zeros((L, 3))
        inv_s2 = 1.0 / self.sigma_px ** 2

        if ctx.cam_batches:
            R_WS, r_WS = self._frame_pose_arrays(ctx, self.poses)
        for cam, fr, rows_all, rows_free, uvs, segs in ctx.cam_batches:
            err, J_pose, J_l, valid = reprojection_error_batch(
                self.rig, cam, R_WS, r_WS, fr, land_arr[rows_all], uvs)
            s = (err * err).sum(axis=1) * inv_s2
            _, w = self._robust(s, opts)
            w = w * inv_s2
            w[~valid] = 0.0

            wJpT = (J_pose * w[:, None, None]).transpose(0, 2, 1)
            wJlT = (J_l * w[:, None, None]).transpose(0, 2, 1)
            Hpp = np.matmul(wJpT, J_pose)               # (N, 6, 6)
            bp = np.matmul(wJpT, err[:, :, None])[:, :, 0]
            lm = rows_free >= 0
            for frame, a, k in segs:
                o = ctx.pose_off.get(frame)
                if o is None:
                    continue
                H_dd[o:o + 6, o:o + 6] += Hpp[a:k].sum(axis=0)
                b_d[o:o + 6] -= bp[a:k].sum(axis=0)
            vi = ctx.frame_vis[fr]
            cpl = lm & (vi >= 0)
            if cpl.any():
                np.add.at(H_dl4, (rows_free[cpl], vi[cpl]),
                          np.matmul(wJpT, J_l)[cpl])
            if lm.any():
                rows = rows_free[lm]
                np.add.at(H_ll, rows, np.matmul(wJlT, J_l)[lm])
                np.add.at(b_l, rows,
                          -np.matmul(wJlT, err[:, :, None])[lm, :, 0])

        def scatter(e, W, blocks):
            free = [(off, J) for off, J in blocks if off is not None]
            We = W @ e
            for off_a, J_a in free:
                wa = J_a.shape[1]
                b_d[off_a:off_a + wa] -= J_a.T @ We
                JW = J_a.T @ W
                for off_b, J_b in free:
                    wb = J_b.shape[1]
                    H_dd[off_a:off_a + wa, off_b:off_b + wb] += JW @ J_b

        for i, j, pre in self.imu_factors:
            e, J_k, J_n, W = imu_error(self.nav_state(i), self.nav_state(j), pre)
            scatter(e, W, [
                (ctx.pose_off.get(i), J_k[:, 0:6]),
                (ctx.sb_off.get(i), J_k[:, 6:15]),
                (ctx.pose_off.get(j), J_n[:, 0:6]),
                (ctx.sb_off.get(j), J_n[:, 6:15]),
            ])

        for f in self.two_pose_factors:
            e, J_r, J_c, W = eval_two_pose_error(
                f, self.poses[f.frame_r], self.poses[f.frame_c])
            scatter(e, W, [
                (ctx.pose_off.get(f.frame_r), J_r),
                (ctx.pose_off.get(f.frame_c), J_c),
            ])

        for sid, ref, W in self.pose_priors:
            e = self._prior_error(self.poses[sid], ref)
            J = np.zeros((6, 6))
            J[0:3, 0:3] = np.eye(3)
            J[3:6, 3:6] = so3_left_jacobian_inv(e[3:6])
            scatter(e, W, [(ctx.pose_off.get(sid), J)])

        for sid, ref, W in self.speed_bias_priors:
            e = self.speed_bias[sid] - ref
            scatter(e, W, [(ctx.sb_off.get(sid), np.eye(9))])

        return H_dd, b_d, H_ll, H_dl, b_l

    @staticmethod
    def _solve(lin, damping: float, vis_cols: np.ndarray):
        H_dd, b_d, H_ll, H_dl, b_l = lin
        D = H_dd.shape[0]
        L = H_ll.shape[0]
        H_dd_l = H_dd + damping * np.diag(np.diag(H_dd))
        if L:
            eye = np.eye(3)
            H_ll_l = H_ll + damping * (H_ll * eye)
            # landmark blocks without support stay at zero; park them
            good = np.einsum("lii->l", H_ll) > 0.0
            H_ll_work = np.where(good[:, None, None], H_ll_l, eye)
            b_l_work = np.where(good[:, None], b_l, 0.0)
            try:
                H_ll_inv = np.linalg.inv(H_ll_work)
            except np.linalg.LinAlgError:
                H_ll_inv = np.stack([np.linalg.pinv(b_, rcond=1e-10)
                                     for b_ in H_ll_work])
            # Schur complement via stacked matmuls (BLAS beats einsum
            # here by an order of magnitude at realtime problem sizes);
            # it only touches the landmark-coupled columns ``vis_cols``
            C = H_dl.shape[1]
            A = np.ascontiguousarray(H_dl.transpose(0, 2, 1))  # (L, 3, C)
            KA = (H_ll_inv @ A).reshape(3 * L, C)
            A2 = A.reshape(3 * L, C)
            H_star = H_dd_l
            H_star[np.ix_(vis_cols, vis_cols)] -= A2.T @ KA
            Kb = (H_ll_inv @ b_l_work[:, :, None]).reshape(3 * L)
            b_star = b_d.copy()
            b_star[vis_cols] -= A2.T @ Kb
        else:
            H_star, b_star = H_dd_l, b_d
        if D:
            try:
                delta_d = np.linalg.solve(H_star, b_star)
            except np.linalg.LinAlgError:
                delta_d = np.linalg.lstsq(H_star, b_star, rcond=None)[0]
        else:
            delta_d = np.zeros(0)
        if L:
            rhs = b_l_work - A @ delta_d[vis_cols]
            delta_l = (H_ll_inv @ rhs[:, :, None])[:, :, 0]
        else:
            delta_l = np.zeros((0, 3))
        return delta_d, delta_l

    def _apply(self, ctx, delta_d, delta_l, land_arr):
        poses = dict(self.poses)
        for sid in ctx.pose_ids:
            o = ctx.pose_off[sid]
            poses[sid] = pose_box_plus(self.poses[sid], delta_d[o:o + 6])
        speed_bias = dict(self.speed_bias)
        for sid in ctx.sb_ids:
            o = ctx.sb_off[sid]
            speed_bias[sid] = self.speed_bias[sid] + delta_d[o:o + 9]
        new_land = land_arr.copy()
        if ctx.n_land:
            new_land[ctx.free_rows] += delta_l
        return poses, speed_bias, new_land

    # -- public stepping --------------------------------------------------

    def solve_step(self, damping: float = 0.0,
                   options: SolverOptions | None = None):
        """One damped Gauss-Newton step without acceptance logic.

        Returns ``(delta_dense, delta_landmarks, ctx)`` where the dense
        vector covers free poses then free speed/bias blocks in sorted-id
        order.
        """
        opts = options or SolverOptions()
        ctx = _Context(self)
        lin = self._linearize(ctx, opts, self._land_array(ctx))
        delta_d, delta_l = self._solve(lin, damping, ctx.vis_cols)
        return delta_d, delta_l, ctx

    def dense_system(self, damping: float = 0.0,
                     options: SolverOptions | None = None):
        """Damped normal equations with landmarks kept in, as one dense
        matrix.  Diagnostic/reference path; ``optimize`` never forms it.

        Returns ``(H, b, ctx)`` with landmark columns appended after the
        dense blocks in ``ctx.land_ids`` order.
        """
        opts = options or SolverOptions()
        ctx = _Context(self)
        H_dd, b_d, H_ll, H_dl, b_l = self._linearize(
            ctx, opts, self._land_array(ctx))
        D, L = ctx.dim, ctx.n_land
        n = D + 3 * L
        H = np.zeros((n, n))
        b = np.zeros(n)
        H[:D, :D] = H_dd + damping * np.diag(np.diag(H_dd))
        b[:D] = b_d
        for k in range(L):
            j = D + 3 * k
            H[j:j + 3, j:j + 3] = H_ll[k] + damping * (H_ll[k] * np.eye(3))
            H[ctx.vis_cols, j:j + 3] = H_dl[k]
            H[j:j + 3, ctx.vis_cols] = H_dl[k].T
            b[j:j + 3] = b_l[k]
        return H, b, ctx

    def optimize(self, options: SolverOptions | None = None) -> OptimizeResult:
        opts = options or SolverOptions()
        ctx = _Context(self)
        res = OptimizeResult()
        land_arr = self._land_array(ctx)
        cost = self._cost(ctx, self.poses, self.speed_bias, land_arr, opts)
        res.initial_cost = res.final_cost = cost
        res.cost_history.append(cost)
        damping = opts.initial_damping

        for _ in range(opts.max_iterations):
            res.iterations += 1
            lin = self._linearize(ctx, opts, land_arr)
            stepped = False
            while damping <= opts.max_damping:
                delta_d, delta_l = self._solve(lin, damping, ctx.vis_cols)
                cand = self._apply(ctx, delta_d, delta_l, land_arr)
                cand_cost = self._cost(ctx, *cand, opts)
                if cand_cost <= cost:
                    decrease = cost - cand_cost
                    self.poses, self.speed_bias, land_arr = cand
                    cost = cand_cost
                    res.accepted += 1
                    res.cost_history.append(cost)
                    damping *= opts.damping_decrease
                    step_norm = max(
                        np.abs(delta_d).max() if delta_d.size else 0.0,
                        np.abs(delta_l).max() if delta_l.size else 0.0)
                    if step_norm < opts.step_tolerance or \
                            decrease <= opts.function_tolerance * (cost + 1e-12):
                        res.converged = True
                    stepped = True
                    break
                res.rejected += 1
                damping *= opts.damping_increase
            if not stepped or res.converged:
                break

        for k, lid in enumerate(ctx.all_land_ids):
            self.landmarks[lid] = land_arr[k].copy()
        res.final_cost = cost
        res.final_damping = damping
        return res
