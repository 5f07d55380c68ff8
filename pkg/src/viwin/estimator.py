"""Realtime sliding-window estimator.

Frames stream in one at a time.  Each frame gets a state predicted from
the IMU, observations are associated against the live map, the frame is
classified as keyframe or not by visual overlap, the window sets are
maintained (recent frames, keyframes, posegraph frames), old states are
fixed, and a bounded optimization runs.  The full history of retained
states and factors stays available for background loop-closure work,
but the per-frame problem only ever contains factors touching at least
one variable state, so the realtime cost does not grow with trajectory
length.

Window vocabulary used throughout:

* recent    - the newest T frames, keyframe or not
* keyframe  - flagged frames that have left the recent set (the paper's
              "keyframes in the past"); bounded by ``max_keyframes``
* posegraph - demoted keyframes; observations consumed into relative
              two-pose factors, state kept and linked by IMU factors
* dropped   - non-keyframes that left the recent set; state removed and
              the two adjacent preintegrations merged
* loop      - an overlay flag: frames re-activated by loop closure
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .camera import triangulate
from .config import SystemConfig
from .geometry import Pose
from .imu import (ImuSample, NavState, attitude_from_gravity, merge,
                  predict, preintegrate, slice_for_interval)
from .marginal import make_two_pose_factor
from .solver import FactorGraph, SolverOptions

MASK_DOWNSCALE = 4
GAUGE_PRIOR_WEIGHT = 1e10
ALIAS_BASE = 10_000_000       # internal ids minted for stale re-observations

RECENT = "recent"
KEYFRAME = "keyframe"
POSEGRAPH = "posegraph"


@dataclass
class FrameEntry:
    """One ingested multi-camera frame and its bookkeeping."""

    frame_id: int
    t: float
    obs: list                    # per camera: (ids (M,), pixels (M, 2))
    is_keyframe: bool = False
    membership: str = RECENT
    consumed: bool = False       # observations folded into two-pose edges
    loop: bool = False           # member of the loop-closure set
    id_set: set = field(default_factory=set)
    by_id: dict = field(default_factory=dict)   # lid -> [(cam, uv), ...]
    matched_ids: set = field(default_factory=set)
    ext_set: set = field(default_factory=set)   # external (appearance) ids
    overlap: float = 1.0         # keyframe-decision score of this frame

    def __post_init__(self):
        self.reindex()

    def reindex(self) -> None:
        clean = []
        self.id_set = set()
        self.by_id = {}
        for cam, (ids, px) in enumerate(self.obs):
            ids = np.asarray(ids, dtype=int)
            px = np.asarray(px, dtype=float).reshape(-1, 2)
            clean.append((ids, px))
            for k, lid in enumerate(ids):
                self.id_set.add(int(lid))
                self.by_id.setdefault(int(lid), []).append((cam, px[k]))
        self.obs = clean


def covisibility(a: FrameEntry, b: FrameEntry) -> int:
    """Number of co-observed landmark ids (symmetric, >= 0)."""
    return len(a.id_set & b.id_set)


_DISK_CACHE: dict = {}


def _disk_offsets(radius: float) -> np.ndarray:
    key = round(radius, 3)
    if key not in _DISK_CACHE:
        r = int(np.ceil(radius))
        dy, dx = np.mgrid[-r:r + 1, -r:r + 1]
        keep = dy ** 2 + dx ** 2 <= radius ** 2
        _DISK_CACHE[key] = np.stack([dy[keep], dx[keep]], axis=-1)
    return _DISK_CACHE[key]


class Estimator:
    def __init__(self, config: SystemConfig | None = None):
        self.config = config if config is not None else SystemConfig.default()
        self.rig = self.config.rig
        self.win = self.config.window
        self.imu_params = self.config.imu

        self.frames: dict[int, FrameEntry] = {}
        self.order: list[int] = []              # retained states, in time
        self.states: dict[int, NavState] = {}
        self.landmark_db: dict[int, np.ndarray] = {}
        self.active_landmarks: set[int] = set()
        self.last_seen: dict[int, int] = {}     # ext id -> newest observing frame
        self.external_of: dict[int, int] = {}   # internal id -> external id
        self._alias_of: dict[int, int] = {}     # external id -> current internal
        self._next_alias = ALIAS_BASE
        self.imu_chain: list = []               # (sid_i, sid_j, pre)
        self.two_pose_factors: list = []
        self.recent: list[int] = []
        self.current_keyframe: int | None = None
        self.n_dropped = 0

        self._imu_buffer: list[ImuSample] = []
        self._variable: set = set()
        self._next_frame_id = 0
        self.causal: list = []                  # (t, Pose) after each frame
        self.frame_stats: list = []
        self.events: list = []

    # -- input streams ----------------------------------------------------

    def add_imu(self, sample: ImuSample) -> None:
        if self._imu_buffer and sample.t <= self._imu_buffer[-1].t:
            raise ValueError("IMU timestamps must be strictly increasing")
        self._imu_buffer.append(sample)

    def ingest_frame(self, t: float, observations: list) -> int:
        """Process one multi-camera frame.

        ``observations`` is a per-camera list of ``(ids, pixels)``;
        returns the assigned frame id.
        """
        tic = time.perf_counter()
        if self.order and t <= self.frames[self.order[-1]].t:
            raise ValueError("frame timestamps must be strictly increasing")
        fid = self._next_frame_id
        self._next_frame_id += 1
        resolved, matched = self._resolve_ids(fid, observations)
        entry = FrameEntry(fid, t, resolved)
        entry.matched_ids = matched
        entry.ext_set = {self.external_of[i] for i in entry.id_set}

        if not self.order:
            self.states[fid] = self._initial_state(t)
        else:
            prev = self.order[-1]
            samples = slice_for_interval(self._imu_buffer,
                                         self.frames[prev].t, t)
            gaps = np.diff([s.t for s in samples])
            if gaps.size and float(np.max(gaps)) > self.imu_params.max_gap_s:
                raise ValueError(
                    f"IMU gap of {np.max(gaps):.3f}s exceeds the "
                    f"{self.imu_params.max_gap_s:.3f}s limit")
            prev_state = self.states[prev]
            pre = preintegrate(samples, self.imu_params,
                               prev_state.bg, prev_state.ba)
            self.states[fid] = predict(prev_state, pre)
            self.imu_chain.append((prev, fid, pre))

        self.frames[fid] = entry
        self.order.append(fid)
        self.recent.append(fid)

        self._update_landmarks(entry)
        entry.is_keyframe = self.keyframe_decision(entry)
        self._maintain_window()
        self._update_fixation()
        n_factors = self._optimize()

        for lid in entry.id_set:
            self.last_seen[self.external_of[lid]] = fid
        self.causal.append((t, self.states[fid].T_WS.copy()))
        self._trim_imu_buffer(t)
        self.frame_stats.append({
            "frame_id": fid, "t": t,
            "is_keyframe": bool(entry.is_keyframe),
            "n_states": len(self.order),
            "n_active_landmarks": len(self.active_landmarks),
            "n_factors": n_factors,
            "duration_s": time.perf_counter() - tic,
        })
        return fid

    def _initial_state(self, t: float) -> NavState:
        """Level the first state from the accelerometer mean; position
        and yaw define the gauge and stay at zero."""
        pre = [s for s in self._imu_buffer if s.t <= t][:20]
        if not pre:
            raise ValueError("no IMU samples available before the first "
                             "frame; cannot level")
        accel_mean = np.mean([s.accel for s in pre], axis=0)
        q0 = attitude_from_gravity(accel_mean)
        return NavState(Pose(np.zeros(3), q0), np.zeros(3),
                        np.zeros(3), np.zeros(3))

    def _trim_imu_buffer(self, t_now: float) -> None:
        cut = t_now - 1.0
        i = 0
        while i + 1 < len(self._imu_buffer) and self._imu_buffer[i + 1].t < cut:
            i += 1
        del self._imu_buffer[:i]

    # -- association and landmarks ----------------------------------------

    def _visual_frames(self) -> list:
        """Frames whose observations are live in the visual graph."""
        out = []
        for f in self.order:
            e = self.frames[f]
            if e.consumed:
                continue
            if e.membership in (RECENT, KEYFRAME) or e.loop:
                out.append(f)
        return out

    def _resolve_ids(self, fid: int, observations: list) -> tuple:
        """Map external (appearance) ids onto internal track ids.

        A re-observation binds to its existing internal id while that
        track is live in the visual graph or was seen only a few frames
        ago (re-acquiring a barely-lost landmark is ordinary tracking).
        Anything staler gets a fresh internal id, exactly like a
        frontend meeting a place it cannot remember leaving: the map
        then holds the same physical point twice, and it is loop
        closure's job to notice and merge the duplicates.

        Returns ``(per-camera (internal ids, pixels), matched ids)``.
        """
        active = set()
        for f in self._visual_frames():
            active |= self.frames[f].id_set
        sep = self.config.loop.min_frame_separation
        seen_here: dict[int, int] = {}
        out = []
        matched_all: set = set()
        for ids, px in observations:
            ids = np.asarray(ids, dtype=int)
            internal = np.empty_like(ids)
            for k, ext in enumerate(ids):
                ext = int(ext)
                if ext in seen_here:
                    internal[k] = seen_here[ext]
                    continue
                cur = self._alias_of.get(ext)
                if cur is None:
                    cur = ext        # first acquisition keeps the id
                    self._alias_of[ext] = cur
                    self.external_of[cur] = ext
                elif cur in active:
                    matched_all.add(cur)
                elif ext in self.last_seen and \
                        fid - self.last_seen[ext] < sep:
                    matched_all.add(cur)
                    if cur in self.landmark_db:
                        self.active_landmarks.add(cur)
                else:
                    cur = self._next_alias
                    self._next_alias += 1
                    self._alias_of[ext] = cur
                    self.external_of[cur] = ext
                seen_here[ext] = cur
                internal[k] = cur
            out.append((internal, px))
        return out, matched_all

    def merge_landmark(self, alias: int, target: int) -> int:
        """Fold duplicate track ``alias`` into ``target`` everywhere;
        returns the number of observations rewritten."""
        if alias == target:
            return 0
        moved = 0
        for f in self.order:
            e = self.frames[f]
            if alias not in e.id_set:
                continue
            new_obs = []
            for ids, px in e.obs:
                hit = ids == alias
                moved += int(np.count_nonzero(hit))
                new_obs.append((np.where(hit, target, ids), px))
            e.obs = new_obs
            was_matched = alias in e.matched_ids
            e.reindex()
            e.matched_ids.discard(alias)
            if was_matched or target in e.id_set:
                e.matched_ids.add(target)
        self.landmark_db.pop(alias, None)
        self.active_landmarks.discard(alias)
        if target in self.landmark_db:
            self.active_landmarks.add(target)
        ext = self.external_of.get(alias)
        if ext is not None and self._alias_of.get(ext) == alias:
            self._alias_of[ext] = target
        return moved

    def _update_landmarks(self, entry: FrameEntry) -> None:
        """Triangulate ids that are observed but not yet in the map."""
        candidates = sorted(entry.id_set - self.active_landmarks)
        visual = self._visual_frames()
        gate = 4.0 * self.win.sigma_px + 1.0
        for lid in candidates:
            if lid in self.landmark_db and lid in entry.matched_ids:
                self.active_landmarks.add(lid)
                continue
            views = []
            for f in visual:
                e = self.frames[f]
                for cam, uv in e.by_id.get(lid, ()):
                    views.append((f, cam, uv))
            if len(views) < 2:
                continue
            point = self._triangulate_gated(views, gate)
            if point is not None:
                self.landmark_db[lid] = point
                self.active_landmarks.add(lid)

    def _triangulate_gated(self, views: list, gate: float):
        """DLT with one round of worst-view rejection against ``gate``."""
        def attempt(vs):
            geo = [(cam, self.states[f].T_WS, uv) for f, cam, uv in vs]
            point = triangulate(self.rig, geo)
            if point is None:
                return None, None
            residuals = []
            for cam, T_WS, uv in geo:
                p_s = T_WS.q.rotation_matrix().T @ (point - T_WS.r)
                T_SC = self.rig.extrinsics[cam]
                p_c = T_SC.q.rotation_matrix().T @ (p_s - T_SC.r)
                proj = self.rig.cameras[cam].project(p_c)
                if proj is None:
                    return None, None
                residuals.append(float(np.linalg.norm(proj[0] - uv)))
            return point, np.asarray(residuals)

        point, res = attempt(views)
        if point is None:
            return None
        if np.max(res) <= gate:
            return point
        if len(views) > 2:
            keep = [v for i, v in enumerate(views) if i != int(np.argmax(res))]
            point, res = attempt(keep)
            if point is not None and np.max(res) <= gate:
                return point
        return None

    # -- overlap and keyframe decision ------------------------------------

    def _masks(self, entry: FrameEntry, ids: set | None = None) -> int:
        """Total covered cell count of quarter-resolution disk masks.

        ``ids`` restricts the stamped keypoints to the given landmark
        ids; ``None`` stamps all of them.
        """
        radius = self.win.keypoint_radius_px / MASK_DOWNSCALE
        offsets = _disk_offsets(radius)
        area = 0
        for cam, (lids, px) in enumerate(entry.obs):
            model = self.rig.cameras[cam]
            h = -(-model.height // MASK_DOWNSCALE)
            w = -(-model.width // MASK_DOWNSCALE)
            if ids is not None:
                sel = np.fromiter((int(l) in ids for l in lids), bool,
                                  count=len(lids))
                pts = px[sel]
            else:
                pts = px
            if pts.shape[0] == 0:
                continue
            mask = np.zeros((h, w), dtype=bool)
            cells = np.rint(pts / MASK_DOWNSCALE).astype(int)
            stamped = cells[:, None, ::-1] + offsets[None, :, :]
            ys = np.clip(stamped[:, :, 0], 0, h - 1).ravel()
            xs = np.clip(stamped[:, :, 1], 0, w - 1).ravel()
            mask[ys, xs] = True
            area += int(mask.sum())
        return area

    def overlap_fraction(self, entry_a: FrameEntry, entry_b: FrameEntry,
                         ids: set | None = None) -> float:
        """Fraction of a's keypoint area whose landmark ids b also sees.

        The area is the union of filled circles around the keypoints,
        rasterized at quarter resolution.  ``ids`` optionally restricts
        the numerator further (used for match-only overlap).
        """
        total = self._masks(entry_a)
        if total == 0:
            return 0.0
        shared = entry_a.id_set & entry_b.id_set
        if ids is not None:
            shared &= ids
        if not shared:
            return 0.0
        return self._masks(entry_a, shared) / total

    def keyframe_decision(self, entry: FrameEntry) -> bool:
        """o = min(matched fraction, best keyframe overlap) < threshold.

        Also refreshes ``current_keyframe`` (the keyframe most visually
        similar to the live frame).
        """
        kfs = [f for f in self.order
               if self.frames[f].is_keyframe and f != entry.frame_id]
        if not kfs:
            self.current_keyframe = None
            entry.overlap = 0.0
            return True
        total = self._masks(entry)
        if total == 0:
            entry.overlap = 0.0
            return True
        o_l = self._masks(entry, entry.matched_ids) / total \
            if entry.matched_ids else 0.0
        best, best_o = None, -1.0
        for f in kfs:
            shared = entry.id_set & self.frames[f].id_set
            o_k = self._masks(entry, shared) / total if shared else 0.0
            if o_k > best_o:
                best, best_o = f, o_k
        self.current_keyframe = best
        entry.overlap = min(o_l, best_o)
        return entry.overlap < self.win.overlap_threshold

    # -- window maintenance ------------------------------------------------

    def past_keyframes(self) -> list:
        return [f for f in self.order
                if self.frames[f].membership == KEYFRAME]

    def _maintain_window(self) -> None:
        while len(self.recent) > self.win.num_recent_frames:
            old = self.recent.pop(0)
            if self.frames[old].is_keyframe:
                self.frames[old].membership = KEYFRAME
            else:
                self._drop_frame(old)
        while len(self.past_keyframes()) > self.win.max_keyframes:
            self._demote_keyframe(self._select_demotion())

    def _drop_frame(self, fid: int) -> None:
        """Remove a non-keyframe: state goes away, the two adjacent
        preintegrations merge so the IMU chain stays unbroken."""
        idx = self.order.index(fid)
        # chain entry k links order[k] -> order[k+1]
        a, mid_a, pre_a = self.imu_chain[idx - 1]
        mid_b, b, pre_b = self.imu_chain[idx]
        assert mid_a == fid and mid_b == fid
        self.imu_chain[idx - 1:idx + 1] = [(a, b, merge(pre_a, pre_b))]
        del self.order[idx]
        del self.states[fid]
        del self.frames[fid]
        self.n_dropped += 1
        self._prune_active_landmarks()

    def _select_demotion(self) -> int:
        """Keyframe least covisible with the live frame and the current
        keyframe; the oldest keyframe survives while it still shares
        observations with either of them."""
        live = self.frames[self.order[-1]]
        cur = self.frames[self.current_keyframe] \
            if self.current_keyframe in self.frames else live
        cands = self.past_keyframes()
        scored = sorted(
            (max(covisibility(self.frames[f], live),
                 covisibility(self.frames[f], cur)), f)
            for f in cands)
        oldest = min(cands)
        choice = scored[0][1]
        if choice == oldest and len(scored) > 1 and scored[0][0] > 0:
            choice = scored[1][1]
        return choice

    def _demote_keyframe(self, fid: int) -> None:
        entry = self.frames[fid]
        entry.membership = POSEGRAPH
        self._create_posegraph_edges(fid)
        entry.consumed = True
        self._prune_active_landmarks()

    def _create_posegraph_edges(self, r: int) -> list:
        """Build the two-pose factors that replace frame r's observations.

        A maximum spanning tree over {keyframes already holding edges}
        + {r} + {keyframe most overlapping r}, weighted by co-observation
        count, decides connectivity; only edges incident to r become
        factors.
        """
        entry_r = self.frames[r]
        kset = [f for f in self.order
                if self.frames[f].is_keyframe and f != r
                and not self.frames[f].consumed]
        edge_owners = {f.frame_r for f in self.two_pose_factors} | \
                      {f.frame_c for f in self.two_pose_factors}
        nodes = {f for f in kset if f in edge_owners}
        best, best_o = None, -1.0
        for f in kset:
            o = self.overlap_fraction(entry_r, self.frames[f])
            if o > best_o or (o == best_o and (best is None or f < best)):
                best, best_o = f, o
        if best is not None and best_o > 0.0:
            nodes.add(best)
        nodes.add(r)
        made = []
        for _, i, j in self._mst_edges(sorted(nodes)):
            if r not in (i, j):
                continue
            other = j if i == r else i
            made.extend(self._materialize_edge(r, other))
        self.two_pose_factors.extend(made)
        return made

    def _mst_edges(self, nodes: list) -> list:
        """Kruskal maximum spanning forest; ties break on the smaller
        (min id, max id) pair so results are reproducible."""
        edges = []
        for ai, i in enumerate(nodes):
            for j in nodes[ai + 1:]:
                w = covisibility(self.frames[i], self.frames[j])
                if w > 0:
                    edges.append((-w, min(i, j), max(i, j)))
        edges.sort()
        parent = {n: n for n in nodes}

        def find(x):
            while parent[x] != x:
                parent[x] = parent[parent[x]]
                x = parent[x]
            return x

        out = []
        for w, i, j in edges:
            ri, rj = find(i), find(j)
            if ri != rj:
                parent[ri] = rj
                out.append((-w, i, j))
        return out

    def _materialize_edge(self, r: int, c: int) -> list:
        entry_r, entry_c = self.frames[r], self.frames[c]
        joint = entry_r.id_set & entry_c.id_set & set(self.landmark_db)
        if not joint:
            return []
        landmarks_W = {lid: self.landmark_db[lid] for lid in sorted(joint)}

        def obs_of(entry):
            out = []
            for cam, (ids, px) in enumerate(entry.obs):
                for k, lid in enumerate(ids):
                    if int(lid) in joint:
                        out.append((cam, int(lid), px[k]))
            return out

        factor = make_two_pose_factor(
            self.rig, r, c, self.states[r].T_WS, self.states[c].T_WS,
            landmarks_W, obs_of(entry_r), obs_of(entry_c),
            sigma_px=self.win.sigma_px,
            min_joint_observations=self.win.min_joint_observations,
            residual_gate_sigma=self.win.edge_residual_gate_sigma)
        return [factor] if factor is not None else []

    def _prune_active_landmarks(self) -> None:
        supported = set()
        for f in self._visual_frames():
            supported |= self.frames[f].id_set
        self.active_landmarks &= supported

    # -- fixation and optimization ----------------------------------------

    def variable_window(self) -> list:
        """State ids currently kept variable (the A most recent)."""
        t_now = self.frames[self.order[-1]].t
        horizon = t_now - self.win.variable_time_horizon_s
        a_dt = sum(1 for f in self.order if self.frames[f].t > horizon)
        a = max(self.win.min_variable_states, a_dt)
        var = [f for f in self.order[-a:] if not self.frames[f].loop]
        return var

    def _update_fixation(self) -> None:
        self._variable = set(self.variable_window())

    def build_problem(self) -> tuple:
        """Assemble the bounded realtime problem.

        Returns ``(graph, variable_states, landmark_ids)``.  Factors
        with no variable endpoint are left out; the states they would
        reference remain in the archive untouched, which is what keeps
        per-frame cost flat on long runs.
        """
        var = self._variable
        g = FactorGraph(self.rig, sigma_px=self.win.sigma_px)
        used_states: set = set()
        used_lids: set = set()

        for f in self._visual_frames():
            entry = self.frames[f]
            for cam, (ids, px) in enumerate(entry.obs):
                for k, lid in enumerate(ids):
                    lid = int(lid)
                    if lid in self.active_landmarks:
                        g.add_reprojection(f, cam, lid, px[k])
                        used_states.add(f)
                        used_lids.add(lid)
        for i, j, pre in self.imu_chain:
            if i in var or j in var:
                g.add_imu(i, j, pre)
                used_states.update((i, j))
        for fac in self.two_pose_factors:
            if fac.frame_r in var or fac.frame_c in var:
                g.add_two_pose(fac)
                used_states.update((fac.frame_r, fac.frame_c))

        imu_touched = set()
        for i, j, _ in g.imu_factors:
            imu_touched.update((i, j))
        for f in sorted(used_states):
            g.set_state(f, self.states[f])
            if f not in var:
                g.fix_pose(f)
                g.fix_speed_bias(f)
            elif f not in imu_touched:
                # nothing informs speed/bias except IMU factors
                g.fix_speed_bias(f)
        anchor = self.order[0] if self.order else None
        if anchor in used_states and anchor in var:
            # Gauge: pin the anchor's position and yaw but let gravity
            # correct its roll/pitch (the accelerometer leveling at
            # startup is biased by any non-gravitational acceleration).
            w = GAUGE_PRIOR_WEIGHT
            g.add_pose_prior(anchor, self.states[anchor].T_WS,
                             np.array([w, w, w, 0.0, 0.0, w]))
        first = self.order[0] if self.order else None
        if (first in used_states and first in var
                and first not in g.fixed_speed_bias):
            wg = 1.0 / self.win.gyro_bias_prior_std ** 2
            wa = 1.0 / self.win.accel_bias_prior_std ** 2
            g.add_speed_bias_prior(
                first, np.zeros(9),
                np.array([0.0, 0.0, 0.0, wg, wg, wg, wa, wa, wa]))
        for lid in sorted(used_lids):
            g.set_landmark(lid, self.landmark_db[lid])
        return g, sorted(var & used_states), sorted(used_lids)

    def _optimize(self) -> int:
        g, var_states, lids = self.build_problem()
        n_factors = (len(g.reprojections) + len(g.imu_factors)
                     + len(g.two_pose_factors))
        if not var_states or n_factors == 0:
            return n_factors
        opts = SolverOptions(
            max_iterations=self.win.max_iterations,
            initial_damping=self.win.initial_damping,
            cauchy_scale=self.win.cauchy_scale,
            function_tolerance=self.win.function_tolerance)
        g.optimize(opts)
        for f in var_states:
            self.states[f] = g.nav_state(f)
        for lid in lids:
            self.landmark_db[lid] = g.landmarks[lid]
        return n_factors

    # -- outputs -----------------------------------------------------------

    def causal_trajectory(self) -> list:
        """(t, Pose) recorded right after each frame's optimization."""
        return [(t, p.copy()) for t, p in self.causal]

    def final_trajectory(self) -> list:
        """(t, Pose) of every retained state at the current estimates."""
        return [(self.frames[f].t, self.states[f].T_WS.copy())
                for f in self.order]
