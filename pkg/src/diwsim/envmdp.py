"""Markov decision process around the deposition simulator.

An episode prints one planar slice.  Each step the controller picks a
head velocity and a lateral path offset; the head then travels a fixed
path distance (distance-based discretization, so slow actions never
shrink to zero-length transitions) while the emitter follows the
configured flow schedule.  Observations are egocentric three-channel
images; rewards score deposition against the rasterized target region.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import fluid, geom, noise


class EnvError(Exception):
    pass


class UnprintableSlice(EnvError):
    pass


class EpisodeFinished(EnvError):
    pass


class GridMismatch(EnvError):
    pass


# ---------------------------------------------------------------------------
# configuration


@dataclass
class ObservationSpec:
    view_mm: float = 3.5
    pixels: int = 84
    mask_px: int = 12               # side of the occluded square under the head
    show_bed: bool = True
    show_target: bool = True
    show_path: bool = True
    outline_threshold: float = None  # mm; default 0.5 * nozzle tip height

    def threshold(self, tip_height: float) -> float:
        return self.outline_threshold if self.outline_threshold is not None \
            else 0.5 * tip_height


@dataclass
class Action:
    velocity_norm: float = 0.0
    offset_norm: float = 0.0

    def __post_init__(self):
        self.velocity_norm = float(np.clip(self.velocity_norm, -1.0, 1.0))
        self.offset_norm = float(np.clip(self.offset_norm, -1.0, 1.0))


V_MIN, V_MAX = 0.2, 2.0             # mm/s
OFFSET_MAX = 0.315                  # mm, lateral displacement bound
OCCUPANCY_EPS = 0.02                # mm of material that counts as covered


@dataclass
class EpisodeConfig:
    mode: str = "outline"           # outline | infill
    reward_mode: str = "privileged"  # privileged | delayed | immediate
    flow: str = "constant"          # constant | lpc | sine
    flow_model: noise.ARModel = None
    sine_amplitude: float = 0.5     # fraction of nominal pressure
    sine_period: float = 5.0        # seconds
    material: fluid.MaterialParams = field(default_factory=fluid.MaterialParams)
    action_mode: str = "full"       # full | velocity_only | offset_only
    step_distance: float = 0.315    # mm per environment step
    settle_time_end: float = None   # s; default from material settle_time
    nominal_pressure: float = 36.0
    deposition_width: float = 0.4   # planner width w, mm
    occupancy_eps: float = OCCUPANCY_EPS
    immediate_full_bed: bool = False  # immediate reward over whole bed

    def __post_init__(self):
        if self.mode not in ("outline", "infill"):
            raise EnvError(f"unknown mode {self.mode!r}")
        if self.reward_mode not in ("privileged", "delayed", "immediate"):
            raise EnvError(f"unknown reward_mode {self.reward_mode!r}")
        if self.flow not in ("constant", "lpc", "sine"):
            raise EnvError(f"unknown flow mode {self.flow!r}")
        if self.action_mode not in ("full", "velocity_only", "offset_only"):
            raise EnvError(f"unknown action_mode {self.action_mode!r}")
        if self.step_distance <= 0:
            raise EnvError("step_distance must be positive")

    def settle_duration(self) -> float:
        if self.settle_time_end is not None:
            return self.settle_time_end
        return self.material.settle_time


@dataclass
class StepResult:
    obs: np.ndarray
    reward: float
    done: bool
    info: dict


def action_velocity(velocity_norm: float) -> float:
    """Map a normalized action component to head speed in mm/s."""
    return V_MIN + (velocity_norm + 1.0) / 2.0 * (V_MAX - V_MIN)


def velocity_to_norm(v: float) -> float:
    """Inverse of :func:`action_velocity`, clamped to [-1, 1]."""
    return float(np.clip((v - V_MIN) / (V_MAX - V_MIN) * 2.0 - 1.0, -1.0, 1.0))


# ---------------------------------------------------------------------------
# rewards


def reward_bed(occupancy: np.ndarray, target: np.ndarray, mode: str,
               heights: np.ndarray = None, height_scale: float = 1.0) -> float:
    """Bed-level reward: coverage inside the target minus spill outside;
    infill mode additionally penalizes height variation over the target."""
    if occupancy.shape != target.shape:
        raise GridMismatch(f"{occupancy.shape} vs {target.shape}")
    c = occupancy.astype(np.float64)
    t = target.astype(np.float64)
    r = float((c * t).sum() - (c * (1.0 - t)).sum())
    if mode == "infill":
        if heights is None or heights.shape != target.shape:
            raise GridMismatch("infill reward needs a matching heightfield")
        inside = heights[t > 0.5]
        if inside.size:
            r -= float(inside.std()) / height_scale
    return r


def settle(state: fluid.SimState, duration: float):
    """Let deposited material relax: pressure off, head lifted clear of
    the bed so the nozzle no longer collides or gates the active set."""
    if duration <= 0:
        return state
    saved_p, saved_tip = state.pressure, state.nozzle.tip_height
    state.pressure = 0.0
    state.nozzle.tip_height = 1e6
    steps = int(round(duration / state.config.dt))
    for _ in range(steps):
        fluid.step_sim(state, nozzle_active=False)
    state.pressure, state.nozzle.tip_height = saved_p, saved_tip
    return state


# ---------------------------------------------------------------------------
# flow schedule


class _FlowSource:
    """Per-episode emitter pressure schedule, evaluated per substep.

    The noise model is fitted to width samples taken at a fixed path
    interval, so one synthesized sample is held for the time that
    interval takes at the nominal head speed (zero-order hold).  Without
    the hold the noise would fluctuate two orders of magnitude faster
    than the fitted correlations."""

    V_REF = 1.0  # mm/s, nominal speed used to map path interval to time

    def __init__(self, config: EpisodeConfig, duration_bound: float,
                 seed: int):
        self.nominal = config.nominal_pressure
        self.mode = config.flow
        self.t = 0.0  # episode print time, s
        if self.mode == "lpc":
            if config.flow_model is None:
                raise EnvError("flow mode 'lpc' needs flow_model")
            self.t_sample = 0.1 / self.V_REF
            n = int(duration_bound / self.t_sample) + 2
            rng = np.random.default_rng(seed)
            self.series = noise.pressure_schedule(
                config.flow_model, self.nominal, n, rng)
        elif self.mode == "sine":
            self.amp = config.sine_amplitude
            self.period = config.sine_period

    def _at(self, t: np.ndarray) -> np.ndarray:
        if self.mode == "constant":
            return np.full(np.shape(t), self.nominal)
        if self.mode == "sine":
            p = self.nominal * (1.0 + self.amp *
                                np.sin(2 * np.pi * np.asarray(t) / self.period))
            return np.clip(p, 0.0, 2.0 * self.nominal)
        idx = np.minimum((np.asarray(t) / self.t_sample).astype(np.int64),
                         len(self.series) - 1)
        return self.series[idx]

    def take(self, n: int, dt: float) -> np.ndarray:
        t = self.t + np.arange(n) * dt
        self.t += n * dt
        return self._at(t)

    def peek_mean(self, horizon: float) -> float:
        """Mean upcoming pressure over the next ``horizon`` seconds;
        the scripted oracle's crystal ball."""
        t = self.t + np.linspace(0.0, max(horizon, 1e-6), 16)
        return float(self._at(t).mean())


# ---------------------------------------------------------------------------
# environment


class PrintEnv:
    """One printable slice, one exclusively-owned simulator state."""

    def __init__(self, slices: geom.SliceSet, config: EpisodeConfig = None,
                 obs_spec: ObservationSpec = None, grid: geom.BedGrid = None,
                 seed: int = 0):
        self.slices = slices
        self.config = config or EpisodeConfig()
        self.obs_spec = obs_spec or ObservationSpec()
        self.grid = grid or geom.BedGrid()
        self.seed = seed
        self.state = None
        self._done = True

    # -- episode lifecycle ---------------------------------------------------

    def reset(self, seed: int = None) -> np.ndarray:
        if seed is not None:
            self.seed = seed
        cfg = self.config
        try:
            paths = geom.plan_paths(
                self.slices,
                geom.PlanConfig(width=cfg.deposition_width, ds=cfg.step_distance),
                infill=(cfg.mode == "infill"))
        except geom.GeomError as e:
            raise UnprintableSlice(str(e)) from e
        if not paths or all(len(p.waypoints) < 2 for p in paths):
            raise UnprintableSlice("plan has no printable segments")

        self._wp, self._nrm, self._path_id, self._segments = _flatten_plan(paths)
        self.target = geom.rasterize_target(self.slices, self.grid)
        # metric target: the band the plan intends to cover.  In outline
        # mode the filled region stays the *reward* target (spilling toward
        # the interior is tolerated) but print quality is judged against
        # the planned bead band.
        if cfg.mode == "outline":
            self.eval_target = geom.rasterize_paths(
                paths, cfg.deposition_width, self.grid)
        else:
            self.eval_target = self.target

        self.state = fluid.SimState(material=cfg.material, seed=self.seed,
                                    bed=self.grid.bounds)
        # worst case: maximum lateral offset change at minimum speed
        seg_max = math.hypot(cfg.step_distance, 2 * OFFSET_MAX)
        duration_bound = len(self._segments) * seg_max / V_MIN + 1.0
        self._flow = _FlowSource(cfg, duration_bound, self.seed)

        self._step_idx = 0
        self._done = False
        self._head = self._wp[0].copy()
        self._cur_path = self._path_id[0]
        self._travel = _segment_dir(self._wp, self._segments, 0)
        self.state.nozzle.center = self._head.copy()
        self.state.nozzle.travel_dir = self._travel.copy()
        self._heights = fluid.heightmap(self.state, self.grid)
        self._r_prev = self._bed_reward()
        self._r_local_prev = self._bed_reward(window=True)
        self.r0 = self._r_prev
        return self.render_observation()

    @property
    def done(self) -> bool:
        return self._done

    @property
    def n_steps(self) -> int:
        return len(self._segments)

    def step(self, action: Action) -> StepResult:
        if self._done:
            raise EpisodeFinished("episode is over; call reset()")
        cfg = self.config
        if not isinstance(action, Action):
            action = Action(*action)
        if cfg.action_mode == "velocity_only":
            action = replace(action, offset_norm=0.0)
        elif cfg.action_mode == "offset_only":
            action = replace(action, velocity_norm=velocity_to_norm(1.0))

        a, b = self._segments[self._step_idx]
        if self._path_id[a] != self._cur_path:
            # travel move between planned paths: reposition without printing
            self._head = self._wp[a].copy()
            self._cur_path = self._path_id[a]
        self._travel = _segment_dir(self._wp, self._segments, self._step_idx)

        v = action_velocity(action.velocity_norm)
        offset = action.offset_norm * OFFSET_MAX
        target_pt = self._wp[b] + offset * self._nrm[b]
        self._print_segment(target_pt, v)

        self._step_idx += 1
        self._done = self._step_idx >= len(self._segments)
        if self._done and cfg.settle_duration() > 0:
            settle(self.state, cfg.settle_duration())

        self._heights = fluid.heightmap(self.state, self.grid)
        r_now = self._bed_reward()
        if cfg.reward_mode == "privileged":
            reward = r_now - self._r_prev
        elif cfg.reward_mode == "immediate":
            if cfg.immediate_full_bed:
                reward = r_now - self._r_prev
            else:
                local_now = self._bed_reward(window=True)
                reward = local_now - self._r_local_prev
                self._r_local_prev = local_now
        else:  # delayed
            reward = r_now if self._done else 0.0
        self._r_prev = r_now

        obs = self.render_observation()
        info = {"bed_reward": r_now,
                "progress": self._step_idx / len(self._segments),
                "head": [float(self._head[0]), float(self._head[1])],
                "velocity": v, "offset": offset}
        return StepResult(obs=obs, reward=float(reward), done=self._done,
                          info=info)

    # -- internals -----------------------------------------------------------

    def _print_segment(self, target_pt: np.ndarray, v: float):
        state = self.state
        dt = state.config.dt
        delta = target_pt - self._head
        dist = float(np.linalg.norm(delta))
        n_sub = max(1, int(round(dist / v / dt)))
        if dist > 1e-12:
            self._travel = delta / dist
        start = self._head.copy()
        pressures = self._flow.take(n_sub, dt)
        state.nozzle.travel_dir = self._travel.copy()
        for j in range(n_sub):
            state.nozzle.center = start + delta * ((j + 1) / n_sub)
            state.pressure = float(pressures[j])
            fluid.step_sim(state)
        state.pressure = 0.0
        self._head = target_pt.copy()

    def occupancy(self) -> np.ndarray:
        return (self._heights > self.config.occupancy_eps).astype(np.float32)

    def heights(self) -> np.ndarray:
        return self._heights

    def _bed_reward(self, window: bool = False) -> float:
        occ = self.occupancy()
        tgt = self.target
        hts = self._heights
        if window:
            mask = self._window_mask()
            occ, tgt, hts = occ * mask, tgt * mask, hts * mask
        return reward_bed(occ, tgt, self.config.mode, hts,
                          height_scale=self.state.nozzle.tip_height)

    def _window_mask(self) -> np.ndarray:
        half = self.obs_spec.view_mm / 2.0
        xs, ys = self.grid.centers()
        mx = np.abs(xs - self._head[0]) <= half
        my = np.abs(ys - self._head[1]) <= half
        return (my[:, None] & mx[None, :]).astype(np.float32)

    # -- observation ---------------------------------------------------------

    def render_observation(self) -> np.ndarray:
        """84x84x3 egocentric view (bed, target, path channels), rotated so
        the travel direction maps to image +X; values in [0, 1]."""
        spec = self.obs_spec
        n = spec.pixels
        obs = np.zeros((n, n, 3), dtype=np.float32)
        t = self._travel
        nrm = np.array([-t[1], t[0]])
        half = spec.view_mm / 2.0
        px = spec.view_mm / n
        u = (np.arange(n) + 0.5) * px - half           # along travel (+X)
        v = half - (np.arange(n) + 0.5) * px           # left of travel (rows up)
        xy = (self._head[None, None, :]
              + u[None, :, None] * t[None, None, :]
              + v[:, None, None] * nrm[None, None, :])

        if spec.show_bed:
            h = _bilinear(self._heights, self.grid, xy)
            tip = self.state.nozzle.tip_height
            if self.config.mode == "infill":
                obs[:, :, 0] = np.clip(h / tip, 0.0, 1.0)
            else:
                obs[:, :, 0] = (h > spec.threshold(tip)).astype(np.float32)
        if spec.show_target:
            obs[:, :, 1] = np.clip(_bilinear(self.target, self.grid, xy), 0.0, 1.0)
        if spec.show_path:
            obs[:, :, 2] = self._render_path_channel(t, nrm, n, px)

        m = spec.mask_px
        lo = (n - m) // 2
        obs[lo:lo + m, lo:lo + m, 0] = 0.0
        return obs

    def _render_path_channel(self, t, nrm, n, px) -> np.ndarray:
        """Upcoming baseline waypoints as a 1-px polyline in view coords."""
        chan = np.zeros((n, n), dtype=np.float32)
        half = self.config.step_distance  # segment culling margin
        view = self.obs_spec.view_mm / 2.0
        start = self._step_idx
        for k in range(start, len(self._segments)):
            a, b = self._segments[k]
            pa = self._wp[a] if k > start else self._head
            pb = self._wp[b]
            ua, va = np.dot(pa - self._head, t), np.dot(pa - self._head, nrm)
            ub, vb = np.dot(pb - self._head, t), np.dot(pb - self._head, nrm)
            if max(abs(ua), abs(ub), abs(va), abs(vb)) > view + half:
                continue
            length = math.hypot(ub - ua, vb - va)
            m = max(2, int(length / (0.5 * px)) + 1)
            us = np.linspace(ua, ub, m)
            vs = np.linspace(va, vb, m)
            ix = np.floor((us + view) / px).astype(np.int64)
            iy = np.floor((view - vs) / px).astype(np.int64)
            ok = (ix >= 0) & (ix < n) & (iy >= 0) & (iy < n)
            chan[iy[ok], ix[ok]] = 1.0
        return chan

    def export_observation_png(self, obs: np.ndarray, prefix: str):
        """Debug dump: one grayscale PNG per channel."""
        from PIL import Image
        for c, name in enumerate(("bed", "target", "path")):
            img = (np.clip(obs[:, :, c], 0, 1) * 255).astype(np.uint8)
            Image.fromarray(img).save(f"{prefix}_{name}.png")


# ---------------------------------------------------------------------------
# helpers


def _flatten_plan(paths):
    """Concatenate planned toolpaths into flat waypoint/normal arrays plus
    (start, end) index pairs for every printable segment."""
    wps, nrms, pids, segments = [], [], [], []
    base = 0
    for pid, path in enumerate(paths):
        m = len(path.waypoints)
        if m < 2:
            continue
        wps.append(path.waypoints)
        nrms.append(path.normals)
        pids.extend([pid] * m)
        segments.extend((base + i, base + i + 1) for i in range(m - 1))
        base += m
    if not segments:
        raise UnprintableSlice("plan has no printable segments")
    return (np.concatenate(wps), np.concatenate(nrms),
            np.asarray(pids), segments)


def _segment_dir(wp, segments, k) -> np.ndarray:
    a, b = segments[k]
    d = wp[b] - wp[a]
    norm = np.linalg.norm(d)
    return d / norm if norm > 1e-12 else np.array([1.0, 0.0])


def _bilinear(img: np.ndarray, grid: geom.BedGrid, xy: np.ndarray) -> np.ndarray:
    """Bilinear sample of a (ny, nx) bed image at world (x, y) points;
    out-of-bed samples read 0."""
    pitch = grid.pitch
    gx = (xy[..., 0] - grid.origin[0]) / pitch - 0.5
    gy = (xy[..., 1] - grid.origin[1]) / pitch - 0.5
    x0 = np.floor(gx).astype(np.int64)
    y0 = np.floor(gy).astype(np.int64)
    fx = gx - x0
    fy = gy - y0
    ny, nx = img.shape

    def at(yy, xx):
        ok = (xx >= 0) & (xx < nx) & (yy >= 0) & (yy < ny)
        out = np.zeros(xx.shape, dtype=np.float64)
        out[ok] = img[yy[ok], xx[ok]]
        return out

    return ((1 - fx) * (1 - fy) * at(y0, x0) + fx * (1 - fy) * at(y0, x0 + 1)
            + (1 - fx) * fy * at(y0 + 1, x0) + fx * fy * at(y0 + 1, x0 + 1))
