"""Quantitative print-quality evaluation.

Metrics: average offset (mis-deposited area normalized by target outline
length), boundary-normal deposition histograms, infill height
uniformity, and a batch benchmark comparing policies slice-by-slice
under a shared flow-noise realization.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from . import envmdp, geom, policy as policy_mod


class EvalError(Exception):
    pass


class EmptyTarget(EvalError):
    pass


class EmptyCanvas(EvalError):
    pass


# ---------------------------------------------------------------------------
# pixel metrics


def target_boundary(target: np.ndarray) -> np.ndarray:
    """Boolean mask of boundary pixels: target pixels with at least one
    4-neighbor outside the target (bed edge counts as outside)."""
    t = target > 0.5
    if not t.any():
        raise EmptyTarget("target image is empty")
    padded = np.pad(t, 1, constant_values=False)
    core = (padded[:-2, 1:-1] & padded[2:, 1:-1]
            & padded[1:-1, :-2] & padded[1:-1, 2:])
    return t & ~core


def average_offset(occupancy: np.ndarray, target: np.ndarray,
                   pitch_mm: float = None) -> float:
    """O = [sum (1-C)*T + sum C*(1-T)] / l with l the boundary pixel
    count of T.  Returned in pixels, or in mm when a pitch is given."""
    if occupancy.shape != target.shape:
        raise EvalError(f"grid mismatch {occupancy.shape} vs {target.shape}")
    c = occupancy > 0.5
    t = target > 0.5
    l = int(target_boundary(target).sum())
    o_px = (float((~c & t).sum()) + float((c & ~t).sum())) / l
    return o_px * pitch_mm if pitch_mm is not None else o_px


@dataclass
class Histogram:
    edges: np.ndarray            # bin edges, mm
    counts: np.ndarray
    samples: np.ndarray          # signed distances, mm (positive = over)

    @property
    def over(self) -> np.ndarray:
        return self.samples[self.samples > 0]

    @property
    def under(self) -> np.ndarray:
        return self.samples[self.samples <= 0]

    def to_json(self) -> dict:
        return {"edges_mm": self.edges.tolist(),
                "counts": self.counts.tolist()}


def deposition_profile(occupancy: np.ndarray, target: np.ndarray,
                       pitch_mm: float, max_range_mm: float = 1.0,
                       n_bins: int = 40):
    """Signed distance from the target boundary to the printed edge along
    the outward normal, per boundary pixel.  Positive = material past the
    boundary (over-deposition).  Marching is censored at +-max_range.
    Returns (Histogram, std_mm, skewness)."""
    c = occupancy > 0.5
    if not c.any():
        raise EmptyCanvas("no deposited material")
    t = target > 0.5
    boundary = np.argwhere(target_boundary(target))

    # outward normal from the local target gradient (coarse Sobel-like)
    tf = t.astype(np.float64)
    gy, gx = np.gradient(tf)
    max_steps = int(round(max_range_mm / pitch_mm))
    ny, nx = t.shape
    samples = np.empty(len(boundary))
    for k, (iy, ix) in enumerate(boundary):
        n = np.array([-gy[iy, ix], -gx[iy, ix]])  # points out of the target
        nn = np.hypot(n[0], n[1])
        n = np.array([0.0, 1.0]) if nn < 1e-12 else n / nn
        if c[iy, ix]:
            # covered at the boundary: march outward to the printed edge
            d = max_steps
            for s in range(1, max_steps + 1):
                jy, jx = int(round(iy + n[0] * s)), int(round(ix + n[1] * s))
                if not (0 <= jy < ny and 0 <= jx < nx) or not c[jy, jx]:
                    d = s - 1
                    break
            samples[k] = d
        else:
            # uncovered: march inward to find where material starts
            d = -max_steps
            for s in range(1, max_steps + 1):
                jy, jx = int(round(iy - n[0] * s)), int(round(ix - n[1] * s))
                if not (0 <= jy < ny and 0 <= jx < nx):
                    break
                if c[jy, jx]:
                    d = -s
                    break
            samples[k] = d
    samples = samples * pitch_mm
    edges = np.linspace(-max_range_mm, max_range_mm, n_bins + 1)
    counts, _ = np.histogram(np.clip(samples, edges[0], edges[-1]), bins=edges)
    std = float(samples.std())
    if std < 1e-15:
        skew = 0.0
    else:
        skew = float(((samples - samples.mean()) ** 3).mean() / std ** 3)
    return Histogram(edges=edges, counts=counts, samples=samples), std, skew


def infill_uniformity(heights: np.ndarray, target: np.ndarray) -> float:
    """Standard deviation of the heightfield over target cells, mm."""
    t = target > 0.5
    if not t.any():
        raise EmptyTarget("target image is empty")
    return float(heights[t].std())


# ---------------------------------------------------------------------------
# benchmark


@dataclass
class SliceResult:
    slice_id: str
    policy: str
    flow_mode: str
    o_um: float
    improvement_um: float
    hist_std_um: float
    hist_skew: float
    infill_std_um: float
    seed: int
    error: str = ""


CSV_HEADER = ("slice_id,policy,flow_mode,O_um,improvement_um,"
              "hist_std_um,hist_skew,infill_std_um,seed")


def run_episode(slices: geom.SliceSet, policy, config: envmdp.EpisodeConfig,
                seed: int, obs_spec: envmdp.ObservationSpec = None,
                grid: geom.BedGrid = None, trace: list = None):
    """Run one full episode; returns the finished environment."""
    env = envmdp.PrintEnv(slices, config, obs_spec=obs_spec, grid=grid,
                          seed=seed)
    obs = env.reset(seed=seed)
    return finish_episode(env, policy, obs, trace=trace)


def finish_episode(env: envmdp.PrintEnv, policy, obs, trace: list = None):
    t = 0
    while not env.done:
        action = policy(obs)
        res = env.step(action)
        if trace is not None:
            trace.append({"t": t,
                          "action": [action.velocity_norm, action.offset_norm],
                          "reward": res.reward,
                          "head": res.info["head"],
                          "P": env.config.nominal_pressure})
        obs = res.obs
        t += 1
    return env


def evaluate_env(env: envmdp.PrintEnv) -> dict:
    """Metrics for a finished episode."""
    occ = env.occupancy()
    pitch = env.grid.pitch
    target = env.eval_target
    o_mm = average_offset(occ, target, pitch_mm=pitch)
    try:
        _, std_mm, skew = deposition_profile(occ, target, pitch)
    except EmptyCanvas:
        std_mm, skew = float("nan"), float("nan")
    infill_mm = infill_uniformity(env.heights(), env.target)
    return {"o_um": o_mm * 1000.0, "hist_std_um": std_mm * 1000.0,
            "hist_skew": skew, "infill_std_um": infill_mm * 1000.0}


def bench(slice_files: list, policy_specs: list,
          config: envmdp.EpisodeConfig = None,
          baseline: policy_mod.BaselineParams = None,
          master_seed: int = 0, grid: geom.BedGrid = None) -> list:
    """Run every policy on every slice.  Per slice, all policies share the
    same seed so they face one identical flow-noise realization.  Per-slice
    failures are recorded, not fatal.  Returns SliceResult rows; the first
    policy in ``policy_specs`` is the improvement reference."""
    config = config or envmdp.EpisodeConfig()
    results = []
    for si, item in enumerate(slice_files):
        slice_id, slices = _load_slice(item)
        seed = master_seed * 100003 + si
        ref_o = None
        for spec in policy_specs:
            try:
                env = envmdp.PrintEnv(slices, config, grid=grid, seed=seed)
                pol = policy_mod.make_policy(spec, env=env, baseline=baseline,
                                             seed=seed)
                obs = env.reset(seed=seed)
                finish_episode(env, pol, obs)
                metrics = evaluate_env(env)
                if ref_o is None:
                    ref_o = metrics["o_um"]
                results.append(SliceResult(
                    slice_id=slice_id, policy=spec, flow_mode=config.flow,
                    o_um=metrics["o_um"],
                    improvement_um=ref_o - metrics["o_um"],
                    hist_std_um=metrics["hist_std_um"],
                    hist_skew=metrics["hist_skew"],
                    infill_std_um=metrics["infill_std_um"], seed=seed))
            except Exception as e:  # record, keep benching
                results.append(SliceResult(
                    slice_id=slice_id, policy=spec, flow_mode=config.flow,
                    o_um=float("nan"), improvement_um=float("nan"),
                    hist_std_um=float("nan"), hist_skew=float("nan"),
                    infill_std_um=float("nan"), seed=seed,
                    error=f"{type(e).__name__}: {e}"))
    return results


def _load_slice(item):
    if isinstance(item, geom.SliceSet):
        return f"slice{id(item) % 10000}", item
    if isinstance(item, tuple):
        return item
    return str(item), geom.load_polygon_json(item)


def results_to_csv(results: list) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER.split(","))
    for r in results:
        writer.writerow([r.slice_id, r.policy, r.flow_mode,
                         f"{r.o_um:.3f}", f"{r.improvement_um:.3f}",
                         f"{r.hist_std_um:.3f}", f"{r.hist_skew:.4f}",
                         f"{r.infill_std_um:.3f}", r.seed])
    return buf.getvalue()


def save_histograms(results: list, envs_histograms: dict, path):
    with open(path, "w") as f:
        json.dump({k: h.to_json() for k, h in envs_histograms.items()}, f)
