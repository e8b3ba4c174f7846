"""Command-line interface.

Exit codes: 0 success, 2 usage error, 3 runtime error (last stdout line
is machine-readable JSON describing the failure).
"""

from __future__ import annotations

import json
import sys

import click

from . import dataset as dataset_mod
from . import envmdp, evaluation, fluid, geom, noise
from . import policy as policy_mod
from . import server as server_mod
from .config import Config


def _fail(message: str):
    click.echo(json.dumps({"error": message}))
    sys.exit(3)


def _load_config(path, overrides) -> Config:
    if path:
        return Config.load(path, list(overrides))
    cfg = Config()
    for item in overrides:
        cfg.set_string(item)
    return cfg


config_options = [
    click.option("--config", "config_path", type=click.Path(exists=True),
                 default=None, help="TOML configuration file."),
    click.option("--set", "overrides", multiple=True,
                 help="Override a config key: section.key=value."),
]


def add_options(options):
    def wrap(fn):
        for opt in reversed(options):
            fn = opt(fn)
        return fn
    return wrap


@click.group()
def main():
    """Simulation workbench for closed-loop direct ink writing."""


@main.command("slice")
@click.argument("mesh", type=click.Path(exists=True))
@click.option("--z", type=float, required=True, help="Slice plane height.")
@click.option("-o", "--output", type=click.Path(), required=True)
def cmd_slice(mesh, z, output):
    """Slice an STL mesh at height Z into a polygon JSON file."""
    try:
        slices = geom.slice_mesh(geom.load_stl(mesh), z)
        geom.save_polygon_json(slices, output)
    except geom.GeomError as e:
        _fail(f"{type(e).__name__}: {e}")
    click.echo(json.dumps({"outer": len(slices.outer),
                           "holes": len(slices.holes), "z": z}))


@main.command("plan")
@click.argument("slice_file", type=click.Path(exists=True))
@click.option("--width", type=float, default=0.4, show_default=True)
@click.option("--no-infill", is_flag=True, default=False)
@click.option("-o", "--output", type=click.Path(), required=True)
@click.option("--preview", type=click.Path(), default=None,
              help="Optional plan preview PNG.")
def cmd_plan(slice_file, width, no_infill, output, preview):
    """Plan outline + infill toolpaths for a slice."""
    try:
        slices = geom.load_polygon_json(slice_file)
        paths = geom.plan_paths(slices, geom.PlanConfig(width=width),
                                infill=not no_infill)
    except geom.GeomError as e:
        _fail(f"{type(e).__name__}: {e}")
    with open(output, "w") as f:
        json.dump(geom.toolpaths_to_json(paths), f)
    if preview:
        _plan_preview(slices, paths, preview)
    click.echo(json.dumps({"paths": len(paths),
                           "length_mm": sum(p.length for p in paths)}))


def _plan_preview(slices, paths, out_path):
    from PIL import Image, ImageDraw
    grid = geom.BedGrid()
    scale = 40  # px per mm on the preview
    size = int(grid.size_mm * scale)
    img = Image.new("RGB", (size, size), "white")
    draw = ImageDraw.Draw(img)

    def to_px(pt):
        return ((pt[0] - grid.origin[0]) * scale,
                size - (pt[1] - grid.origin[1]) * scale)

    for poly in slices.outer + slices.holes:
        draw.polygon([to_px(p) for p in poly.points], outline="black")
    for path in paths:
        color = "red" if path.role == "outline" else "blue"
        pts = [to_px(p) for p in path.waypoints]
        draw.line(pts, fill=color, width=1)
    img.save(out_path)


@main.command("fit-noise")
@click.argument("csv_file", type=click.Path(exists=True))
@click.option("--order", type=int, default=8, show_default=True)
@click.option("--target-std", type=float, default=0.175, show_default=True,
              help="Calibrate synthesis std to this value (mm); 0 disables.")
@click.option("-o", "--output", type=click.Path(), required=True)
def cmd_fit_noise(csv_file, order, target_std, output):
    """Fit an autoregressive flow-noise model to a width CSV."""
    try:
        series = noise.load_width_csv(csv_file)
        model = noise.burg_fit(series, order)
        if target_std > 0:
            model = noise.calibrate_gain(model, target_std)
        noise.save_model(model, output)
    except noise.NoiseError as e:
        _fail(f"{type(e).__name__}: {e}")
    click.echo(json.dumps({"order": model.order, "gain": model.gain,
                           "mean": model.mean}))


@main.command("run")
@click.argument("slice_spec")
@click.option("--policy", "policy_spec", default="baseline",
              show_default=True,
              help="baseline | random | oracle | constant:<v,off> | cnn:<path>")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out-dir", type=click.Path(), required=True)
@click.option("--slice-dir", type=click.Path(), default=None)
@add_options(config_options)
def cmd_run(slice_spec, policy_spec, seed, out_dir, slice_dir,
            config_path, overrides):
    """Print one slice with a policy; write trace, metrics, heightfield."""
    import os
    os.makedirs(out_dir, exist_ok=True)
    try:
        cfg = _load_config(config_path, overrides)
        slices = server_mod.resolve_slice(slice_spec, slice_dir)
        episode = cfg.episode()
        env = envmdp.PrintEnv(slices, episode, obs_spec=cfg.observation(),
                              grid=cfg.grid(), seed=seed)
        baseline = _baseline_from_config(cfg, episode)
        pol = policy_mod.make_policy(policy_spec, env=env, baseline=baseline,
                                     seed=seed)
        trace = []
        obs = env.reset(seed=seed)
        evaluation.finish_episode(env, pol, obs, trace=trace)
        metrics = evaluation.evaluate_env(env)
    except (envmdp.EnvError, geom.GeomError, policy_mod.PolicyError,
            FileNotFoundError) as e:
        _fail(f"{type(e).__name__}: {e}")
    cfg.save_snapshot(os.path.join(out_dir, "config_resolved.json"))
    with open(os.path.join(out_dir, "trace.jsonl"), "w") as f:
        for rec in trace:
            f.write(json.dumps(rec) + "\n")
    heights = env.heights()
    fluid.export_heightfield_pgm(heights, os.path.join(out_dir, "height.pgm"))
    fluid.export_heightfield_raw(heights, os.path.join(out_dir, "height.f32"),
                                 env.grid.pitch)
    with open(os.path.join(out_dir, "metrics.json"), "w") as f:
        json.dump(metrics, f, indent=2)
    click.echo(json.dumps(metrics))


def _baseline_from_config(cfg: Config, episode) -> policy_mod.BaselineParams:
    """Baseline operating point implied by the configuration: the
    episode's nominal pressure at the speed that calibration chose for
    the default material (velocity 1.0 unless overridden)."""
    cal = cfg.calibration()
    velocity = float(cal.get("velocities", [1.0])[0]) \
        if "velocities" in cal else 1.0
    return policy_mod.BaselineParams(pressure=episode.nominal_pressure,
                                     velocity=velocity)


@main.command("bench")
@click.argument("dataset_dir", type=click.Path(exists=True))
@click.option("--policies", default="baseline,oracle", show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("-o", "--output", type=click.Path(), required=True)
@add_options(config_options)
def cmd_bench(dataset_dir, policies, seed, output, config_path, overrides):
    """Benchmark policies across a slice dataset; write a CSV report."""
    import glob
    import os
    try:
        cfg = _load_config(config_path, overrides)
        episode = cfg.episode()
        files = sorted(glob.glob(os.path.join(dataset_dir, "*.json")))
        if not files:
            _fail("EmptyDataset: no *.json slices found")
        baseline = _baseline_from_config(cfg, episode)
        results = evaluation.bench(files, policies.split(","), episode,
                                   baseline=baseline, master_seed=seed,
                                   grid=cfg.grid())
    except (envmdp.EnvError, geom.GeomError, policy_mod.PolicyError) as e:
        _fail(f"{type(e).__name__}: {e}")
    with open(output, "w") as f:
        f.write(evaluation.results_to_csv(results))
    failures = [r for r in results if r.error]
    click.echo(json.dumps({"rows": len(results), "failures": len(failures)}))


@main.command("gen-dataset")
@click.option("-n", "--count", type=int, default=25, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--width", type=float, default=0.4, show_default=True)
@click.option("-o", "--out-dir", type=click.Path(), required=True)
def cmd_gen_dataset(count, seed, width, out_dir):
    """Generate procedural printable slices as polygon JSON files."""
    try:
        paths = dataset_mod.generate_dataset(count, seed, out_dir, width=width)
    except geom.GeomError as e:
        _fail(f"{type(e).__name__}: {e}")
    click.echo(json.dumps({"written": len(paths), "dir": out_dir}))


@main.command("serve")
@click.option("--transport", default="stdio", show_default=True,
              help="stdio or tcp:<port>")
@click.option("--slice-dir", type=click.Path(), default=None)
def cmd_serve(transport, slice_dir):
    """Run the environment server (JSON-lines wire protocol)."""
    if transport == "stdio":
        server_mod.serve_stdio(slice_dir=slice_dir)
    elif transport.startswith("tcp:"):
        port = int(transport.split(":", 1)[1])
        srv = server_mod.serve_tcp(port, slice_dir=slice_dir)
        click.echo(json.dumps({"listening": port}), err=True)
        try:
            srv.serve_forever()
        except KeyboardInterrupt:  # pragma: no cover
            srv.shutdown()
    else:
        raise click.UsageError(f"unknown transport {transport!r}")


if __name__ == "__main__":  # pragma: no cover
    main()
