"""Run configuration: TOML file + dotted-key overrides, schema checked,
with a resolved snapshot emitted next to artifacts for reproducibility.

Sections mirror the runtime objects they configure: [material], [sim],
[observation], [episode], [grid], [calibration].  Unknown sections or
keys are rejected rather than silently ignored.
"""

from __future__ import annotations

import dataclasses
import json

try:
    import tomllib  # Python >= 3.11
except ModuleNotFoundError:  # pragma: no cover - version shim
    import tomli as tomllib

from . import envmdp, fluid, geom, noise


class ConfigError(Exception):
    pass


_SCHEMA = {
    "material": {"preset": str, "h": float, "xsph_c": float, "r_p": float,
                 "settle_time": float, "bed_grip": float},
    "sim": {"dt": float, "solver_iters": int, "eps_cfm": float,
            "particle_cap": int, "active_radius": float,
            "sleep_speed": float, "max_speed": float},
    "observation": {"view_mm": float, "pixels": int, "mask_px": int,
                    "show_bed": bool, "show_target": bool, "show_path": bool,
                    "outline_threshold": float},
    "episode": {"mode": str, "reward_mode": str, "flow": str,
                "flow_model": str, "sine_amplitude": float,
                "sine_period": float, "action_mode": str,
                "step_distance": float, "settle_time_end": float,
                "nominal_pressure": float, "deposition_width": float,
                "occupancy_eps": float, "immediate_full_bed": bool},
    "grid": {"nx": int, "ny": int, "size_mm": float},
    "calibration": {"pressures": list, "velocities": list,
                    "target_width": float},
}


def _coerce(section: str, key: str, value):
    if section not in _SCHEMA:
        raise ConfigError(f"unknown section [{section}]")
    if key not in _SCHEMA[section]:
        raise ConfigError(f"unknown key {section}.{key}")
    want = _SCHEMA[section][key]
    if want is float and isinstance(value, (int, float)) \
            and not isinstance(value, bool):
        return float(value)
    if want is int and isinstance(value, int) and not isinstance(value, bool):
        return value
    if not isinstance(value, want):
        raise ConfigError(
            f"{section}.{key}: expected {want.__name__}, "
            f"got {type(value).__name__}")
    return value


class Config:
    """Validated, layered configuration."""

    def __init__(self, data: dict = None):
        self.data = {}
        for section, entries in (data or {}).items():
            if not isinstance(entries, dict):
                raise ConfigError(f"[{section}] must be a table")
            for key, value in entries.items():
                self.set(f"{section}.{key}", value)

    @classmethod
    def load(cls, path, overrides: list = None) -> "Config":
        with open(path, "rb") as f:
            cfg = cls(tomllib.load(f))
        for item in overrides or []:
            cfg.set_string(item)
        return cfg

    def set(self, dotted: str, value):
        section, _, key = dotted.partition(".")
        if not key:
            raise ConfigError(f"override {dotted!r} needs section.key form")
        self.data.setdefault(section, {})[key] = _coerce(section, key, value)

    def set_string(self, item: str):
        """CLI-style override: section.key=value, TOML-typed."""
        dotted, _, raw = item.partition("=")
        if not raw:
            raise ConfigError(f"override {item!r} needs key=value form")
        try:
            value = tomllib.loads(f"v = {raw}")["v"]
        except tomllib.TOMLDecodeError:
            value = raw  # bare string
        self.set(dotted.strip(), value)

    def get(self, dotted: str, default=None):
        section, _, key = dotted.partition(".")
        return self.data.get(section, {}).get(key, default)

    # -- object factories ----------------------------------------------------

    def material(self) -> fluid.MaterialParams:
        sec = dict(self.data.get("material", {}))
        preset = sec.pop("preset", None)
        mat = fluid.material_preset(preset) if preset \
            else fluid.MaterialParams()
        return dataclasses.replace(mat, **sec) if sec else mat

    def sim(self) -> fluid.SimConfig:
        return fluid.SimConfig(**self.data.get("sim", {}))

    def observation(self) -> envmdp.ObservationSpec:
        return envmdp.ObservationSpec(**self.data.get("observation", {}))

    def episode(self) -> envmdp.EpisodeConfig:
        sec = dict(self.data.get("episode", {}))
        model_path = sec.pop("flow_model", None)
        if model_path:
            sec["flow_model"] = noise.load_model(model_path)
        sec["material"] = self.material()
        return envmdp.EpisodeConfig(**sec)

    def grid(self) -> geom.BedGrid:
        return geom.BedGrid(**self.data.get("grid", {}))

    def calibration(self) -> dict:
        return dict(self.data.get("calibration", {}))

    # -- snapshot ------------------------------------------------------------

    def resolved(self) -> dict:
        """Full effective configuration, defaults filled in."""
        out = {}
        defaults = {
            "material": dataclasses.asdict(self.material()),
            "sim": dataclasses.asdict(self.sim()),
            "observation": dataclasses.asdict(self.observation()),
            "grid": dataclasses.asdict(self.grid()),
            "calibration": self.calibration(),
        }
        ep = self.data.get("episode", {})
        ep_obj = envmdp.EpisodeConfig(
            **{k: v for k, v in ep.items() if k != "flow_model"})
        ep_dict = {f.name: getattr(ep_obj, f.name)
                   for f in dataclasses.fields(ep_obj)
                   if f.name not in ("material", "flow_model")}
        if "flow_model" in ep:
            ep_dict["flow_model"] = ep["flow_model"]
        defaults["episode"] = ep_dict
        for section, entries in defaults.items():
            out[section] = entries
        return out

    def save_snapshot(self, path):
        with open(path, "w") as f:
            json.dump(self.resolved(), f, indent=2, sort_keys=True,
                      default=lambda o: None)
