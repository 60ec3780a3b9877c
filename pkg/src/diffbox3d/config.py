"""Versioned key = value run configuration.

One INI-style file drives every CLI command. Sections mirror the library
dataclasses ([scene] -> SceneConfig, [detector] -> DetectorConfig,
[ssl] -> SslConfig) plus [run] for seeds/counts and [ablation] for grid axes.
Unknown sections or keys are rejected by name before any work starts.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field

from .detector import DetectorConfig
from .synthdata import SceneConfig
from .training import SslConfig

CONFIG_VERSION = 1

# grid axis -> SslConfig field(s) it sets
ABLATION_AXES = {
    "size_diffusion": ("size_diffusion",),
    "label_diffusion": ("label_diffusion",),
    "ddim_on": ("ddim_enabled",),
    "renewal_on": ("renewal_enabled",),
    "ddim_steps": ("ddim_steps",),
    "scale_factor": ("size_scale", "label_scale"),
    "sampling_strategy": ("sampling_strategy",),
}


class ConfigError(ValueError):
    """Invalid run configuration; the message names the offending key."""


@dataclass
class RunConfig:
    scene: SceneConfig
    detector: DetectorConfig
    ssl: SslConfig
    seed: int = 0
    n_scenes: int = 200
    labeled_ratio: float = 0.1
    grid: dict = field(default_factory=dict)  # axis -> list of values


def _convert(section: str, key: str, raw: str, default):
    """Parse a raw string according to the default value's type."""
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low in ("true", "on", "yes", "1"):
                return True
            if low in ("false", "off", "no", "0"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if isinstance(default, int):
            return int(raw)
        if default is None or isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(float(v) for v in raw.split(",") if v.strip())
        if isinstance(default, str):
            return raw.strip()
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: {exc}") from exc
    raise ConfigError(f"[{section}] {key}: unsupported value type")


def _fill_dataclass(cls, section: str, items: dict, skip=()):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, raw in items.items():
        if key not in fields or key in skip:
            raise ConfigError(f"[{section}] unknown key: {key}")
        f = fields[key]
        default = f.default if f.default is not dataclasses.MISSING else None
        kwargs[key] = _convert(section, key, raw, default)
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {exc}") from exc


def _parse_axis_values(axis: str, raw: str) -> list:
    vals = [v.strip() for v in raw.split(",") if v.strip()]
    if not vals:
        raise ConfigError(f"[ablation] {axis}: empty value list")
    if axis == "sampling_strategy":
        return vals
    if axis == "ddim_steps":
        return [int(v) for v in vals]
    if axis == "scale_factor":
        return [float(v) for v in vals]
    # boolean toggles
    return [_convert("ablation", axis, v, True) for v in vals]


def load_run_config(path, overrides: list[str] | None = None) -> RunConfig:
    """Parse and validate a run configuration file.

    `overrides` are "section.key=value" strings applied on top of the file.
    """
    parser = configparser.ConfigParser()
    parser.optionxform = str  # keys are case-sensitive (e.g. T)
    read = parser.read(path)
    if not read:
        raise ConfigError(f"config file not found: {path}")
    for ov in overrides or []:
        if "=" not in ov or "." not in ov.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value: {ov!r}")
        target, value = ov.split("=", 1)
        section, key = target.split(".", 1)
        section, key = section.strip(), key.strip()
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, key, value.strip())

    known_sections = {"run", "scene", "detector", "ssl", "ablation"}
    for section in parser.sections():
        if section not in known_sections:
            raise ConfigError(f"unknown section: [{section}]")

    run_items = dict(parser.items("run")) if parser.has_section("run") else {}
    version_raw = run_items.pop("config_version", None)
    if version_raw is None:
        raise ConfigError("[run] missing required key: config_version")
    if int(version_raw) != CONFIG_VERSION:
        raise ConfigError(
            f"[run] config_version: unsupported version {version_raw} (expected {CONFIG_VERSION})"
        )
    run_known = {"seed": 0, "n_scenes": 200, "labeled_ratio": 0.1}
    run_vals = dict(run_known)
    for key, raw in run_items.items():
        if key not in run_known:
            raise ConfigError(f"[run] unknown key: {key}")
        run_vals[key] = _convert("run", key, raw, run_known[key])

    scene = _fill_dataclass(
        SceneConfig,
        "scene",
        dict(parser.items("scene")) if parser.has_section("scene") else {},
        skip=("class_size_means",),
    )
    detector = _fill_dataclass(
        DetectorConfig,
        "detector",
        dict(parser.items("detector")) if parser.has_section("detector") else {},
    )
    ssl = _fill_dataclass(
        SslConfig, "ssl", dict(parser.items("ssl")) if parser.has_section("ssl") else {}
    )
    if detector.n_classes != scene.n_classes:
        raise ConfigError(
            f"[detector] n_classes: {detector.n_classes} does not match [scene] "
            f"n_classes = {scene.n_classes}"
        )
    if ssl.n_b > detector.n_b:
        raise ConfigError(
            f"[ssl] n_b: {ssl.n_b} exceeds [detector] n_b = {detector.n_b}"
        )
    if not 0.0 < run_vals["labeled_ratio"] < 1.0:
        raise ConfigError(
            f"[run] labeled_ratio: must be in (0, 1), got {run_vals['labeled_ratio']}"
        )

    grid = {}
    if parser.has_section("ablation"):
        for axis, raw in parser.items("ablation"):
            if axis not in ABLATION_AXES:
                raise ConfigError(f"[ablation] unknown axis: {axis}")
            grid[axis] = _parse_axis_values(axis, raw)

    return RunConfig(
        scene=scene,
        detector=detector,
        ssl=ssl,
        seed=int(run_vals["seed"]),
        n_scenes=int(run_vals["n_scenes"]),
        labeled_ratio=float(run_vals["labeled_ratio"]),
        grid=grid,
    )


def apply_axis(ssl: SslConfig, axis: str, value) -> SslConfig:
    """A copy of the SSL config with one ablation axis set."""
    if axis not in ABLATION_AXES:
        raise ConfigError(f"unknown ablation axis: {axis}")
    return dataclasses.replace(ssl, **{f: value for f in ABLATION_AXES[axis]})
