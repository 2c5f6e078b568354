"""Pipeline configuration: defaults, JSON round-trip, and validation.

Every default equals the documented pipeline value, so an empty config
file (or none at all) runs the reference setup.  Environment variables
are honored only for the worker count (OMNIBLEND_THREADS) and the cache
directory (OMNIBLEND_CACHE_DIR).
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .compositor import BlendConfig
from .flow import FlowParams
from .semantics import DEFAULT_SIGMA, DEFAULT_VISIBILITY_TABLE, Category, VisibilityParams

BLEND_MODES = ("visibility", "alpha", "fixed_transparency")


class ConfigError(ValueError):
    """Malformed configuration; maps to exit code 1."""


class DataError(RuntimeError):
    """Missing or malformed input data; maps to exit code 2."""


@dataclass(frozen=True)
class DepthConfig:
    eps_tri_deg: float = 0.2          # parallax-gap floor, degrees
    d_max: float = 1000.0             # depth clamp, meters
    temporal_window: int = 5          # frames averaged by the fusion stage
    sigmoid_scale: float = 1.0        # k in the foreground probability, 1/meters
    baseline_min: float = 0.01        # minimum usable camera baseline, meters
    p_unknown: float = 0.5            # probability where real depth is unknown
    divergence_kernel: int = 9        # box smoothing size for the FOE response
    region_half_extent: tuple = (0.35, 0.35)  # FOE search half extents (rad)
    texture_threshold: float = 1e-3   # min image gradient for FOE-search flow
    reference_camera: str = "current"

    def validate(self):
        if self.eps_tri_deg <= 0 or self.d_max <= 0 or self.baseline_min <= 0:
            raise ConfigError("depth thresholds must be positive")
        if self.temporal_window < 1:
            raise ConfigError("temporal_window must be >= 1")
        if not 0.0 <= self.p_unknown <= 1.0:
            raise ConfigError("p_unknown must lie in [0, 1]")
        if self.divergence_kernel < 1:
            raise ConfigError("divergence_kernel must be >= 1")
        if self.reference_camera not in ("current", "previous"):
            raise ConfigError("reference_camera must be 'current' or 'previous'")


@dataclass
class PipelineConfig:
    input_dir: str = "."
    output_dir: str = "out"
    cache_dir: str | None = None      # default: <output_dir>/cache
    flow: FlowParams = field(default_factory=FlowParams)
    depth: DepthConfig = field(default_factory=DepthConfig)
    sigma: float = DEFAULT_SIGMA
    visibility_table: dict = field(default_factory=lambda: dict(DEFAULT_VISIBILITY_TABLE))
    blend: BlendConfig = field(default_factory=BlendConfig)
    modes: tuple = BLEND_MODES
    flow_source: str = "tvl1"         # or "ground_truth" (needs gt_flow files)
    use_cache: bool = True
    max_inflight: int = 4             # bounded frame lookahead for the flow stage

    def validate(self):
        self.depth.validate()
        if self.sigma <= 0:
            raise ConfigError("sigma must be positive")
        for mode in self.modes:
            if mode not in BLEND_MODES:
                raise ConfigError(f"unknown blend mode {mode!r}")
        if self.flow_source not in ("tvl1", "ground_truth"):
            raise ConfigError("flow_source must be 'tvl1' or 'ground_truth'")
        if self.max_inflight < 1:
            raise ConfigError("max_inflight must be >= 1")
        for cat in Category:
            if cat not in self.visibility_table:
                raise ConfigError(f"visibility table is missing {cat.name}")
        return self

    @property
    def resolved_cache_dir(self) -> Path:
        env = os.environ.get("OMNIBLEND_CACHE_DIR")
        if env:
            return Path(env)
        if self.cache_dir:
            return Path(self.cache_dir)
        return Path(self.output_dir) / "cache"

    @property
    def workers(self) -> int:
        try:
            return max(1, int(os.environ.get("OMNIBLEND_THREADS", "1")))
        except ValueError:
            return 1

    def digest(self) -> str:
        """Stable hash of everything that affects computed products."""
        payload = self.to_dict()
        payload.pop("input_dir", None)
        payload.pop("output_dir", None)
        payload.pop("cache_dir", None)
        payload.pop("use_cache", None)
        payload.pop("max_inflight", None)
        blob = json.dumps(payload, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["flow"] = asdict(self.flow)
        d["blend"] = asdict(self.blend)
        d["depth"] = asdict(self.depth)
        d["visibility_table"] = {
            cat.name.capitalize(): asdict(params)
            for cat, params in self.visibility_table.items()
        }
        d["modes"] = list(self.modes)
        return d

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def _build(section: dict, cls, error_label: str):
    try:
        return cls(**section)
    except TypeError as exc:
        raise ConfigError(f"bad {error_label} section: {exc}") from None
    except ValueError as exc:
        raise ConfigError(f"bad {error_label} section: {exc}") from None


def config_from_dict(data: dict) -> PipelineConfig:
    data = dict(data)
    kwargs = {}
    for key in ("input_dir", "output_dir", "cache_dir", "sigma", "flow_source",
                "use_cache", "max_inflight"):
        if key in data:
            kwargs[key] = data[key]
    if "modes" in data:
        kwargs["modes"] = tuple(data["modes"])
    if "flow" in data:
        kwargs["flow"] = _build(data["flow"], FlowParams, "flow")
    if "depth" in data:
        section = dict(data["depth"])
        if "region_half_extent" in section:
            section["region_half_extent"] = tuple(section["region_half_extent"])
        kwargs["depth"] = _build(section, DepthConfig, "depth")
    if "blend" in data:
        kwargs["blend"] = _build(data["blend"], BlendConfig, "blend")
    if "visibility_table" in data:
        table = dict(DEFAULT_VISIBILITY_TABLE)
        names = {c.name.capitalize(): c for c in Category}
        for key, values in data["visibility_table"].items():
            cat = names.get(str(key).capitalize())
            if cat is None:
                raise ConfigError(f"unknown category {key!r} in visibility table")
            table[cat] = _build(values, VisibilityParams, "visibility table")
        kwargs["visibility_table"] = table

    known = {"input_dir", "output_dir", "cache_dir", "sigma", "flow_source", "use_cache",
             "max_inflight", "modes", "flow", "depth", "blend", "visibility_table"}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return PipelineConfig(**kwargs).validate()


def load_config(path) -> PipelineConfig:
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError("config root must be a JSON object")
    return config_from_dict(data)


def with_overrides(config: PipelineConfig, **kwargs) -> PipelineConfig:
    cfg = replace(config, **{k: v for k, v in kwargs.items() if v is not None})
    cfg.validate()
    return cfg
