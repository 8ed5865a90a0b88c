"""Run configuration: defaults, file loading, overrides, and hashing.

Precedence is strictly CLI flag > config file > built-in default. The
config hash stored in checkpoint metadata is computed over the canonical
JSON form so that semantically identical configs hash identically.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

from .losses import LossWeights

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib


class ConfigError(ValueError):
    """Malformed or inconsistent run configuration."""


@dataclass(frozen=True)
class RunConfig:
    """Everything a fitting run needs beyond the supervision data itself.

    ``bounds`` are the grid extents as ((xmin, ymin, zmin), (xmax, ymax,
    zmax)); the defaults enclose the bundled humanoid with margin.
    ``hm_band`` is the height interval initialized as cloth. ``alpha_body``
    and ``alpha_cloth`` are the expected component counts per layer — a
    waist-height garment cuts the visible body into an upper and a lower
    part, hence the default of two body components.
    """

    seed: int = 0
    resolution: int = 48
    bounds: tuple = ((-0.5, -0.85, -0.3), (0.5, 0.9, 0.3))
    render_size: int = 128
    sigma: float = 1.0
    gamma: float = 1e-3
    band: float = 3.0
    views_per_iter: int = 2
    template_iterations: int = 3000
    sequence_iterations: int = 500
    convergence_window: int = 100
    convergence_tol: float = 1e-4
    aggregation_interval: int = 50
    alpha_body: int = 2
    alpha_cloth: int = 1
    lr_fields: float = 1e-2
    lr_networks: float = 1e-3
    lr_latents: float = 1e-3
    sdf_inflate: float = 0.01
    hm_band: tuple = (-0.02, 0.18)
    tau_merge: float = 0.02
    checkpoint_interval: int = 200
    latent_dim: int = 16
    hidden: int = 128
    n_hidden_layers: int = 3
    octaves: int = 6
    clamp: float = 0.05
    threads: int = 1
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.resolution < 2:
            raise ConfigError(f"resolution must be >= 2, got {self.resolution}")
        if self.render_size < 1:
            raise ConfigError(f"render_size must be >= 1, got {self.render_size}")
        lo, hi = (tuple(map(float, b)) for b in self.bounds)
        if len(lo) != 3 or len(hi) != 3 or any(h <= l for l, h in zip(lo, hi)):
            raise ConfigError(f"bounds must be two strictly ordered 3-vectors, got {self.bounds}")
        object.__setattr__(self, "bounds", (lo, hi))
        band = tuple(map(float, self.hm_band))
        if len(band) != 2 or band[1] <= band[0]:
            raise ConfigError(f"hm_band must be (low, high) with low < high, got {self.hm_band}")
        object.__setattr__(self, "hm_band", band)
        for name in ("template_iterations", "sequence_iterations", "views_per_iter",
                     "aggregation_interval", "convergence_window", "checkpoint_interval",
                     "alpha_body", "alpha_cloth", "threads", "seed"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool):
                raise ConfigError(f"{name} must be an integer, got {v!r}")
        if self.views_per_iter < 1 or self.aggregation_interval < 1 \
                or self.convergence_window < 1 or self.checkpoint_interval < 1:
            raise ConfigError("interval and batch settings must be >= 1")
        for name in ("lr_fields", "lr_networks", "lr_latents", "sigma", "gamma",
                     "band", "sdf_inflate", "tau_merge", "convergence_tol", "clamp"):
            v = float(getattr(self, name))
            if not v > 0.0:
                raise ConfigError(f"{name} must be positive, got {v}")

    def to_mapping(self) -> dict:
        out = dataclasses.asdict(self)
        out["weights"] = dataclasses.asdict(self.weights)
        return out

    def canonical_json(self) -> str:
        return json.dumps(self.to_mapping(), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:16]

    @classmethod
    def from_mapping(cls, data: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = dict(data)
        if "weights" in kwargs and not isinstance(kwargs["weights"], LossWeights):
            wdata = kwargs["weights"]
            wknown = {f.name for f in dataclasses.fields(LossWeights)}
            wunknown = set(wdata) - wknown
            if wunknown:
                raise ConfigError(f"unknown weight keys: {sorted(wunknown)}")
            kwargs["weights"] = LossWeights(**wdata)
        for key in ("bounds", "hm_band"):
            if key in kwargs and isinstance(kwargs[key], list):
                kwargs[key] = tuple(tuple(x) if isinstance(x, list) else x
                                    for x in kwargs[key])
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def load_config(path: str | Path) -> RunConfig:
    """Read a TOML (by suffix) or JSON config file into a RunConfig."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    if path.suffix.lower() == ".toml":
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    else:
        with open(path) as fh:
            data = json.load(fh)
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return RunConfig.from_mapping(data)


def apply_overrides(config: RunConfig, overrides: dict) -> RunConfig:
    """Return a copy with the given non-None fields replaced (CLI beats file)."""
    updates = {k: v for k, v in overrides.items() if v is not None}
    if not updates:
        return config
    data = config.to_mapping()
    data.update(updates)
    return RunConfig.from_mapping(data)
