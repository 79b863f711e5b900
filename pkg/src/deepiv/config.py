"""Run configuration: JSON in, validated dataclasses out."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .outcome import SecondStageConfig
from .simulation import METHODS, SweepSettings, desk_epochs
from .treatment import FirstStageConfig


@dataclass
class InferenceConfig:
    eval_draws: int = 500
    level: float = 0.95
    posterior_draws: int = 200
    split_fraction: float = 0.5
    keep_grid: tuple[float, ...] = (0.90, 0.95, 0.99)

    def validate(self, prefix: str = "inference") -> "InferenceConfig":
        if self.eval_draws < 100:
            raise ConfigError(f"{prefix}.eval_draws", "must be >= 100")
        if not 0.0 < self.level < 1.0:
            raise ConfigError(f"{prefix}.level", "must lie in (0, 1)")
        if self.posterior_draws < 2:
            raise ConfigError(f"{prefix}.posterior_draws", "must be >= 2")
        if not 0.0 < self.split_fraction < 1.0:
            raise ConfigError(f"{prefix}.split_fraction", "must lie in (0, 1)")
        if not self.keep_grid or any(not 0.5 <= c < 1.0 for c in self.keep_grid):
            raise ConfigError(f"{prefix}.keep_grid", "values must lie in [0.5, 1)")
        return self


@dataclass
class SweepConfig:
    rhos: tuple[float, ...] = (0.0, 0.25, 0.5, 0.75, 0.9)
    ns: tuple[int, ...] = (1000, 5000, 10000, 50000)
    methods: tuple[str, ...] = METHODS
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    steps: int = 30000  # optimiser updates per network; sets epochs for each n
    holdout_fraction: float = 0.2
    grid_points: int = 1000
    grid_prices: int = 20

    def validate(self, prefix: str = "sweep") -> "SweepConfig":
        for name in ("rhos", "ns", "methods", "seeds"):
            if not getattr(self, name):
                raise ConfigError(f"{prefix}.{name}", "must be nonempty")
        if any(not 0.0 <= r <= 1.0 for r in self.rhos):
            raise ConfigError(f"{prefix}.rhos", "values must lie in [0, 1]")
        if any(n < 10 for n in self.ns):
            raise ConfigError(f"{prefix}.ns", "values must be >= 10")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ConfigError(f"{prefix}.methods", f"unknown methods {bad}; choose from {list(METHODS)}")
        if any(s < 0 for s in self.seeds):
            raise ConfigError(f"{prefix}.seeds", "values must be >= 0")
        if self.steps < 1:
            raise ConfigError(f"{prefix}.steps", "must be >= 1")
        if not 0.0 < self.holdout_fraction < 1.0:
            raise ConfigError(f"{prefix}.holdout_fraction", "must lie in (0, 1)")
        if self.grid_points < 1 or self.grid_prices < 2:
            raise ConfigError(f"{prefix}.grid_points", "grid needs >= 1 point and >= 2 prices")
        return self


@dataclass
class RunConfig:
    seed: int = 0
    first_stage: FirstStageConfig = field(default_factory=FirstStageConfig)
    second_stage: SecondStageConfig = field(default_factory=lambda: SecondStageConfig(n_draws=4))
    ffnet: SecondStageConfig = field(default_factory=SecondStageConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)

    def validate(self) -> "RunConfig":
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError("seed", "must be a non-negative integer")
        self.first_stage.validate("first_stage")
        self.second_stage.validate("second_stage")
        self.ffnet.validate("ffnet")
        self.inference.validate("inference")
        self.sweep.validate("sweep")
        return self


SECTIONS = {
    "first_stage": FirstStageConfig,
    "second_stage": SecondStageConfig,
    "ffnet": SecondStageConfig,
    "inference": InferenceConfig,
    "sweep": SweepConfig,
}


def _coerce(name: str, value, default):
    """Check a JSON value against the type of the field's default."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(name, f"expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(name, f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(name, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(name, f"expected a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise ConfigError(name, f"expected a list, got {value!r}")
        proto = default[0] if default else 0
        return tuple(_coerce(f"{name}[{i}]", v, proto) for i, v in enumerate(value))
    return value


def _section(defaults, doc, prefix: str):
    """Overlay ``doc`` on the section's run defaults."""
    if not isinstance(doc, dict):
        raise ConfigError(prefix, "expected an object")
    known = {f.name for f in dataclasses.fields(defaults)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"{prefix}.{unknown[0]}", "unknown key")
    values = {k: _coerce(f"{prefix}.{k}", v, getattr(defaults, k)) for k, v in doc.items()}
    return dataclasses.replace(defaults, **values)


def config_from_dict(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("<root>", "expected a JSON object")
    unknown = sorted(set(doc) - set(SECTIONS) - {"seed"})
    if unknown:
        raise ConfigError(unknown[0], "unknown key")
    base = RunConfig()
    kwargs = {name: _section(getattr(base, name), doc[name], name) for name in SECTIONS if name in doc}
    if "seed" in doc:
        kwargs["seed"] = _coerce("seed", doc["seed"], 0)
    return RunConfig(**kwargs).validate()


def parse_config(path: str | Path) -> RunConfig:
    """Read and validate a JSON run configuration; missing keys take defaults."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(str(path), "file not found")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(str(path), f"malformed JSON: {exc}") from exc
    return config_from_dict(doc)


def normalize(config: RunConfig) -> dict:
    """Fully populated plain-dict form; ``config_from_dict(normalize(c))`` reproduces ``c``."""
    def plain(obj):
        if dataclasses.is_dataclass(obj):
            return {f.name: plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
        if isinstance(obj, tuple):
            return [plain(v) for v in obj]
        return obj
    return plain(config)


def dumps_config(config: RunConfig) -> str:
    return json.dumps(normalize(config), indent=2, sort_keys=True) + "\n"


def sweep_settings(config: RunConfig, n: int) -> SweepSettings:
    """Per-sample-size sweep settings; each network's epochs come from ``sweep.steps``."""
    first_epochs = desk_epochs(n, config.sweep.steps, config.first_stage.batch_size)
    return SweepSettings(
        first_stage=dataclasses.replace(config.first_stage, epochs=first_epochs),
        second_stage=dataclasses.replace(
            config.second_stage, epochs=desk_epochs(n, config.sweep.steps, config.second_stage.batch_size)),
        ffnet=dataclasses.replace(config.ffnet, epochs=desk_epochs(n, config.sweep.steps, config.ffnet.batch_size)),
        holdout_fraction=config.sweep.holdout_fraction,
        grid_points=config.sweep.grid_points,
        grid_prices=config.sweep.grid_prices,
        eval_draws=config.inference.eval_draws,
        master_seed=config.seed,
    )
