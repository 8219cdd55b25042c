"""Run configuration: every tunable in one JSON document."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

from .features import FeatureConfig
from .fitting import FitConfig
from .forest import ForestConfig
from .metrics import CannyConfig

METHODS = ("classic", "position", "smrf")


class ConfigError(ValueError):
    pass


@dataclass
class EvalConfig:
    canny: CannyConfig = field(default_factory=CannyConfig)
    pixel_spacing_mm: float | None = None
    depths: list = field(default_factory=lambda: [8, 12, 16, 20, 24])

    def validate(self):
        self.canny.validate()
        if self.pixel_spacing_mm is not None and self.pixel_spacing_mm <= 0:
            raise ConfigError("pixel_spacing_mm must be positive")
        if not self.depths or any(int(d) != d or d < 0 for d in self.depths):
            raise ConfigError("depths must be nonnegative integers")


@dataclass
class RunConfig:
    seed: int = 0
    threads: int = 1  # tree-training threads per forest
    workers: int = 1  # leave-one-out folds run in this many processes
    variance_target: float = 0.98
    methods: list = field(default_factory=lambda: list(METHODS))
    forest: ForestConfig = field(default_factory=ForestConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    fitting: FitConfig = field(default_factory=FitConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> "RunConfig":
        if self.threads < 1 or self.workers < 1:
            raise ConfigError("threads and workers must be >= 1")
        if not 0 < self.variance_target <= 1:
            raise ConfigError("variance_target must lie in (0, 1]")
        bad = [m for m in self.methods if m not in METHODS]
        if bad or not self.methods:
            raise ConfigError(f"methods must be a nonempty subset of {list(METHODS)}, got {bad}")
        f = self.features
        if f.appearance_radius < 0 or f.box_max < 1 or f.box_max % 2 == 0:
            raise ConfigError("appearance_radius must be >= 0 and box_max odd")
        if f.s_feature <= 0 or f.sm_pool_size < 1 or f.hist_eq_levels < 2:
            raise ConfigError("s_feature, sm_pool_size and hist_eq_levels out of range")
        if not 0 <= f.difference_prob <= 1:
            raise ConfigError("difference_prob must lie in [0, 1]")
        for m in self.methods:
            try:
                f.weights_for(m)
            except ValueError as exc:
                raise ConfigError(str(exc)) from exc
        try:
            self.forest.validate()
            self.fitting.validate()
            self.eval.validate()
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return _build(cls, d, "config").validate()

    @classmethod
    def loads(cls, text: str) -> "RunConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        return cls.from_dict(d)


_NESTED = {
    (RunConfig, "forest"): ForestConfig,
    (RunConfig, "features"): FeatureConfig,
    (RunConfig, "fitting"): FitConfig,
    (RunConfig, "eval"): EvalConfig,
    (EvalConfig, "canny"): CannyConfig,
}


def _build(cls, d, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be an object")
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {unknown}")
    kwargs = {}
    for key, value in d.items():
        sub = _NESTED.get((cls, key))
        kwargs[key] = _build(sub, value, f"{where}.{key}") if sub else value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc
