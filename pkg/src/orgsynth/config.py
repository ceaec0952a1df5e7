"""Pipeline configuration: one JSON document plus dotted ``key=value`` overrides."""
from __future__ import annotations

import copy
import json
import math
import os
from dataclasses import asdict, dataclass, field, fields

from .decompose import BoundaryCompletionConfig
from .embed import EncoderParams
from .losses import LossWeights, SemanticWeights, TopologyWeights, TotalWeights
from .optimize import OptimizerConfig, SynthesisConfig
from .org import GraphSamplingConfig
from .relations import ThresholdConfig
from .serialization import config_hash

SEED_ENV = "ORGSYNTH_SEED"


class ConfigError(ValueError):
    pass


@dataclass
class PipelineConfig:
    manifest: str | None = None
    thresholds: ThresholdConfig = field(default_factory=ThresholdConfig)
    sampling: GraphSamplingConfig = field(default_factory=GraphSamplingConfig)
    semantic: SemanticWeights = field(default_factory=SemanticWeights)
    topology: TopologyWeights = field(default_factory=TopologyWeights)
    total: TotalWeights = field(default_factory=TotalWeights)
    collide_background: bool = True
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    completion: BoundaryCompletionConfig = field(default_factory=BoundaryCompletionConfig)
    encoder: EncoderParams = field(default_factory=EncoderParams)
    augmentation_ratio: float = 0.25
    output_dir: str = "out"
    seed: int = 0
    placement_tries: int = 50
    strict: bool = False
    max_failure_fraction: float = 0.1

    def __post_init__(self):
        if not self.augmentation_ratio > 0:
            raise ConfigError("augmentation_ratio must be positive")
        if not 0 <= self.max_failure_fraction <= 1:
            raise ConfigError("max_failure_fraction must lie in [0, 1]")
        if self.placement_tries < 1:
            raise ConfigError("placement_tries must be >= 1")

    # -- conversion -----------------------------------------------------------

    def to_dict(self) -> dict:
        d = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "semantic":
                v = asdict(v)
                v["alpha"] = {r.label: w for r, w in sorted(self.semantic.alpha.items())}
            elif f.name == "sampling":
                v = asdict(v)
                v["gt_boost"] = {str(k): float(b) for k, b in sorted(self.sampling.gt_boost.items())}
            elif f.name == "optimizer":
                v = asdict(v)
                v["fd_steps"] = list(v["fd_steps"])
            elif hasattr(v, "__dataclass_fields__"):
                v = asdict(v)
            d[f.name] = v
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = copy.deepcopy(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        nested = {
            "thresholds": ThresholdConfig, "sampling": GraphSamplingConfig, "semantic": SemanticWeights,
            "topology": TopologyWeights, "total": TotalWeights, "optimizer": OptimizerConfig,
            "completion": BoundaryCompletionConfig, "encoder": EncoderParams,
        }
        kwargs = {}
        try:
            for name, value in d.items():
                sub = nested.get(name)
                if sub is None:
                    kwargs[name] = value
                    continue
                if not isinstance(value, dict):
                    raise ConfigError(f"{name} must be an object")
                allowed = {f.name for f in fields(sub)}
                bad = set(value) - allowed
                if bad:
                    raise ConfigError(f"unknown keys in {name}: {sorted(bad)}")
                if name == "sampling" and "gt_boost" in value:
                    value["gt_boost"] = {int(k): float(v) for k, v in value["gt_boost"].items()}
                if name == "optimizer" and "fd_steps" in value:
                    value["fd_steps"] = tuple(value["fd_steps"])
                kwargs[name] = sub(**value)
            return cls(**kwargs)
        except ConfigError:
            raise
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(str(exc)) from exc

    def hash(self) -> str:
        return config_hash(self.to_dict())

    # -- views for the library ------------------------------------------------

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.semantic, self.topology, self.total, self.collide_background)

    def synthesis(self) -> SynthesisConfig:
        return SynthesisConfig(self.thresholds, self.sampling, self.loss_weights(), self.optimizer,
                               self.encoder, self.strict, self.placement_tries)


def parse_value(text: str):
    """JSON literal when it parses (numbers, booleans, lists, objects), else the raw string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(d: dict, overrides) -> dict:
    """Apply ``a.b.c=value`` assignments to a config dictionary (copied)."""
    d = copy.deepcopy(d)
    for item in overrides or ():
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {item!r} is not key=value")
        parts = key.split(".")
        node = d
        for p in parts[:-1]:
            nxt = node.get(p)
            if nxt is None:
                nxt = node[p] = {}
            if not isinstance(nxt, dict):
                raise ConfigError(f"override {key!r}: {p!r} is not an object")
            node = nxt
        node[parts[-1]] = parse_value(raw)
    return d


def load_config(path=None, overrides=(), env=None) -> PipelineConfig:
    """File (optional) -> overrides -> ``ORGSYNTH_SEED``, validated at the end."""
    d = PipelineConfig().to_dict()
    if path is not None:
        try:
            with open(path) as fh:
                loaded = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be an object")
        d = _deep_merge(d, loaded)
    d = apply_overrides(d, overrides)
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        try:
            d["seed"] = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from None
    cfg = PipelineConfig.from_dict(d)
    if not math.isfinite(cfg.augmentation_ratio):
        raise ConfigError("augmentation_ratio must be finite")
    return cfg


def _deep_merge(base: dict, upd: dict) -> dict:
    out = dict(base)
    for k, v in upd.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k not in ("gt_boost", "alpha"):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out
