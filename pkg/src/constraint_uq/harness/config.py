"""Experiment configuration: YAML file <-> nested dataclasses with defaults.

Every key is optional; see ``docs/config.md`` for the schema. Relative paths
are resolved against the directory holding the config file.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from ..calib import DEFAULT_BINS, DEFAULT_LEVELS, LossWeights
from ..errors import DataError
from .synthetic import SyntheticTaskSpec


@dataclass
class DataConfig:
    source: str = "synthetic"  # "synthetic" or "csv"
    path: str | None = None
    features: list[str] | None = None
    targets: list[str] | None = None
    weight: str | None = None
    generator: str = "misspecified-shift"
    n: int = 1000
    d_x: int = 2
    noise: float = 0.03
    severity: float = 0.0
    shift_scale: float = 2.0
    seed: int = 0
    split_seed: int = 0

    def synthetic_spec(self) -> SyntheticTaskSpec:
        return SyntheticTaskSpec(self.generator, self.n, self.d_x, self.noise, self.severity, self.shift_scale, self.seed)


@dataclass
class KnowledgeConfig:
    graph: str | None = None
    templates: str | None = None
    gold: str | None = None
    tau_score: float = 0.9
    sim_threshold: float = 0.85


@dataclass
class ModelConfig:
    hidden: list[int] = field(default_factory=lambda: [256, 256, 256, 256])
    prior_sigma: float = 1.0
    init_std: float = 0.1


@dataclass
class LossConfig:
    alpha: float = 1.0
    beta: float = 0.1
    gamma: float = 10.0
    lam: float = 0.5
    tau_bin: float = 0.05
    coverage_smoothing: float = 0.1

    def weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.beta, self.gamma, self.lam, self.tau_bin)


@dataclass
class TrainConfig:
    epochs: int = 500
    lr: float = 1e-3
    batch: int = 128
    n_mc_train: int = 1
    samples: int = 50  # posterior draws at prediction time
    relinearize_every: int = 10
    max_outer: int = 5


@dataclass
class EvalConfig:
    bins: int = DEFAULT_BINS
    levels: list[float] = field(default_factory=lambda: list(DEFAULT_LEVELS))
    severities: list[float] = field(default_factory=lambda: [0.0, 0.25, 0.5, 0.75, 1.0])


@dataclass
class Toggles:
    use_csl: bool = True
    use_adjustment: bool = True
    use_calibration_loss: bool = True
    use_bayesian: bool = True
    use_extraction: bool = True


@dataclass
class ExplainConfig:
    templates: str | None = None
    delta: float | None = None
    output_names: list[str] | None = None
    units: list[str] | None = None


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    constraints: str | None = None  # DSL file; synthetic tasks default to their true constraints
    knowledge: KnowledgeConfig = field(default_factory=KnowledgeConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    toggles: Toggles = field(default_factory=Toggles)
    explain: ExplainConfig = field(default_factory=ExplainConfig)
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def digest(self, *sections: str) -> str:
        """Stable hash of the named sections (all sections when none given)."""
        d = self.to_dict()
        if sections:
            d = {k: d[k] for k in sections}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def with_toggles(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, toggles=dataclasses.replace(self.toggles, **kw))


_PATH_KEYS = {("data", "path"), ("constraints",), ("knowledge", "graph"), ("knowledge", "templates"),
              ("knowledge", "gold"), ("explain", "templates")}


def _build(cls, raw: Any, where: str):
    if not isinstance(raw, dict):
        raise DataError(f"config section {where or 'root'} must be a mapping")
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, val in raw.items():
        if key not in known:
            raise DataError(f"unknown config key {where + '.' if where else ''}{key}")
        default = getattr(cls(), key)
        if dataclasses.is_dataclass(default):
            kwargs[key] = _build(type(default), val or {}, f"{where}.{key}" if where else key)
        else:
            kwargs[key] = val
    return cls(**kwargs)


def _resolve_paths(cfg: ExperimentConfig, base: Path) -> None:
    for keys in _PATH_KEYS:
        obj = cfg
        for k in keys[:-1]:
            obj = getattr(obj, k)
        val = getattr(obj, keys[-1])
        if val is None:
            continue
        p = Path(val)
        if not p.is_absolute():
            p = base / p
        if not p.exists():
            raise DataError(f"config path {'.'.join(keys)} does not exist: {p}")
        setattr(obj, keys[-1], str(p))


def validate(cfg: ExperimentConfig) -> None:
    try:
        cfg.loss.weights()
        if cfg.data.source == "synthetic":
            cfg.data.synthetic_spec()
        elif cfg.data.source == "csv":
            if cfg.data.path is None:
                raise ValueError("data.path is required for csv data")
        else:
            raise ValueError(f"data.source must be 'synthetic' or 'csv', not {cfg.data.source!r}")
        t = cfg.train
        if t.epochs < 0 or min(t.batch, t.n_mc_train, t.samples, t.relinearize_every, t.max_outer) < 1:
            raise ValueError("epochs must be >= 0 and other training sizes >= 1")
        if not t.lr > 0:
            raise ValueError("train.lr must be > 0")
        if not cfg.model.prior_sigma > 0 or not cfg.model.init_std > 0:
            raise ValueError("model.prior_sigma and model.init_std must be > 0")
        if any(h < 1 for h in cfg.model.hidden):
            raise ValueError("hidden layer sizes must be >= 1")
        if not 0 <= cfg.knowledge.tau_score <= 1 or not 0 <= cfg.knowledge.sim_threshold <= 1:
            raise ValueError("knowledge thresholds must lie in [0, 1]")
        if not cfg.seeds:
            raise ValueError("at least one seed is required")
        if any(not 0.0 <= s <= 1.0 for s in cfg.eval.severities):
            raise ValueError("severities must lie in [0, 1]")
    except (ValueError, TypeError) as exc:
        raise DataError(f"invalid config: {exc}") from None


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> ExperimentConfig:
    """Read a YAML config (defaults when ``path`` is None) and validate it."""
    raw: dict = {}
    base = Path.cwd()
    if path is not None:
        path = Path(path)
        try:
            raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        except OSError as exc:
            raise DataError(f"{path}: {exc.strerror}") from None
        except yaml.YAMLError as exc:
            raise DataError(f"{path}: malformed YAML ({exc})") from None
        base = path.resolve().parent
    if overrides:
        raw = _merge(raw, overrides)
    try:
        cfg = _build(ExperimentConfig, raw, "")
    except TypeError as exc:
        raise DataError(f"invalid config: {exc}") from None
    _resolve_paths(cfg, base)
    validate(cfg)
    return cfg


def _merge(a: dict, b: dict) -> dict:
    out = dict(a)
    for k, v in b.items():
        out[k] = _merge(out.get(k) or {}, v) if isinstance(v, dict) else v
    return out


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
