"""
Per-run configuration

One JSON file per run, optionally a named experiment preset, then `--set
a.b=value` overrides, validated into a RunConfig. Unknown keys anywhere are
errors.
"""

import json
from typing import Any, Dict, Iterable, List, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from config.settings import (
    AUTO_MAX_EPOCHS,
    AUTO_TRAIN_FRACTION,
    BEAM_SIZE,
    DEFAULT_SEED,
    EXPERIMENT_PRESETS,
    MAX_TOKENS,
    PIVOT_LANGUAGE,
    RAD_TRAIN_FRACTION,
    TRANSLATION_BATCH_SIZE,
    TRANSLATION_PARALLELISM,
)
from core.errors import ConfigError
from core.evaluation import EvalConfig
from core.model import HeadInputMode, HyperParams
from core.training import Baseline, StrategyKind


class _Section(BaseModel):
    model_config = ConfigDict(extra='forbid')


class EncoderSettings(_Section):
    # A key of ENCODER_PRESETS, a hub id or a local directory
    name: str = 'bert-base'
    max_tokens: int = Field(MAX_TOKENS, ge=2, le=MAX_TOKENS)


class ModelSettings(_Section):
    head_input_mode: HeadInputMode = HeadInputMode.CLS
    baseline: Baseline = Baseline.FULL


class DataSettings(_Section):
    rad_data: Optional[str] = None
    auto_data: Optional[str] = None
    test_data: Optional[str] = None
    rad_train_fraction: float = Field(RAD_TRAIN_FRACTION, gt=0, lt=1)
    auto_train_fraction: float = Field(AUTO_TRAIN_FRACTION, gt=0, lt=1)
    dedup: bool = True
    # Drop automatic-corpus reports whose text also occurs in the expert set
    exclude_rad_from_auto: bool = True
    # Synthetic corpus used when a data path is the string "synthetic"
    synthetic_items: int = Field(400, ge=2)


class StrategySettings(_Section):
    kind: StrategyKind = StrategyKind.RAD
    init_checkpoint: Optional[str] = None
    auto_max_epochs: int = Field(AUTO_MAX_EPOCHS, ge=1)


class AugmentationSettings(_Section):
    enabled: bool = False
    client: str = 'identity_stub'
    pivot_language: str = PIVOT_LANGUAGE
    beam_size: int = Field(BEAM_SIZE, ge=1)
    parallelism: int = Field(TRANSLATION_PARALLELISM, ge=1)
    batch_size: int = Field(TRANSLATION_BATCH_SIZE, ge=1)
    augment_dev: bool = False
    mapping: Dict[str, str] = {}
    endpoint: Optional[str] = None
    input_path: Optional[str] = None
    output_path: Optional[str] = None


class RunConfig(_Section):
    name: str = 'run'
    # Seeds splitting, training and bootstrap
    seed: int = DEFAULT_SEED
    encoder: EncoderSettings = Field(default_factory=EncoderSettings)
    model: ModelSettings = Field(default_factory=ModelSettings)
    data: DataSettings = Field(default_factory=DataSettings)
    strategy: StrategySettings = Field(default_factory=StrategySettings)
    # hyperparams.seed and evaluation.seed are replaced by the run seed
    hyperparams: HyperParams = Field(default_factory=HyperParams)
    augmentation: AugmentationSettings = Field(default_factory=AugmentationSettings)
    evaluation: EvalConfig = Field(default_factory=EvalConfig)
    output_dir: str = 'runs'

    def resolved_hyperparams(self) -> HyperParams:
        return self.hyperparams.model_copy(update={'seed': self.seed})

    def resolved_eval_config(self) -> EvalConfig:
        return self.evaluation.model_copy(update={'seed': self.seed})

    def check(self) -> None:
        """Cross-field consistency: the data each strategy kind needs"""
        kind = self.strategy.kind
        if kind in (StrategyKind.RAD, StrategyKind.HYBRID) and not self.data.rad_data:
            raise ConfigError(f"strategy kind '{kind.value}' requires data.rad_data")
        if kind is StrategyKind.AUTO and not self.data.auto_data:
            raise ConfigError("strategy kind 'auto' requires data.auto_data")
        if kind is StrategyKind.HYBRID and not self.data.auto_data and not self.strategy.init_checkpoint:
            raise ConfigError("strategy kind 'hybrid' requires data.auto_data or strategy.init_checkpoint")


def parse_override(item: str) -> tuple:
    """'a.b=value' -> (['a', 'b'], value); the value is JSON when it parses, else a string"""
    if '=' not in item:
        raise ConfigError(f"Override '{item}' is not of the form key=value")
    key, raw = item.split('=', 1)
    path = [part for part in key.strip().split('.') if part]
    if not path:
        raise ConfigError(f"Override '{item}' has an empty key")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return path, value


def _known_fields(model_cls, path: List[str]) -> None:
    """Raise ConfigError unless path names a field of the RunConfig tree"""
    current = model_cls
    for depth, part in enumerate(path):
        fields = getattr(current, 'model_fields', None)
        if fields is None or part not in fields:
            raise ConfigError(f"Unknown config key '{'.'.join(path[:depth + 1])}'")
        annotation = fields[part].annotation
        current = annotation if isinstance(annotation, type) and issubclass(annotation, BaseModel) else None
        if current is None and depth < len(path) - 1:
            raise ConfigError(f"Config key '{'.'.join(path[:depth + 1])}' has no sub-keys")


def apply_override(data: Dict[str, Any], path: List[str], value: Any) -> None:
    _known_fields(RunConfig, path)
    node = data
    for part in path[:-1]:
        child = node.get(part)
        if not isinstance(child, dict):
            child = {}
            node[part] = child
        node = child
    node[path[-1]] = value


def load_run_config(path: Optional[str] = None,
                    overrides: Iterable[str] = (),
                    preset: Optional[str] = None,
                    seed: Optional[int] = None) -> RunConfig:
    """
    Build a RunConfig: file, then preset, then --set overrides, then --seed

    Args:
        path: JSON config file; None starts from the defaults
        overrides: 'a.b=value' strings
        preset: Name in EXPERIMENT_PRESETS
        seed: Overrides the config seed
    """
    data: Dict[str, Any] = {}
    if path:
        try:
            with open(path, encoding='utf-8') as f:
                data = json.load(f)
        except FileNotFoundError:
            raise ConfigError(f"Config file not found: {path}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"Config file {path} is not valid JSON: {e}")
        if not isinstance(data, dict):
            raise ConfigError(f"Config file {path} must hold a JSON object")

    if preset is not None:
        if preset not in EXPERIMENT_PRESETS:
            raise ConfigError(f"Unknown preset '{preset}'; available: {sorted(EXPERIMENT_PRESETS)}")
        for key, value in EXPERIMENT_PRESETS[preset].items():
            apply_override(data, key.split('.'), value)
        data.setdefault('name', preset)

    for item in overrides:
        apply_override(data, *parse_override(item))
    if seed is not None:
        data['seed'] = seed

    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        problems = '; '.join(f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors())
        raise ConfigError(f"Invalid run config: {problems}")


def write_resolved_config(cfg: RunConfig, path: str) -> None:
    with open(path, 'w', encoding='utf-8') as f:
        f.write(cfg.model_dump_json(indent=2))
