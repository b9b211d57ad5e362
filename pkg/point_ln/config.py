# Copyright Amazon.com, Inc. or its affiliates. All Rights Reserved.
# SPDX-License-Identifier: MIT-0

"""Run configuration models.

Every field has a default, so an empty JSON object is a valid run config
that trains on the in-memory synthetic corpus.
"""

import json
from importlib import resources
from pathlib import Path
from typing import Any, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from point_ln.exceptions import ConfigurationError

SHAPE_KINDS = ('sphere', 'cube', 'cylinder', 'cone', 'torus')
PRESETS_PACKAGE = 'point_ln.presets'


class _Model(BaseModel):
    model_config = ConfigDict(extra='forbid', frozen=True)


class TPEConfig(_Model):
    initial_dim: int = Field(36, gt=0)
    alpha: float = Field(1000.0, gt=0)
    beta: float = Field(100.0, gt=0)

    @field_validator('initial_dim')
    @classmethod
    def _divisible_by_six(cls, value: int) -> int:
        if value % 6:
            raise ValueError('initial_dim must be divisible by 6')
        return value


class GPEConfig(_Model):
    reference_count: int = Field(16, ge=1)
    sigma: float = Field(0.3, gt=0)
    reference_min: float = 0.0
    reference_max: float = 1.0
    square_input: bool = True

    @model_validator(mode='after')
    def _ordered_range(self) -> 'GPEConfig':
        if self.reference_count >= 2 and not self.reference_min < self.reference_max:
            raise ValueError('reference_min must be below reference_max')
        return self


class StageConfig(_Model):
    k_neighbors: int = Field(32, ge=1)
    in_dim: int = Field(gt=0)
    out_dim: int = Field(gt=0)
    gpe: GPEConfig

    @model_validator(mode='after')
    def _gpe_width(self) -> 'StageConfig':
        if self.out_dim % 3:
            raise ValueError('stage out_dim must be divisible by 3')
        if self.gpe.reference_count * 3 != self.out_dim:
            raise ValueError('gpe.reference_count must equal out_dim / 3')
        return self


def build_stages(embed_dim: int, widths: Tuple[int, ...], neighbors: Tuple[int, ...], **gpe: Any) -> List[StageConfig]:
    stages = []
    in_dim = embed_dim
    for out_dim, k in zip(widths, neighbors):
        stages.append(StageConfig(
            k_neighbors=k,
            in_dim=in_dim,
            out_dim=out_dim,
            gpe=GPEConfig(reference_count=out_dim // 3, **gpe)
        ))
        in_dim = out_dim
    return stages


class EncoderConfig(_Model):
    tpe: TPEConfig = TPEConfig()
    embed_dim: int = Field(48, gt=0)
    stages: List[StageConfig] = Field(default_factory=lambda: build_stages(48, (48, 96, 192, 384), (32, 32, 32, 32)))
    epsilon: float = Field(1e-5, gt=0)
    activation: Literal['relu', 'identity'] = 'relu'
    lga_mode: Literal['as_printed', 'multiplicative'] = 'as_printed'
    gpe_square_input: bool = True

    @model_validator(mode='before')
    @classmethod
    def _derive_stage_fields(cls, data: Any) -> Any:
        if not isinstance(data, dict) or not isinstance(data.get('stages'), list):
            return data
        data = dict(data)
        square_input = data.get('gpe_square_input', True)
        previous = data.get('embed_dim', 48)
        stages = []
        for stage in data['stages']:
            if isinstance(stage, dict):
                stage = dict(stage)
                stage.setdefault('in_dim', previous)
                gpe = dict(stage.get('gpe') or {})
                if 'out_dim' in stage:
                    gpe.setdefault('reference_count', stage['out_dim'] // 3)
                gpe.setdefault('square_input', square_input)
                stage['gpe'] = gpe
                previous = stage.get('out_dim', previous)
            stages.append(stage)
        data['stages'] = stages
        return data

    @model_validator(mode='after')
    def _stage_chain(self) -> 'EncoderConfig':
        if len(self.stages) != 4:
            raise ValueError('encoder needs exactly 4 stages')
        in_dim = self.embed_dim
        for number, stage in enumerate(self.stages, start=1):
            if stage.in_dim != in_dim:
                raise ValueError('stage {} in_dim must be {}'.format(number, in_dim))
            if stage.gpe.square_input != self.gpe_square_input:
                raise ValueError('stage {} gpe.square_input disagrees with gpe_square_input'.format(number))
            in_dim = stage.out_dim
        return self

    @property
    def feature_width(self) -> int:
        return sum(stage.out_dim for stage in self.stages)


class ClassifierConfig(_Model):
    hidden_dims: List[int] = Field(default_factory=lambda: [512, 256])
    activation: Literal['relu', 'identity'] = 'relu'
    dropout: float = Field(0.0, ge=0.0, lt=1.0)
    class_count: Optional[int] = Field(None, ge=1)


class OptimizerConfig(_Model):
    kind: Literal['adam', 'sgd_momentum'] = 'adam'
    learning_rate: float = Field(1e-3, gt=0)
    min_learning_rate: float = Field(0.0, ge=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    eps: float = Field(1e-8, gt=0)


class TrainingConfig(_Model):
    epochs: int = Field(200, ge=0)
    batch_size: int = Field(16, ge=1)
    optimizer: OptimizerConfig = OptimizerConfig()
    label_smoothing: float = Field(0.0, ge=0.0, lt=1.0)
    freeze_encoder: bool = False
    checkpoint_every: int = Field(10, ge=0)


class AugmentationConfig(_Model):
    enabled: bool = True
    scale_range: Tuple[float, float] = (0.67, 1.5)
    translation_range: float = Field(0.2, ge=0)

    @field_validator('scale_range')
    @classmethod
    def _positive_scale(cls, value: Tuple[float, float]) -> Tuple[float, float]:
        low, high = value
        if low <= 0 or high < low:
            raise ValueError('scale_range must be positive and ordered')
        return value


class SyntheticShapeSpec(_Model):
    kind: Literal['sphere', 'cube', 'cylinder', 'cone', 'torus']
    scale_range: Tuple[float, float] = (0.8, 1.25)
    rotate: bool = True
    jitter: float = Field(0.01, ge=0)
    points: int = Field(256, ge=1)

    @field_validator('scale_range')
    @classmethod
    def _positive_scale(cls, value: Tuple[float, float]) -> Tuple[float, float]:
        low, high = value
        if low <= 0 or high < low:
            raise ValueError('scale_range must be positive and ordered')
        return value


class SyntheticCorpusConfig(_Model):
    kinds: List[Literal['sphere', 'cube', 'cylinder', 'cone', 'torus']] = Field(
        default_factory=lambda: ['sphere', 'cube', 'cylinder', 'torus']
    )
    train_per_class: int = Field(200, ge=0)
    test_per_class: int = Field(50, ge=0)
    points: int = Field(256, ge=1)
    scale_range: Tuple[float, float] = (0.8, 1.25)
    rotate: bool = True
    jitter: float = Field(0.01, ge=0)
    seed: Optional[int] = Field(None, ge=0)

    @field_validator('kinds')
    @classmethod
    def _unique_kinds(cls, value: List[str]) -> List[str]:
        if not value or len(set(value)) != len(value):
            raise ValueError('kinds must be a non-empty list without duplicates')
        return value

    def shape_spec(self, kind: str) -> SyntheticShapeSpec:
        return SyntheticShapeSpec(
            kind=kind,
            scale_range=self.scale_range,
            rotate=self.rotate,
            jitter=self.jitter,
            points=self.points
        )


class DataConfig(_Model):
    manifest: Optional[Path] = None
    synthetic: SyntheticCorpusConfig = SyntheticCorpusConfig()
    points_per_cloud: int = Field(1024, ge=1)
    resample_method: Literal['fps', 'random'] = 'fps'
    augmentation: AugmentationConfig = AugmentationConfig()


class RunConfig(_Model):
    seed: int = Field(0, ge=0)
    precision: Literal['float32', 'float64'] = 'float32'
    threads: int = Field(1, ge=1)
    output_dir: Path = Path('runs/latest')
    encoder: EncoderConfig = EncoderConfig()
    classifier: ClassifierConfig = ClassifierConfig()
    training: TrainingConfig = TrainingConfig()
    data: DataConfig = DataConfig()

    def validate_paths(self) -> None:
        manifest = self.data.manifest
        if manifest is not None and not Path(manifest).is_file():
            raise ConfigurationError('manifest not found: {}'.format(manifest))

    def with_overrides(self, **overrides: Any) -> 'RunConfig':
        values = {key: value for key, value in overrides.items() if value is not None}
        if not values:
            return self
        return RunConfig.model_validate({**self.model_dump(), **values})


def preset_names() -> List[str]:
    return sorted(
        entry.name[:-len('.json')]
        for entry in resources.files(PRESETS_PACKAGE).iterdir()
        if entry.name.endswith('.json')
    )


def read_config_text(source: str) -> str:
    path = Path(source)
    if path.is_file():
        return path.read_text(encoding='utf-8')
    preset = resources.files(PRESETS_PACKAGE).joinpath('{}.json'.format(source))
    if preset.is_file():
        return preset.read_text(encoding='utf-8')
    raise ConfigurationError('config not found: {} (presets: {})'.format(source, ', '.join(preset_names())))


def load_run_config(source: Optional[str] = None) -> RunConfig:
    if source is None:
        return RunConfig()
    return RunConfig.model_validate_json(read_config_text(source))


def load_corpus_config(source: Optional[str] = None) -> SyntheticCorpusConfig:
    """A corpus spec file, or the `data.synthetic` section of a run config."""
    if source is None:
        return SyntheticCorpusConfig()
    try:
        document = json.loads(read_config_text(source))
    except json.JSONDecodeError as e:
        raise ConfigurationError('config {} is not valid JSON: {}'.format(source, e))
    run_only = set(RunConfig.model_fields) - set(SyntheticCorpusConfig.model_fields)
    if isinstance(document, dict) and set(document) & run_only:
        return RunConfig.model_validate(document).data.synthetic
    return SyntheticCorpusConfig.model_validate(document)
