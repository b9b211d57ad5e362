# Copyright Amazon.com, Inc. or its affiliates. All Rights Reserved.
# SPDX-License-Identifier: MIT-0

import json
from pathlib import Path

import numpy as np
import pytest

from point_ln.config import EncoderConfig, RunConfig

FIXTURES = Path(__file__).parent / 'fixtures'

TINY_ENCODER = {
    'tpe': {'initial_dim': 6},
    'embed_dim': 6,
    'stages': [
        {'k_neighbors': 4, 'out_dim': 6},
        {'k_neighbors': 3, 'out_dim': 12},
        {'k_neighbors': 2, 'out_dim': 12},
        {'k_neighbors': 2, 'out_dim': 24},
    ],
}


def tiny_run_document(out_dir: Path, **overrides) -> dict:
    """A run that trains in well under a second: 2 shapes, 32 points per cloud."""
    document = {
        'seed': 7,
        'precision': 'float32',
        'threads': 1,
        'output_dir': str(out_dir),
        'encoder': TINY_ENCODER,
        'classifier': {'hidden_dims': [16]},
        'training': {
            'epochs': 2,
            'batch_size': 4,
            'optimizer': {'kind': 'adam', 'learning_rate': 0.01},
            'checkpoint_every': 0,
        },
        'data': {
            'synthetic': {
                'kinds': ['sphere', 'cube'],
                'train_per_class': 4,
                'test_per_class': 2,
                'points': 32,
            },
            'points_per_cloud': 32,
        },
    }
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(document.get(key), dict):
            document[key] = {**document[key], **value}
        else:
            document[key] = value
    return document


def write_config(path: Path, document: dict) -> Path:
    path.write_text(json.dumps(document), encoding='utf-8')
    return path


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240617)


@pytest.fixture
def tiny_encoder_config() -> EncoderConfig:
    return EncoderConfig.model_validate(TINY_ENCODER)


@pytest.fixture
def tiny_config(tmp_path) -> RunConfig:
    return RunConfig.model_validate(tiny_run_document(tmp_path / 'run'))


@pytest.fixture
def make_config():
    def build(out_dir: Path, **overrides) -> RunConfig:
        return RunConfig.model_validate(tiny_run_document(out_dir, **overrides))
    return build
