# Copyright Amazon.com, Inc. or its affiliates. All Rights Reserved.
# SPDX-License-Identifier: MIT-0

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from point_ln.checkpoint import flatten, load_checkpoint
from point_ln.config import RunConfig
from point_ln.data import build_dataset
from point_ln.exceptions import ConfigurationError, NumericalError
from point_ln.trainer import METRICS_FILE, TIMINGS_FILE, Trainer, evaluation_report, init_model


def train(config, resume=None):
    return Trainer(config, build_dataset(config.data, config.seed), resume=resume).train()


def test_training_is_deterministic_across_thread_counts(tmp_path, make_config):
    serial = train(make_config(tmp_path / 'serial'))
    threaded = train(make_config(tmp_path / 'threaded', threads=3))
    assert (tmp_path / 'serial' / METRICS_FILE).read_bytes() == (tmp_path / 'threaded' / METRICS_FILE).read_bytes()
    assert_array_equal(flatten(serial.checkpoint.encoder, serial.checkpoint.classifier),
                       flatten(threaded.checkpoint.encoder, threaded.checkpoint.classifier))
    again = train(make_config(tmp_path / 'again'))
    assert [row.train_loss for row in again.metrics] == [row.train_loss for row in serial.metrics]


def test_metrics_rows(tmp_path, make_config):
    result = train(make_config(tmp_path))
    assert [row.epoch for row in result.metrics] == [1, 2]
    lines = (tmp_path / METRICS_FILE).read_text(encoding='utf-8').splitlines()
    assert len(lines) == 2
    assert lines[0].startswith('{"epoch": 1, "learning_rate"')
    assert len((tmp_path / TIMINGS_FILE).read_text(encoding='utf-8').splitlines()) == 2
    assert result.checkpoint_path == tmp_path / 'checkpoint.pln'
    assert all(0.0 <= row.test_acc <= 1.0 for row in result.metrics)


def test_zero_epochs_saves_initialization(tmp_path, make_config):
    config = make_config(tmp_path, training={'epochs': 0})
    result = train(config)
    assert result.metrics == []
    assert (tmp_path / METRICS_FILE).read_text(encoding='utf-8') == ''
    encoder, classifier = init_model(config, 2, np.random.default_rng(config.seed))
    loaded = load_checkpoint(result.checkpoint_path)
    assert_array_equal(flatten(loaded.encoder, loaded.classifier), flatten(encoder, classifier))
    assert loaded.epoch == 0


def test_periodic_checkpoints(tmp_path, make_config):
    train(make_config(tmp_path, training={'epochs': 3, 'checkpoint_every': 1}))
    names = sorted(path.name for path in tmp_path.glob('*.pln'))
    assert names == ['checkpoint-epoch0001.pln', 'checkpoint-epoch0002.pln', 'checkpoint.pln']
    assert load_checkpoint(tmp_path / 'checkpoint-epoch0002.pln').epoch == 2


def test_resume_matches_uninterrupted_run(tmp_path, make_config):
    straight = train(make_config(tmp_path / 'straight'))
    train(make_config(tmp_path / 'split', training={'epochs': 1}))
    resumed = train(make_config(tmp_path / 'split'), resume=load_checkpoint(tmp_path / 'split' / 'checkpoint.pln'))
    assert_array_equal(flatten(resumed.checkpoint.encoder, resumed.checkpoint.classifier),
                       flatten(straight.checkpoint.encoder, straight.checkpoint.classifier))
    assert (tmp_path / 'split' / METRICS_FILE).read_bytes() == (tmp_path / 'straight' / METRICS_FILE).read_bytes()


def test_resume_rejects_other_model(tmp_path, make_config):
    train(make_config(tmp_path / 'first', training={'epochs': 0}))
    checkpoint = load_checkpoint(tmp_path / 'first' / 'checkpoint.pln')
    other = make_config(tmp_path / 'second', classifier={'hidden_dims': [4]})
    with pytest.raises(ConfigurationError, match='different model config'):
        Trainer(other, build_dataset(other.data, other.seed), resume=checkpoint)


def test_non_finite_loss_stops_training(tmp_path, make_config):
    config = make_config(tmp_path)
    trainer = Trainer(config, build_dataset(config.data, config.seed))
    trainer.classifier.layers[-1].bias[...] = np.nan
    with pytest.raises(NumericalError, match='non-finite loss'):
        trainer.train()


def test_class_count_mismatch(tmp_path, make_config):
    config = make_config(tmp_path, classifier={'hidden_dims': [16], 'class_count': 3})
    with pytest.raises(ConfigurationError, match='width mismatch'):
        Trainer(config, build_dataset(config.data, config.seed))


def test_frozen_encoder_keeps_encoder_weights(tmp_path, make_config):
    config = make_config(tmp_path, training={'freeze_encoder': True})
    result = train(config)
    encoder, _ = init_model(config, 2, np.random.default_rng(config.seed))
    assert_array_equal(flatten(result.checkpoint.encoder, None), flatten(encoder, None))


def test_evaluation_report():
    report = evaluation_report([0, 0, 1], [0, 1, 1], ['a', 'b', 'c'])
    assert report.confusion_matrix == [[1, 1, 0], [0, 1, 0], [0, 0, 0]]
    assert report.accuracy == pytest.approx(2 / 3)
    assert report.per_class_accuracy == {'a': 0.5, 'b': 1.0, 'c': None}
    assert report.mean_class_accuracy == pytest.approx(0.75)
    assert report.class_counts == {'a': 2, 'b': 1, 'c': 0}
    assert [sum(row) for row in report.confusion_matrix] == [2, 1, 0]


def test_default_config_is_valid():
    assert RunConfig().encoder.feature_width == 720
