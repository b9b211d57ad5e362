# Copyright Amazon.com, Inc. or its affiliates. All Rights Reserved.
# SPDX-License-Identifier: MIT-0

import csv
import json
from pathlib import Path

import numpy as np
import pytest

from conftest import tiny_run_document, write_config
from point_ln.cli import main
from point_ln.data import load_manifest, write_xyz
from point_ln.gradcheck import tiny_run_config

OFF_DIR = Path(__file__).parent / 'fixtures' / 'off'


def run_config(tmp_path, name='run.json', **overrides):
    return str(write_config(tmp_path / name, tiny_run_document(tmp_path / 'out', **overrides)))


def read_features(path):
    with open(path, encoding='utf-8', newline='') as f:
        rows = list(csv.reader(f))
    return rows[0], {row[0]: row[1:] for row in rows[1:]}


def test_gen_synthetic_is_reproducible(tmp_path, capsys):
    corpus = write_config(tmp_path / 'corpus.json', {
        'kinds': ['sphere', 'cube', 'cylinder', 'cone', 'torus'],
        'train_per_class': 8,
        'test_per_class': 2,
        'points': 64,
    })
    assert main(['gen-synthetic', '--config', str(corpus), '--seed', '3', '--out', str(tmp_path / 'first')]) == 0
    report = json.loads(capsys.readouterr().out)
    assert main(['gen-synthetic', '--config', str(corpus), '--seed', '3', '--out', str(tmp_path / 'second')]) == 0
    assert report['files'] == 50
    assert report['classes'] == 5

    first = sorted(path.relative_to(tmp_path / 'first') for path in (tmp_path / 'first').rglob('*.xyz'))
    assert len(first) == 50
    for relative in first + [Path('manifest.csv'), Path('classes.txt')]:
        assert (tmp_path / 'first' / relative).read_bytes() == (tmp_path / 'second' / relative).read_bytes()
    manifest = load_manifest(tmp_path / 'first' / 'manifest.csv')
    assert len(manifest.entries) == 50
    assert manifest.split_counts() == {'train': 40, 'test': 10}


def test_gen_synthetic_accepts_run_config(tmp_path):
    config = run_config(tmp_path)
    assert main(['gen-synthetic', '--config', config, '--out', str(tmp_path / 'corpus')]) == 0
    assert load_manifest(tmp_path / 'corpus' / 'manifest.csv').class_names == ['sphere', 'cube']


def test_train_is_deterministic(tmp_path, capsys):
    config = run_config(tmp_path)
    assert main(['train', '--config', config, '--out', str(tmp_path / 'a')]) == 0
    assert main(['train', '--config', config, '--out', str(tmp_path / 'b'), '--threads', '2']) == 0
    printed = capsys.readouterr().out.split()
    assert printed == [str(tmp_path / 'a' / 'checkpoint.pln'), str(tmp_path / 'b' / 'checkpoint.pln')]
    assert (tmp_path / 'a' / 'metrics.jsonl').read_bytes() == (tmp_path / 'b' / 'metrics.jsonl').read_bytes()

    first = (tmp_path / 'a' / 'checkpoint.pln').read_bytes()
    assert main(['train', '--config', config, '--out', str(tmp_path / 'a')]) == 0
    assert (tmp_path / 'a' / 'checkpoint.pln').read_bytes() == first


def test_train_then_eval_memorizes(tmp_path, capsys):
    config = run_config(
        tmp_path,
        training={'epochs': 100, 'batch_size': 4, 'optimizer': {'kind': 'adam', 'learning_rate': 0.01},
                  'checkpoint_every': 0},
        data={'synthetic': {'kinds': ['sphere', 'cube'], 'train_per_class': 4, 'test_per_class': 2, 'points': 32},
              'points_per_cloud': 32, 'augmentation': {'enabled': False}},
    )
    assert main(['train', '--config', config]) == 0
    checkpoint = capsys.readouterr().out.strip()

    assert main(['eval', checkpoint, '--config', config, '--split', 'train']) == 0
    report = json.loads(capsys.readouterr().out)
    assert report['samples'] == 8
    assert report['accuracy'] == 1.0
    assert [sum(row) for row in report['confusion_matrix']] == [report['class_counts'][name] for name in ('sphere', 'cube')]
    assert json.loads((tmp_path / 'out' / 'eval.json').read_text(encoding='utf-8')) == report

    assert main(['eval', checkpoint, '--config', config, '--split', 'train', '--permute']) == 0
    assert json.loads(capsys.readouterr().out)['accuracy'] == 1.0

    assert main(['eval', checkpoint, '--config', config]) == 0
    test_report = json.loads(capsys.readouterr().out)
    assert test_report['samples'] == 4
    assert sum(map(sum, test_report['confusion_matrix'])) == 4


def test_train_and_eval_from_manifest(tmp_path, capsys):
    corpus = write_config(tmp_path / 'corpus.json', {'kinds': ['cone', 'torus'], 'train_per_class': 3,
                                                     'test_per_class': 2, 'points': 40})
    assert main(['gen-synthetic', '--config', str(corpus), '--out', str(tmp_path / 'corpus')]) == 0
    manifest = tmp_path / 'corpus' / 'manifest.csv'
    config = run_config(tmp_path, training={'epochs': 1}, data={'manifest': str(manifest), 'points_per_cloud': 32})
    capsys.readouterr()
    assert main(['train', '--config', config]) == 0
    checkpoint = capsys.readouterr().out.strip()
    assert main(['eval', checkpoint, '--config', config, '--manifest', str(manifest)]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report['samples'] == 4
    assert set(report['per_class_accuracy']) == {'cone', 'torus'}


def test_featurize(tmp_path, capsys):
    rng = np.random.default_rng(5)
    cloud = rng.uniform(-1, 1, size=(64, 3))
    for name, points in (('a.xyz', cloud), ('b.xyz', cloud), ('c.xyz', cloud[rng.permutation(64)])):
        write_xyz(tmp_path / name, points)
    config = run_config(tmp_path, precision='float64', data={'points_per_cloud': 64})
    inputs = [str(tmp_path / name) for name in ('a.xyz', 'b.xyz', 'c.xyz')]
    assert main(['featurize', '--config', config] + inputs) == 0
    report = json.loads(capsys.readouterr().out)
    assert report['rows'] == 3
    assert report['width'] == 54

    header, rows = read_features(tmp_path / 'out' / 'features.csv')
    assert header == ['source_id'] + ['f{}'.format(i) for i in range(54)]
    assert rows[inputs[0]] == rows[inputs[1]]
    original = np.array(rows[inputs[0]], dtype=float)
    permuted = np.array(rows[inputs[2]], dtype=float)
    assert np.abs(original - permuted).max() <= 1e-5


def test_featurize_identity_weights_from_mesh(tmp_path, capsys):
    config = run_config(tmp_path, data={'points_per_cloud': 32})
    assert main(['featurize', '--config', config, '--weights', 'identity', str(OFF_DIR / 'quad.off')]) == 0
    assert json.loads(capsys.readouterr().out)['rows'] == 1


def test_bench(tmp_path, capsys):
    config = run_config(tmp_path)
    assert main(['bench', '--config', config, '--classes', '2', '--points', '64']) == 0
    report = json.loads(capsys.readouterr().out)
    assert report['iterations'] == 100
    assert report['parameters'] == report['encoder_parameters'] + report['classifier_parameters']
    assert report['p95_ms'] >= report['median_ms'] > 0
    assert json.loads((tmp_path / 'out' / 'bench.json').read_text(encoding='utf-8')) == report


def test_bench_default_config(tmp_path, capsys):
    assert main(['bench', '--out', str(tmp_path)]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report['points'] == 1024
    assert report['classes'] == 40
    assert report['iterations'] == 100
    assert report['parameters'] == 808888
    assert report['encoder_parameters'] == 298128
    assert report['p95_ms'] >= report['median_ms'] > 0
    assert report['throughput_per_second'] > 0


def test_bench_needs_enough_iterations(tmp_path):
    assert main(['bench', '--config', run_config(tmp_path), '--iterations', '50']) == 1


def test_grad_check_command(tmp_path, capsys):
    assert main(['grad-check', '--out', str(tmp_path)]) == 0
    assert json.loads(capsys.readouterr().out)['passed'] is True
    assert json.loads((tmp_path / 'grad-check.json').read_text(encoding='utf-8'))['parameters'] == 2048


def test_grad_check_incomplete_exits_with_three(tmp_path, capsys):
    document = tiny_run_config().model_dump(mode='json')
    for stage, k in zip(document['encoder']['stages'], (8, 4, 4, 2)):
        stage['k_neighbors'] = k
    document['output_dir'] = str(tmp_path)
    config = write_config(tmp_path / 'degenerate.json', document)
    assert main(['grad-check', '--config', str(config)]) == 3
    report = json.loads(capsys.readouterr().out)
    assert report['complete'] is False
    assert report['groups']['encoder.embed']['checked'] == 0


def test_invalid_config_exits_with_one(tmp_path):
    bad = write_config(tmp_path / 'bad.json', {'seed': -1})
    assert main(['train', '--config', str(bad)]) == 1
    (tmp_path / 'broken.json').write_text('{"seed": ', encoding='utf-8')
    assert main(['train', '--config', str(tmp_path / 'broken.json')]) == 1
    assert main(['train', '--config', 'no-such-preset']) == 1


def test_missing_manifest_exits_with_one(tmp_path):
    config = run_config(tmp_path, data={'manifest': str(tmp_path / 'missing.csv')})
    assert main(['train', '--config', config]) == 1


def test_malformed_mesh_exits_with_two(tmp_path):
    assert main(['featurize', '--config', run_config(tmp_path), str(OFF_DIR / 'bad_header.off')]) == 2


def test_usage_errors_exit_with_one():
    assert main(['train', '--bogus']) == 1
    assert main([]) == 1
    assert main(['eval']) == 1


def test_version(capsys):
    with pytest.raises(SystemExit) as info:
        main(['--version'])
    assert info.value.code == 0
    assert capsys.readouterr().out.startswith('point-ln ')
