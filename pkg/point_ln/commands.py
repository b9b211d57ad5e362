# Copyright Amazon.com, Inc. or its affiliates. All Rights Reserved.
# SPDX-License-Identifier: MIT-0

import csv
import json
import time
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from aws_lambda_powertools import Logger
from pydantic import BaseModel, ConfigDict

from point_ln.checkpoint import Checkpoint, load_checkpoint
from point_ln.config import RunConfig, SyntheticCorpusConfig
from point_ln.data import (
    Dataset,
    build_dataset,
    load_dataset,
    load_manifest,
    prepare_cloud,
    synthetic_seed,
    write_synthetic_corpus,
)
from point_ln.encoder import EncoderState, encode, identity_encoder, init_encoder
from point_ln.exceptions import ConfigurationError, DataError, NumericalError
from point_ln.gradcheck import GradCheckReport, run_grad_check
from point_ln.nn import classifier_forward, count_parameters
from point_ln.trainer import EvaluationReport, Trainer, TrainingResult, evaluation_report, init_model, predict_clouds, worker_pool

logger = Logger(service='point-ln', child=True)

MIN_BENCH_ITERATIONS = 100
WARMUP_ITERATIONS = 5


class BenchReport(BaseModel):
    model_config = ConfigDict(extra='forbid', frozen=True)

    parameters: int
    encoder_parameters: int
    classifier_parameters: int
    classes: int
    points: int
    iterations: int
    mean_ms: float
    median_ms: float
    p95_ms: float
    throughput_per_second: float


class FeaturizeReport(BaseModel):
    model_config = ConfigDict(extra='forbid', frozen=True)

    rows: int
    width: int
    path: str


class GenSyntheticReport(BaseModel):
    model_config = ConfigDict(extra='forbid', frozen=True)

    manifest: str
    classes: int
    files: int


def write_json(path: Path, payload: dict) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + '\n', encoding='utf-8')
    return path


def cmd_train(config: RunConfig, resume: Optional[Path] = None) -> TrainingResult:
    config.validate_paths()
    checkpoint = load_checkpoint(resume) if resume is not None else None
    dataset = build_dataset(config.data, config.seed, config.threads)
    return Trainer(config, dataset, resume=checkpoint).train()


def _eval_dataset(checkpoint: Checkpoint, config: RunConfig, manifest: Optional[Path], split: str) -> Dataset:
    if manifest is not None:
        loaded = load_manifest(manifest)
        data_cfg = config.data
        return Dataset(
            class_names=loaded.class_names,
            **{split: load_dataset(loaded, split, data_cfg, config.seed, config.threads)}
        )
    if config.data.manifest is not None:
        return build_dataset(config.data, config.seed, config.threads)
    # Rebuild the corpus the checkpoint was trained on.
    return build_dataset(checkpoint.config.data, checkpoint.config.seed, config.threads)


def cmd_eval(config: RunConfig, checkpoint_path: Path, manifest: Optional[Path] = None, split: str = 'test',
             permute: bool = False) -> EvaluationReport:
    checkpoint = load_checkpoint(checkpoint_path)
    dataset = _eval_dataset(checkpoint, config, manifest, split)
    if dataset.class_count != len(checkpoint.class_names):
        raise ConfigurationError('width mismatch: checkpoint has {} classes, data has {}'.format(len(checkpoint.class_names), dataset.class_count))
    items = dataset.split(split)
    if not items:
        raise DataError('split {} is empty'.format(split))
    clouds = [item.cloud for item in items]
    if permute:
        rng = np.random.default_rng(config.seed)
        clouds = [cloud[rng.permutation(len(cloud))] for cloud in clouds]
    with worker_pool(config.threads) as pool:
        predictions = predict_clouds(checkpoint.encoder, checkpoint.classifier, clouds, pool)
    report = evaluation_report([item.label for item in items], predictions, checkpoint.class_names, split=split)
    write_json(Path(config.output_dir) / 'eval.json', report.model_dump())
    logger.info('Evaluation complete', split=split, samples=report.samples, accuracy=report.accuracy,
                mean_class_accuracy=report.mean_class_accuracy)
    return report


def _featurize_encoder(config: RunConfig, checkpoint_path: Optional[Path], weights: str) -> EncoderState:
    if checkpoint_path is not None:
        return load_checkpoint(checkpoint_path).encoder
    dtype = np.dtype(config.precision)
    if weights == 'identity':
        return identity_encoder(config.encoder, dtype)
    if weights == 'init':
        return init_encoder(config.encoder, np.random.default_rng(config.seed), dtype)
    raise ConfigurationError('unknown weights: {}'.format(weights))


def cmd_featurize(config: RunConfig, inputs: Sequence[Path] = (), manifest: Optional[Path] = None,
                  checkpoint_path: Optional[Path] = None, weights: str = 'init') -> FeaturizeReport:
    if not inputs and manifest is None:
        raise ConfigurationError('featurize needs input clouds or --manifest')
    encoder = _featurize_encoder(config, checkpoint_path, weights)
    sources: List[str] = []
    clouds: List[np.ndarray] = []
    for number, path in enumerate(inputs):
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, number]))
        sources.append(str(path))
        clouds.append(prepare_cloud(path, config.data, rng))
    if manifest is not None:
        loaded = load_manifest(manifest)
        for split in ('train', 'test'):
            for item in load_dataset(loaded, split, config.data, config.seed, config.threads):
                sources.append(item.source_id)
                clouds.append(item.cloud)

    with worker_pool(config.threads) as pool:
        run = (lambda cloud: encode(cloud, encoder).global_feature)
        features = list(pool.map(run, clouds)) if pool is not None else [run(cloud) for cloud in clouds]

    width = encoder.config.feature_width
    out_path = Path(config.output_dir) / 'features.csv'
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, 'w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(['source_id'] + ['f{}'.format(i) for i in range(width)])
        for source, feature in zip(sources, features):
            writer.writerow([source] + ['{:.9g}'.format(value) for value in feature.tolist()])
    logger.info('Features written', path=str(out_path), rows=len(features), width=width)
    return FeaturizeReport(rows=len(features), width=width, path=str(out_path))


def cmd_bench(config: RunConfig, classes: int = 40, points: int = 1024,
              iterations: int = MIN_BENCH_ITERATIONS) -> BenchReport:
    if iterations < MIN_BENCH_ITERATIONS:
        raise ConfigurationError('bench needs at least {} iterations'.format(MIN_BENCH_ITERATIONS))
    if classes < 1:
        raise ConfigurationError('bench needs at least one class')
    rng = np.random.default_rng(config.seed)
    encoder, classifier = init_model(config, classes, rng)
    g = rng.standard_normal((points, 3))
    cloud = g / np.linalg.norm(g, axis=1, keepdims=True)

    def run_once() -> None:
        logits, _ = classifier_forward(encode(cloud, encoder).global_feature, classifier)
        if not np.all(np.isfinite(logits)):
            raise NumericalError('non-finite logits during bench')

    for _ in range(WARMUP_ITERATIONS):
        run_once()
    latencies = np.empty(iterations)
    for i in range(iterations):
        began = time.perf_counter()
        run_once()
        latencies[i] = time.perf_counter() - began
    latencies_ms = latencies * 1000.0
    report = BenchReport(
        parameters=count_parameters(encoder, classifier),
        encoder_parameters=count_parameters(encoder, None),
        classifier_parameters=count_parameters(None, classifier),
        classes=classes,
        points=points,
        iterations=iterations,
        mean_ms=float(latencies_ms.mean()),
        median_ms=float(np.median(latencies_ms)),
        p95_ms=float(np.percentile(latencies_ms, 95)),
        throughput_per_second=float(iterations / latencies.sum())
    )
    write_json(Path(config.output_dir) / 'bench.json', report.model_dump())
    logger.info('Benchmark complete', **report.model_dump())
    return report


def cmd_gen_synthetic(corpus: SyntheticCorpusConfig, seed: int, out_dir: Path) -> GenSyntheticReport:
    manifest_path = write_synthetic_corpus(corpus, synthetic_seed(corpus, seed), out_dir)
    manifest = load_manifest(manifest_path)
    return GenSyntheticReport(manifest=str(manifest_path), classes=manifest.class_count, files=len(manifest.entries))


def cmd_grad_check(config: Optional[RunConfig] = None, gradient_hook=None) -> GradCheckReport:
    report = run_grad_check(config, gradient_hook=gradient_hook)
    if config is not None:
        write_json(Path(config.output_dir) / 'grad-check.json', report.model_dump())
    return report
