# Copyright Amazon.com, Inc. or its affiliates. All Rights Reserved.
# SPDX-License-Identifier: MIT-0

"""Mini-batch training and evaluation.

Each batch runs the per-sample forward/backward on a thread pool; the
per-sample gradients are then summed in sample order and averaged, so the
thread count never changes a result. Per-sample generators (augmentation
and dropout) are seeded from the run generator before dispatch.
"""

import json
import math
import time
from concurrent.futures import Executor, ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from aws_lambda_powertools import Logger
from pydantic import BaseModel, ConfigDict

from point_ln.checkpoint import Checkpoint, save_checkpoint
from point_ln.config import RunConfig
from point_ln.data import Dataset, LabeledCloud, augment
from point_ln.encoder import EncoderState, encode, encode_with_tape, init_encoder
from point_ln.exceptions import ConfigurationError, NumericalError
from point_ln.nn import (
    ClassifierState,
    GradientStore,
    OptimizerState,
    ParameterStore,
    backward,
    classifier_forward,
    classifier_forward_with_tape,
    count_parameters,
    create_optimizer,
    cross_entropy,
    cross_entropy_grad,
    init_classifier,
    optimizer_step,
    predict,
    scheduled_learning_rate,
)

logger = Logger(service='point-ln', child=True)

METRICS_FILE = 'metrics.jsonl'
TIMINGS_FILE = 'timings.jsonl'
FINAL_CHECKPOINT = 'checkpoint.pln'
_SEED_BOUND = 2 ** 63


class EpochMetrics(BaseModel):
    model_config = ConfigDict(extra='forbid', frozen=True)

    epoch: int
    learning_rate: float
    train_loss: float
    train_acc: float
    test_acc: Optional[float]


class EvaluationReport(BaseModel):
    model_config = ConfigDict(extra='forbid', frozen=True)

    split: str
    samples: int
    accuracy: float
    mean_class_accuracy: float
    per_class_accuracy: Dict[str, Optional[float]]
    class_counts: Dict[str, int]
    confusion_matrix: List[List[int]]


@dataclass
class SampleResult:
    loss: float
    correct: bool
    grads: GradientStore


@dataclass
class TrainingResult:
    checkpoint: Checkpoint
    metrics: List[EpochMetrics]
    checkpoint_path: Path


def resolve_class_count(config: RunConfig, dataset_classes: int) -> int:
    configured = config.classifier.class_count
    if configured is not None and configured != dataset_classes:
        raise ConfigurationError('width mismatch: classifier configured for {} classes, data has {}'.format(configured, dataset_classes))
    return dataset_classes


def init_model(config: RunConfig, class_count: int, rng: np.random.Generator) -> Tuple[EncoderState, ClassifierState]:
    dtype = np.dtype(config.precision)
    encoder = init_encoder(config.encoder, rng, dtype)
    classifier = init_classifier(config.classifier, config.encoder.feature_width, class_count, rng, dtype)
    return encoder, classifier


@contextmanager
def worker_pool(threads: int) -> Iterator[Optional[Executor]]:
    if threads <= 1:
        yield None
        return
    with ThreadPoolExecutor(max_workers=threads, thread_name_prefix='point-ln') as pool:
        yield pool


def _map(pool: Optional[Executor], fn, items: Sequence) -> List:
    if pool is None:
        return [fn(item) for item in items]
    return list(pool.map(fn, items))


def sample_gradient(encoder: EncoderState, classifier: ClassifierState, cloud: np.ndarray, label: int,
                    config: RunConfig, rng: np.random.Generator) -> SampleResult:
    output, tape = encode_with_tape(cloud, encoder)
    classifier_tape = classifier_forward_with_tape(output.global_feature, classifier, rng=rng, training=True)
    smoothing = config.training.label_smoothing
    loss = cross_entropy(classifier_tape.logits, label, smoothing)
    logits_grad = cross_entropy_grad(classifier_tape.logits, label, smoothing)
    grads = backward(tape, classifier_tape, logits_grad, train_encoder=not config.training.freeze_encoder)
    return SampleResult(loss=loss, correct=predict(classifier_tape.logits) == label, grads=grads)


def predict_clouds(encoder: EncoderState, classifier: ClassifierState, clouds: Sequence[np.ndarray],
                   pool: Optional[Executor] = None) -> np.ndarray:
    def run(cloud: np.ndarray) -> int:
        logits, _ = classifier_forward(encode(cloud, encoder).global_feature, classifier)
        return predict(logits)

    return np.array(_map(pool, run, clouds), dtype=np.int64)


def accuracy(encoder: EncoderState, classifier: ClassifierState, items: Sequence[LabeledCloud],
             pool: Optional[Executor] = None) -> Optional[float]:
    if not items:
        return None
    predictions = predict_clouds(encoder, classifier, [item.cloud for item in items], pool)
    labels = np.array([item.label for item in items])
    return float((predictions == labels).mean())


def evaluation_report(labels: Sequence[int], predictions: Sequence[int], class_names: Sequence[str],
                      split: str = 'test') -> EvaluationReport:
    count = len(class_names)
    truth = np.asarray(labels, dtype=np.int64)
    guessed = np.asarray(predictions, dtype=np.int64)
    confusion = np.zeros((count, count), dtype=np.int64)
    np.add.at(confusion, (truth, guessed), 1)
    totals = confusion.sum(axis=1)
    hits = np.diag(confusion)
    per_class = {}
    for name, total, hit in zip(class_names, totals, hits):
        per_class[name] = float(hit / total) if total else None
    present = [value for value in per_class.values() if value is not None]
    return EvaluationReport(
        split=split,
        samples=int(len(truth)),
        accuracy=float(hits.sum() / len(truth)) if len(truth) else 0.0,
        mean_class_accuracy=float(np.mean(present)) if present else 0.0,
        per_class_accuracy=per_class,
        class_counts={name: int(total) for name, total in zip(class_names, totals)},
        confusion_matrix=confusion.tolist()
    )


class Trainer:

    def __init__(self, config: RunConfig, dataset: Dataset, resume: Optional[Checkpoint] = None) -> None:
        self.config = config
        self.dataset = dataset
        self.out_dir = Path(config.output_dir)
        class_count = resolve_class_count(config, dataset.class_count)
        if not dataset.train:
            raise ConfigurationError('training split is empty')
        if resume is None:
            self.rng = np.random.default_rng(config.seed)
            self.encoder, self.classifier = init_model(config, class_count, self.rng)
            self.start_epoch = 0
            self.optimizer = None
        else:
            if resume.config.encoder != config.encoder or resume.config.classifier != config.classifier \
                    or resume.config.precision != config.precision:
                raise ConfigurationError('resume checkpoint was trained with a different model config')
            if list(resume.class_names) != list(dataset.class_names):
                raise ConfigurationError('resume checkpoint classes {} differ from data classes {}'.format(resume.class_names, dataset.class_names))
            self.rng = resume.restore_rng()
            self.encoder, self.classifier = resume.encoder, resume.classifier
            self.start_epoch = resume.epoch
            self.optimizer = resume.optimizer
        self.params = ParameterStore.bind(self.encoder, self.classifier)
        if self.optimizer is None:
            self.optimizer = create_optimizer(config.training.optimizer, len(self.params), config.training.epochs,
                                              dtype=self.params.values.dtype)
        self.optimizer.total_epochs = config.training.epochs

    def checkpoint(self, epoch: int) -> Checkpoint:
        return Checkpoint(
            config=self.config,
            encoder=self.encoder,
            classifier=self.classifier,
            class_names=list(self.dataset.class_names),
            epoch=epoch,
            rng_state=self.rng.bit_generator.state,
            optimizer=self.optimizer
        )

    def _train_epoch(self, epoch: int, pool: Optional[Executor]) -> Tuple[float, float]:
        training = self.config.training
        train = self.dataset.train
        order = self.rng.permutation(len(train))
        augmentation = self.config.data.augmentation
        total_loss, total_correct = 0.0, 0
        for start in range(0, len(order), training.batch_size):
            batch = [train[i] for i in order[start:start + training.batch_size]]
            seeds = self.rng.integers(0, _SEED_BOUND, size=len(batch))

            def run(job: Tuple[LabeledCloud, int]) -> SampleResult:
                item, seed = job
                rng = np.random.default_rng(seed)
                cloud = augment(item.cloud, augmentation, rng) if augmentation.enabled else item.cloud
                return sample_gradient(self.encoder, self.classifier, cloud, item.label, self.config, rng)

            results = _map(pool, run, list(zip(batch, seeds.tolist())))
            for item, result in zip(batch, results):
                if not math.isfinite(result.loss):
                    raise NumericalError('non-finite loss at epoch {} on {}'.format(epoch + 1, item.source_id))
            grads = GradientStore.sum([result.grads for result in results])
            grads.values /= len(batch)
            optimizer_step(self.params, grads, self.optimizer)
            total_loss += sum(result.loss for result in results)
            total_correct += sum(result.correct for result in results)
        return total_loss / len(train), total_correct / len(train)

    def train(self) -> TrainingResult:
        training = self.config.training
        self.out_dir.mkdir(parents=True, exist_ok=True)
        metrics_path = self.out_dir / METRICS_FILE
        timings_path = self.out_dir / TIMINGS_FILE
        mode = 'a' if self.start_epoch else 'w'
        logger.info(
            'Training started',
            epochs=training.epochs,
            start_epoch=self.start_epoch,
            parameters=count_parameters(self.encoder, self.classifier),
            classes=self.dataset.class_count,
            train=len(self.dataset.train),
            test=len(self.dataset.test),
            threads=self.config.threads
        )
        history = []
        with open(metrics_path, mode, encoding='utf-8', newline='\n') as metrics_file, \
                open(timings_path, mode, encoding='utf-8', newline='\n') as timings_file, \
                worker_pool(self.config.threads) as pool:
            for epoch in range(self.start_epoch, training.epochs):
                began = time.perf_counter()
                self.optimizer.epoch = epoch
                learning_rate = scheduled_learning_rate(self.optimizer)
                train_loss, train_acc = self._train_epoch(epoch, pool)
                test_acc = accuracy(self.encoder, self.classifier, self.dataset.test, pool)
                row = EpochMetrics(
                    epoch=epoch + 1,
                    learning_rate=learning_rate,
                    train_loss=train_loss,
                    train_acc=train_acc,
                    test_acc=test_acc
                )
                elapsed = time.perf_counter() - began
                metrics_file.write(json.dumps(row.model_dump(), sort_keys=True) + '\n')
                metrics_file.flush()
                timings_file.write(json.dumps({'epoch': epoch + 1, 'seconds': elapsed}, sort_keys=True) + '\n')
                timings_file.flush()
                history.append(row)
                logger.info('Epoch complete', seconds=round(elapsed, 3), **row.model_dump())
                self.optimizer.epoch = epoch + 1
                every = training.checkpoint_every
                if every and (epoch + 1) % every == 0 and epoch + 1 < training.epochs:
                    save_checkpoint(self.out_dir / 'checkpoint-epoch{:04d}.pln'.format(epoch + 1), self.checkpoint(epoch + 1))
        final_epoch = max(training.epochs, self.start_epoch)
        checkpoint = self.checkpoint(final_epoch)
        path = save_checkpoint(self.out_dir / FINAL_CHECKPOINT, checkpoint)
        logger.info('Training finished', epochs=final_epoch, checkpoint=str(path))
        return TrainingResult(checkpoint=checkpoint, metrics=history, checkpoint_path=path)
