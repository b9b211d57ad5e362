# Copyright Amazon.com, Inc. or its affiliates. All Rights Reserved.
# SPDX-License-Identifier: MIT-0

"""Finite-difference verification of the hand-written backward pass.

Every scalar of a tiny float64 model is nudged by +-h and the central
difference of the loss is compared to the analytic gradient. Two kinds of
coordinate are skipped and counted instead of compared:

* kinks: the nudge flips a ReLU mask, a pooling argmax or the set of
  near-constant normalized columns;
* ill-conditioned: the coordinate feeds a standardization whose column
  spread is rounding noise, or the central differences at h and h/2
  disagree, so neither approximates the derivative.

The check passes only when every parameter group has compared coordinates
and all of them are within tolerance.
"""

from typing import Callable, Dict, List, Optional, Set, Tuple

import numpy as np
from aws_lambda_powertools import Logger
from pydantic import BaseModel, ConfigDict

from point_ln.config import RunConfig, load_run_config
from point_ln.data import normalize_unit_sphere
from point_ln.encoder import encode_with_tape
from point_ln.exceptions import ConfigurationError
from point_ln.nn import (
    GradientStore,
    ParameterStore,
    backward,
    classifier_forward_with_tape,
    cross_entropy,
    cross_entropy_grad,
    parameter_group,
)
from point_ln.trainer import init_model

logger = Logger(service='point-ln', child=True)

PRESET = 'grad-check'
STEP = 1e-4
RELATIVE_TOLERANCE = 1e-4
ABSOLUTE_TOLERANCE = 1e-7
# h and h/2 estimates must agree this closely for the h estimate to be trusted.
CONSISTENCY_TOLERANCE = RELATIVE_TOLERANCE / 4
POINTS = 16
CLASSES = 2

GradientHook = Callable[[GradientStore], None]


class GroupResult(BaseModel):
    model_config = ConfigDict(extra='forbid', frozen=True)

    checked: int
    skipped: int
    max_relative_error: float


class GradCheckReport(BaseModel):
    model_config = ConfigDict(extra='forbid', frozen=True)

    passed: bool
    complete: bool
    parameters: int
    checked: int
    skipped_kinks: int
    skipped_ill_conditioned: int
    degenerate_stages: List[int]
    step: float
    tolerance: float
    max_relative_error: float
    worst_parameter: Optional[str]
    worst_coordinate: Optional[int]
    worst_analytic: Optional[float]
    worst_numeric: Optional[float]
    groups: Dict[str, GroupResult]


def tiny_run_config() -> RunConfig:
    return load_run_config(PRESET)


def coordinate_error(analytic: float, numeric: float) -> float:
    difference = abs(analytic - numeric)
    if difference <= ABSOLUTE_TOLERANCE:
        return 0.0
    return difference / max(abs(analytic), abs(numeric))


def upstream_groups(stage_number: int) -> Set[str]:
    """Parameter groups that feed the input features of a 1-based stage."""
    groups = {'encoder.embed'}
    for number in range(1, stage_number):
        groups.update({'encoder.stage{}.pre'.format(number), 'encoder.stage{}.post'.format(number)})
    return groups


def run_grad_check(config: Optional[RunConfig] = None, gradient_hook: Optional[GradientHook] = None,
                   points: int = POINTS, classes: int = CLASSES) -> GradCheckReport:
    config = config or tiny_run_config()
    if config.precision != 'float64':
        raise ConfigurationError('grad-check needs float64 precision')
    if config.classifier.dropout > 0:
        raise ConfigurationError('grad-check needs dropout disabled')
    rng = np.random.default_rng(config.seed)
    cloud = normalize_unit_sphere(rng.uniform(-1.0, 1.0, size=(points, 3)))
    label = int(rng.integers(classes))
    encoder, classifier = init_model(config, classes, rng)
    params = ParameterStore.bind(encoder, classifier)
    # Zero biases would start every unit exactly at its initialization.
    for name in params.names():
        if name.endswith('.bias'):
            params.view(name)[...] = rng.uniform(-0.1, 0.1, size=params.view(name).shape)
    params.touch()
    smoothing = config.training.label_smoothing

    def evaluate() -> Tuple[float, bytes, object, object]:
        output, tape = encode_with_tape(cloud, encoder)
        classifier_tape = classifier_forward_with_tape(output.global_feature, classifier)
        loss = cross_entropy(classifier_tape.logits, label, smoothing)
        return loss, tape.branch_signature() + classifier_tape.branch_signature(), tape, classifier_tape

    def central_difference(position: int, step: float) -> Tuple[float, bool]:
        original = params.values[position]
        params.values[position] = original + step
        params.touch()
        loss_plus, signature_plus, _, _ = evaluate()
        params.values[position] = original - step
        params.touch()
        loss_minus, signature_minus, _, _ = evaluate()
        params.values[position] = original
        params.touch()
        smooth = signature_plus == signature and signature_minus == signature
        return (loss_plus - loss_minus) / (2.0 * step), smooth

    _, signature, tape, classifier_tape = evaluate()
    degenerate = tape.degenerate_stages()
    ill_conditioned = upstream_groups(max(degenerate)) if degenerate else set()
    grads = backward(tape, classifier_tape, cross_entropy_grad(classifier_tape.logits, label, smoothing))
    if gradient_hook is not None:
        gradient_hook(grads)

    stats = {parameter_group(name): {'checked': 0, 'skipped': 0, 'max_relative_error': 0.0} for name in params.names()}
    worst = (-1.0, None, None, None, None)
    kinks = unstable = 0
    for position in range(len(params)):
        name, coordinate = params.locate(position)
        group = stats[parameter_group(name)]
        if parameter_group(name) in ill_conditioned:
            group['skipped'] += 1
            unstable += 1
            continue
        numeric, smooth = central_difference(position, STEP)
        if smooth:
            refined, smooth = central_difference(position, STEP / 2)
        if not smooth:
            group['skipped'] += 1
            kinks += 1
            continue
        if coordinate_error(numeric, refined) > CONSISTENCY_TOLERANCE:
            group['skipped'] += 1
            unstable += 1
            continue
        analytic = float(grads.values[position])
        error = coordinate_error(analytic, numeric)
        group['checked'] += 1
        group['max_relative_error'] = max(group['max_relative_error'], error)
        if error > worst[0]:
            worst = (error, name, coordinate, analytic, numeric)

    max_error, worst_name, worst_coordinate, worst_analytic, worst_numeric = worst
    groups = {group: GroupResult(**values) for group, values in stats.items()}
    checked = sum(group.checked for group in groups.values())
    complete = all(group.checked for group in groups.values())
    report = GradCheckReport(
        passed=complete and max_error <= RELATIVE_TOLERANCE,
        complete=complete,
        parameters=len(params),
        checked=checked,
        skipped_kinks=kinks,
        skipped_ill_conditioned=unstable,
        degenerate_stages=degenerate,
        step=STEP,
        tolerance=RELATIVE_TOLERANCE,
        max_relative_error=max(max_error, 0.0),
        worst_parameter=worst_name,
        worst_coordinate=worst_coordinate,
        worst_analytic=worst_analytic,
        worst_numeric=worst_numeric,
        groups=groups
    )
    if degenerate:
        logger.warning('Near-constant normalized columns; upstream groups not compared', stages=degenerate,
                       groups=sorted(ill_conditioned))
    logger.info(
        'Gradient check complete',
        passed=report.passed,
        complete=report.complete,
        max_relative_error=report.max_relative_error,
        worst_parameter=report.worst_parameter,
        checked=report.checked,
        skipped_kinks=report.skipped_kinks,
        skipped_ill_conditioned=report.skipped_ill_conditioned
    )
    return report
