# Copyright Amazon.com, Inc. or its affiliates. All Rights Reserved.
# SPDX-License-Identifier: MIT-0

"""Binary checkpoint format.

    b'PLN1' | header length (<Q) | JSON header (sorted keys) |
    float32 LE parameters | float32 LE optimizer buffers (optional)

The header carries the run config snapshot, the name -> (offset, shape)
index, the class names, the epoch counter and the run RNG state. Loading
rebuilds the model from the config snapshot and refuses payloads whose
index does not match it.
"""

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
from aws_lambda_powertools import Logger
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from point_ln.config import RunConfig
from point_ln.encoder import EncoderState, identity_encoder
from point_ln.exceptions import CheckpointError
from point_ln.nn import ClassifierState, LinearLayer, OptimizerState, ParameterStore, named_layers, parameter_index

logger = Logger(service='point-ln', child=True)

MAGIC = b'PLN1'
FORMAT_VERSION = 1
PAYLOAD_DTYPE = np.dtype('<f4')
_LENGTH = struct.Struct('<Q')


class OptimizerHeader(BaseModel):
    model_config = ConfigDict(extra='forbid')

    kind: str
    learning_rate: float
    total_epochs: int
    min_learning_rate: float
    momentum: float
    beta1: float
    beta2: float
    eps: float
    step: int = Field(ge=0)
    epoch: int = Field(ge=0)
    buffers: List[str]
    buffer_bytes: int = Field(ge=0)


class CheckpointHeader(BaseModel):
    model_config = ConfigDict(extra='forbid')

    format_version: int
    config: Dict[str, Any]
    index: Dict[str, Tuple[int, Tuple[int, ...]]]
    param_bytes: int = Field(ge=0)
    class_names: List[str]
    epoch: int = Field(ge=0)
    rng_state: Dict[str, Any]
    optimizer: Optional[OptimizerHeader] = None


@dataclass
class Checkpoint:
    config: RunConfig
    encoder: EncoderState
    classifier: ClassifierState
    class_names: List[str]
    epoch: int
    rng_state: Dict[str, Any]
    optimizer: Optional[OptimizerState] = None

    def restore_rng(self) -> np.random.Generator:
        rng = np.random.default_rng()
        try:
            rng.bit_generator.state = self.rng_state
        except (TypeError, ValueError, KeyError) as e:
            raise CheckpointError('cannot restore RNG state: {}'.format(e))
        return rng


def blank_model(config: RunConfig, class_count: int) -> Tuple[EncoderState, ClassifierState]:
    """Correctly shaped states to unpack a parameter vector into."""
    dtype = np.dtype(config.precision)
    widths = [config.encoder.feature_width] + list(config.classifier.hidden_dims) + [class_count]
    classifier = ClassifierState(
        layers=[
            LinearLayer(weight=np.zeros((b, a), dtype=dtype), bias=np.zeros(b, dtype=dtype))
            for a, b in zip(widths, widths[1:])
        ],
        class_count=class_count,
        activation=config.classifier.activation,
        dropout=config.classifier.dropout
    )
    return identity_encoder(config.encoder, dtype), classifier


def _encode_index(index) -> Dict[str, List]:
    return {name: [offset, list(shape)] for name, (offset, shape) in index.items()}


def flatten(encoder: EncoderState, classifier: ClassifierState) -> np.ndarray:
    """Parameter vector in index order, leaving the layers' arrays untouched."""
    arrays = []
    for _, layer in named_layers(encoder, classifier):
        arrays.extend((layer.weight.ravel(), layer.bias.ravel()))
    return np.concatenate(arrays)


def to_bytes(checkpoint: Checkpoint) -> bytes:
    index = parameter_index(checkpoint.encoder, checkpoint.classifier)
    payload = flatten(checkpoint.encoder, checkpoint.classifier).astype(PAYLOAD_DTYPE).tobytes()
    optimizer_header, optimizer_payload = None, b''
    opt = checkpoint.optimizer
    if opt is not None:
        names = list(opt.buffer_names())
        optimizer_payload = b''.join(opt.buffers[name].astype(PAYLOAD_DTYPE).tobytes() for name in names)
        optimizer_header = {
            'kind': opt.kind,
            'learning_rate': opt.learning_rate,
            'total_epochs': opt.total_epochs,
            'min_learning_rate': opt.min_learning_rate,
            'momentum': opt.momentum,
            'beta1': opt.beta1,
            'beta2': opt.beta2,
            'eps': opt.eps,
            'step': opt.step,
            'epoch': opt.epoch,
            'buffers': names,
            'buffer_bytes': len(optimizer_payload),
        }
    header = {
        'format_version': FORMAT_VERSION,
        'config': checkpoint.config.model_dump(mode='json'),
        'index': _encode_index(index),
        'param_bytes': len(payload),
        'class_names': list(checkpoint.class_names),
        'epoch': checkpoint.epoch,
        'rng_state': checkpoint.rng_state,
        'optimizer': optimizer_header,
    }
    encoded = json.dumps(header, sort_keys=True, separators=(',', ':')).encode('utf-8')
    return MAGIC + _LENGTH.pack(len(encoded)) + encoded + payload + optimizer_payload


def from_bytes(blob: bytes) -> Checkpoint:
    if len(blob) < len(MAGIC) + _LENGTH.size or not blob.startswith(MAGIC):
        raise CheckpointError('not a checkpoint: bad magic bytes')
    (header_length,) = _LENGTH.unpack_from(blob, len(MAGIC))
    start = len(MAGIC) + _LENGTH.size
    if start + header_length > len(blob):
        raise CheckpointError('truncated checkpoint header')
    try:
        header = CheckpointHeader.model_validate(json.loads(blob[start:start + header_length].decode('utf-8')))
        config = RunConfig.model_validate(header.config)
    except (UnicodeDecodeError, json.JSONDecodeError, ValidationError) as e:
        raise CheckpointError('invalid checkpoint header: {}'.format(e))
    if header.format_version != FORMAT_VERSION:
        raise CheckpointError('unsupported checkpoint format version {}'.format(header.format_version))

    encoder, classifier = blank_model(config, len(header.class_names))
    params = ParameterStore.bind(encoder, classifier)
    if header.index != params.index:
        raise CheckpointError('parameter index does not match the config snapshot')
    offset = start + header_length
    optimizer_bytes = header.optimizer.buffer_bytes if header.optimizer else 0
    if len(blob) != offset + header.param_bytes + optimizer_bytes:
        raise CheckpointError('payload size does not match the header')
    if header.param_bytes != len(params) * PAYLOAD_DTYPE.itemsize:
        raise CheckpointError('parameter payload has {} bytes, expected {}'.format(header.param_bytes, len(params) * PAYLOAD_DTYPE.itemsize))
    params.unpack(np.frombuffer(blob, dtype=PAYLOAD_DTYPE, count=len(params), offset=offset).astype(params.values.dtype))
    offset += header.param_bytes

    optimizer = None
    if header.optimizer is not None:
        spec = header.optimizer
        optimizer = OptimizerState(
            kind=spec.kind,
            learning_rate=spec.learning_rate,
            total_epochs=spec.total_epochs,
            min_learning_rate=spec.min_learning_rate,
            momentum=spec.momentum,
            beta1=spec.beta1,
            beta2=spec.beta2,
            eps=spec.eps,
            step=spec.step,
            epoch=spec.epoch
        )
        if list(optimizer.buffer_names()) != spec.buffers:
            raise CheckpointError('optimizer buffers {} do not match kind {}'.format(spec.buffers, spec.kind))
        if spec.buffer_bytes != len(spec.buffers) * len(params) * PAYLOAD_DTYPE.itemsize:
            raise CheckpointError('optimizer payload size does not match the parameter count')
        for name in spec.buffers:
            buffer = np.frombuffer(blob, dtype=PAYLOAD_DTYPE, count=len(params), offset=offset)
            optimizer.buffers[name] = buffer.astype(params.values.dtype)
            offset += len(params) * PAYLOAD_DTYPE.itemsize

    return Checkpoint(
        config=config,
        encoder=encoder,
        classifier=classifier,
        class_names=header.class_names,
        epoch=header.epoch,
        rng_state=header.rng_state,
        optimizer=optimizer
    )


def save_checkpoint(path: Union[str, Path], checkpoint: Checkpoint) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    blob = to_bytes(checkpoint)
    target.write_bytes(blob)
    logger.info('Checkpoint saved', path=str(target), epoch=checkpoint.epoch, size=len(blob))
    return target


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    source = Path(path)
    try:
        blob = source.read_bytes()
    except OSError as e:
        raise CheckpointError('cannot read checkpoint {}: {}'.format(source, e.strerror or e))
    checkpoint = from_bytes(blob)
    logger.info('Checkpoint loaded', path=str(source), epoch=checkpoint.epoch)
    return checkpoint
