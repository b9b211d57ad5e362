# Copyright Amazon.com, Inc. or its affiliates. All Rights Reserved.
# SPDX-License-Identifier: MIT-0

"""Learnable surface of the classifier.

Gradients are derived by hand for the fixed graph
classifier -> cross-stage pooling -> post layer -> aggregation -> pre layer
-> neighbor pooling -> standardization -> gather -> embed layer.
Sampling and neighbor indices are constants of the forward pass and the
positional encodings have no parameters, so neither receives a gradient.
"""

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import numpy.typing as npt
from aws_lambda_powertools import Logger

from point_ln.config import ClassifierConfig, OptimizerConfig
from point_ln.exceptions import ConfigurationError, DataError, ShapeError, TapeMismatchError

if TYPE_CHECKING:
    from point_ln.encoder import EncoderState, ForwardTape

logger = Logger(service='point-ln', child=True)

ParameterIndex = Dict[str, Tuple[int, Tuple[int, ...]]]


@dataclass
class LinearLayer:
    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self) -> None:
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError('linear layer weight {} and bias {} do not agree'.format(self.weight.shape, self.bias.shape))

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def parameter_count(self) -> int:
        return self.weight.size + self.bias.size


def init_linear(in_dim: int, out_dim: int, rng: np.random.Generator, dtype: npt.DTypeLike = np.float32) -> LinearLayer:
    bound = math.sqrt(6.0 / in_dim)
    return LinearLayer(
        weight=rng.uniform(-bound, bound, size=(out_dim, in_dim)).astype(dtype),
        bias=np.zeros(out_dim, dtype=dtype)
    )


def identity_linear(in_dim: int, out_dim: int, dtype: npt.DTypeLike = np.float32) -> LinearLayer:
    return LinearLayer(weight=np.eye(out_dim, in_dim, dtype=dtype), bias=np.zeros(out_dim, dtype=dtype))


def linear_forward(x: npt.ArrayLike, layer: LinearLayer) -> np.ndarray:
    values = np.asarray(x)
    if values.shape[-1] != layer.in_dim:
        raise ShapeError('width mismatch: input has {} channels, layer expects {}'.format(values.shape[-1], layer.in_dim))
    flat = values.reshape(-1, layer.in_dim) @ layer.weight.T + layer.bias
    return flat.reshape(values.shape[:-1] + (layer.out_dim,))


def _relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def _relu_grad(x: np.ndarray) -> np.ndarray:
    return (x > 0).astype(x.dtype)


def _identity(x: np.ndarray) -> np.ndarray:
    return x


def _identity_grad(x: np.ndarray) -> np.ndarray:
    return np.ones_like(x)


ACTIVATIONS: Dict[str, Tuple[Callable[[np.ndarray], np.ndarray], Callable[[np.ndarray], np.ndarray]]] = {
    'relu': (_relu, _relu_grad),
    'identity': (_identity, _identity_grad),
}


def activation(name: str) -> Callable[[np.ndarray], np.ndarray]:
    try:
        return ACTIVATIONS[name][0]
    except KeyError:
        raise ConfigurationError('unknown activation: {}'.format(name))


def activation_grad(name: str) -> Callable[[np.ndarray], np.ndarray]:
    try:
        return ACTIVATIONS[name][1]
    except KeyError:
        raise ConfigurationError('unknown activation: {}'.format(name))


@dataclass
class ClassifierState:
    layers: List[LinearLayer]
    class_count: int
    activation: str = 'relu'
    dropout: float = 0.0
    generation: int = 0

    def __post_init__(self) -> None:
        if self.layers and self.layers[-1].out_dim != self.class_count:
            raise ShapeError('last classifier layer must output {} classes'.format(self.class_count))
        for previous, layer in zip(self.layers, self.layers[1:]):
            if previous.out_dim != layer.in_dim:
                raise ShapeError('classifier layers do not chain: {} -> {}'.format(previous.out_dim, layer.in_dim))

    @property
    def in_dim(self) -> Optional[int]:
        return self.layers[0].in_dim if self.layers else None

    def named_layers(self) -> Iterator[Tuple[str, LinearLayer]]:
        for number, layer in enumerate(self.layers, start=1):
            yield 'classifier.layer{}'.format(number), layer


def init_classifier(cfg: ClassifierConfig, in_dim: int, class_count: int, rng: np.random.Generator,
                    dtype: npt.DTypeLike = np.float32) -> ClassifierState:
    widths = [in_dim] + list(cfg.hidden_dims) + [class_count]
    return ClassifierState(
        layers=[init_linear(a, b, rng, dtype) for a, b in zip(widths, widths[1:])],
        class_count=class_count,
        activation=cfg.activation,
        dropout=cfg.dropout
    )


@dataclass
class ClassifierTape:
    state: ClassifierState
    generation: int
    features: np.ndarray
    inputs: List[np.ndarray]
    pre_activations: List[np.ndarray]
    masks: List[Optional[np.ndarray]]
    logits: np.ndarray
    probabilities: np.ndarray

    def branch_signature(self) -> bytes:
        return b''.join(np.packbits(z > 0).tobytes() for z in self.pre_activations[:-1])


def softmax(logits: npt.ArrayLike) -> np.ndarray:
    z = np.asarray(logits)
    exp = np.exp(z - z.max(axis=-1, keepdims=True))
    return exp / exp.sum(axis=-1, keepdims=True)


def log_softmax(logits: npt.ArrayLike) -> np.ndarray:
    z = np.asarray(logits)
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def classifier_forward_with_tape(features: npt.ArrayLike, state: ClassifierState, rng: Optional[np.random.Generator] = None,
                                 training: bool = False) -> ClassifierTape:
    x = np.asarray(features)
    if state.in_dim is not None and x.shape[-1] != state.in_dim:
        raise ShapeError('width mismatch: feature has {} channels, classifier expects {}'.format(x.shape[-1], state.in_dim))
    if not state.layers and x.shape[-1] != state.class_count:
        raise ShapeError('width mismatch: feature has {} channels for {} classes'.format(x.shape[-1], state.class_count))
    act = activation(state.activation)
    features = x
    inputs, pre_activations, masks = [], [], []
    last = len(state.layers) - 1
    for number, layer in enumerate(state.layers):
        inputs.append(x)
        z = linear_forward(x, layer)
        pre_activations.append(z)
        mask = None
        if number < last:
            x = act(z)
            if training and state.dropout > 0:
                if rng is None:
                    raise ConfigurationError('dropout in training mode needs an rng')
                keep = 1.0 - state.dropout
                mask = ((rng.random(z.shape) < keep) / keep).astype(z.dtype)
                x = x * mask
        else:
            x = z
        masks.append(mask)
    return ClassifierTape(
        state=state,
        generation=state.generation,
        features=features,
        inputs=inputs,
        pre_activations=pre_activations,
        masks=masks,
        logits=x,
        probabilities=softmax(x)
    )


def classifier_forward(features: npt.ArrayLike, state: ClassifierState) -> Tuple[np.ndarray, np.ndarray]:
    tape = classifier_forward_with_tape(features, state)
    return tape.logits, tape.probabilities


def predict(y: npt.ArrayLike) -> int:
    # np.argmax returns the first maximum, i.e. the smallest index on ties.
    return int(np.argmax(np.asarray(y)))


def smoothed_target(class_count: int, label: int, smoothing: float, dtype: npt.DTypeLike = np.float64) -> np.ndarray:
    if not 0 <= label < class_count:
        raise DataError('label {} out of range for {} classes'.format(label, class_count))
    if not 0.0 <= smoothing < 1.0:
        raise ConfigurationError('label smoothing must be in [0, 1)')
    target = np.full(class_count, smoothing / class_count, dtype=dtype)
    target[label] += 1.0 - smoothing
    return target


def cross_entropy(logits: npt.ArrayLike, label: int, smoothing: float = 0.0) -> float:
    z = np.asarray(logits, dtype=np.float64)
    target = smoothed_target(len(z), label, smoothing)
    return float(-(target * log_softmax(z)).sum())


def cross_entropy_grad(logits: npt.ArrayLike, label: int, smoothing: float = 0.0) -> np.ndarray:
    z = np.asarray(logits)
    return softmax(z) - smoothed_target(len(z), label, smoothing, dtype=z.dtype)


def named_layers(encoder: Optional['EncoderState'], classifier: Optional[ClassifierState]) -> List[Tuple[str, LinearLayer]]:
    layers = []
    if encoder is not None:
        layers.extend(encoder.named_layers())
    if classifier is not None:
        layers.extend(classifier.named_layers())
    return layers


def parameter_index(encoder: Optional['EncoderState'], classifier: Optional[ClassifierState]) -> ParameterIndex:
    index, offset = {}, 0
    for prefix, layer in named_layers(encoder, classifier):
        for name, array in (('weight', layer.weight), ('bias', layer.bias)):
            index['{}.{}'.format(prefix, name)] = (offset, array.shape)
            offset += array.size
    return index


def index_size(index: ParameterIndex) -> int:
    return sum(int(np.prod(shape, dtype=np.int64)) for _, shape in index.values())


def parameter_group(name: str) -> str:
    return name.rsplit('.', 1)[0]


class _FlatStore:

    def __init__(self, index: ParameterIndex, values: np.ndarray) -> None:
        if len(values) != index_size(index):
            raise ShapeError('store has {} values, index describes {}'.format(len(values), index_size(index)))
        self.index = index
        self.values = values

    def __len__(self) -> int:
        return len(self.values)

    def names(self) -> List[str]:
        return list(self.index)

    def view(self, name: str) -> np.ndarray:
        offset, shape = self.index[name]
        size = int(np.prod(shape, dtype=np.int64))
        return self.values[offset:offset + size].reshape(shape)

    def locate(self, position: int) -> Tuple[str, int]:
        for name, (offset, shape) in self.index.items():
            size = int(np.prod(shape, dtype=np.int64))
            if offset <= position < offset + size:
                return name, position - offset
        raise IndexError(position)


class GradientStore(_FlatStore):

    @classmethod
    def zeros(cls, index: ParameterIndex, dtype: npt.DTypeLike = np.float32) -> 'GradientStore':
        return cls(index, np.zeros(index_size(index), dtype=dtype))

    @classmethod
    def sum(cls, stores: Sequence['GradientStore']) -> 'GradientStore':
        if not stores:
            raise ConfigurationError('nothing to sum')
        total = cls(stores[0].index, stores[0].values.copy())
        for store in stores[1:]:
            if store.index != total.index:
                raise ShapeError('gradient stores have different layouts')
            total.values += store.values
        return total


class ParameterStore(_FlatStore):
    """Flat vector over every learnable scalar.

    `bind` rebinds each layer's arrays to views of the vector, so an
    optimizer update of `values` is an update of the model.
    """

    def __init__(self, index: ParameterIndex, values: np.ndarray, owners: Sequence[object] = ()) -> None:
        super().__init__(index, values)
        self.owners = list(owners)

    @classmethod
    def bind(cls, encoder: Optional['EncoderState'], classifier: Optional[ClassifierState]) -> 'ParameterStore':
        layers = named_layers(encoder, classifier)
        dtypes = {layer.weight.dtype for _, layer in layers}
        if len(dtypes) > 1:
            raise ConfigurationError('all layers must share one dtype, got {}'.format(sorted(map(str, dtypes))))
        index = parameter_index(encoder, classifier)
        values = np.empty(index_size(index), dtype=dtypes.pop() if dtypes else np.float32)
        for prefix, layer in layers:
            for name in ('weight', 'bias'):
                offset, shape = index['{}.{}'.format(prefix, name)]
                array = getattr(layer, name)
                values[offset:offset + array.size] = array.ravel()
                setattr(layer, name, values[offset:offset + array.size].reshape(shape))
        owners = [owner for owner in (encoder, classifier) if owner is not None]
        return cls(index, values, owners)

    def pack(self) -> np.ndarray:
        return self.values.copy()

    def unpack(self, vector: npt.ArrayLike) -> None:
        incoming = np.asarray(vector)
        if incoming.shape != self.values.shape:
            raise ShapeError('parameter vector has {} values, store holds {}'.format(incoming.size, len(self)))
        self.values[...] = incoming
        self.touch()

    def touch(self) -> None:
        for owner in self.owners:
            owner.generation += 1


def count_parameters(encoder: Optional['EncoderState'], classifier: Optional[ClassifierState]) -> int:
    return sum(layer.parameter_count for _, layer in named_layers(encoder, classifier))


def standardize_backward(grad: np.ndarray, centered: np.ndarray, std: np.ndarray, epsilon: float) -> np.ndarray:
    k = centered.shape[-2]
    denominator = std + epsilon
    centered_grad = grad / denominator
    denominator_grad = -(grad * centered).sum(axis=-2, keepdims=True) / (denominator * denominator)
    safe_std = np.where(std > 0, std, 1)
    centered_grad = centered_grad + denominator_grad * centered / (k * safe_std)
    return centered_grad - centered_grad.mean(axis=-2, keepdims=True)


def scatter_add_rows(rows: np.ndarray, indices: npt.ArrayLike, count: int) -> np.ndarray:
    """Sum each row of `rows` into slot `indices[i]` of a `count`-row zero block."""
    targets = np.asarray(indices, dtype=np.intp).ravel()
    if len(targets) != len(rows):
        raise ShapeError('scatter needs one index per row, got {} for {}'.format(len(targets), len(rows)))
    result = np.zeros((count,) + rows.shape[1:], dtype=rows.dtype)
    if len(targets) == 0:
        return result
    order = np.argsort(targets, kind='stable')
    ordered = targets[order]
    starts = np.flatnonzero(np.concatenate(([True], ordered[1:] != ordered[:-1])))
    result[ordered[starts]] = np.add.reduceat(rows[order], starts, axis=0)
    return result


def _accumulate(grads: GradientStore, prefix: str, output_grad: np.ndarray, inputs: np.ndarray) -> None:
    flat_grad = output_grad.reshape(-1, output_grad.shape[-1])
    flat_inputs = inputs.reshape(-1, inputs.shape[-1])
    grads.view(prefix + '.weight')[...] += flat_grad.T @ flat_inputs
    grads.view(prefix + '.bias')[...] += flat_grad.sum(axis=0)


def classifier_backward(tape: ClassifierTape, logits_grad: npt.ArrayLike,
                        grads: Optional[GradientStore] = None) -> Tuple[GradientStore, np.ndarray]:
    state = tape.state
    if grads is None:
        grads = GradientStore.zeros(parameter_index(None, state), dtype=tape.logits.dtype)
    grad_fn = activation_grad(state.activation)
    current = np.asarray(logits_grad, dtype=tape.logits.dtype)
    last = len(state.layers)
    for number in range(last, 0, -1):
        layer = state.layers[number - 1]
        if number < last:
            mask = tape.masks[number - 1]
            if mask is not None:
                current = current * mask
            current = current * grad_fn(tape.pre_activations[number - 1])
        prefix = 'classifier.layer{}'.format(number)
        grads.view(prefix + '.weight')[...] += np.outer(current, tape.inputs[number - 1])
        grads.view(prefix + '.bias')[...] += current
        current = layer.weight.T @ current
    return grads, current


def encoder_backward(tape: 'ForwardTape', feature_grad: np.ndarray, grads: GradientStore) -> None:
    state = tape.state
    cfg = state.config
    grad_fn = activation_grad(cfg.activation)
    widths = [stage.out_dim for stage in cfg.stages]
    summary_grads = np.split(np.asarray(feature_grad, dtype=state.dtype), np.cumsum(widths)[:-1])
    carried = None
    for number in range(len(tape.stages), 0, -1):
        stage = tape.stages[number - 1]
        layers = state.stages[number - 1]
        prefix = 'encoder.stage{}'.format(number)
        summary_grad = summary_grads[number - 1]
        m, k, width = stage.output.shape
        channels = np.arange(width)

        pooled_grad = np.repeat(summary_grad[None, :] / m, m, axis=0)
        pooled_grad[stage.global_argmax, channels] += summary_grad
        if carried is not None:
            pooled_grad += carried
        output_grad = np.repeat(pooled_grad[:, None, :] / k, k, axis=1)
        output_grad[np.arange(m)[:, None], stage.pool_argmax, channels[None, :]] += pooled_grad

        post_grad = output_grad * grad_fn(stage.post_activation)
        _accumulate(grads, prefix + '.post', post_grad, stage.aggregated)
        aggregated_grad = (post_grad.reshape(-1, width) @ layers.post.weight).reshape(post_grad.shape)
        if cfg.lga_mode == 'as_printed':
            hidden_grad = aggregated_grad
        else:
            hidden_grad = aggregated_grad * stage.gpe
        pre_grad = hidden_grad * grad_fn(stage.pre_activation)
        _accumulate(grads, prefix + '.pre', pre_grad, stage.feats)
        in_dim = layers.pre.in_dim
        normalized_grad = (pre_grad.reshape(-1, width) @ layers.pre.weight).reshape(m, k, in_dim)
        gathered_grad = standardize_backward(normalized_grad, stage.centered, stage.std, cfg.epsilon)
        carried = scatter_add_rows(gathered_grad.reshape(-1, in_dim), stage.neighbor_indices, stage.input_count)
    _accumulate(grads, 'encoder.embed', carried, tape.tpe)


def backward(tape: 'ForwardTape', classifier_tape: ClassifierTape, logits_grad: npt.ArrayLike,
             train_encoder: bool = True) -> GradientStore:
    encoder = tape.state
    classifier = classifier_tape.state
    if tape.generation != encoder.generation or classifier_tape.generation != classifier.generation:
        raise TapeMismatchError('stale tape: parameters changed after the forward pass')
    if classifier_tape.features.shape != tape.global_feature.shape \
            or not np.array_equal(classifier_tape.features, tape.global_feature):
        raise TapeMismatchError('classifier tape was not recorded on this encoder output')
    grads = GradientStore.zeros(parameter_index(encoder, classifier), dtype=encoder.dtype)
    grads, feature_grad = classifier_backward(classifier_tape, logits_grad, grads)
    if train_encoder:
        encoder_backward(tape, feature_grad, grads)
    return grads


@dataclass
class OptimizerState:
    kind: str
    learning_rate: float
    total_epochs: int
    min_learning_rate: float = 0.0
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    epoch: int = 0
    buffers: Dict[str, np.ndarray] = field(default_factory=dict)

    def buffer_names(self) -> Tuple[str, ...]:
        return ('momentum',) if self.kind == 'sgd_momentum' else ('first_moment', 'second_moment')


def create_optimizer(cfg: OptimizerConfig, size: int, total_epochs: int, dtype: npt.DTypeLike = np.float32) -> OptimizerState:
    opt = OptimizerState(
        kind=cfg.kind,
        learning_rate=cfg.learning_rate,
        total_epochs=total_epochs,
        min_learning_rate=cfg.min_learning_rate,
        momentum=cfg.momentum,
        beta1=cfg.beta1,
        beta2=cfg.beta2,
        eps=cfg.eps
    )
    opt.buffers = {name: np.zeros(size, dtype=dtype) for name in opt.buffer_names()}
    return opt


def scheduled_learning_rate(opt: OptimizerState) -> float:
    if opt.total_epochs <= 0:
        return opt.learning_rate
    progress = min(opt.epoch, opt.total_epochs) / opt.total_epochs
    return opt.min_learning_rate + 0.5 * (opt.learning_rate - opt.min_learning_rate) * (1.0 + math.cos(math.pi * progress))


def optimizer_step(params: ParameterStore, grads: GradientStore, opt: OptimizerState) -> Tuple[ParameterStore, OptimizerState]:
    if len(params) != len(grads):
        raise ShapeError('gradient has {} values, parameters {}'.format(len(grads), len(params)))
    for name, buffer in opt.buffers.items():
        if len(buffer) != len(params):
            raise ShapeError('optimizer buffer {} has {} values, parameters {}'.format(name, len(buffer), len(params)))
    lr = scheduled_learning_rate(opt)
    g = grads.values.astype(params.values.dtype, copy=False)
    opt.step += 1
    if opt.kind == 'sgd_momentum':
        velocity = opt.buffers['momentum']
        velocity *= opt.momentum
        velocity += g
        params.values -= lr * velocity
    elif opt.kind == 'adam':
        m = opt.buffers['first_moment']
        v = opt.buffers['second_moment']
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * g * g
        m_hat = m / (1.0 - opt.beta1 ** opt.step)
        v_hat = v / (1.0 - opt.beta2 ** opt.step)
        params.values -= lr * m_hat / (np.sqrt(v_hat) + opt.eps)
    else:
        raise ConfigurationError('unknown optimizer: {}'.format(opt.kind))
    params.touch()
    logger.debug('Optimizer step', step=opt.step, learning_rate=lr)
    return params, opt
