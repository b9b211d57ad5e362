# Copyright Amazon.com, Inc. or its affiliates. All Rights Reserved.
# SPDX-License-Identifier: MIT-0

from dataclasses import dataclass, field
from typing import Iterator, List, Optional, Tuple

import numpy as np
import numpy.typing as npt
from aws_lambda_powertools import Logger

from point_ln.config import EncoderConfig, StageConfig
from point_ln.encoding import gpe_encode, tpe_encode
from point_ln.exceptions import GeometryError, ShapeError
from point_ln.geometry import (
    FeatureMatrix,
    Neighborhood,
    NeighborhoodBatch,
    PointCloud,
    as_point_cloud,
    farthest_point_sample,
    gather_batch,
    knn,
    normalize_batch,
    standardize,
)
from point_ln.nn import LinearLayer, activation, identity_linear, init_linear, linear_forward

logger = Logger(service='point-ln', child=True)

STAGE_COUNT = 4
MIN_POINTS = 2 ** STAGE_COUNT
# Below this spread a standardized column is rounding noise scaled up.
DEGENERATE_STD = 1e-6


@dataclass
class StageLayers:
    pre: LinearLayer
    post: LinearLayer


@dataclass
class EncoderState:
    config: EncoderConfig
    embed_layer: LinearLayer
    stages: List[StageLayers]
    generation: int = 0

    def __post_init__(self) -> None:
        if self.embed_layer.in_dim != self.config.tpe.initial_dim or self.embed_layer.out_dim != self.config.embed_dim:
            raise ShapeError('embed layer must map {} -> {}'.format(self.config.tpe.initial_dim, self.config.embed_dim))
        if len(self.stages) != len(self.config.stages):
            raise ShapeError('expected {} stage layer pairs'.format(len(self.config.stages)))
        for number, (cfg, layers) in enumerate(zip(self.config.stages, self.stages), start=1):
            if (layers.pre.in_dim, layers.pre.out_dim) != (cfg.in_dim, cfg.out_dim) \
                    or (layers.post.in_dim, layers.post.out_dim) != (cfg.out_dim, cfg.out_dim):
                raise ShapeError('stage {} layers do not match {} -> {}'.format(number, cfg.in_dim, cfg.out_dim))

    @property
    def dtype(self) -> np.dtype:
        return self.embed_layer.weight.dtype

    def named_layers(self) -> Iterator[Tuple[str, LinearLayer]]:
        yield 'encoder.embed', self.embed_layer
        for number, layers in enumerate(self.stages, start=1):
            yield 'encoder.stage{}.pre'.format(number), layers.pre
            yield 'encoder.stage{}.post'.format(number), layers.post


def required_points(config: EncoderConfig) -> int:
    """Smallest cloud for which every stage has at least K inputs.

    Stage s sees floor(N / 2^(s-1)) points, so it needs N >= K_s * 2^(s-1).
    """
    needed = MIN_POINTS
    for number, stage in enumerate(config.stages):
        needed = max(needed, max(stage.k_neighbors, 2) * 2 ** number)
    return needed


def init_encoder(config: EncoderConfig, rng: np.random.Generator, dtype: npt.DTypeLike = np.float32) -> EncoderState:
    return EncoderState(
        config=config,
        embed_layer=init_linear(config.tpe.initial_dim, config.embed_dim, rng, dtype),
        stages=[
            StageLayers(
                pre=init_linear(stage.in_dim, stage.out_dim, rng, dtype),
                post=init_linear(stage.out_dim, stage.out_dim, rng, dtype)
            )
            for stage in config.stages
        ]
    )


def identity_encoder(config: EncoderConfig, dtype: npt.DTypeLike = np.float32) -> EncoderState:
    return EncoderState(
        config=config,
        embed_layer=identity_linear(config.tpe.initial_dim, config.embed_dim, dtype),
        stages=[
            StageLayers(
                pre=identity_linear(stage.in_dim, stage.out_dim, dtype),
                post=identity_linear(stage.out_dim, stage.out_dim, dtype)
            )
            for stage in config.stages
        ]
    )


@dataclass
class StageTape:
    input_count: int
    center_indices: np.ndarray
    neighbor_indices: np.ndarray
    coords: np.ndarray
    centered: np.ndarray
    std: np.ndarray
    feats: np.ndarray
    gpe: np.ndarray
    pre_activation: np.ndarray
    hidden: np.ndarray
    aggregated: np.ndarray
    post_activation: np.ndarray
    output: np.ndarray
    pool_argmax: np.ndarray
    pooled: np.ndarray
    global_argmax: np.ndarray
    summary: np.ndarray


@dataclass
class EncoderOutput:
    global_feature: np.ndarray
    stage_features: List[np.ndarray] = field(default_factory=list)


@dataclass
class ForwardTape:
    state: EncoderState
    generation: int
    points: PointCloud
    tpe: np.ndarray
    embedded: np.ndarray
    stages: List[StageTape]
    global_feature: np.ndarray

    def replay(self) -> np.ndarray:
        """Recompute the global feature from the recorded indices and encodings."""
        cfg = self.state.config
        act = activation(cfg.activation)
        feats = linear_forward(self.tpe, self.state.embed_layer)
        summaries = []
        for stage, layers in zip(self.stages, self.state.stages):
            normalized, _, _ = standardize(feats[stage.neighbor_indices], cfg.epsilon)
            _, _, _, _, output = _aggregate(normalized, stage.gpe, layers, act, cfg.lga_mode)
            feats, _ = pool(output)
            summary, _ = pool(feats)
            summaries.append(summary)
        return np.concatenate(summaries)

    def branch_signature(self) -> bytes:
        parts = []
        for stage in self.stages:
            parts.append(np.packbits(stage.pre_activation > 0).tobytes())
            parts.append(np.packbits(stage.post_activation > 0).tobytes())
            parts.append(stage.pool_argmax.tobytes())
            parts.append(stage.global_argmax.tobytes())
            parts.append(np.packbits(_near_constant(stage.std)).tobytes())
        return b''.join(parts)

    def degenerate_stages(self) -> List[int]:
        """1-based stages whose input features have a near-constant column in some neighborhood."""
        return [number for number, stage in enumerate(self.stages, start=1) if _near_constant(stage.std).any()]


def _near_constant(std: np.ndarray) -> np.ndarray:
    # Exactly constant columns are dead channels and stay flat under small nudges.
    return (std > 0) & (std < DEGENERATE_STD)


def pool(block: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Mean + max over axis -2, with the argmax rows of the max."""
    if block.shape[-2] < 1:
        raise ShapeError('cannot pool an empty block')
    argmax = block.argmax(axis=-2)
    peak = np.take_along_axis(block, argmax[..., None, :], axis=-2)[..., 0, :]
    return block.mean(axis=-2) + peak, argmax


def neighbor_pool(block: npt.ArrayLike) -> np.ndarray:
    values = np.asarray(block)
    if values.ndim != 2 or len(values) == 0:
        raise ShapeError('neighbor_pool needs a non-empty K x C block')
    pooled, _ = pool(values)
    return pooled


def _aggregate(feats: np.ndarray, gpe: np.ndarray, layers: StageLayers, act, lga_mode: str):
    pre_activation = linear_forward(feats, layers.pre)
    hidden = act(pre_activation)
    if lga_mode == 'as_printed':
        aggregated = hidden + gpe * gpe
    else:
        aggregated = hidden * gpe + gpe
    post_activation = linear_forward(aggregated, layers.post)
    return pre_activation, hidden, aggregated, post_activation, act(post_activation)


def initial_embed(cloud: npt.ArrayLike, state: EncoderState) -> Tuple[PointCloud, FeatureMatrix]:
    points = as_point_cloud(cloud)
    encoded = tpe_encode(points, state.config.tpe)
    if encoded.shape[-1] != state.embed_layer.in_dim:
        raise ShapeError('TPE width {} does not match embed layer input {}'.format(encoded.shape[-1], state.embed_layer.in_dim))
    return points, linear_forward(encoded.astype(state.dtype), state.embed_layer)


def group(cloud: PointCloud, feats: FeatureMatrix, cfg: StageConfig) -> NeighborhoodBatch:
    if len(cloud) < 2:
        raise GeometryError('insufficient points for grouping')
    centers = farthest_point_sample(cloud, len(cloud) // 2)
    neighbors = knn(cloud[centers], cloud, cfg.k_neighbors)
    return gather_batch(cloud, feats, centers, neighbors)


def local_grouper(cloud: npt.ArrayLike, feats: FeatureMatrix, cfg: StageConfig,
                  eps: float) -> Tuple[PointCloud, List[Neighborhood]]:
    points = as_point_cloud(cloud)
    batch = normalize_batch(group(points, feats, cfg), eps)
    return points[batch.center_indices], batch.neighborhoods()


def local_geometry_aggregation(neigh: Neighborhood, cfg: StageConfig, pre_layer: LinearLayer, post_layer: LinearLayer,
                               activation_name: str = 'relu', lga_mode: str = 'as_printed') -> np.ndarray:
    if pre_layer.in_dim != cfg.in_dim or pre_layer.out_dim != cfg.out_dim or post_layer.in_dim != cfg.out_dim:
        raise ShapeError('stage layers do not match {} -> {}'.format(cfg.in_dim, cfg.out_dim))
    feats = np.asarray(neigh.feats)
    gpe = gpe_encode(neigh.coords, cfg.gpe, pre_layer.weight.dtype)
    *_, output = _aggregate(feats, gpe, StageLayers(pre_layer, post_layer), activation(activation_name), lga_mode)
    return output


def _forward(cloud: npt.ArrayLike, state: EncoderState, record: bool) -> Tuple[EncoderOutput, Optional[ForwardTape]]:
    points = as_point_cloud(cloud)
    cfg = state.config
    needed = required_points(cfg)
    if len(points) < needed:
        raise GeometryError('insufficient points for 4 stages: need at least {}, got {}'.format(needed, len(points)))
    act = activation(cfg.activation)
    tpe = tpe_encode(points, cfg.tpe).astype(state.dtype)
    embedded = linear_forward(tpe, state.embed_layer)
    feats = embedded
    summaries, stage_tapes = [], []
    for stage_cfg, layers in zip(cfg.stages, state.stages):
        batch = group(points, feats, stage_cfg)
        coords, _, _ = standardize(batch.coords, cfg.epsilon)
        normalized, centered, std = standardize(batch.feats, cfg.epsilon)
        gpe = gpe_encode(coords, stage_cfg.gpe, state.dtype)
        pre_activation, hidden, aggregated, post_activation, output = _aggregate(normalized, gpe, layers, act, cfg.lga_mode)
        pooled, pool_argmax = pool(output)
        summary, global_argmax = pool(pooled)
        summaries.append(summary)
        if record:
            stage_tapes.append(StageTape(
                input_count=len(points),
                center_indices=batch.center_indices,
                neighbor_indices=batch.indices,
                coords=coords,
                centered=centered,
                std=std,
                feats=normalized,
                gpe=gpe,
                pre_activation=pre_activation,
                hidden=hidden,
                aggregated=aggregated,
                post_activation=post_activation,
                output=output,
                pool_argmax=pool_argmax,
                pooled=pooled,
                global_argmax=global_argmax,
                summary=summary
            ))
        points = points[batch.center_indices]
        feats = pooled
    output = EncoderOutput(global_feature=np.concatenate(summaries), stage_features=summaries)
    if not np.all(np.isfinite(output.global_feature)):
        logger.warning('Non-finite encoder output', width=len(output.global_feature))
    tape = None
    if record:
        tape = ForwardTape(
            state=state,
            generation=state.generation,
            points=as_point_cloud(cloud),
            tpe=tpe,
            embedded=embedded,
            stages=stage_tapes,
            global_feature=output.global_feature
        )
    return output, tape


def encode(cloud: npt.ArrayLike, state: EncoderState) -> EncoderOutput:
    output, _ = _forward(cloud, state, record=False)
    return output


def encode_with_tape(cloud: npt.ArrayLike, state: EncoderState) -> Tuple[EncoderOutput, ForwardTape]:
    return _forward(cloud, state, record=True)
