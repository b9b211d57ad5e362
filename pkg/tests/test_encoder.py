# Copyright Amazon.com, Inc. or its affiliates. All Rights Reserved.
# SPDX-License-Identifier: MIT-0

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from point_ln.config import EncoderConfig, GPEConfig, StageConfig
from point_ln.encoder import (
    EncoderState,
    encode,
    encode_with_tape,
    identity_encoder,
    init_encoder,
    initial_embed,
    local_geometry_aggregation,
    local_grouper,
    neighbor_pool,
    required_points,
)
from point_ln.encoding import gpe_encode, tpe_encode
from point_ln.exceptions import GeometryError, ShapeError
from point_ln.geometry import Neighborhood, knn
from point_ln.nn import LinearLayer, identity_linear, init_linear

UNIT_SQUARE = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]], dtype=float)

PERMUTATION_ENCODER = {
    'tpe': {'initial_dim': 12},
    'embed_dim': 12,
    'stages': [
        {'k_neighbors': 16, 'out_dim': 12},
        {'k_neighbors': 16, 'out_dim': 24},
        {'k_neighbors': 8, 'out_dim': 24},
        {'k_neighbors': 4, 'out_dim': 48},
    ],
}


def stage(k, in_dim, out_dim):
    return StageConfig(k_neighbors=k, in_dim=in_dim, out_dim=out_dim, gpe=GPEConfig(reference_count=out_dim // 3))


def test_identity_embed_reproduces_tpe(tiny_encoder_config, rng):
    state = identity_encoder(tiny_encoder_config, np.float64)
    cloud = rng.uniform(-1, 1, size=(5, 3))
    points, feats = initial_embed(cloud, state)
    assert_array_equal(points, cloud)
    assert_array_equal(feats, tpe_encode(cloud, tiny_encoder_config.tpe))


def test_constant_embed(tiny_encoder_config, rng):
    state = init_encoder(tiny_encoder_config, rng, np.float64)
    state.embed_layer.weight[...] = 0.0
    state.embed_layer.bias[...] = np.arange(6.0)
    _, feats = initial_embed(rng.uniform(size=(3, 3)), state)
    assert_array_equal(feats, np.tile(np.arange(6.0), (3, 1)))


def test_embed_matches_dense_arithmetic(tiny_encoder_config, rng):
    state = init_encoder(tiny_encoder_config, rng, np.float64)
    state.embed_layer.bias[...] = rng.uniform(-1, 1, size=6)
    cloud = rng.uniform(-1, 1, size=(2, 3))
    _, feats = initial_embed(cloud, state)
    encoded = tpe_encode(cloud, tiny_encoder_config.tpe)
    weight, bias = state.embed_layer.weight, state.embed_layer.bias
    for i in range(2):
        expected = [sum(weight[r, c] * encoded[i, c] for c in range(6)) + bias[r] for r in range(6)]
        assert_allclose(feats[i], expected, rtol=1e-12, atol=1e-12)


def test_state_rejects_mismatched_embed(tiny_encoder_config, rng):
    state = init_encoder(tiny_encoder_config, rng)
    with pytest.raises(ShapeError):
        EncoderState(config=tiny_encoder_config, embed_layer=init_linear(6, 9, rng), stages=state.stages)


def test_grouper_two_points():
    sampled, neighborhoods = local_grouper([[0, 0, 0], [1, 2, 3]], np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]),
                                           stage(1, 3, 3), 1e-5)
    assert sampled.shape == (1, 3)
    [only] = neighborhoods
    assert len(only.indices) == 1
    assert_array_equal(only.coords, np.zeros((1, 3)))
    assert_array_equal(only.feats, np.zeros((1, 3)))


def test_grouper_unit_square():
    sampled, neighborhoods = local_grouper(UNIT_SQUARE, np.eye(4), stage(2, 4, 3), 1e-5)
    assert_array_equal(sampled, UNIT_SQUARE[[0, 3]])
    expected = knn(UNIT_SQUARE[[0, 3]], UNIT_SQUARE, 2)
    assert_array_equal(expected, [[0, 1], [3, 1]])
    for row, neighborhood in zip(expected, neighborhoods):
        assert_array_equal(neighborhood.indices, row)


@pytest.mark.parametrize('n', range(2, 18))
def test_grouper_halves_with_floor(n, rng):
    sampled, neighborhoods = local_grouper(rng.uniform(size=(n, 3)), rng.normal(size=(n, 3)), stage(1, 3, 3), 1e-5)
    assert len(sampled) == n // 2
    assert len(neighborhoods) == n // 2


def test_grouper_rejects_large_k(rng):
    with pytest.raises(GeometryError, match='k exceeds reference size'):
        local_grouper(rng.uniform(size=(4, 3)), np.zeros((4, 3)), stage(5, 3, 3), 1e-5)


def _neighborhood(rng, k, width):
    return Neighborhood(center_index=0, indices=np.arange(k), coords=rng.normal(size=(k, 3)),
                        feats=rng.normal(size=(k, width)))


def test_lga_identity_layers(rng):
    cfg = stage(4, 6, 6)
    neigh = _neighborhood(rng, 4, 6)
    g = gpe_encode(neigh.coords, cfg.gpe)
    output = local_geometry_aggregation(neigh, cfg, identity_linear(6, 6, np.float64), identity_linear(6, 6, np.float64),
                                        activation_name='identity')
    assert_allclose(output, neigh.feats + g * g, rtol=0, atol=1e-12)

    relu_output = local_geometry_aggregation(neigh, cfg, identity_linear(6, 6, np.float64),
                                             identity_linear(6, 6, np.float64))
    assert_allclose(relu_output, np.maximum(neigh.feats, 0) + g * g, rtol=0, atol=1e-12)


def test_lga_multiplicative_mode(rng):
    cfg = stage(4, 6, 6)
    neigh = _neighborhood(rng, 4, 6)
    g = gpe_encode(neigh.coords, cfg.gpe)
    output = local_geometry_aggregation(neigh, cfg, identity_linear(6, 6, np.float64), identity_linear(6, 6, np.float64),
                                        activation_name='identity', lga_mode='multiplicative')
    assert_allclose(output, neigh.feats * g + g, rtol=0, atol=1e-12)


def test_lga_single_zero_neighbor(rng):
    cfg = stage(1, 6, 9)
    neigh = Neighborhood(center_index=0, indices=np.arange(1), coords=np.zeros((1, 3)), feats=np.zeros((1, 6)))
    output = local_geometry_aggregation(neigh, cfg, init_linear(6, 9, rng, np.float64), identity_linear(9, 9, np.float64))
    g = gpe_encode(np.zeros((1, 3)), cfg.gpe)
    assert_allclose(output, g * g, rtol=0, atol=1e-15)


@pytest.mark.parametrize('k', [1, 4, 32])
def test_lga_output_shape(k, rng):
    cfg = stage(k, 6, 12)
    output = local_geometry_aggregation(_neighborhood(rng, k, 6), cfg, init_linear(6, 12, rng, np.float64),
                                        init_linear(12, 12, rng, np.float64))
    assert output.shape == (k, 12)


def test_lga_rejects_width_mismatch(rng):
    with pytest.raises(ShapeError):
        local_geometry_aggregation(_neighborhood(rng, 2, 6), stage(2, 6, 12), init_linear(3, 12, rng),
                                   init_linear(12, 12, rng))


def test_neighbor_pool_examples(rng):
    row = rng.normal(size=(1, 5))
    assert_array_equal(neighbor_pool(row), 2 * row[0])
    assert_array_equal(neighbor_pool([[1.0], [3.0]]), [5.0])
    block = rng.normal(size=(7, 4))
    assert_allclose(neighbor_pool(block[rng.permutation(7)]), neighbor_pool(block), rtol=0, atol=1e-12)


def test_neighbor_pool_rejects_empty_block():
    with pytest.raises(ShapeError):
        neighbor_pool(np.empty((0, 3)))


def test_sixteen_points_run_four_stages(tiny_encoder_config, rng):
    state = init_encoder(tiny_encoder_config, rng)
    output, tape = encode_with_tape(rng.uniform(-1, 1, size=(16, 3)), state)
    assert [len(stage.center_indices) for stage in tape.stages] == [8, 4, 2, 1]
    assert [stage.input_count for stage in tape.stages] == [16, 8, 4, 2]
    assert output.global_feature.shape == (tiny_encoder_config.feature_width,)
    assert [len(summary) for summary in output.stage_features] == [6, 12, 12, 24]


def test_too_few_points(tiny_encoder_config, rng):
    with pytest.raises(GeometryError, match='insufficient points for 4 stages'):
        encode(rng.uniform(size=(15, 3)), init_encoder(tiny_encoder_config, rng))


def test_required_points(tiny_encoder_config):
    assert required_points(tiny_encoder_config) == 16
    assert required_points(EncoderConfig()) == 256
    assert required_points(EncoderConfig.model_validate(PERMUTATION_ENCODER)) == 32


def test_default_config_checks_every_stage_before_grouping(rng):
    # 100 points pass stages 1 and 2 but leave 25 inputs for K = 32 at stage 3.
    with pytest.raises(GeometryError, match='insufficient points for 4 stages: need at least 256, got 100'):
        encode(rng.uniform(-1, 1, size=(100, 3)), init_encoder(EncoderConfig(), rng))


def test_default_width(rng):
    config = EncoderConfig()
    output = encode(rng.uniform(-1, 1, size=(256, 3)), init_encoder(config, rng))
    assert output.global_feature.shape == (720,)
    assert config.feature_width == 720
    assert np.all(np.isfinite(output.global_feature))


def test_tape_matches_plain_forward(tiny_encoder_config, rng):
    state = init_encoder(tiny_encoder_config, rng)
    cloud = rng.uniform(-1, 1, size=(32, 3))
    plain = encode(cloud, state)
    taped, tape = encode_with_tape(cloud, state)
    assert_array_equal(plain.global_feature, taped.global_feature)
    assert_array_equal(tape.replay(), taped.global_feature)
    assert_array_equal(encode(cloud, state).global_feature, plain.global_feature)
    for stage_tape, stage_cfg in zip(tape.stages, tiny_encoder_config.stages):
        centers = len(stage_tape.center_indices)
        assert stage_tape.pool_argmax.shape == (centers, stage_cfg.out_dim)
        assert stage_tape.global_argmax.shape == (stage_cfg.out_dim,)
        assert stage_tape.pool_argmax.max() < stage_cfg.k_neighbors


def test_permutation_invariance():
    rng = np.random.default_rng(11)
    config = EncoderConfig.model_validate(PERMUTATION_ENCODER)
    state = init_encoder(config, rng, np.float64)
    for _ in range(20):
        cloud = rng.uniform(-1, 1, size=(128, 3))
        reference = encode(cloud, state).global_feature
        for _ in range(5):
            permuted = encode(cloud[rng.permutation(128)], state).global_feature
            assert np.abs(permuted - reference).max() <= 1e-5


@pytest.mark.slow
def test_default_encoder_permutation_invariance():
    # 256 is the smallest cloud the default K = 32 schedule accepts.
    rng = np.random.default_rng(12)
    state = init_encoder(EncoderConfig(), rng, np.float64)
    for _ in range(50):
        cloud = rng.uniform(-1, 1, size=(256, 3))
        reference = encode(cloud, state).global_feature
        for _ in range(10):
            permuted = encode(cloud[rng.permutation(256)], state).global_feature
            assert np.abs(permuted - reference).max() <= 1e-5


def test_identity_backbone_is_informative(tiny_encoder_config, rng):
    state = identity_encoder(tiny_encoder_config)
    first = encode(rng.uniform(-1, 1, size=(64, 3)), state).global_feature
    second = encode(rng.uniform(-1, 1, size=(64, 3)), state).global_feature
    assert np.all(np.isfinite(first))
    assert np.ptp(first) > 0
    assert not np.array_equal(first, second)


def test_layers_are_named_in_parameter_order(tiny_encoder_config, rng):
    names = [name for name, layer in init_encoder(tiny_encoder_config, rng).named_layers()]
    assert names == ['encoder.embed'] + ['encoder.stage{}.{}'.format(n, part) for n in range(1, 5) for part in ('pre', 'post')]
    assert all(isinstance(layer, LinearLayer) for _, layer in init_encoder(tiny_encoder_config, rng).named_layers())
