# Copyright Amazon.com, Inc. or its affiliates. All Rights Reserved.
# SPDX-License-Identifier: MIT-0

import numpy as np
import numpy.typing as npt

from point_ln.config import GPEConfig, TPEConfig
from point_ln.exceptions import ConfigurationError


def tpe_frequencies(cfg: TPEConfig) -> np.ndarray:
    if cfg.initial_dim <= 0 or cfg.initial_dim % 6 or cfg.alpha <= 0 or cfg.beta <= 0:
        raise ConfigurationError('invalid TPE configuration: {}'.format(cfg))
    n = np.arange(cfg.initial_dim // 6, dtype=np.float64)
    return cfg.alpha / np.power(cfg.beta, 6.0 * n / cfg.initial_dim)


def tpe_encode(points: npt.ArrayLike, cfg: TPEConfig) -> np.ndarray:
    """Trigonometric encoding, N x C_I.

    Channels are axis-major (x, y, z); within an axis the (sin, cos) pair of
    each frequency is interleaved, frequencies ascending.
    """
    coords = np.asarray(points, dtype=np.float64)
    phase = coords[..., :, None] * tpe_frequencies(cfg)
    encoded = np.stack((np.sin(phase), np.cos(phase)), axis=-1)
    return encoded.reshape(coords.shape[:-1] + (cfg.initial_dim,))


def gpe_reference_points(cfg: GPEConfig) -> np.ndarray:
    if cfg.reference_count < 1 or cfg.sigma <= 0:
        raise ConfigurationError('invalid GPE configuration: {}'.format(cfg))
    if cfg.reference_count == 1:
        return np.array([(cfg.reference_min + cfg.reference_max) / 2.0])
    if not cfg.reference_min < cfg.reference_max:
        raise ConfigurationError('invalid GPE configuration: {}'.format(cfg))
    return np.linspace(cfg.reference_min, cfg.reference_max, cfg.reference_count)


def gpe_encode(points: npt.ArrayLike, cfg: GPEConfig, dtype: npt.DTypeLike = np.float64) -> np.ndarray:
    """Gaussian encoding, (..., 3V), axis-major then reference point.

    With square_input the residual uses the squared coordinate. The squared
    coordinate is taken in float64; the expansion runs in `dtype`.
    """
    coords = np.asarray(points, dtype=np.float64)
    references = gpe_reference_points(cfg).astype(dtype)
    values = (coords * coords if cfg.square_input else coords).astype(dtype)
    residual = values[..., :, None] - references
    residual *= residual
    residual *= np.asarray(-0.5 / (cfg.sigma * cfg.sigma), dtype=dtype)
    encoded = np.exp(residual, out=residual)
    return encoded.reshape(coords.shape[:-1] + (3 * cfg.reference_count,))
