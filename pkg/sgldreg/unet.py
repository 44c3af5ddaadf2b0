# -*- coding: utf-8 -*-
"""Deformation-predicting UNet.

Four strided encoder convolutions, six decoder convolutions with skip
connections, and a final convolution emitting a two-channel displacement
field (dx, dy) at the input resolution.

Wiring, with E1..E4 the encoder outputs (E4 coarsest)::

    x   = concat(moving, fixed)                 full resolution
    E_i = lrelu(conv_s2(E_{i-1}))               1/2 .. 1/16
    D1  = lrelu(conv(concat(up(E4), E3)))       1/8
    D2  = lrelu(conv(concat(up(D1), E2)))       1/4
    D3  = lrelu(conv(concat(up(D2), E1)))       1/2
    D4  = lrelu(conv(D3))                       1/2
    D5  = lrelu(conv(concat(up(D4), x)))        full
    D6  = lrelu(conv(D5))                       full
    field = conv(D6)                            full, no activation
"""
from __future__ import absolute_import

import logging
from collections import OrderedDict
from dataclasses import dataclass, field as dc_field
from fractions import Fraction
from typing import Dict, Tuple

import numpy as np

from .core import ConfigError, DimensionError, IntegrityError
from .ops import concat_channels, conv2d, leaky_relu, upsample2x_nearest
from .tensor import Parameter, as_tensor

logger = logging.getLogger(__name__)

ENCODER_DEPTH = 4
DECODER_DEPTH = 6


@dataclass(frozen=True)
class UNetConfig:
    encoder_channels: Tuple[int, ...] = (32, 32, 32, 32)
    decoder_channels: Tuple[int, ...] = (32, 32, 32, 32, 32, 16)
    kernel_size: int = 3
    leaky_slope: float = 0.2
    input_channels: int = 2
    output_channels: int = 2
    channel_scale: Fraction = Fraction(1)
    flow_init_std: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, 'encoder_channels', tuple(self.encoder_channels))
        object.__setattr__(self, 'decoder_channels', tuple(self.decoder_channels))
        object.__setattr__(self, 'channel_scale', Fraction(self.channel_scale))
        if len(self.encoder_channels) != ENCODER_DEPTH or len(self.decoder_channels) != DECODER_DEPTH:
            raise ConfigError('UNet needs %d encoder and %d decoder layers, got %d and %d' % (
                ENCODER_DEPTH, DECODER_DEPTH, len(self.encoder_channels), len(self.decoder_channels)))
        if self.channel_scale <= 0:
            raise ConfigError('channel_scale must be positive, got %s' % self.channel_scale)
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError('kernel_size must be odd, got %d' % self.kernel_size)
        if not 0 < self.leaky_slope < 1:
            raise ConfigError('leaky_slope must be in (0, 1), got %r' % self.leaky_slope)
        if self.output_channels != 2:
            raise ConfigError('a 2-d deformation field has 2 channels, got %d' % self.output_channels)
        if self.input_channels != 2:
            raise ConfigError('the network reads a (moving, fixed) pair, input_channels must be 2')
        if self.flow_init_std < 0:
            raise ConfigError('flow_init_std must be >= 0')

    def width(self, channels):
        return max(1, int(round(channels * self.channel_scale)))

    @property
    def min_extent(self):
        return 2 ** ENCODER_DEPTH

    def layers(self):
        """(name, input channels, output channels, stride) of every convolution, in forward order."""
        enc = [self.width(c) for c in self.encoder_channels]
        dec = [self.width(c) for c in self.decoder_channels]
        x = self.input_channels
        out = []
        prev = x
        for i, c in enumerate(enc):
            out.append(('enc%d' % (i + 1), prev, c, 2))
            prev = c
        # skips into D1..D3 come from E3, E2, E1
        for i, skip in enumerate((enc[2], enc[1], enc[0])):
            out.append(('dec%d' % (i + 1), prev + skip, dec[i], 1))
            prev = dec[i]
        out.append(('dec4', prev, dec[3], 1))
        out.append(('dec5', dec[3] + x, dec[4], 1))
        out.append(('dec6', dec[4], dec[5], 1))
        out.append(('flow', dec[5], self.output_channels, 1))
        return out


Parameters = Dict[str, Parameter]


def parameter_shapes(config):
    """Ordered map of parameter id to shape; a pure function of the config."""
    k = config.kernel_size
    shapes = OrderedDict()
    for name, cin, cout, _ in config.layers():
        shapes[name + '.weight'] = (cout, cin, k, k)
        shapes[name + '.bias'] = (cout,)
    return shapes


def parameter_count(config):
    return int(sum(np.prod(s) for s in parameter_shapes(config).values()))


def build_unet(config, seed):
    """Initialize the network parameters deterministically from seed.

    Hidden convolutions get Glorot-uniform weights and zero biases. The field
    layer draws from Normal(0, flow_init_std), so the initial field is close
    to the identity (exactly zero when flow_init_std is 0).
    """
    rng = np.random.default_rng(seed)
    k = config.kernel_size
    params = OrderedDict()
    for name, cin, cout, _ in config.layers():
        if name == 'flow':
            w = rng.normal(0.0, config.flow_init_std, size=(cout, cin, k, k)) if config.flow_init_std else \
                np.zeros((cout, cin, k, k))
        else:
            bound = np.sqrt(6.0 / ((cin + cout) * k * k))
            w = rng.uniform(-bound, bound, size=(cout, cin, k, k))
        params[name + '.weight'] = Parameter(name + '.weight', w)
        params[name + '.bias'] = Parameter(name + '.bias', np.zeros(cout))
    logger.debug('built UNet with %d parameters (seed %d)', parameter_count(config), seed)
    return params


def check_extents(config, shape):
    h, w = shape[-2:]
    m = config.min_extent
    if h % m or w % m or h < m or w < m:
        raise ConfigError('image extents %dx%d must be positive multiples of %d' % (h, w, m))


def forward(params, moving, fixed, config=None):
    """Predict the displacement field for a batch of pairs.

    moving and fixed are (N, 1, H, W); the result is an (N, 2, H, W) Tensor
    whose channel 0 is dx (columns) and channel 1 is dy (rows).
    """
    config = config or UNetConfig()
    moving, fixed = as_tensor(moving), as_tensor(fixed)
    if moving.shape != fixed.shape:
        raise DimensionError('moving %s and fixed %s differ in shape' % (moving.shape, fixed.shape))
    if moving.ndim != 4 or moving.shape[1] != 1:
        raise DimensionError('expected (N,1,H,W) images, got %s' % (moving.shape,))
    check_extents(config, moving.shape)
    slope = config.leaky_slope
    pad = config.kernel_size // 2

    def conv(name, x, stride=1):
        try:
            w, b = params[name + '.weight'], params[name + '.bias']
        except KeyError as e:
            raise IntegrityError('missing parameter %s' % e)
        return conv2d(x, w, b, stride=stride, padding=pad)

    def block(name, x, stride=1):
        return leaky_relu(conv(name, x, stride), slope)

    x = concat_channels(moving, fixed)
    e1 = block('enc1', x, 2)
    e2 = block('enc2', e1, 2)
    e3 = block('enc3', e2, 2)
    e4 = block('enc4', e3, 2)
    d = block('dec1', concat_channels(upsample2x_nearest(e4), e3))
    d = block('dec2', concat_channels(upsample2x_nearest(d), e2))
    d = block('dec3', concat_channels(upsample2x_nearest(d), e1))
    d = block('dec4', d)
    d = block('dec5', concat_channels(upsample2x_nearest(d), x))
    d = block('dec6', d)
    return conv('flow', d)


@dataclass
class WeightSnapshot:
    """A full copy of the network parameters taken at one training iteration."""
    iteration: int
    parameters: Dict[str, np.ndarray] = dc_field(default_factory=OrderedDict)

    def shapes(self):
        return OrderedDict((k, tuple(v.shape)) for k, v in self.parameters.items())

    def __repr__(self):
        return 'WeightSnapshot(iteration=%d, %d tensors)' % (self.iteration, len(self.parameters))


def snapshot(params, iteration):
    return WeightSnapshot(iteration, OrderedDict((k, p.data.copy()) for k, p in params.items()))


def parameters_from_snapshot(snap):
    return OrderedDict((k, Parameter(k, v)) for k, v in snap.parameters.items())


def check_snapshots(snapshots, config):
    """Raise IntegrityError unless every snapshot matches config and iterations strictly increase."""
    expected = parameter_shapes(config)
    last = None
    for snap in snapshots:
        if snap.shapes() != expected:
            raise IntegrityError('snapshot at iteration %d does not match the network configuration' % snap.iteration)
        if last is not None and snap.iteration <= last:
            raise IntegrityError('snapshot iterations not increasing (%d after %d)' % (snap.iteration, last))
        last = snap.iteration


################################################################################
#                                    TESTS                                     #
################################################################################

_quarter = UNetConfig(channel_scale=Fraction(1, 4))


def _pair(rng, size=32, n=1):
    return rng.uniform(size=(n, 1, size, size)), rng.uniform(size=(n, 1, size, size))


def test_parameter_count_is_frozen():
    assert parameter_count(UNetConfig()) == 107730
    assert parameter_count(_quarter) == 7062
    assert len(parameter_shapes(UNetConfig())) == 22


def test_forward_shape():
    params = build_unet(UNetConfig(), seed=0)
    moving, fixed = _pair(np.random.default_rng(0))
    assert forward(params, moving, fixed).shape == (1, 2, 32, 32)
    assert forward(build_unet(_quarter, 0), moving, fixed, _quarter).shape == (1, 2, 32, 32)


def test_build_is_deterministic():
    a, b = build_unet(_quarter, seed=7), build_unet(_quarter, seed=7)
    assert list(a) == list(b)
    for k in a:
        assert np.array_equal(a[k].data, b[k].data)
    c = build_unet(_quarter, seed=8)
    assert not np.array_equal(a['enc1.weight'].data, c['enc1.weight'].data)


def test_zero_field_layer_gives_zero_field():
    params = build_unet(_quarter, seed=1)
    params['flow.weight'].data[...] = 0
    moving, fixed = _pair(np.random.default_rng(1))
    assert np.all(forward(params, moving, fixed, _quarter).data == 0)
    cfg = UNetConfig(channel_scale=Fraction(1, 4), flow_init_std=0.0)
    assert np.all(forward(build_unet(cfg, 1), moving, fixed, cfg).data == 0)


def test_forward_is_deterministic_and_asymmetric():
    cfg = UNetConfig(channel_scale=Fraction(1, 4), flow_init_std=0.1)
    params = build_unet(cfg, seed=2)
    moving, fixed = _pair(np.random.default_rng(2))
    a = forward(params, moving, fixed, cfg).data
    assert np.array_equal(a, forward(params, moving, fixed, cfg).data)
    assert not np.array_equal(a, forward(params, fixed, moving, cfg).data)


def test_near_identity_start():
    params = build_unet(_quarter, seed=3)
    moving, fixed = _pair(np.random.default_rng(3))
    assert np.abs(forward(params, moving, fixed, _quarter).data).max() < 1e-2


def test_bad_inputs():
    import pytest
    params = build_unet(_quarter, seed=0)
    rng = np.random.default_rng(0)
    with pytest.raises(ConfigError):
        forward(params, *_pair(rng, size=24), config=_quarter)
    with pytest.raises(DimensionError):
        forward(params, rng.uniform(size=(1, 1, 32, 32)), rng.uniform(size=(1, 1, 16, 16)), _quarter)
    with pytest.raises(ConfigError):
        UNetConfig(decoder_channels=(32, 32, 16))
    with pytest.raises(ConfigError):
        UNetConfig(channel_scale=0)


def test_snapshot_integrity():
    import pytest
    params = build_unet(_quarter, seed=0)
    snaps = [snapshot(params, 3), snapshot(params, 5)]
    check_snapshots(snaps, _quarter)
    with pytest.raises(IntegrityError):
        check_snapshots(snaps, UNetConfig())
    with pytest.raises(IntegrityError):
        check_snapshots(snaps[::-1], _quarter)
    restored = parameters_from_snapshot(snaps[0])
    assert np.array_equal(restored['dec5.weight'].data, params['dec5.weight'].data)


def test_composite_gradient_matches_finite_differences():
    from .gradcheck import grad_check
    from .tensor import precision
    with precision('double'):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(1, 2, 5, 5))
        w = Parameter('w', rng.normal(size=(3, 2, 3, 3)))
        b = Parameter('b', rng.normal(size=3))
        assert grad_check(lambda: leaky_relu(conv2d(x, w, b, padding=1)).sum(), [w, b]) < 1e-5
