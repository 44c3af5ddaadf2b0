# -*- coding: utf-8 -*-
"""Registration objective: image dissimilarity + smoothness + weight decay."""
from __future__ import absolute_import

from dataclasses import dataclass

import numpy as np

from .core import ConfigError, DimensionError
from .ops import box_count, box_sum
from .tensor import Tensor, as_tensor
from .unet import UNetConfig, forward
from .warp import field_gradient, warp_bilinear

SIMILARITIES = ('mse', 'neg_lcc')

# stabilizer of the squared local correlation on flat patches
LCC_EPS = 1e-5


@dataclass(frozen=True)
class LossConfig:
    similarity: str = 'mse'
    lam: float = 0.05
    lcc_window: int = 9
    weight_decay: float = 1e-5

    def __post_init__(self):
        if self.similarity not in SIMILARITIES:
            raise ConfigError('similarity must be one of %s, got %r' % (', '.join(SIMILARITIES), self.similarity))
        if self.lam < 0 or self.weight_decay < 0:
            raise ConfigError('lam and weight_decay must be >= 0')
        if self.lcc_window < 3 or self.lcc_window % 2 == 0:
            raise ConfigError('lcc_window must be odd and >= 3, got %d' % self.lcc_window)


def _same_shape(a, b, what):
    if a.shape != b.shape:
        raise DimensionError('%s: shapes %s and %s differ' % (what, a.shape, b.shape))


def mse(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, 'mse')
    return (a - b).square().mean()


def neg_lcc(a, b, window=9):
    """Negative mean squared local cross-correlation over (N, C, H, W) images.

    Local sums run over a window x window neighbourhood with zero padding;
    local means divide by the number of in-image pixels, so the value is
    invariant to an affine intensity change of either image.
    """
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, 'neg_lcc')
    n = Tensor(box_count(a.shape, window, dtype=a.dtype), dtype=a.dtype)
    a_sum = box_sum(a, window)
    b_sum = box_sum(b, window)
    cross = box_sum(a * b, window) - a_sum * b_sum / n
    a_var = box_sum(a.square(), window) - a_sum.square() / n
    b_var = box_sum(b.square(), window) - b_sum.square() / n
    cc = cross.square() / (a_var * b_var + LCC_EPS)
    return -cc.mean()


def smoothness(field):
    """Mean of squared forward differences over both components and both axes."""
    return field_gradient(field).square().mean()


def weight_penalty(params):
    total = None
    for p in params.values():
        term = p.square().sum()
        total = term if total is None else total + term
    return total


def similarity(warped, fixed, config):
    if config.similarity == 'mse':
        return mse(warped, fixed)
    return neg_lcc(warped, fixed, config.lcc_window)


def total_loss(moving, fixed, params, config, unet_config=None):
    """S(fixed, moving o phi) + lam * smoothness(phi) + weight_decay * sum(theta^2) for a batch of pairs."""
    unet_config = unet_config or UNetConfig()
    field = forward(params, moving, fixed, unet_config)
    warped = warp_bilinear(moving, field)
    loss = similarity(warped, fixed, config)
    if config.lam:
        loss = loss + smoothness(field) * config.lam
    if config.weight_decay:
        loss = loss + weight_penalty(params) * config.weight_decay
    return loss


################################################################################
#                                    TESTS                                     #
################################################################################

def _texture(rng, shape=(1, 1, 12, 12)):
    return rng.uniform(size=shape)


def test_mse():
    import pytest
    from .tensor import precision
    assert mse([0.0, 1.0], [0.0, 1.0]).item() == 0.0
    assert mse([0.0, 1.0], [1.0, 1.0]).item() == 0.5
    with precision('double'):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        oracle = 0.0
        for i in range(3):
            for j in range(4):
                oracle += (a[i, j] - b[i, j]) ** 2
        assert abs(mse(a, b).item() - oracle / 12) < 1e-12
    with pytest.raises(DimensionError):
        mse(np.zeros(3), np.zeros(4))


def test_neg_lcc_values():
    from .tensor import precision
    with precision('double'):
        rng = np.random.default_rng(1)
        a = _texture(rng)
        same = neg_lcc(a, a, 9).item()
        assert -1.0 <= same < -1.0 + 1e-3
        affine = neg_lcc(a, 2 * a + 3, 9).item()
        assert abs(affine + 1.0) < 1e-3
        assert abs(affine - same) < 1e-6
        flat = np.full((1, 1, 12, 12), 0.3)
        assert abs(neg_lcc(flat, np.full((1, 1, 12, 12), 0.7), 9).item()) < 1e-12
        for _ in range(20):
            v = neg_lcc(_texture(rng), _texture(rng), 5).item()
            assert -1.0 - 1e-3 <= v <= 0.0


def test_smoothness():
    from .tensor import precision
    assert smoothness(np.full((2, 8, 8), 1.5)).item() == 0.0
    with precision('double'):
        field = np.zeros((2, 8, 8))
        field[0] = np.tile(np.arange(8.0), (8, 1))
        # 7 unit differences per row, 8 rows, out of 2*2*8*8 terms
        assert smoothness(field).item() == 56.0 / 256.0
        rng = np.random.default_rng(2)
        f = rng.normal(size=(2, 8, 8))
        s = smoothness(f).item()
        assert abs(smoothness(3 * f).item() - 9 * s) < 1e-12
        shifted = f + np.array([2.0, -1.0])[:, None, None]
        assert abs(smoothness(shifted).item() - s) < 1e-12


def test_loss_config():
    import pytest
    with pytest.raises(ConfigError):
        LossConfig(similarity='mi')
    with pytest.raises(ConfigError):
        LossConfig(lcc_window=4)
    with pytest.raises(ConfigError):
        LossConfig(lam=-1)


def test_total_loss_identity_pair_is_zero():
    from fractions import Fraction
    from .unet import build_unet
    cfg = UNetConfig(channel_scale=Fraction(1, 4), flow_init_std=0.0)
    params = build_unet(cfg, 0)
    img = np.random.default_rng(3).uniform(size=(1, 1, 16, 16))
    loss = total_loss(img, img, params, LossConfig(lam=0.0, weight_decay=0.0), cfg)
    assert loss.item() == 0.0


def test_total_loss_default_smoke():
    from fractions import Fraction
    from .unet import build_unet
    cfg = UNetConfig(channel_scale=Fraction(1, 4))
    params = build_unet(cfg, 1)
    rng = np.random.default_rng(4)
    loss = total_loss(rng.uniform(size=(2, 1, 32, 32)), rng.uniform(size=(2, 1, 32, 32)), params, LossConfig(), cfg)
    assert np.isfinite(loss.item()) and loss.item() > 0


def test_similarity_gradients():
    from .gradcheck import grad_check
    from .tensor import Parameter, precision
    with precision('double'):
        rng = np.random.default_rng(6)
        a = Parameter('a', _texture(rng, (1, 1, 7, 7)))
        b = Parameter('b', _texture(rng, (1, 1, 7, 7)))
        assert grad_check(lambda: mse(a, b), [a, b]) < 1e-5
        assert grad_check(lambda: neg_lcc(a, b, 3), [a, b]) < 1e-5
        f = Parameter('f', rng.normal(size=(2, 6, 6)))
        assert grad_check(lambda: smoothness(f), [f]) < 1e-5


def test_total_loss_gradient_through_unet():
    from fractions import Fraction
    from .gradcheck import grad_check
    from .tensor import precision
    from .unet import build_unet
    # a wide field layer keeps samples off the integer grid where the warp has kinks
    cfg = UNetConfig(channel_scale=Fraction(1, 4), flow_init_std=0.5)
    with precision('double'):
        params = build_unet(cfg, 7)
        rng = np.random.default_rng(7)
        moving, fixed = rng.uniform(size=(1, 1, 16, 16)), rng.uniform(size=(1, 1, 16, 16))
        for loss_cfg in (LossConfig(), LossConfig(similarity='neg_lcc', lcc_window=5)):
            err = grad_check(lambda: total_loss(moving, fixed, params, loss_cfg, cfg),
                             list(params.values()), samples=50, seed=1)
            assert err < 1e-5


def test_smoothness_dominates_for_huge_lambda():
    from .tensor import Parameter, Tape, precision
    with precision('double'):
        rng = np.random.default_rng(5)
        moving, fixed = rng.uniform(size=(1, 1, 8, 8)), rng.uniform(size=(1, 1, 8, 8))
        field = Parameter('field', rng.normal(scale=0.3, size=(1, 2, 8, 8)) + 0.25)

        def grad_of(f):
            with Tape() as tape:
                loss = f()
            tape.backward(loss, [field])
            return field.grad.copy()

        g_sim = grad_of(lambda: mse(warp_bilinear(moving, field), fixed))
        g_smooth = grad_of(lambda: smoothness(field) * 1e6)
        g_total = grad_of(lambda: mse(warp_bilinear(moving, field), fixed) + smoothness(field) * 1e6)
        assert np.linalg.norm(g_smooth) / np.linalg.norm(g_sim) > 100
        cos = np.dot(g_total.ravel(), g_smooth.ravel()) / (np.linalg.norm(g_total) * np.linalg.norm(g_smooth))
        assert cos > 0.999
