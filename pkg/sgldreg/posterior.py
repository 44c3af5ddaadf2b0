# -*- coding: utf-8 -*-
"""Posterior deformation statistics from retained weight snapshots."""
from __future__ import absolute_import

import logging
from dataclasses import dataclass

import numpy as np

from .core import ContractError, DimensionError
from .unet import UNetConfig, check_snapshots, forward
from .utils import parallel_map
from .warp import warp_bilinear

logger = logging.getLogger(__name__)


@dataclass
class PosteriorEstimate:
    mean_field: np.ndarray
    std_field: np.ndarray
    sample_count: int

    @property
    def var_field(self):
        return self.std_field ** 2


def _check_pair(moving, fixed):
    moving, fixed = np.asarray(moving), np.asarray(fixed)
    if moving.shape != fixed.shape or moving.ndim != 4 or moving.shape[:2] != (1, 1):
        raise DimensionError('expected a (1,1,H,W) pair, got %s and %s' % (moving.shape, fixed.shape))
    return moving, fixed


def sample_fields(snapshots, moving, fixed, config=None, workers=None):
    """Predict one (2,H,W) field per snapshot, in snapshot order.

    Snapshots are evaluated independently on a thread pool; no tape is
    recorded.
    """
    config = config or UNetConfig()
    if not snapshots:
        raise ContractError('no snapshots to sample from')
    check_snapshots(snapshots, config)
    moving, fixed = _check_pair(moving, fixed)

    def predict(snap):
        return forward(snap.parameters, moving, fixed, config).data[0]

    return parallel_map(predict, snapshots, workers)


def _stack(fields):
    if not len(fields):
        raise ContractError('need at least one field')
    fields = [np.asarray(f) for f in fields]
    if any(f.shape != fields[0].shape for f in fields):
        raise DimensionError('fields differ in shape')
    return np.stack(fields)


def posterior_mean(fields):
    """Elementwise mean of the fields.

    Values are sorted along the sample axis before summation, so the result
    does not depend on the order of the fields.
    """
    stack = _stack(fields)
    if len(stack) == 1:
        return stack[0].copy()
    return np.sort(stack, axis=0).sum(axis=0) / stack.dtype.type(len(stack))


def posterior_std(fields):
    """Elementwise sample standard deviation with the n - 1 divisor; zero for a single field."""
    stack = _stack(fields)
    n = len(stack)
    if n == 1:
        return np.zeros_like(stack[0])
    mean = posterior_mean(stack)
    dev = np.sort((stack - mean) ** 2, axis=0).sum(axis=0)
    return np.sqrt(dev / stack.dtype.type(n - 1))


def register(moving, fixed, snapshots, config=None, workers=None):
    """Warp moving with the posterior-mean field; return (registered, PosteriorEstimate)."""
    fields = sample_fields(snapshots, moving, fixed, config, workers)
    mean = posterior_mean(fields)
    est = PosteriorEstimate(mean, posterior_std(fields), len(fields))
    registered = warp_bilinear(moving, mean).data
    logger.debug('registered with %d samples, max std %.3g px', est.sample_count, float(est.std_field.max()))
    return registered, est


################################################################################
#                                    TESTS                                     #
################################################################################

def _quarter(flow_init_std=1e-5):
    from fractions import Fraction
    return UNetConfig(channel_scale=Fraction(1, 4), flow_init_std=flow_init_std)


def _snapshots(cfg, seeds):
    from .unet import build_unet, snapshot
    return [snapshot(build_unet(cfg, s), i + 1) for i, s in enumerate(seeds)]


def _pair(seed=0, size=16):
    rng = np.random.default_rng(seed)
    return rng.uniform(size=(1, 1, size, size)), rng.uniform(size=(1, 1, size, size))


def test_mean_and_std_oracles():
    one = np.ones((2, 3, 3))
    assert np.array_equal(posterior_mean([one]), one)
    assert np.all(posterior_mean([one, -one]) == 0)
    assert np.all(posterior_std([one, one, one]) == 0)
    assert np.allclose(posterior_std([np.zeros((2, 3, 3)), 2 * one]), np.sqrt(2.0))
    assert np.all(posterior_std([one]) == 0)

    rng = np.random.default_rng(0)
    stack = rng.normal(size=(3, 2, 4, 4))
    mean, std = posterior_mean(stack), posterior_std(stack)
    for idx in np.ndindex(2, 4, 4):
        vals = [stack[k][idx] for k in range(3)]
        m = sum(vals) / 3
        s = (sum((x - m) ** 2 for x in vals) / 2) ** 0.5
        assert abs(mean[idx] - m) < 1e-12
        assert abs(std[idx] - s) < 1e-12


def test_permutation_invariance_and_duplicate_mean():
    rng = np.random.default_rng(1)
    stack = list(rng.normal(size=(5, 2, 4, 4)))
    perm = [stack[i] for i in (3, 0, 4, 2, 1)]
    assert np.array_equal(posterior_mean(stack), posterior_mean(perm))
    assert np.array_equal(posterior_std(stack), posterior_std(perm))
    mean = posterior_mean(stack)
    assert np.allclose(posterior_mean(stack + [mean]), mean, rtol=0, atol=1e-14)
    assert np.all(posterior_std(stack + [mean]) <= posterior_std(stack) + 1e-14)


def test_empty_and_mismatched():
    import pytest
    with pytest.raises(ContractError):
        posterior_mean([])
    with pytest.raises(ContractError):
        posterior_std([])
    with pytest.raises(DimensionError):
        posterior_mean([np.zeros((2, 3, 3)), np.zeros((2, 4, 4))])
    with pytest.raises(ContractError):
        sample_fields([], *_pair(), config=_quarter())


def test_sample_fields():
    cfg = _quarter(0.1)
    snaps = _snapshots(cfg, [0])
    moving, fixed = _pair()
    assert len(sample_fields(snaps, moving, fixed, cfg)) == 1
    dup = [type(snaps[0])(t, snaps[0].parameters) for t in (1, 2, 3)]
    fields = sample_fields(dup, moving, fixed, cfg, workers=3)
    assert len(fields) == 3
    assert all(np.array_equal(f, fields[0]) for f in fields)
    again = sample_fields(dup, moving, fixed, cfg, workers=1)
    assert all(np.array_equal(a, b) for a, b in zip(fields, again))


def test_snapshot_config_mismatch():
    import pytest
    from .core import IntegrityError
    snaps = _snapshots(_quarter(), [0])
    with pytest.raises(IntegrityError):
        sample_fields(snaps, *_pair(), config=UNetConfig())


def test_register_with_zero_field_snapshots():
    cfg = _quarter(0.0)
    moving, fixed = _pair(2)
    registered, est = register(moving, fixed, _snapshots(cfg, [0, 1]), cfg)
    assert est.sample_count == 2
    assert np.all(est.std_field == 0)
    assert np.array_equal(registered, moving.astype(registered.dtype))


def test_single_snapshot_equals_plain_pipeline():
    from .unet import parameters_from_snapshot
    cfg = _quarter(0.2)
    snaps = _snapshots(cfg, [4])
    moving, fixed = _pair(3)
    registered, est = register(moving, fixed, snaps, cfg)
    field = forward(parameters_from_snapshot(snaps[0]), moving, fixed, cfg)
    assert np.array_equal(est.mean_field, field.data[0])
    assert np.array_equal(registered, warp_bilinear(moving, field).data)
    assert np.all(est.std_field == 0)


def test_mean_field_warp_differs_from_mean_of_warps():
    from .tensor import precision
    with precision('double'):
        image = np.zeros((1, 1, 5, 5))
        image[0, 0, :, 2] = 1.0
        a, b = np.zeros((2, 5, 5)), np.zeros((2, 5, 5))
        a[0], b[0] = 1.0, -1.0
        warped_mean = warp_bilinear(image, posterior_mean([a, b])).data
        mean_warped = (warp_bilinear(image, a).data + warp_bilinear(image, b).data) / 2
        assert np.array_equal(warped_mean, image)
        assert not np.allclose(warped_mean, mean_warped)
