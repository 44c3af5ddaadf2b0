# -*- coding: utf-8 -*-
"""Desk-scale training experiments; minutes each, so run only with SGLDREG_SLOW=1."""
import os
from fractions import Fraction

import numpy as np
import pytest

from sgldreg.asgld import OptimConfig, SnapshotSchedule, train
from sgldreg.dataset import DatasetSplit, ImagePair, SynthSpec, render_shapes, split_pairs, synth_pairs
from sgldreg.evaluate import noise_sweep, paired_t_test
from sgldreg.losses import LossConfig
from sgldreg.posterior import register
from sgldreg.unet import UNetConfig

pytestmark = [
    pytest.mark.slow,
    pytest.mark.skipif(os.environ.get('SGLDREG_SLOW') != '1', reason='set SGLDREG_SLOW=1 to run'),
]

QUARTER = UNetConfig(channel_scale=Fraction(1, 4))
LOSS = LossConfig(similarity='mse', lam=0.05)


def _identical_pairs(n, seed):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        image, labels = render_shapes(rng, SynthSpec())
        out.append(ImagePair(image[None, None], image[None, None].copy(), labels, labels.copy(), source=(i, i)))
    return out


def test_identity_pairs_learn_a_near_zero_field():
    data = DatasetSplit(train=_identical_pairs(64, 0))
    result = train(data, QUARTER, LOSS, OptimConfig(), SnapshotSchedule(300, 250), seed=0)
    magnitudes = []
    for pair in _identical_pairs(20, 1):
        _, est = register(pair.moving, pair.fixed, result.snapshots, QUARTER)
        magnitudes.append(np.hypot(est.mean_field[0], est.mean_field[1]).mean())
    assert np.mean(magnitudes) < 0.5


def test_synthetic_deformations_are_recovered():
    split = split_pairs(synth_pairs(400, SynthSpec(), max_disp=3.0, seed=0), 20, 50)
    result = train(split, QUARTER, LOSS, OptimConfig(batch_size=32), SnapshotSchedule(1500, 1400), seed=0)
    before, after = [], []
    for pair in split.test:
        registered, _ = register(pair.moving, pair.fixed, result.snapshots, QUARTER)
        before.append(np.mean((pair.moving - pair.fixed) ** 2))
        after.append(np.mean((registered - pair.fixed) ** 2))
    assert np.mean(after) <= 0.2 * np.mean(before)


def test_posterior_averaging_beats_the_noise_free_baseline():
    split = split_pairs(synth_pairs(420, SynthSpec(), max_disp=3.0, seed=1), 20, 100)
    schedule = SnapshotSchedule(1500, 1350)
    noisy = train(split, QUARTER, LOSS, OptimConfig(batch_size=32, alpha=100.0), schedule, seed=0)
    plain = train(split, QUARTER, LOSS, OptimConfig(batch_size=32, alpha=float('inf')), schedule, seed=0)
    sigmas = [0.0, 0.1, 0.18]
    report = noise_sweep(split.test, noisy.snapshots, plain.snapshots[-1], sigmas, seed=0, config=QUARTER)
    for method in report.methods:
        means = [report.cell(method, s).mse_mean for s in sigmas]
        assert means == sorted(means), (method, means)
    averaged = report.cell('Averaged', 0.18).mse_mean
    last = report.cell('Noisy', 0.18).mse_mean
    baseline = report.cell('Baseline', 0.18).mse_mean
    assert averaged <= last <= baseline + 1e-4
    res = paired_t_test(report.scores('Averaged', 0.18), report.scores('Baseline', 0.18))
    assert res.t < 0 and res.p < 0.1
