# -*- coding: utf-8 -*-
"""Unit tests for sgldreg.asgld.train and the snapshot pipeline around it."""
from fractions import Fraction

import numpy as np
import pytest

from sgldreg.asgld import OptimConfig, SnapshotSchedule, read_loss_csv, train, write_loss_csv
from sgldreg.checkpoint import checkpoint_load, checkpoint_save
from sgldreg.core import TrainingError
from sgldreg.dataset import DatasetSplit, SynthSpec, synth_pairs
from sgldreg.losses import LossConfig
from sgldreg.posterior import register
from sgldreg.tensor import Tensor
from sgldreg.unet import UNetConfig

# ── shared setup ──────────────────────────────────────────────────────────────

UNET = UNetConfig(channel_scale=Fraction(1, 4))
LOSS = LossConfig()
OPTIM = OptimConfig(batch_size=4, val_interval=5, log_interval=5)
SCHEDULE = SnapshotSchedule(12, 8)


@pytest.fixture(scope='module')
def split():
    pairs = synth_pairs(10, SynthSpec(size=16), max_disp=2.0, seed=4)
    return DatasetSplit(train=pairs[:6], val=pairs[6:8], test=pairs[8:])


def _run(split, seed=0, optim=OPTIM, schedule=SCHEDULE):
    return train(split, UNET, LOSS, optim, schedule, seed)


def _weights(result):
    return [p.tobytes() for s in result.snapshots for p in s.parameters.values()]


# ── training loop ─────────────────────────────────────────────────────────────

def test_train_keeps_post_burn_in_snapshots(split):
    result = _run(split)
    assert [s.iteration for s in result.snapshots] == [9, 10, 11, 12]
    assert [r.iteration for r in result.history] == list(range(1, 13))
    assert all(np.isfinite(r.train_loss) for r in result.history)


def test_train_validates_on_interval_and_last_iteration(split):
    result = _run(split)
    with_val = [r.iteration for r in result.history if r.val_loss is not None]
    assert with_val == [5, 10, 12]


def test_train_without_validation_pairs(split):
    result = _run(DatasetSplit(train=split.train))
    assert all(r.val_loss is None for r in result.history)


def test_train_is_deterministic(split):
    assert _weights(_run(split, seed=3)) == _weights(_run(split, seed=3))
    assert _weights(_run(split, seed=3)) != _weights(_run(split, seed=4))


def test_noise_changes_the_trajectory(split):
    plain = OptimConfig(batch_size=4, val_interval=5, log_interval=5, alpha=float('inf'))
    assert _weights(_run(split, optim=plain)) != _weights(_run(split))


def test_snapshots_differ_from_each_other(split):
    snaps = _run(split).snapshots
    first, last = snaps[0].parameters, snaps[-1].parameters
    assert any(not np.array_equal(first[k], last[k]) for k in first)


def test_thinned_schedule(split):
    result = _run(split, schedule=SnapshotSchedule(12, 4, 3))
    assert [s.iteration for s in result.snapshots] == [6, 9, 12]


def test_empty_training_set():
    from sgldreg.core import ContractError
    with pytest.raises(ContractError):
        train(DatasetSplit(), UNET, LOSS, OPTIM, SCHEDULE)


def test_divergence_names_the_iteration(split, monkeypatch):
    import sgldreg.asgld

    def exploding(moving, fixed, params, config, unet_config=None):
        return Tensor(np.float32(np.nan))

    monkeypatch.setattr(sgldreg.asgld, 'total_loss', exploding)
    with pytest.raises(TrainingError) as exc:
        _run(split)
    assert exc.value.iteration == 1
    assert 'iteration 1' in str(exc.value)


# ── outputs ───────────────────────────────────────────────────────────────────

def test_trained_snapshots_survive_checkpoint_and_register(split, tmp_path):
    result = _run(split)
    path = str(tmp_path / 'snapshots.ckpt')
    checkpoint_save(result.snapshots, path)
    loaded = checkpoint_load(path)
    pair = split.test[0]
    a, est_a = register(pair.moving, pair.fixed, result.snapshots, UNET, workers=1)
    b, est_b = register(pair.moving, pair.fixed, loaded, UNET, workers=2)
    assert est_a.sample_count == est_b.sample_count == 4
    assert np.array_equal(a, b)
    assert np.array_equal(est_a.std_field, est_b.std_field)
    assert est_a.mean_field.shape == (2, 16, 16)
    assert est_a.std_field.max() > 0


def test_loss_csv_round_trip(split, tmp_path):
    history = _run(split).history
    path = str(tmp_path / 'loss.csv')
    write_loss_csv(history, path)
    back = read_loss_csv(path)
    assert back == history
