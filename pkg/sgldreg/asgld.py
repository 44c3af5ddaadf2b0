# -*- coding: utf-8 -*-
"""Adam with adaptive Langevin noise, and the training loop that samples weights.

Each iteration computes the clean minibatch gradient g, adds Gaussian noise
with per-element variance s/alpha, where s = eta / sqrt(v_hat + eps) is
Adam's adaptive step size, and feeds the noisy gradient to a standard Adam
update. Weights visited after the burn-in are kept as posterior samples.

The step size used for the noise is computed from a preview of v_hat that
already includes the clean gradient of the current iteration; the parameter
step uses v_hat after the noisy update. With alpha = inf no noise is drawn
and the update is exactly Adam.
"""
from __future__ import absolute_import

import csv
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .core import ConfigError, ContractError, NumericError, TrainingError
from .losses import LossConfig, total_loss
from .tensor import Tape
from .unet import UNetConfig, WeightSnapshot, build_unet, snapshot

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class OptimConfig:
    eta: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    alpha: float = 100.0
    batch_size: int = 64
    val_interval: int = 10
    log_interval: int = 50

    def __post_init__(self):
        if not self.eta > 0:
            raise ConfigError('eta must be positive, got %r' % self.eta)
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError('beta1 and beta2 must be in [0, 1)')
        if self.epsilon < 0:
            raise ConfigError('epsilon must be >= 0')
        if not self.alpha > 0:
            raise ConfigError('alpha must be positive (inf disables noise), got %r' % self.alpha)
        if self.batch_size < 1 or self.val_interval < 1 or self.log_interval < 1:
            raise ConfigError('batch_size, val_interval and log_interval must be >= 1')

    @property
    def noisy(self):
        return not math.isinf(self.alpha)


@dataclass(frozen=True)
class SnapshotSchedule:
    """Keep iteration t when burn_in < t <= total and (total - t) is a multiple of thinning."""
    total: int
    burn_in: int = 0
    thinning: int = 1

    def __post_init__(self):
        if not 0 <= self.burn_in < self.total:
            raise ConfigError('need 0 <= burn_in < total iterations, got %d and %d' % (self.burn_in, self.total))
        if self.thinning < 1:
            raise ConfigError('thinning must be >= 1, got %d' % self.thinning)

    def retains(self, t):
        return self.burn_in < t <= self.total and (self.total - t) % self.thinning == 0

    def iterations(self):
        return [t for t in range(self.burn_in + 1, self.total + 1) if self.retains(t)]

    def __len__(self):
        return -(-(self.total - self.burn_in) // self.thinning)


class AdamSgldState(object):
    """Per-parameter moments plus the hyper-parameters and the noise stream.

    Moments are kept in double precision whatever the parameter precision.
    """

    def __init__(self, shapes, eta=1e-3, beta1=0.9, beta2=0.999, epsilon=1e-8, alpha=100.0, rng=None):
        if not alpha > 0:
            raise ConfigError('alpha must be positive, got %r' % alpha)
        self.eta, self.beta1, self.beta2, self.epsilon, self.alpha = eta, beta1, beta2, epsilon, alpha
        self.rng = rng if rng is not None else np.random.default_rng()
        self.t = 0
        self.m = OrderedDict((k, np.zeros(s)) for k, s in shapes.items())
        self.v = OrderedDict((k, np.zeros(s)) for k, s in shapes.items())
        self.v_hat = OrderedDict((k, np.zeros(s)) for k, s in shapes.items())
        self.m_hat = OrderedDict((k, np.zeros(s)) for k, s in shapes.items())
        self._undo = None

    @classmethod
    def for_params(cls, params, config, rng=None):
        shapes = OrderedDict((k, p.shape) for k, p in params.items())
        return cls(shapes, config.eta, config.beta1, config.beta2, config.epsilon, config.alpha, rng)

    def prepare(self, grads):
        """Start iteration t + 1: advance t and preview v_hat with the clean gradient.

        The previous t, v_hat and noise stream position are kept until
        adam_update commits the step or rolls it back.
        """
        self._undo = (self.t, self.v_hat, self.rng.bit_generator.state)
        self.t += 1
        c2 = 1.0 - self.beta2 ** self.t
        v_hat = OrderedDict(self.v_hat)
        for k, g in grads.items():
            g = np.asarray(g, dtype=np.float64)
            v_hat[k] = (self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g) / c2
        self.v_hat = v_hat

    def rollback(self):
        """Undo the last prepare() (and any noise drawn since)."""
        if self._undo is None:
            raise ContractError('nothing to roll back')
        self.t, self.v_hat, self.rng.bit_generator.state = self._undo
        self._undo = None


def step_size(state):
    """Adaptive step size eta / sqrt(v_hat + eps) of every parameter."""
    if state.t < 1:
        raise ContractError('step size is defined from the first iteration on')
    return OrderedDict((k, state.eta / np.sqrt(vh + state.epsilon)) for k, vh in state.v_hat.items())


def inject_noise(grads, state):
    """Return g + N(0, s/alpha) elementwise; the input arrays are left untouched.

    Draws are taken from state.rng in parameter order.
    """
    if not state.alpha > 0:
        raise ConfigError('alpha must be positive, got %r' % state.alpha)
    if math.isinf(state.alpha):
        return OrderedDict((k, np.array(g, dtype=np.float64)) for k, g in grads.items())
    s = step_size(state)
    noisy = OrderedDict()
    for k, g in grads.items():
        std = np.sqrt(s[k] / state.alpha)
        noisy[k] = np.asarray(g, dtype=np.float64) + std * state.rng.standard_normal(np.shape(g))
    return noisy


def adam_update(params, grads, state):
    """Apply one bias-corrected Adam step to params.

    If any update is non-finite nothing changes: params and moments are left
    alone and the state is rolled back to before prepare().
    """
    if state.t < 1:
        raise ContractError('call prepare() before adam_update()')
    b1, b2, t = state.beta1, state.beta2, state.t
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    staged = []
    for k, g in grads.items():
        m = b1 * state.m[k] + (1.0 - b1) * g
        v = b2 * state.v[k] + (1.0 - b2) * g * g
        m_hat, v_hat = m / c1, v / c2
        update = state.eta / np.sqrt(v_hat + state.epsilon) * m_hat
        if not np.all(np.isfinite(update)):
            if state._undo is not None:
                state.rollback()
            raise NumericError('non-finite update for %s' % k)
        staged.append((k, m, v, m_hat, v_hat, update))
    for k, m, v, m_hat, v_hat, update in staged:
        state.m[k], state.v[k], state.m_hat[k], state.v_hat[k] = m, v, m_hat, v_hat
        p = params[k]
        p.data -= update.astype(p.dtype)
    state._undo = None


class AdamSgld(object):
    """Optimizer object bundling prepare, noise injection and the Adam step."""

    def __init__(self, params, config=None, rng=None):
        self.params = params
        self.config = config or OptimConfig()
        self.state = AdamSgldState.for_params(params, self.config, rng)

    def step(self, grads=None):
        """Update the parameters from grads (default: each parameter's .grad); return the noisy gradients."""
        if grads is None:
            grads = OrderedDict((k, p.grad) for k, p in self.params.items())
        self.state.prepare(grads)
        noisy = inject_noise(grads, self.state)
        adam_update(self.params, noisy, self.state)
        return noisy


@dataclass
class LossRecord:
    iteration: int
    train_loss: float
    val_loss: Optional[float] = None


@dataclass
class TrainResult:
    snapshots: List[WeightSnapshot]
    history: List[LossRecord]
    params: Dict = field(default_factory=OrderedDict)


def _stack(pairs):
    moving = np.concatenate([p.moving for p in pairs], axis=0)
    fixed = np.concatenate([p.fixed for p in pairs], axis=0)
    return moving, fixed


def evaluate_loss(pairs, params, loss_config, unet_config, batch_size=64):
    """Mean total loss over pairs, evaluated without recording a tape."""
    total, count = 0.0, 0
    for i in range(0, len(pairs), batch_size):
        chunk = pairs[i:i + batch_size]
        moving, fixed = _stack(chunk)
        total += total_loss(moving, fixed, params, loss_config, unet_config).item() * len(chunk)
        count += len(chunk)
    return total / count


def train(dataset, unet_config=None, loss_config=None, optim_config=None, schedule=None, seed=0):
    """Train the network and collect post-burn-in weight snapshots.

    Args:
        dataset: object with `train` (non-empty) and `val` lists of ImagePair.
        seed: initializes the weights; minibatch order and noise use separate
            streams derived from it.

    Returns:
        TrainResult with the snapshots, the per-iteration loss history and
        the final parameters.

    Raises:
        TrainingError: the loss or an update became non-finite.
    """
    unet_config = unet_config or UNetConfig()
    loss_config = loss_config or LossConfig()
    optim_config = optim_config or OptimConfig()
    schedule = schedule or SnapshotSchedule(100, 90)
    pairs = list(dataset.train)
    if not pairs:
        raise ContractError('training set is empty')
    val_pairs = list(getattr(dataset, 'val', []) or [])

    params = build_unet(unet_config, seed)
    batch_rng = np.random.default_rng([seed, 1])
    opt = AdamSgld(params, optim_config, rng=np.random.default_rng([seed, 2]))
    batch = min(optim_config.batch_size, len(pairs))
    snapshots, history = [], []
    logger.info('training %d iterations on %d pairs (burn-in %d, %d snapshots, %s)',
                schedule.total, len(pairs), schedule.burn_in, len(schedule),
                'alpha=%g' % optim_config.alpha if optim_config.noisy else 'no noise')

    for t in range(1, schedule.total + 1):
        idx = np.sort(batch_rng.choice(len(pairs), size=batch, replace=False))
        moving, fixed = _stack([pairs[i] for i in idx])
        try:
            with Tape() as tape:
                loss = total_loss(moving, fixed, params, loss_config, unet_config)
            value = loss.item()
            if not np.isfinite(value):
                raise NumericError('loss is %r' % value)
            tape.backward(loss, list(params.values()))
            opt.step()
            val = None
            if val_pairs and (t % optim_config.val_interval == 0 or t == schedule.total):
                val = evaluate_loss(val_pairs, params, loss_config, unet_config, optim_config.batch_size)
        except TrainingError:
            raise
        except NumericError as e:
            raise TrainingError(str(e), t)
        history.append(LossRecord(t, value, val))
        if schedule.retains(t):
            snapshots.append(snapshot(params, t))
            logger.debug('kept snapshot %d/%d at iteration %d', len(snapshots), len(schedule), t)
        if t % optim_config.log_interval == 0 or t == schedule.total:
            logger.info('iteration %d: train loss %.6g%s', t, value, '' if val is None else ', val loss %.6g' % val)

    for w in window_stats(history, max(1, schedule.total // 10))[-3:]:
        logger.info('iterations %d-%d: train mean %.6g var %.3g', w.start, w.end, w.train_mean, w.train_var)
    return TrainResult(snapshots, history, params)


LOSS_CSV_FIELDS = ('iteration', 'train_loss', 'val_loss')


def write_loss_csv(history, path):
    with open(path, 'w', newline='') as f:
        w = csv.writer(f)
        w.writerow(LOSS_CSV_FIELDS)
        for r in history:
            w.writerow([r.iteration, repr(float(r.train_loss)), '' if r.val_loss is None else repr(float(r.val_loss))])


def read_loss_csv(path):
    with open(path, newline='') as f:
        rows = list(csv.DictReader(f))
    return [LossRecord(int(r['iteration']), float(r['train_loss']),
                       float(r['val_loss']) if r['val_loss'] else None) for r in rows]


@dataclass
class WindowStats:
    start: int
    end: int
    train_mean: float
    train_var: float
    val_mean: Optional[float] = None
    val_var: Optional[float] = None


def window_stats(history, window):
    """Mean and variance of the losses over consecutive windows ending at the last iteration.

    Windows are aligned on the end of the history; the first one may be
    shorter. Validation statistics are None for windows without a
    validation point. Use it to pick the burn-in: past it the windows stop
    drifting and only fluctuate.
    """
    if window < 1:
        raise ConfigError('window must be >= 1')
    out = []
    end = len(history)
    while end > 0:
        start = max(0, end - window)
        chunk = history[start:end]
        train = np.array([r.train_loss for r in chunk])
        val = np.array([r.val_loss for r in chunk if r.val_loss is not None])
        out.append(WindowStats(chunk[0].iteration, chunk[-1].iteration, float(train.mean()), float(train.var()),
                               float(val.mean()) if val.size else None, float(val.var()) if val.size else None))
        end = start
    return out[::-1]


################################################################################
#                                    TESTS                                     #
################################################################################

def _state(shapes, **kwargs):
    return AdamSgldState(OrderedDict(shapes), rng=np.random.default_rng(0), **kwargs)


def test_step_size():
    import pytest
    st = _state({'w': (3,)}, eta=1e-3, epsilon=1e-8)
    with pytest.raises(ContractError):
        step_size(st)
    st.prepare({'w': np.zeros(3)})
    assert np.allclose(step_size(st)['w'], 1e-3 / np.sqrt(1e-8))
    st.v_hat['w'] = np.ones(3)
    assert np.allclose(step_size(st)['w'], 1e-3, rtol=1e-7)
    rng = np.random.default_rng(1)
    st.v_hat['w'] = rng.uniform(size=3)
    s = step_size(st)['w']
    for i in range(3):
        assert s[i] == 1e-3 / np.sqrt(st.v_hat['w'][i] + 1e-8)
    assert np.all(s > 0)


def test_prepare_previews_second_moment():
    st = _state({'w': (2,)})
    st.prepare({'w': np.array([2.0, -4.0])})
    assert st.t == 1
    # at t=1 the bias correction cancels: v_hat = g^2
    assert np.allclose(st.v_hat['w'], [4.0, 16.0])
    assert np.all(st.v['w'] == 0)


def test_noise_disabled_is_identity():
    st = _state({'w': (4,)}, alpha=float('inf'))
    st.prepare({'w': np.zeros(4)})
    g = np.array([1.0, -2.0, 3.0, 0.5])
    noisy = inject_noise({'w': g}, st)
    assert np.array_equal(noisy['w'], g)
    assert noisy['w'] is not g


def test_noise_statistics():
    n = 10 ** 5
    st = _state({'w': (n,)}, eta=1e-3, epsilon=0.0, alpha=100.0)
    st.prepare({'w': np.ones(n)})
    # v_hat = 1 so s = eta exactly
    assert np.all(step_size(st)['w'] == 1e-3)
    clean = np.zeros(n)
    noise = inject_noise({'w': clean}, st)['w']
    assert np.all(clean == 0)
    var = 1e-3 / 100
    assert abs(noise.var() / var - 1) < 0.03
    assert abs(noise.mean()) < 4 * np.sqrt(var / n)
    lag1 = np.corrcoef(noise[:-1], noise[1:])[0, 1]
    assert abs(lag1) < 0.02


def test_noise_is_independent_across_iterations():
    st = _state({'w': (1,)}, eta=1e-3, epsilon=0.0, alpha=100.0)
    draws = []
    for _ in range(10 ** 4):
        st.prepare({'w': np.ones(1)})
        draws.append(inject_noise({'w': np.zeros(1)}, st)['w'][0])
    draws = np.array(draws)
    assert abs(np.corrcoef(draws[:-1], draws[1:])[0, 1]) < 0.02


def test_noise_rejects_non_positive_alpha():
    import pytest
    with pytest.raises(ConfigError):
        _state({'w': (1,)}, alpha=0.0)
    with pytest.raises(ConfigError):
        OptimConfig(alpha=-1.0)


def test_first_step_bias_correction():
    from .tensor import Parameter, precision
    with precision('double'):
        w = Parameter('w', [1.0, 2.0, 3.0])
        st = _state({'w': (3,)}, eta=1e-3, epsilon=1e-30)
        g = {'w': np.array([0.5, -2.0, 4.0])}
        st.prepare(g)
        adam_update({'w': w}, g, st)
        assert np.array_equal(st.m_hat['w'], g['w'])
        # |m_hat| / sqrt(v_hat) = 1 at t=1
        assert np.allclose(w.data, [1.0 - 1e-3, 2.0 + 1e-3, 3.0 - 1e-3], rtol=0, atol=1e-15)


def test_zero_gradient_leaves_params():
    from .tensor import Parameter, precision
    with precision('double'):
        w = Parameter('w', [1.5, -2.5])
        opt = AdamSgld({'w': w}, OptimConfig(alpha=float('inf')))
        w.grad[...] = 0
        opt.step()
        assert np.array_equal(w.data, [1.5, -2.5])


def test_non_finite_update_is_atomic():
    import pytest
    from .tensor import Parameter, precision
    with precision('double'):
        a, b = Parameter('a', [1.0]), Parameter('b', [1.0])
        st = _state({'a': (1,), 'b': (1,)})
        good = {'a': np.array([1.0]), 'b': np.array([2.0])}
        st.prepare(good)
        adam_update({'a': a, 'b': b}, good, st)
        before = a.data.copy(), b.data.copy()
        t, v_hat, rng_state = st.t, {k: v.copy() for k, v in st.v_hat.items()}, st.rng.bit_generator.state
        grads = {'a': np.array([1.0]), 'b': np.array([np.inf])}
        st.prepare(grads)
        inject_noise(grads, st)
        with pytest.raises(NumericError):
            adam_update({'a': a, 'b': b}, grads, st)
        assert np.array_equal(a.data, before[0]) and np.array_equal(b.data, before[1])
        assert a.data[0] < 1.0
        assert st.t == t
        assert all(np.array_equal(st.v_hat[k], v_hat[k]) for k in v_hat)
        assert st.rng.bit_generator.state == rng_state


def test_matches_scalar_adam_on_quadratic_bowl():
    from .tensor import Parameter, precision
    eta, b1, b2, eps = 1e-2, 0.9, 0.999, 1e-8
    curv = np.array([1.0, 10.0])
    with precision('double'):
        w = Parameter('w', [1.0, -1.0])
        opt = AdamSgld({'w': w}, OptimConfig(eta=eta, beta1=b1, beta2=b2, epsilon=eps, alpha=float('inf')))
        ref = [1.0, -1.0]
        m, v = [0.0, 0.0], [0.0, 0.0]
        for t in range(1, 51):
            w.grad[...] = curv * w.data
            opt.step()
            for i in range(2):
                g = curv[i] * ref[i]
                m[i] = b1 * m[i] + (1 - b1) * g
                v[i] = b2 * v[i] + (1 - b2) * g * g
                m_hat = m[i] / (1 - b1 ** t)
                v_hat = v[i] / (1 - b2 ** t)
                ref[i] -= eta / math.sqrt(v_hat + eps) * m_hat
            assert np.max(np.abs(w.data - ref)) < 1e-10


def test_schedule():
    import pytest
    s = SnapshotSchedule(10, 7)
    assert s.iterations() == [8, 9, 10]
    assert len(s) == 3
    s = SnapshotSchedule(50, 40)
    assert len(s) == len(s.iterations()) == 10
    for total, burn, thin in ((10, 0, 3), (100, 17, 7), (9, 8, 5), (200, 0, 1)):
        s = SnapshotSchedule(total, burn, thin)
        its = s.iterations()
        assert len(its) == len(s) == math.ceil((total - burn) / thin)
        assert its[-1] == total
    with pytest.raises(ConfigError):
        SnapshotSchedule(10, 10)
    with pytest.raises(ConfigError):
        SnapshotSchedule(10, 2, 0)


def test_window_stats():
    history = [LossRecord(t, float(t), 10.0 * t if t % 2 == 0 else None) for t in range(1, 8)]
    ws = window_stats(history, 3)
    assert [(w.start, w.end) for w in ws] == [(1, 1), (2, 4), (5, 7)]
    assert ws[-1].train_mean == 6.0
    assert abs(ws[-1].train_var - 2.0 / 3.0) < 1e-15
    assert ws[-1].val_mean == 60.0 and ws[-1].val_var == 0.0
    assert ws[0].val_mean is None


def test_loss_csv_round_trip(tmp_path):
    history = [LossRecord(1, 0.125, None), LossRecord(2, 1.0 / 3.0, 0.1)]
    path = str(tmp_path / 'loss.csv')
    write_loss_csv(history, path)
    with open(path) as f:
        assert f.readline().strip() == 'iteration,train_loss,val_loss'
    assert read_loss_csv(path) == history
