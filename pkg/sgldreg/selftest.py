# -*- coding: utf-8 -*-
"""Built-in verification suites run by `sgldreg selftest`.

Four suites: gradients of every differentiable primitive and of the full
loss through a small network, statistics of the injected Langevin noise,
warp oracles, and a plain Adam trajectory against a scalar reference loop.
A check that raises counts as failed; the report lists every check.
"""
from __future__ import absolute_import

import logging
import math
import time
from dataclasses import dataclass, field
from fractions import Fraction
from typing import List

import numpy as np

from .asgld import AdamSgld, AdamSgldState, OptimConfig, inject_noise, step_size
from .core import Error
from .gradcheck import grad_check
from .losses import LossConfig, mse, neg_lcc, smoothness, total_loss
from .ops import concat_channels, conv2d, inject_faults, leaky_relu, upsample2x_nearest
from .tensor import Parameter, Tensor, precision
from .unet import UNetConfig, build_unet
from .warp import warp_bilinear

logger = logging.getLogger(__name__)

GRAD_TOLERANCE = 1e-5


@dataclass
class Check:
    suite: str
    name: str
    passed: bool
    detail: str = ''

    def __str__(self):
        return '%s %s/%s%s' % ('PASS' if self.passed else 'FAIL', self.suite, self.name,
                               ': ' + self.detail if self.detail else '')


@dataclass
class SelftestReport:
    checks: List[Check] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self):
        return all(c.passed for c in self.checks)

    def failures(self):
        return [c for c in self.checks if not c.passed]

    def suites(self):
        return sorted(set(c.suite for c in self.checks))


def _bound(value, limit, fmt='%.3g'):
    """(passed, detail) for value < limit."""
    return value < limit, ('%s < %s' % (fmt, fmt)) % (value, limit)


# gradients

def _gradient_checks():
    rng = np.random.default_rng(0)
    x = Parameter('x', rng.normal(size=(2, 3, 6, 6)))
    w = Parameter('w', rng.normal(size=(4, 3, 3, 3)))
    b = Parameter('b', rng.normal(size=4))
    yield 'conv2d', lambda: grad_check(lambda: conv2d(x, w, b, padding=1).square().mean(), [x, w, b])
    yield 'conv2d_stride2', lambda: grad_check(lambda: conv2d(x, w, b, stride=2, padding=1).square().mean(),
                                               [x, w, b])

    # keep inputs away from the kink at zero
    r = Parameter('r', rng.uniform(0.5, 1.0, 16) * np.array([1.0, -1.0] * 8))
    yield 'leaky_relu', lambda: grad_check(lambda: leaky_relu(r).square().sum(), [r])

    u = Parameter('u', rng.normal(size=(1, 2, 3, 3)))
    uw = rng.normal(size=(1, 2, 6, 6))
    yield 'upsample', lambda: grad_check(lambda: (upsample2x_nearest(u) * uw).sum(), [u])

    ca, cb = Parameter('a', rng.normal(size=(1, 2, 3, 3))), Parameter('b', rng.normal(size=(1, 1, 3, 3)))
    cw = rng.normal(size=(1, 3, 3, 3))
    yield 'concat', lambda: grad_check(lambda: (concat_channels(ca, cb) * cw).sum(), [ca, cb])

    image = Parameter('image', rng.uniform(size=(1, 1, 6, 6)))
    # quarter-pixel offsets stay off the integer grid and inside the image
    flow = Parameter('field', 0.25 + rng.integers(-1, 1, size=(1, 2, 6, 6)) * 0.5)
    flow.data[:, 0, :, 0] = 0.25
    flow.data[:, 0, :, -1] = -0.25
    flow.data[:, 1, 0, :] = 0.25
    flow.data[:, 1, -1, :] = -0.25
    ww = rng.normal(size=(1, 1, 6, 6))
    yield 'warp_bilinear', lambda: grad_check(lambda: (warp_bilinear(image, flow) * ww).sum(), [image, flow])

    sa, sb = Parameter('a', rng.uniform(size=(1, 1, 7, 7))), Parameter('b', rng.uniform(size=(1, 1, 7, 7)))
    yield 'mse', lambda: grad_check(lambda: mse(sa, sb), [sa, sb])
    yield 'neg_lcc', lambda: grad_check(lambda: neg_lcc(sa, sb, 3), [sa, sb])
    sf = Parameter('f', rng.normal(size=(2, 6, 6)))
    yield 'smoothness', lambda: grad_check(lambda: smoothness(sf), [sf])

    cfg = UNetConfig(channel_scale=Fraction(1, 4), flow_init_std=0.5)
    params = build_unet(cfg, 7)
    moving, fixed = rng.uniform(size=(1, 1, 16, 16)), rng.uniform(size=(1, 1, 16, 16))
    loss_cfg = LossConfig()
    yield 'total_loss', lambda: grad_check(lambda: total_loss(moving, fixed, params, loss_cfg, cfg),
                                           list(params.values()), samples=50, seed=1)


def gradient_suite():
    with precision('double'):
        for name, run in _gradient_checks():
            yield (name,) + _bound(run(), GRAD_TOLERANCE)


# noise

def noise_suite(draws=10 ** 5):
    st = AdamSgldState({'w': (draws,)}, eta=1e-3, epsilon=0.0, alpha=100.0, rng=np.random.default_rng(0))
    # v_hat = 1 so the step size is exactly eta
    st.prepare({'w': np.ones(draws)})
    s = float(step_size(st)['w'][0])
    noise = inject_noise({'w': np.zeros(draws)}, st)['w']
    var = s / st.alpha
    rel = abs(noise.var() / var - 1.0)
    yield ('variance', rel < 0.03, 'relative error %.4f < 0.03' % rel)
    se = abs(noise.mean()) / math.sqrt(var / draws)
    yield ('mean', se < 4.0, '%.2f standard errors < 4' % se)
    yield ('lag1',) + _bound(abs(np.corrcoef(noise[:-1], noise[1:])[0, 1]), 0.02, '%.4f')

    off = AdamSgldState({'w': (4,)}, alpha=float('inf'), rng=np.random.default_rng(0))
    off.prepare({'w': np.zeros(4)})
    g = np.array([1.0, -2.0, 3.0, 0.5])
    yield ('alpha_inf_identity', bool(np.array_equal(inject_noise({'w': g}, off)['w'], g)), '')


# warp

def warp_suite(cases=1000):
    rng = np.random.default_rng(1)
    image = rng.uniform(size=(2, 1, 7, 9)).astype(np.float32)
    out = warp_bilinear(Tensor(image), np.zeros((2, 2, 7, 9))).data
    yield ('zero_field_identity', bool(np.array_equal(out, image)), 'bitwise')

    with precision('double'):
        image = rng.uniform(size=(1, 1, 6, 6))
        shift = np.zeros((2, 6, 6))
        shift[1] = 1.0
        out = warp_bilinear(image, shift).data[0, 0]
        yield ('integer_shift', bool(np.array_equal(out[:-1], image[0, 0, 1:])), 'interior rows')

        worst = 0.0
        for _ in range(cases):
            image = rng.uniform(-1, 3, size=(1, 1, 5, 5))
            out = warp_bilinear(image, rng.normal(scale=3.0, size=(2, 5, 5))).data
            worst = max(worst, out.max() - image.max(), image.min() - out.min())
        yield ('convexity', worst <= 1e-12, '%d cases, worst overshoot %.3g' % (cases, worst))


# adam

def adam_suite(steps=50):
    eta, b1, b2, eps = 1e-2, 0.9, 0.999, 1e-8
    curv = np.array([1.0, 10.0])
    with precision('double'):
        w = Parameter('w', [1.0, -1.0])
        opt = AdamSgld({'w': w}, OptimConfig(eta=eta, beta1=b1, beta2=b2, epsilon=eps, alpha=float('inf')))
        ref, m, v = [1.0, -1.0], [0.0, 0.0], [0.0, 0.0]
        worst = 0.0
        for t in range(1, steps + 1):
            w.grad[...] = curv * w.data
            opt.step()
            for i in range(2):
                g = curv[i] * ref[i]
                m[i] = b1 * m[i] + (1 - b1) * g
                v[i] = b2 * v[i] + (1 - b2) * g * g
                ref[i] -= eta / math.sqrt(v[i] / (1 - b2 ** t) + eps) * (m[i] / (1 - b1 ** t))
            worst = max(worst, float(np.max(np.abs(w.data - ref))))
    yield ('trajectory',) + _bound(worst, 1e-10)


SUITES = (
    ('gradient', gradient_suite),
    ('noise', noise_suite),
    ('warp', warp_suite),
    ('adam', adam_suite),
)


def _run_suite(suite, fn, report):
    results = fn()
    while True:
        try:
            name, passed, detail = next(results)
        except StopIteration:
            return
        except (Error, ArithmeticError, ValueError) as e:
            report.checks.append(Check(suite, 'error', False, '%s: %s' % (e.__class__.__name__, e)))
            return
        report.checks.append(Check(suite, name, bool(passed), detail))


def run_selftest(faults=(), suites=None):
    """Run the suites (all by default) with the named backward faults injected."""
    report = SelftestReport()
    start = time.time()
    with inject_faults(faults):
        for suite, fn in SUITES:
            if suites is None or suite in suites:
                _run_suite(suite, fn, report)
                logger.debug('suite %s done after %.1fs', suite, time.time() - start)
    report.seconds = time.time() - start
    return report


################################################################################
#                                    TESTS                                     #
################################################################################

def test_pristine_build_passes():
    report = run_selftest()
    assert report.passed, [str(c) for c in report.failures()]
    assert report.suites() == ['adam', 'gradient', 'noise', 'warp']


def test_injected_fault_fails_gradient_suite():
    report = run_selftest(faults=['leaky_relu'], suites=('gradient', 'adam'))
    failed = set(c.name for c in report.failures())
    assert report.failures() and all(c.suite == 'gradient' for c in report.failures())
    assert 'leaky_relu' in failed and 'total_loss' in failed
    assert 'mse' not in failed
    assert not run_selftest(suites=('gradient',)).failures()


def test_raising_check_is_reported():
    def broken():
        yield ('first', True, '')
        raise ValueError('boom')

    report = SelftestReport()
    _run_suite('demo', broken, report)
    assert [str(c) for c in report.checks] == ['PASS demo/first', 'FAIL demo/error: ValueError: boom']
