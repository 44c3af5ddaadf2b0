# -*- coding: utf-8 -*-
"""Central-difference verification of tape gradients."""
from __future__ import absolute_import

import numpy as np

from .core import ContractError, NumericError
from .tensor import Tape, get_dtype


def grad_check(f, params, eps=1e-6, samples=None, seed=0):
    """Return the max relative error between tape and central-difference gradients.

    Args:
        f: callable with no arguments returning a scalar Tensor computed from params.
        params: leaf tensors (requires_grad) to perturb.
        eps: central-difference step, in [1e-7, 1e-4].
        samples: number of coordinates drawn uniformly over all params; None checks every one.
        seed: seed of the coordinate draw.

    The error of a coordinate is |analytic - fd| / max(1, |fd|).
    """
    if not 1e-7 <= eps <= 1e-4:
        raise ContractError('eps must be within [1e-7, 1e-4], got %r' % eps)
    if get_dtype() != np.float64:
        raise ContractError('gradient checks need double precision')
    params = list(params)
    with Tape() as tape:
        loss = f()
    tape.backward(loss, params)
    analytic = [p.grad.copy() for p in params]

    sizes = np.array([p.size for p in params])
    total = int(sizes.sum())
    if samples is None or samples >= total:
        coords = np.arange(total)
    else:
        coords = np.sort(np.random.default_rng(seed).choice(total, size=samples, replace=False))
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    worst = 0.0
    for c in coords:
        k = int(np.searchsorted(offsets, c, side='right') - 1)
        i = int(c - offsets[k])
        flat = params[k].data.reshape(-1)
        orig = flat[i]
        flat[i] = orig + eps
        lp = f().item()
        flat[i] = orig - eps
        lm = f().item()
        flat[i] = orig
        if not (np.isfinite(lp) and np.isfinite(lm)):
            raise NumericError('non-finite loss at perturbed coordinate %d of %s' % (i, getattr(params[k], 'name', k)))
        fd = (lp - lm) / (2 * eps)
        err = abs(analytic[k].reshape(-1)[i] - fd) / max(1.0, abs(fd))
        worst = max(worst, err)
    return worst


################################################################################
#                                    TESTS                                     #
################################################################################

def test_quadratic_form_is_exact():
    from .tensor import Parameter, Tensor, precision
    with precision('double'):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(4, 4))
        q = Tensor(a @ a.T)
        x = Parameter('x', rng.normal(size=(4, 1)))
        err = grad_check(lambda: (x * (q * x.reshape(1, 4)).sum(axis=1)).sum(), [x])
        assert err < 1e-9


def test_sampled_coordinates():
    from .tensor import Parameter, precision
    with precision('double'):
        x = Parameter('x', np.linspace(-1.0, 1.0, 100))
        assert grad_check(lambda: (x * x * x).sum(), [x], samples=10) < 1e-7


def test_corrupted_backward_rule_is_caught():
    from .tensor import Parameter, Square, precision
    saved = Square.backward
    Square.backward = lambda self, grad: (3 * grad * self.inputs[0].data,)
    try:
        with precision('double'):
            x = Parameter('x', [1.0, 2.0])
            assert grad_check(lambda: x.square().sum(), [x]) > 1e-2
    finally:
        Square.backward = saved


def test_contract():
    import pytest
    from .tensor import Parameter, precision
    x = Parameter('x', [1.0])
    with pytest.raises(ContractError):
        grad_check(lambda: x.square().sum(), [x])
    with precision('double'):
        with pytest.raises(ContractError):
            grad_check(lambda: x.square().sum(), [x], eps=1e-2)
