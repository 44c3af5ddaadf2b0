# -*- coding: utf-8 -*-
"""Registration datasets: MNIST digit pairs, synthetic labelled shapes, noise corruption."""
from __future__ import absolute_import

import logging
import os
from dataclasses import dataclass, field
from itertools import permutations
from typing import List, Optional, Tuple

import numpy as np
from scipy import ndimage

from .core import ConfigError, ContractError, FormatError
from .idx import load_idx, load_mnist, save_idx
from .tensor import precision
from .warp import field_gradient, warp_bilinear, warp_nearest

logger = logging.getLogger(__name__)

# largest displacement the synthetic generator produces, in pixels
MAX_SYNTH_DISP = 4.0

SYNTH_FILES = {
    'moving': 'moving.idx',
    'fixed': 'fixed.idx',
    'moving_labels': 'moving_labels.idx',
    'fixed_labels': 'fixed_labels.idx',
    'true_field': 'true_field.idx',
}


@dataclass
class ImagePair:
    """Moving and fixed image, each (1, 1, H, W) with intensities in [0, 1]."""
    moving: np.ndarray
    fixed: np.ndarray
    moving_labels: Optional[np.ndarray] = None
    fixed_labels: Optional[np.ndarray] = None
    true_field: Optional[np.ndarray] = None
    source: Tuple[int, int] = (-1, -1)

    @property
    def shape(self):
        return self.moving.shape[-2:]

    @property
    def has_labels(self):
        return self.moving_labels is not None and self.fixed_labels is not None


@dataclass
class DatasetSplit:
    train: List[ImagePair] = field(default_factory=list)
    val: List[ImagePair] = field(default_factory=list)
    test: List[ImagePair] = field(default_factory=list)
    seed: int = 0


@dataclass(frozen=True)
class SplitSpec:
    """Source images per split and pair caps (0 means no cap)."""
    digit: int = 5
    train_images: int = 200
    val_images: int = 11
    test_images: int = 33
    train_pairs: int = 0
    val_pairs: int = 100
    test_pairs: int = 1000
    size: int = 32


def resize_bilinear(image, height, width):
    """Bilinear resampling of a 2-d image on a corner-aligned grid."""
    image = np.asarray(image, dtype=np.float64)
    if height < 1 or width < 1:
        raise ConfigError('target size must be positive, got %dx%d' % (height, width))
    h, w = image.shape
    if (h, w) == (height, width):
        return image.copy()
    ys = np.linspace(0.0, h - 1, height) if height > 1 else np.zeros(1)
    xs = np.linspace(0.0, w - 1, width) if width > 1 else np.zeros(1)
    yy, xx = np.meshgrid(ys, xs, indexing='ij')
    return ndimage.map_coordinates(image, [yy, xx], order=1, mode='nearest')


def add_gaussian_noise(image, sigma, rng):
    """image + N(0, sigma^2) elementwise, clipped to [0, 1]."""
    if sigma < 0:
        raise ConfigError('noise sigma must be >= 0, got %r' % sigma)
    image = np.asarray(image, dtype=np.float64)
    if sigma == 0:
        return image.copy()
    return np.clip(image + rng.normal(0.0, sigma, size=image.shape), 0.0, 1.0)


def ordered_pairs(indices):
    """All ordered pairs of distinct elements."""
    return list(permutations(indices, 2))


def make_pairs(images, spec=None, seed=0, labels=None):
    """Split source images and form moving/fixed pairs within each split.

    Images with labels[i] == spec.digit are selected (all images when labels
    is None), resized to spec.size, shuffled with seed and dealt to the
    train, val and test splits in that order. Within a split every ordered
    pair of distinct images is formed, shuffled, and cut to the split's cap.
    """
    spec = spec or SplitSpec()
    images = np.asarray(images)
    idx = np.arange(len(images))
    if labels is not None:
        idx = idx[np.asarray(labels) == spec.digit]
    if len(idx) < 2:
        raise ContractError('need at least 2 source images, selection has %d' % len(idx))
    rng = np.random.default_rng(seed)
    idx = idx[rng.permutation(len(idx))]
    resized = {}

    def image(i):
        if i not in resized:
            resized[i] = resize_bilinear(images[i], spec.size, spec.size)[None, None]
        return resized[i]

    split = DatasetSplit(seed=seed)
    start = 0
    for name, count, cap in (('train', spec.train_images, spec.train_pairs),
                             ('val', spec.val_images, spec.val_pairs),
                             ('test', spec.test_images, spec.test_pairs)):
        members = idx[start:start + count]
        start += len(members)
        pairs = ordered_pairs(members.tolist())
        order = rng.permutation(len(pairs))
        if cap:
            order = order[:cap]
        setattr(split, name, [ImagePair(image(pairs[k][0]), image(pairs[k][1]), source=pairs[k]) for k in order])
    logger.info('pairs: %d train, %d val, %d test from %d source images',
                len(split.train), len(split.val), len(split.test), start)
    return split


@dataclass(frozen=True)
class SynthSpec:
    size: int = 32
    min_shapes: int = 2
    max_shapes: int = 4
    smoothing: float = 1.0


def render_shapes(rng, spec):
    """Blobs and rings in distinct cells of a 2x2 grid; returns (image, labels)."""
    size = spec.size
    count = int(rng.integers(spec.min_shapes, spec.max_shapes + 1))
    cells = rng.choice(4, size=count, replace=False)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    labels = np.zeros((size, size), dtype=np.uint8)
    intensity = np.zeros((size, size))
    half = size / 2.0
    for k, cell in enumerate(sorted(cells.tolist()), 1):
        cy = (cell // 2 + 0.5) * half + rng.uniform(-1.0, 1.0)
        cx = (cell % 2 + 0.5) * half + rng.uniform(-1.0, 1.0)
        r = rng.uniform(0.22, 0.3) * half
        d = np.hypot(yy - cy, xx - cx)
        mask = d <= r
        if rng.uniform() < 0.5:
            mask &= d >= 0.5 * r
        labels[mask] = k
        intensity[mask] = rng.uniform(0.5, 1.0)
    image = np.clip(ndimage.gaussian_filter(intensity, spec.smoothing), 0.0, 1.0)
    return image, labels


def random_field(rng, size, max_disp):
    """Smooth random displacement (2, size, size) with peak magnitude <= max_disp and gradient <= 0.5."""
    noise = rng.normal(size=(2, size, size))
    if max_disp == 0:
        return np.zeros_like(noise)
    smooth = np.stack([ndimage.gaussian_filter(c, size / 6.0, mode='reflect') for c in noise])
    peak = np.hypot(smooth[0], smooth[1]).max()
    target = max_disp * rng.uniform(0.5, 1.0)
    out = smooth * (target / peak)
    with precision('double'):
        steep = np.abs(field_gradient(out).data).max()
    if steep > 0.5:
        out *= 0.5 / steep
    return out


def synth_pairs(n, spec=None, max_disp=3.0, seed=0):
    """Labelled shape pairs with a known deformation.

    fixed = warp_bilinear(moving, true_field) in double precision and the
    labels follow through warp_nearest, so a perfect registration recovers
    the fixed image exactly.
    """
    spec = spec or SynthSpec()
    if not 0 <= max_disp <= MAX_SYNTH_DISP:
        raise ConfigError('max_disp must be within [0, %g] px, got %r' % (MAX_SYNTH_DISP, max_disp))
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        image, labels = render_shapes(rng, spec)
        phi = random_field(rng, spec.size, max_disp)
        moving = image[None, None]
        with precision('double'):
            fixed = warp_bilinear(moving, phi).data
        out.append(ImagePair(moving, fixed, labels, warp_nearest(labels, phi), phi, source=(i, i)))
    return out


def split_pairs(pairs, val, test, seed=0):
    """Deal independent pairs (e.g. synthetic ones) into train/val/test splits in order."""
    if val + test >= len(pairs):
        raise ConfigError('%d pairs cannot hold %d validation and %d test pairs' % (len(pairs), val, test))
    a = len(pairs) - val - test
    b = len(pairs) - test
    return DatasetSplit(train=list(pairs[:a]), val=list(pairs[a:b]), test=list(pairs[b:]), seed=seed)


def save_synth(directory, pairs):
    """Write pairs as a directory of IDX files (see SYNTH_FILES)."""
    os.makedirs(directory, exist_ok=True)
    save_idx(os.path.join(directory, SYNTH_FILES['moving']), np.concatenate([p.moving[:, 0] for p in pairs]))
    save_idx(os.path.join(directory, SYNTH_FILES['fixed']), np.concatenate([p.fixed[:, 0] for p in pairs]))
    save_idx(os.path.join(directory, SYNTH_FILES['moving_labels']),
             np.stack([p.moving_labels for p in pairs]).astype(np.uint8))
    save_idx(os.path.join(directory, SYNTH_FILES['fixed_labels']),
             np.stack([p.fixed_labels for p in pairs]).astype(np.uint8))
    save_idx(os.path.join(directory, SYNTH_FILES['true_field']), np.stack([p.true_field for p in pairs]))


def load_synth(directory):
    arrays = {}
    for key, name in SYNTH_FILES.items():
        arrays[key] = load_idx(os.path.join(directory, name), scale=False)
    n = len(arrays['moving'])
    if any(len(a) != n for a in arrays.values()):
        raise FormatError('%s: synthetic files disagree on the pair count' % directory)
    return [ImagePair(arrays['moving'][i][None, None], arrays['fixed'][i][None, None],
                      arrays['moving_labels'][i], arrays['fixed_labels'][i], arrays['true_field'][i], source=(i, i))
            for i in range(n)]


def load_dataset(path, spec=None, seed=0, synth_val=20, synth_test=50):
    """Load a synthetic IDX directory or an MNIST image file into a DatasetSplit."""
    if os.path.isdir(path):
        return split_pairs(load_synth(path), synth_val, synth_test, seed)
    images, labels = load_mnist(path)
    return make_pairs(images, spec, seed, labels)


################################################################################
#                                    TESTS                                     #
################################################################################

def test_ordered_pairs():
    pairs = ordered_pairs([0, 1, 2])
    assert len(pairs) == 6
    assert all(a != b for a, b in pairs)


def test_make_pairs_split_and_caps():
    rng = np.random.default_rng(0)
    images = rng.uniform(size=(40, 28, 28))
    labels = np.array([5, 3] * 20)
    spec = SplitSpec(train_images=8, val_images=4, test_images=5, val_pairs=10, test_pairs=15)
    split = make_pairs(images, spec, seed=3, labels=labels)
    assert len(split.train) == 56 and len(split.val) == 10 and len(split.test) == 15
    assert split.train[0].moving.shape == (1, 1, 32, 32)
    sources = [set(i for p in pairs for i in p.source) for pairs in (split.train, split.val, split.test)]
    assert not (sources[0] & sources[1] or sources[0] & sources[2] or sources[1] & sources[2])
    assert all(labels[i] == 5 for s in sources for i in s)
    assert all(p.source[0] != p.source[1] for p in split.train)
    again = make_pairs(images, spec, seed=3, labels=labels)
    assert [p.source for p in again.test] == [p.source for p in split.test]


def test_split_disjoint_over_seeds():
    images = np.zeros((30, 4, 4))
    spec = SplitSpec(train_images=10, val_images=5, test_images=5, size=4)
    for seed in range(100):
        split = make_pairs(images, spec, seed)
        sources = [set(i for p in pairs for i in p.source) for pairs in (split.train, split.val, split.test)]
        assert sum(len(s) for s in sources) == len(set().union(*sources))


def test_make_pairs_empty_selection():
    import pytest
    with pytest.raises(ContractError):
        make_pairs(np.zeros((3, 4, 4)), labels=np.array([1, 2, 3]))


def test_resize():
    rng = np.random.default_rng(1)
    img = rng.uniform(size=(5, 7))
    assert np.array_equal(resize_bilinear(img, 5, 7), img)
    assert np.allclose(resize_bilinear(np.full((3, 3), 0.4), 8, 5), 0.4)
    board = np.array([[0.0, 1.0], [1.0, 0.0]])
    out = resize_bilinear(board, 4, 4)
    for i in range(4):
        for j in range(4):
            y, x = i / 3.0, j / 3.0
            v = (board[0, 0] * (1 - y) * (1 - x) + board[0, 1] * (1 - y) * x +
                 board[1, 0] * y * (1 - x) + board[1, 1] * y * x)
            assert abs(out[i, j] - v) < 1e-12


def test_gaussian_noise():
    rng = np.random.default_rng(2)
    img = np.full((400, 250), 0.5)
    assert np.array_equal(add_gaussian_noise(img, 0.0, rng), img)
    noisy = add_gaussian_noise(img, 0.18, rng)
    assert noisy.min() >= 0.0 and noisy.max() <= 1.0
    assert abs((noisy - img).std() / 0.18 - 1) < 0.05
    assert add_gaussian_noise(np.ones((10, 10)), 1.0, rng).max() <= 1.0


def test_synth_zero_displacement():
    pairs = synth_pairs(3, max_disp=0.0, seed=1)
    for p in pairs:
        assert np.array_equal(p.moving, p.fixed)
        assert np.all(p.true_field == 0)
        assert np.array_equal(p.moving_labels, p.fixed_labels)


def test_synth_properties():
    import pytest
    pairs = synth_pairs(10, max_disp=3.0, seed=2)
    for p in pairs:
        assert p.moving.shape == p.fixed.shape == (1, 1, 32, 32)
        assert 0.0 <= p.moving.min() and p.fixed.max() <= 1.0
        assert np.hypot(p.true_field[0], p.true_field[1]).max() <= 3.0 + 1e-9
        with precision('double'):
            assert np.abs(field_gradient(p.true_field).data).max() < 1.0
            assert np.array_equal(warp_bilinear(p.moving, p.true_field).data, p.fixed)
        ids = set(np.unique(p.moving_labels)) - {0}
        assert 2 <= len(ids) <= 4
        assert set(np.unique(p.fixed_labels)) == set(np.unique(p.moving_labels))
    again = synth_pairs(10, max_disp=3.0, seed=2)
    assert all(np.array_equal(a.fixed, b.fixed) for a, b in zip(pairs, again))
    with pytest.raises(ConfigError):
        synth_pairs(1, max_disp=5.0)


def test_synth_directory_round_trip(tmp_path):
    pairs = synth_pairs(4, max_disp=2.0, seed=3)
    save_synth(str(tmp_path), pairs)
    back = load_synth(str(tmp_path))
    assert len(back) == 4
    for a, b in zip(pairs, back):
        assert np.array_equal(a.moving, b.moving) and np.array_equal(a.fixed, b.fixed)
        assert np.array_equal(a.fixed_labels, b.fixed_labels)
        assert np.array_equal(a.true_field, b.true_field)
    split = load_dataset(str(tmp_path), synth_val=1, synth_test=1)
    assert (len(split.train), len(split.val), len(split.test)) == (2, 1, 1)
