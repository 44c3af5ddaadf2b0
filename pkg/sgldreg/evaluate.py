# -*- coding: utf-8 -*-
"""Registration metrics and the noise-robustness sweep."""
from __future__ import absolute_import

import csv
import logging
import math
import warnings
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
from scipy import stats

from .core import ContractError, FormatError
from .dataset import add_gaussian_noise
from .posterior import posterior_mean, sample_fields
from .unet import UNetConfig
from .utils import parallel_map
from .warp import warp_bilinear, warp_nearest

logger = logging.getLogger(__name__)

MODES = ('averaged', 'last', 'single')

# report label of each mode, in report order
METHODS = OrderedDict([
    ('Averaged', 'averaged'),
    ('Noisy', 'last'),
    ('Baseline', 'single'),
])


class DegenerateTestWarning(UserWarning):
    """The paired differences have zero variance; the t statistic is not defined."""


def dice(a, b, class_id):
    """2|A & B| / (|A| + |B|) for the masks of class_id; 1.0 when both are empty."""
    a = np.asarray(a) == class_id
    b = np.asarray(b) == class_id
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


@dataclass
class PairMetrics:
    mse: float
    dice: Dict[int, float] = field(default_factory=OrderedDict)

    @property
    def dice_mean(self):
        return float(np.mean(list(self.dice.values()))) if self.dice else None

    @property
    def dice_std(self):
        return float(np.std(list(self.dice.values()))) if self.dice else None


def _metrics(moving, fixed, mean_field, moving_labels=None, fixed_labels=None):
    registered = warp_bilinear(moving, mean_field).data
    err = float(np.mean((np.asarray(fixed, dtype=np.float64) - registered.astype(np.float64)) ** 2))
    scores = OrderedDict()
    if moving_labels is not None and fixed_labels is not None:
        warped = warp_nearest(moving_labels, mean_field)
        classes = sorted(set(np.unique(fixed_labels).tolist()) | set(np.unique(moving_labels).tolist()))
        for c in classes:
            if c != 0:
                scores[int(c)] = dice(warped, fixed_labels, c)
    return PairMetrics(err, scores)


def _mode_fields(moving, fixed, snapshots, baseline, modes, config, workers=None):
    out = {}
    if 'averaged' in modes or 'last' in modes:
        if not snapshots:
            raise ContractError('no snapshots to evaluate')
        chosen = snapshots if 'averaged' in modes else snapshots[-1:]
        fields = sample_fields(chosen, moving, fixed, config, workers)
        if 'averaged' in modes:
            out['averaged'] = posterior_mean(fields)
        if 'last' in modes:
            out['last'] = fields[-1]
    if 'single' in modes:
        if baseline is None:
            raise ContractError('mode single needs a baseline snapshot')
        out['single'] = sample_fields([baseline], moving, fixed, config, workers)[0]
    return out


def evaluate_pair(pair, snapshots, mode='averaged', baseline=None, config=None):
    """Register pair per mode and score it.

    Modes: averaged (posterior mean over all snapshots), last (final snapshot
    only), single (the externally supplied baseline snapshot).
    """
    if mode not in MODES:
        raise ContractError('mode must be one of %s, got %r' % (', '.join(MODES), mode))
    phi = _mode_fields(pair.moving, pair.fixed, snapshots, baseline, (mode,), config or UNetConfig())[mode]
    return _metrics(pair.moving, pair.fixed, phi, pair.moving_labels, pair.fixed_labels)


@dataclass
class PairRecord:
    pair: int
    sigma: float
    method: str
    metrics: PairMetrics


@dataclass
class Cell:
    mse_mean: float
    mse_std: float
    dice_mean: Optional[float] = None
    dice_std: Optional[float] = None
    count: int = 0


@dataclass
class SweepReport:
    sigmas: List[float]
    methods: List[str]
    cells: Dict = field(default_factory=OrderedDict)
    records: List[PairRecord] = field(default_factory=list)

    def cell(self, method, sigma):
        return self.cells[(method, sigma)]

    def scores(self, method, sigma):
        """Per-pair MSE of one cell, in pair order."""
        return [r.metrics.mse for r in self.records if r.method == method and r.sigma == sigma]


def _aggregate(records):
    mse = np.array([r.metrics.mse for r in records])
    dices = [r.metrics for r in records if r.metrics.dice]
    cell = Cell(float(mse.mean()), float(mse.std()), count=len(records))
    if dices:
        cell.dice_mean = float(np.mean([m.dice_mean for m in dices]))
        cell.dice_std = float(np.mean([m.dice_std for m in dices]))
    return cell


def noise_sweep(pairs, snapshots, baseline, sigmas, seed=0, config=None, methods=None, workers=None):
    """Evaluate every method on every test pair at every noise level.

    Both images of a pair are corrupted with add_gaussian_noise using a
    stream seeded by (seed, sigma index, pair index), and metrics are taken
    against the corrupted fixed image. All cells use the same pair list.
    """
    sigmas = [float(s) for s in sigmas]
    if 0.0 not in sigmas:
        raise ContractError('sigmas must include 0')
    methods = list(methods or METHODS)
    modes = tuple(METHODS[m] for m in methods)
    config = config or UNetConfig()
    pairs = list(pairs)
    if not pairs:
        raise ContractError('no test pairs')

    def run(job):
        si, pi = job
        pair = pairs[pi]
        rng = np.random.default_rng([seed, si, pi])
        moving = add_gaussian_noise(pair.moving, sigmas[si], rng)
        fixed = add_gaussian_noise(pair.fixed, sigmas[si], rng)
        phis = _mode_fields(moving, fixed, snapshots, baseline, modes, config, workers=1)
        return [PairRecord(pi, sigmas[si], m, _metrics(moving, fixed, phis[METHODS[m]], pair.moving_labels,
                                                       pair.fixed_labels)) for m in methods]

    jobs = [(si, pi) for si in range(len(sigmas)) for pi in range(len(pairs))]
    report = SweepReport(sigmas, methods)
    for recs in parallel_map(run, jobs, workers):
        report.records.extend(recs)
    for m in methods:
        for s in sigmas:
            report.cells[(m, s)] = _aggregate([r for r in report.records if r.method == m and r.sigma == s])
    logger.info('sweep: %d pairs x %d sigmas x %d methods', len(pairs), len(sigmas), len(methods))
    return report


def _fmt(mean, std):
    return '%r (%r)' % (float(mean), float(std))


def _parse(cell):
    try:
        mean, std = cell.split(' ', 1)
        return float(mean), float(std.strip('()'))
    except ValueError:
        raise FormatError('bad table cell %r' % (cell,))


def table_rows(report):
    """Table rows: header, then one row per (method, metric) with 'mean (std)' cells."""
    rows = [['method', 'metric'] + ['sigma=%r' % s for s in report.sigmas]]
    has_dice = any(c.dice_mean is not None for c in report.cells.values())
    for m in report.methods:
        cells = [report.cell(m, s) for s in report.sigmas]
        rows.append([m, 'mse'] + [_fmt(c.mse_mean, c.mse_std) for c in cells])
        if has_dice:
            rows.append([m, 'dice'] + [_fmt(c.dice_mean, c.dice_std) if c.dice_mean is not None else ''
                                       for c in cells])
    return rows


def format_table(report):
    rows = table_rows(report)
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    return '\n'.join('  '.join(v.ljust(w) for v, w in zip(r, widths)).rstrip() for r in rows)


def write_table_csv(report, path):
    with open(path, 'w', newline='') as f:
        csv.writer(f).writerows(table_rows(report))


def read_table_csv(path):
    """Parse a table CSV back into {(method, metric, sigma): (mean, std)}."""
    with open(path, newline='') as f:
        rows = list(csv.reader(f))
    if not rows or rows[0][:2] != ['method', 'metric']:
        raise FormatError('%s: not a sweep table' % path, 0)
    try:
        sigmas = [float(h.split('=', 1)[1]) for h in rows[0][2:]]
    except (IndexError, ValueError):
        raise FormatError('%s: bad sigma header' % path, 0)
    out = OrderedDict()
    for line, row in enumerate(rows[1:], 1):
        if len(row) != len(sigmas) + 2:
            raise FormatError('%s: row has %d fields' % (path, len(row)), line)
        for s, cell in zip(sigmas, row[2:]):
            if cell:
                out[(row[0], row[1], s)] = _parse(cell)
    return out


PAIR_CSV_FIELDS = ('pair', 'sigma', 'method', 'mse', 'dice_mean', 'dice_std')


def write_pairs_csv(report, path):
    with open(path, 'w', newline='') as f:
        w = csv.writer(f)
        w.writerow(PAIR_CSV_FIELDS)
        for r in report.records:
            m = r.metrics
            w.writerow([r.pair, repr(r.sigma), r.method, repr(m.mse),
                        '' if m.dice_mean is None else repr(m.dice_mean),
                        '' if m.dice_std is None else repr(m.dice_std)])


@dataclass
class TTestResult:
    t: float
    p: float
    n: int
    degenerate: bool = False

    @property
    def significant(self):
        return self.p < 0.05


def paired_t_test(scores_a, scores_b):
    """Two-sided paired Student t-test on a - b.

    Zero variance of the differences is flagged with DegenerateTestWarning:
    t is 0 with p = 1 when the differences are all zero, otherwise +-inf with
    p = 0.
    """
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or len(a) < 2:
        raise ContractError('paired t-test needs two equal-length lists of at least 2 scores')
    d = a - b
    n = len(d)
    if np.all(d == d[0]):
        warnings.warn('paired differences have zero variance', DegenerateTestWarning, stacklevel=2)
        if d[0] == 0:
            return TTestResult(0.0, 1.0, n, True)
        return TTestResult(math.copysign(math.inf, d[0]), 0.0, n, True)
    res = stats.ttest_rel(a, b)
    return TTestResult(float(res.statistic), float(res.pvalue), n)


################################################################################
#                                    TESTS                                     #
################################################################################

def test_dice_fixtures():
    a = np.array([[1, 1, 1, 0]])
    b = np.array([[0, 1, 1, 1]])
    assert dice(a, a, 1) == 1.0
    assert dice(np.array([1, 0]), np.array([0, 1]), 1) == 0.0
    assert abs(dice(a, b, 1) - 2 * 2 / 6.0) < 1e-15
    assert dice(a, b, 7) == 1.0
    assert dice(a, b, 1) == dice(b, a, 1)


def test_dice_monotone_in_intersection():
    base = np.zeros(10, dtype=int)
    base[:4] = 1
    last = -1.0
    for shift in range(4, -1, -1):
        other = np.zeros(10, dtype=int)
        other[shift:shift + 4] = 1
        score = dice(base, other, 1)
        assert score > last
        last = score


def test_paired_t_test_fixture():
    res = paired_t_test([1.5, 2.5, 2.0, 3.0, 2.0], [1.0, 1.0, 1.0, 1.0, 1.0])
    assert abs(res.t - math.sqrt(288.0 / 13.0)) < 1e-9
    assert abs(res.p - (1 - math.sqrt(72.0 / 85.0) * 183.0 / 170.0)) < 1e-6
    assert res.significant and not res.degenerate
    back = paired_t_test([1.0] * 5, [1.5, 2.5, 2.0, 3.0, 2.0])
    assert back.t == -res.t and abs(back.p - res.p) < 1e-15


def test_paired_t_test_degenerate():
    import pytest
    with pytest.warns(DegenerateTestWarning):
        res = paired_t_test([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
    assert res.degenerate and res.p == 1.0 and res.t == 0.0
    with pytest.warns(DegenerateTestWarning):
        res = paired_t_test([2.0] * 4, [1.0] * 4)
    assert res.degenerate and res.t == math.inf and res.p == 0.0
    with pytest.raises(ContractError):
        paired_t_test([1.0], [2.0])


def _zero_setup(cfg_std=0.0):
    from fractions import Fraction
    from .unet import build_unet, snapshot
    cfg = UNetConfig(channel_scale=Fraction(1, 4), flow_init_std=cfg_std)
    snaps = [snapshot(build_unet(cfg, s), s + 1) for s in range(2)]
    return cfg, snaps


def _labelled_pair(seed=0):
    from .dataset import ImagePair
    rng = np.random.default_rng(seed)
    img = rng.uniform(size=(1, 1, 16, 16))
    labels = np.zeros((16, 16), dtype=np.uint8)
    labels[2:6, 3:9] = 1
    labels[9:14, 8:12] = 2
    return ImagePair(img, img.copy(), labels, labels.copy())


def test_evaluate_identity_pair():
    cfg, snaps = _zero_setup()
    pair = _labelled_pair()
    m = evaluate_pair(pair, snaps, 'averaged', config=cfg)
    assert m.mse < 1e-12
    assert m.dice == {1: 1.0, 2: 1.0} and m.dice_mean == 1.0 and m.dice_std == 0.0
    single = evaluate_pair(pair, snaps, 'single', baseline=snaps[0], config=cfg)
    assert single.dice_mean == 1.0


def test_last_equals_averaged_for_one_snapshot():
    cfg, snaps = _zero_setup(0.2)
    pair = _labelled_pair(1)
    pair.fixed = np.random.default_rng(5).uniform(size=(1, 1, 16, 16))
    a = evaluate_pair(pair, snaps[:1], 'averaged', config=cfg)
    b = evaluate_pair(pair, snaps[:1], 'last', config=cfg)
    assert a == b


def test_evaluate_errors():
    import pytest
    cfg, snaps = _zero_setup()
    with pytest.raises(ContractError):
        evaluate_pair(_labelled_pair(), snaps, 'median', config=cfg)
    with pytest.raises(ContractError):
        evaluate_pair(_labelled_pair(), snaps, 'single', config=cfg)


def test_noise_sweep_shape_and_determinism(tmp_path):
    import pytest
    cfg, snaps = _zero_setup(0.05)
    pairs = [_labelled_pair(i) for i in range(3)]
    sigmas = [0.0, 0.05, 0.1]
    report = noise_sweep(pairs, snaps, snaps[0], sigmas, seed=4, config=cfg)
    assert len(report.cells) == 3 * 3
    assert len(report.records) == 3 * 3 * 3
    again = noise_sweep(pairs, snaps, snaps[0], sigmas, seed=4, config=cfg, workers=1)
    assert format_table(report) == format_table(again)

    plain = evaluate_pair(pairs[1], snaps, 'averaged', config=cfg)
    rec = [r for r in report.records if r.pair == 1 and r.sigma == 0.0 and r.method == 'Averaged'][0]
    assert rec.metrics == plain

    path = str(tmp_path / 'table.csv')
    write_table_csv(report, path)
    parsed = read_table_csv(path)
    for m in report.methods:
        for s in sigmas:
            c = report.cell(m, s)
            assert parsed[(m, 'mse', s)] == (c.mse_mean, c.mse_std)
            assert parsed[(m, 'dice', s)] == (c.dice_mean, c.dice_std)
    write_pairs_csv(report, str(tmp_path / 'pairs.csv'))
    with open(str(tmp_path / 'pairs.csv')) as f:
        assert len(f.readlines()) == 1 + 27
    with pytest.raises(ContractError):
        noise_sweep(pairs, snaps, snaps[0], [0.1], config=cfg)


def test_sweep_single_sigma_grid():
    cfg, snaps = _zero_setup()
    report = noise_sweep([_labelled_pair()], snaps, snaps[0], [0.0], config=cfg)
    assert len(report.cells) == 3
    assert len(table_rows(report)) == 1 + 3 * 2


def test_sweep_mse_grows_with_noise():
    cfg, snaps = _zero_setup()
    pairs = [_labelled_pair(i) for i in range(4)]
    sigmas = [0.0, 0.1, 0.2]
    report = noise_sweep(pairs, snaps, snaps[0], sigmas, seed=7, config=cfg)
    for m in report.methods:
        means = [report.cell(m, s).mse_mean for s in sigmas]
        assert means[0] < 1e-12
        assert means == sorted(means), (m, means)
        assert means[2] > means[1] > 0
