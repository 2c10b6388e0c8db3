"""GAME/RMSE metrics and the relative-L1 distance histogram."""

import numpy as np
import pytest

from emucount.errors import ContractError, NumericError, ShapeError
from emucount.metrics import (EvalRecord, game, game_equals_mae_check,
                              game_feasible, relative_l1_histogram, rmse)


def record_from_counts(pred_total, points, shape=(8, 8), stride=1, seed=0):
    d = np.random.default_rng(seed).random(shape)
    d *= pred_total / d.sum()
    return EvalRecord(density=d, points=np.asarray(points, dtype=float), stride=stride)


def random_records(seed, n_images=5, shape=(8, 8)):
    rng = np.random.default_rng(seed)
    records = []
    for _ in range(n_images):
        d = rng.random(shape) * rng.uniform(0, 3)
        pts = rng.uniform(0, [shape[1], shape[0]], size=(rng.integers(0, 12), 2))
        records.append(EvalRecord(density=d, points=pts, stride=1))
    return records


class TestGame:
    def test_perfect_prediction_zero_at_all_levels(self):
        # density concentrated exactly on the point cells
        pts = np.array([[1.2, 1.7], [6.4, 2.3], [5.5, 5.5]])
        d = np.zeros((8, 8))
        for x, y in pts:
            d[int(y), int(x)] += 1.0
        rec = EvalRecord(density=d, points=pts, stride=1)
        for level in range(4):
            assert game([rec], level) == 0.0

    def test_level_zero_hand_case(self):
        rec = record_from_counts(5.0, [[1.0, 1.0], [2.0, 2.0], [3.0, 3.0]])
        assert game([rec], 0) == pytest.approx(2.0, abs=1e-12)

    def test_level_one_matches_partition_oracle(self):
        d = np.random.default_rng(1).random((4, 4))
        pts = np.array([[0.5, 0.5], [3.5, 0.5], [2.5, 3.5]])
        rec = EvalRecord(density=d, points=pts, stride=1)
        # explicit 2x2 partition
        truth = np.zeros((2, 2))
        for x, y in pts:
            truth[int(y // 2), int(x // 2)] += 1
        expected = 0.0
        for i in range(2):
            for j in range(2):
                expected += abs(d[2 * i:2 * i + 2, 2 * j:2 * j + 2].sum() - truth[i, j])
        assert game([rec], 1) == pytest.approx(expected, abs=1e-12)

    def test_remainder_goes_to_last_region(self):
        d = np.zeros((5, 5))
        d[4, 4] = 2.0          # falls in the bottom-right 3x3 remainder region
        pts = np.array([[4.0, 4.0]])
        rec = EvalRecord(density=d, points=pts, stride=1)
        assert game([rec], 1) == pytest.approx(1.0, abs=1e-12)

    def test_monotone_in_level(self):
        for seed in range(10):
            records = random_records(seed)
            values = [game(records, level) for level in range(4)]
            for a, b in zip(values, values[1:]):
                assert b >= a - 1e-12

    def test_map_smaller_than_grid_rejected(self):
        rec = EvalRecord(density=np.zeros((4, 4)), points=np.zeros((0, 2)), stride=1)
        assert not game_feasible([rec], 3)
        with pytest.raises(ShapeError):
            game([rec], 3)

    def test_stride_maps_points_to_cells(self):
        d = np.zeros((2, 2))
        d[1, 1] = 1.0
        rec = EvalRecord(density=d, points=np.array([[12.0, 10.0]]), stride=8)
        assert game([rec], 1) == 0.0

    def test_game0_equals_mae_check(self):
        for seed in (0, 1, 2):
            assert game_equals_mae_check(random_records(seed))


class TestRmse:
    def test_exact_predictions(self):
        recs = [record_from_counts(3.0, [[1, 1], [2, 2], [3, 3]], seed=s) for s in range(3)]
        assert rmse(recs) == pytest.approx(0.0, abs=1e-12)

    def test_hand_case(self):
        recs = [record_from_counts(6.0, [[1, 1], [2, 2], [3, 3]], seed=0),      # +3
                record_from_counts(1.0, [[1, 1], [2, 2], [3, 3], [4, 4], [5, 5]], seed=1)]  # -4
        assert rmse(recs) == pytest.approx(3.5355, abs=1e-4)

    def test_matches_scalar_recomputation(self):
        records = random_records(42, n_images=10)
        expected = np.sqrt(np.mean([(r.density.sum() - len(r.points)) ** 2
                                    for r in records]))
        assert rmse(records) == pytest.approx(expected, abs=1e-10)

    def test_empty_records_rejected(self):
        with pytest.raises(ContractError):
            rmse([])


class TestRelativeL1Histogram:
    def test_identical_features_all_in_first_bucket(self):
        feats = [np.random.default_rng(s).random((4, 4)) for s in range(5)]
        hist = relative_l1_histogram(feats, [f.copy() for f in feats], 0.04)
        assert hist.percentages[0] == pytest.approx(100.0)

    def test_two_ratio_hand_case(self):
        real = [np.full(10, 1.0), np.full(10, 1.0)]
        pseudo = [real[0] - 0.03, real[1] - 0.07]    # ratios 0.03 and 0.07
        hist = relative_l1_histogram(real, pseudo, 0.04)
        assert hist.percentages[:2] == [pytest.approx(50.0), pytest.approx(50.0)]

    def test_percentages_sum_to_100(self):
        rng = np.random.default_rng(7)
        real = [rng.random(20) + 0.5 for _ in range(9)]
        pseudo = [r + rng.normal(0, 0.1, 20) for r in real]
        hist = relative_l1_histogram(real, pseudo, 0.02)
        assert sum(hist.percentages) == pytest.approx(100.0, abs=1e-9)

    def test_zero_average_norm_rejected(self):
        with pytest.raises(NumericError):
            relative_l1_histogram([np.zeros(4)], [np.zeros(4)], 0.04)

    def test_fraction_below(self):
        real = [np.full(10, 1.0)] * 4
        pseudo = [real[0] - d for d in (0.01, 0.02, 0.05, 0.09)]
        hist = relative_l1_histogram(real, pseudo, 0.04)
        assert hist.fraction_below(0.04) == pytest.approx(50.0)
        assert hist.fraction_below(0.08) == pytest.approx(75.0)
