"""Counting evaluation: grid MAE at several levels, RMSE, and the
relative-L1 distance distribution between real and emulated features."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, NumericError, ShapeError


@dataclass
class EvalRecord:
    """One image's predicted density map plus its ground-truth head points."""
    density: np.ndarray                  # (h, w), non-negative
    points: np.ndarray                   # (n, 2) image-pixel (x, y)
    stride: int = 1                      # image pixels per map cell

    def __post_init__(self):
        self.density = np.asarray(self.density, dtype=np.float64)
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)

    @property
    def predicted_count(self) -> float:
        return float(self.density.sum())

    @property
    def true_count(self) -> int:
        return self.points.shape[0]


def _edges(extent: int, regions: int) -> list[tuple[int, int]]:
    # floor-sized regions; the remainder goes to the last one
    base = extent // regions
    bounds = [i * base for i in range(regions)] + [extent]
    return list(zip(bounds[:-1], bounds[1:]))


def _point_cells(rec: EvalRecord) -> np.ndarray:
    h, w = rec.density.shape
    cells = np.floor(rec.points / rec.stride).astype(int)
    cells[:, 0] = np.clip(cells[:, 0], 0, w - 1)     # x -> column
    cells[:, 1] = np.clip(cells[:, 1], 0, h - 1)     # y -> row
    return cells


def game_feasible(records, level: int) -> bool:
    g = 2 ** level
    return all(rec.density.shape[0] >= g and rec.density.shape[1] >= g for rec in records)


def game(records, level: int) -> float:
    """Grid average mean absolute error over 4**level regions per image."""
    if level < 0:
        raise ContractError(f"GAME level must be >= 0, got {level}")
    if not records:
        raise ContractError("GAME over an empty record set")
    g = 2 ** level
    total = 0.0
    for rec in records:
        h, w = rec.density.shape
        if h < g or w < g:
            raise ShapeError(f"density map {h}x{w} smaller than the {g}x{g} grid")
        cells = _point_cells(rec)
        err = 0.0
        for r0, r1 in _edges(h, g):
            for c0, c1 in _edges(w, g):
                pred = rec.density[r0:r1, c0:c1].sum()
                truth = int(np.sum((cells[:, 1] >= r0) & (cells[:, 1] < r1)
                                   & (cells[:, 0] >= c0) & (cells[:, 0] < c1)))
                err += abs(pred - truth)
        total += err
    return total / len(records)


def rmse(records) -> float:
    if not records:
        raise ContractError("RMSE over an empty record set")
    sq = [(rec.predicted_count - rec.true_count) ** 2 for rec in records]
    return float(np.sqrt(np.mean(sq)))


def game_equals_mae_check(records) -> bool:
    """Cross-metric consistency: GAME(0) must equal plain count MAE."""
    mae = float(np.mean([abs(rec.predicted_count - rec.true_count) for rec in records]))
    return game(records, 0) == mae


@dataclass
class Histogram:
    bin_width: float
    counts: list = field(default_factory=list)

    @property
    def percentages(self) -> list:
        n = sum(self.counts)
        return [100.0 * c / n for c in self.counts] if n else []

    def edges(self) -> list:
        return [i * self.bin_width for i in range(len(self.counts) + 1)]

    def fraction_below(self, threshold: float) -> float:
        full = int(threshold / self.bin_width)
        return sum(self.percentages[:full])


def relative_l1_histogram(real_feats, pseudo_feats, bin_width: float) -> Histogram:
    """Bucket per-sample L1(real - pseudo) / mean(L1(real)) ratios.

    Percentages over all samples sum to 100.
    """
    if len(real_feats) != len(pseudo_feats):
        raise ShapeError(f"feature lists differ in length: {len(real_feats)} vs {len(pseudo_feats)}")
    if not real_feats:
        raise ContractError("empty feature lists")
    if bin_width <= 0:
        raise ContractError(f"bin width must be positive, got {bin_width}")
    ratios = relative_l1_ratios(real_feats, pseudo_feats)
    n_bins = int(np.floor(ratios.max() / bin_width)) + 1
    counts = [0] * n_bins
    for r in ratios:
        counts[min(int(r / bin_width), n_bins - 1)] += 1
    return Histogram(bin_width=bin_width, counts=counts)


def relative_l1_ratios(real_feats, pseudo_feats) -> np.ndarray:
    norms = [np.abs(np.asarray(r)).sum() for r in real_feats]
    avg = float(np.mean(norms))
    if avg == 0.0:
        raise NumericError("average L1 norm of the real features is zero")
    dists = [np.abs(np.asarray(r) - np.asarray(p)).sum()
             for r, p in zip(real_feats, pseudo_feats)]
    return np.asarray(dists) / avg
