"""Counting and alignment losses.

The counting loss is point-supervised: each annotated head induces a
posterior over density-map cells (a per-cell softmax across heads of
Gaussian log-scores), and the loss penalizes each head's posterior-
weighted density mass deviating from one. The alignment loss is the
summed Euclidean distance between each fused feature map and its
emulated counterpart.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, NumericError, ShapeError


@dataclass(frozen=True)
class BayesianLossConfig:
    sigma: float = 8.0     # Gaussian std in image pixels
    stride: int = 16       # image pixels per density-map cell

    def __post_init__(self):
        if self.sigma <= 0:
            raise ContractError(f"sigma must be positive, got {self.sigma}")
        if self.stride < 1:
            raise ContractError(f"stride must be >= 1, got {self.stride}")


def consistency_loss(f_r_hat: Tensor, f_r_bar: Tensor,
                     f_t_hat: Tensor, f_t_bar: Tensor) -> Tensor:
    """Euclidean distance between real and pseudo features, both modalities."""
    for real, pseudo in ((f_r_hat, f_r_bar), (f_t_hat, f_t_bar)):
        if real.shape != pseudo.shape:
            raise ShapeError(f"consistency pair shapes differ: {real.shape} vs {pseudo.shape}")

    def dist(a, b):
        d = ad.add(a, ad.scale(b, -1.0))
        return ad.sqrt(ad.sum_(ad.hadamard(d, d)))

    return ad.add(dist(f_r_hat, f_r_bar), dist(f_t_hat, f_t_bar))


def head_posteriors(points: np.ndarray, map_h: int, map_w: int,
                    cfg: BayesianLossConfig) -> np.ndarray:
    """Posterior weight of each head at each map cell, shape (n_heads, h*w).

    Head pixel coordinates are rescaled by the stride into map units;
    cells are represented by their centers. The per-cell softmax over
    heads keeps the ratio of Gaussians stable (the normalization
    constant cancels) and guarantees columns sum to one.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    n = pts.shape[0]
    if n == 0:
        return np.zeros((0, map_h * map_w))
    xs = (np.arange(map_w) + 0.5)[None, :]          # cell centers, map units
    ys = (np.arange(map_h) + 0.5)[:, None]
    sigma_map = cfg.sigma / cfg.stride
    logits = np.empty((n, map_h * map_w))
    for i, (px, py) in enumerate(pts):
        d2 = (xs - px / cfg.stride) ** 2 + (ys - py / cfg.stride) ** 2
        logits[i] = (-d2 / (2.0 * sigma_map ** 2)).reshape(-1)
    logits -= logits.max(axis=0, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=0, keepdims=True)


def bayesian_loss(d_hat: Tensor, points: np.ndarray, cfg: BayesianLossConfig) -> Tensor:
    """Sum over heads of |1 - <density, posterior_i>|.

    With no annotations the posterior is undefined; the loss falls back
    to pulling the total predicted count to zero.
    """
    if not np.all(np.isfinite(d_hat.data)):
        raise NumericError("density map contains non-finite values")
    h, w = d_hat.shape
    flat = ad.reshape(d_hat, (h * w, 1))
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if pts.shape[0] == 0:
        return ad.sum_(ad.absolute(flat))
    post = Tensor(head_posteriors(pts, h, w, cfg))          # constant wrt the network
    inner = ad.matmul(post, flat)                           # (n_heads, 1)
    return ad.sum_(ad.absolute(1.0 - inner))


def total_loss(l_bl: Tensor, l_cl: Tensor | None) -> Tensor:
    """Unweighted sum of the counting and alignment losses."""
    if not np.isfinite(l_bl.data):
        raise NumericError("counting loss is not finite")
    if l_cl is None:
        return l_bl
    if not np.isfinite(l_cl.data):
        raise NumericError("consistency loss is not finite")
    return ad.add(l_bl, l_cl)
