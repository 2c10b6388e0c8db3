"""Two-stream convolutional feature extraction and patch (un)embedding.

Each modality gets its own stack of three conv blocks, every block
halving the spatial extent, so features come out at 1/8 resolution.
Patch embedding flattens C x ps x ps blocks (row-major over the patch
grid) into token sequences; unpatching projects tokens back to channel
maps on that grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, ShapeError
from .layers import Conv2d, Linear, Module, ModuleList


@dataclass(frozen=True)
class StreamConfig:
    channels: tuple = (8, 16, 32)
    convs_per_block: int = 2
    kernel: int = 3
    pool: int = 2
    in_channels: int = 3

    def __post_init__(self):
        if len(self.channels) != 3:
            raise ContractError(f"stream needs exactly 3 blocks, got {len(self.channels)}")
        if any(c <= 0 for c in self.channels):
            raise ContractError(f"channel counts must be positive, got {self.channels}")

    @property
    def downsampling(self) -> int:
        return self.pool ** len(self.channels)

    @property
    def out_channels(self) -> int:
        return self.channels[-1]


@dataclass(frozen=True)
class PatchEmbedConfig:
    patch_sizes: tuple = (2, 1, 1)
    dims: tuple = (64, 64, 64)

    def __post_init__(self):
        if len(self.patch_sizes) != len(self.dims):
            raise ContractError("patch_sizes and dims must align per stage")


class Stream(Module):
    """Three blocks of (conv3x3 + relu) x convs_per_block followed by 2x2 max pool."""

    def __init__(self, cfg: StreamConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.convs = ModuleList()
        in_ch = cfg.in_channels
        pad = cfg.kernel // 2
        for out_ch in cfg.channels:
            for _ in range(cfg.convs_per_block):
                self.convs.append(Conv2d(in_ch, out_ch, cfg.kernel, rng, padding=pad))
                in_ch = out_ch

    def extract(self, img: Tensor) -> Tensor:
        cfg = self.cfg
        c, h, w = img.shape
        if c != cfg.in_channels:
            raise ShapeError(f"stream expects {cfg.in_channels}-channel input, got {img.shape}")
        if h % cfg.downsampling or w % cfg.downsampling:
            raise ShapeError(f"spatial extents {h}x{w} not divisible by {cfg.downsampling}")
        x = img
        i = 0
        for _ in cfg.channels:
            for _ in range(cfg.convs_per_block):
                x = ad.relu(self.convs[i](x))
                i += 1
            x = ad.maxpool2d(x, cfg.pool)
        return x

    __call__ = extract


def replicate_channels(img: Tensor, n: int) -> Tensor:
    """Tile a 1-channel image to n channels (aux modality into an RGB-shaped stream)."""
    if img.shape[0] != 1:
        raise ShapeError(f"expected single-channel image, got {img.shape}")
    return ad.concat([img] * n, axis=0)


def to_patches(f: Tensor, patch_size: int) -> Tensor:
    """Rearrange f[C,H,W] into (H/ps * W/ps, C*ps*ps) rows, row-major over the grid."""
    c, h, w = f.shape
    ps = patch_size
    if h % ps or w % ps:
        raise ShapeError(f"patch size {ps} does not divide extents {h}x{w}")
    gh, gw = h // ps, w // ps
    x = ad.reshape(f, (c, gh, ps, gw, ps))
    x = ad.transpose(x, (1, 3, 0, 2, 4))          # (gh, gw, C, ps, ps)
    return ad.reshape(x, (gh * gw, c * ps * ps))


class PatchEmbed(Module):
    """Learned linear projection of flattened patches to a D-dim token sequence."""

    def __init__(self, in_ch: int, patch_size: int, dim: int, rng: np.random.Generator):
        super().__init__()
        self.patch_size = patch_size
        self.in_ch = in_ch
        self.dim = dim
        self.proj = Linear(in_ch * patch_size * patch_size, dim, rng)

    def __call__(self, f: Tensor) -> Tensor:
        return self.proj(to_patches(f, self.patch_size))

    def grid(self, h: int, w: int) -> tuple[int, int]:
        return h // self.patch_size, w // self.patch_size


class Unpatch(Module):
    """Project tokens (N, D) to channels and lay them out on an h x w grid."""

    def __init__(self, dim: int, out_ch: int, rng: np.random.Generator):
        super().__init__()
        self.out_ch = out_ch
        self.proj = Linear(dim, out_ch, rng)

    def __call__(self, x: Tensor, h: int, w: int) -> Tensor:
        n, _ = x.shape
        if n != h * w:
            raise ShapeError(f"cannot place {n} tokens on a {h}x{w} grid")
        y = self.proj(x)                            # (N, C')
        y = ad.reshape(y, (h, w, self.out_ch))
        return ad.transpose(y, (2, 0, 1))
