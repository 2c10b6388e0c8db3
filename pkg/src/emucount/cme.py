"""Cross-modal emulation: prompting machinery for the training-only pass.

Attention prompting prepends learnable key/value sub-prompts to an
attention layer's keys and values while leaving queries untouched; the
projections come from the shared inference stack, so the prompts are
the only new parameters. Input prompting instead prepends full-width
tokens to the sequence and drops them again after the first block.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, ShapeError
from .hcma import ModalAttention, merge_heads, scaled_attention, split_heads
from .layers import Module

PROMPT_INIT_HALFWIDTH = 0.1   # near-no-op start; empty-prompt behaviour approx holds early


class AttentionPrompts(Module):
    """Per-modality key/value sub-prompts, each (length, head_dim), shared by all heads."""

    def __init__(self, length: int, head_dim: int, rng: np.random.Generator):
        super().__init__()
        if length < 0:
            raise ContractError(f"prompt length must be >= 0, got {length}")
        self.length = length
        self.head_dim = head_dim
        self.p_r = Tensor(rng.uniform(-PROMPT_INIT_HALFWIDTH, PROMPT_INIT_HALFWIDTH,
                                      (2 * length, head_dim)), requires_grad=True)
        self.p_t = Tensor(rng.uniform(-PROMPT_INIT_HALFWIDTH, PROMPT_INIT_HALFWIDTH,
                                      (2 * length, head_dim)), requires_grad=True)

    def split(self, side: str) -> tuple[Tensor, Tensor]:
        p = self.p_r if side == "r" else self.p_t
        return p[: self.length], p[self.length:]


class InputPrompts(Module):
    """Per-modality full-dimension tokens prepended to the input sequence."""

    def __init__(self, length: int, dim: int, rng: np.random.Generator):
        super().__init__()
        if length <= 0:
            raise ContractError(f"input prompting needs length >= 1, got {length}")
        self.length = length
        self.p_r = Tensor(rng.uniform(-PROMPT_INIT_HALFWIDTH, PROMPT_INIT_HALFWIDTH,
                                      (length, dim)), requires_grad=True)
        self.p_t = Tensor(rng.uniform(-PROMPT_INIT_HALFWIDTH, PROMPT_INIT_HALFWIDTH,
                                      (length, dim)), requires_grad=True)

    def prepend(self, x: Tensor, side: str) -> Tensor:
        p = self.p_r if side == "r" else self.p_t
        if p.shape[1] != x.shape[1]:
            raise ShapeError(f"prompt dim {p.shape[1]} != token dim {x.shape[1]}")
        return ad.concat([p, x], axis=0)


def _tile_heads(p: Tensor, heads: int) -> Tensor:
    """(L, d) -> (heads, L, d) by reuse; gradients from all heads accumulate."""
    l, d = p.shape
    one = ad.reshape(p, (1, l, d))
    if heads == 1:
        return one
    return ad.concat([one] * heads, axis=0)


def self_attention(x: Tensor, attn: ModalAttention, side: str) -> Tensor:
    """Plain multi-head self-attention of a sequence using one modality's projections."""
    wq, wk, wv = attn.projections(side)
    h = attn.heads
    out = scaled_attention(split_heads(wq(x), h), split_heads(wk(x), h), split_heads(wv(x), h))
    return merge_heads(out)


def prompt_attend(x: Tensor, prompts: AttentionPrompts, attn: ModalAttention,
                  side: str) -> Tensor:
    """Key/value attention prompting over one modality's sequence.

    Queries/keys/values are projected from x itself; the key and value
    sub-prompts are prepended column-wise, so the output keeps the input
    sequence length.
    """
    if prompts.head_dim != attn.dim // attn.heads:
        raise ShapeError(f"prompt head_dim {prompts.head_dim} != attention head dim "
                         f"{attn.dim // attn.heads}")
    wq, wk, wv = attn.projections(side)
    h = attn.heads
    q = split_heads(wq(x), h)
    k = split_heads(wk(x), h)
    v = split_heads(wv(x), h)
    pk, pv = prompts.split(side)
    k = ad.concat([_tile_heads(pk, h), k], axis=1)
    v = ad.concat([_tile_heads(pv, h), v], axis=1)
    return merge_heads(scaled_attention(q, k, v))


def emulation_transform(prompts, attn: ModalAttention, mode: str):
    """Stage-1 sequence rewrite for the emulation pass.

    Prompt each modality with its own prompts, then swap the streams so
    the prompted RGB sequence runs down the thermal branch and vice
    versa. The stack's outputs then read (pseudo-RGB, pseudo-thermal).
    Returns (transform, n_prefix_tokens).
    """
    if mode == "ap":
        def transform(x_r, x_t):
            f_r = prompt_attend(x_r, prompts, attn, "r")
            f_t = prompt_attend(x_t, prompts, attn, "t")
            return f_t, f_r, 0
        return transform
    if mode == "ip":
        def transform(x_r, x_t):
            f_r = prompts.prepend(x_r, "r")
            f_t = prompts.prepend(x_t, "t")
            return f_t, f_r, prompts.length
        return transform
    raise ContractError(f"unknown prompting mode {mode!r}")
