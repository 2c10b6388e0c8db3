"""Hybrid cross-modal attention: the fusion block of the inference pass.

A block fuses two token sequences four ways: straight cross-modal
attention (each modality's queries against the other's keys/values,
global), a convolutional sigmoid gate between the 2-D views (local),
channel-concatenation of the two results reduced back to C' and pushed
through a per-modality feed-forward, and finally a sigmoid-weighted sum
of the two fused maps into a non-negative density regression head.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, attention_scale
from .backbone import PatchEmbed, Unpatch
from .errors import ContractError, ShapeError
from .layers import Conv2d, Linear, Module, ModuleList, RunContext


def split_heads(x: Tensor, heads: int) -> Tensor:
    """(N, D) -> (heads, N, D/heads)."""
    n, d = x.shape
    if d % heads:
        raise ShapeError(f"embed dim {d} not divisible by {heads} heads")
    x = ad.reshape(x, (n, heads, d // heads))
    return ad.transpose(x, (1, 0, 2))


def merge_heads(x: Tensor) -> Tensor:
    h, n, d = x.shape
    return ad.reshape(ad.transpose(x, (1, 0, 2)), (n, h * d))


def scaled_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(q kT / sqrt(d)) v over stacked heads (h, N, d)."""
    d = q.shape[-1]
    logits = ad.matmul(q, ad.transpose(k, (0, 2, 1))) * attention_scale(d)
    return ad.matmul(ad.softmax_rows(logits), v)


def attention_weights(q: Tensor, k: Tensor) -> Tensor:
    d = q.shape[-1]
    return ad.softmax_rows(ad.matmul(q, ad.transpose(k, (0, 2, 1))) * attention_scale(d))


class ModalAttention(Module):
    """One layer of straight cross-modal attention (per-modality projections)."""

    def __init__(self, dim: int, heads: int, dropout: float, rng: np.random.Generator):
        super().__init__()
        if dim % heads:
            raise ContractError(f"dim {dim} must be a multiple of heads {heads}")
        self.dim = dim
        self.heads = heads
        self.dropout = dropout
        self.q_r = Linear(dim, dim, rng)
        self.k_r = Linear(dim, dim, rng)
        self.v_r = Linear(dim, dim, rng)
        self.q_t = Linear(dim, dim, rng)
        self.k_t = Linear(dim, dim, rng)
        self.v_t = Linear(dim, dim, rng)
        self.out_r = Linear(dim, dim, rng)
        self.out_t = Linear(dim, dim, rng)

    def projections(self, side: str):
        if side == "r":
            return self.q_r, self.k_r, self.v_r
        if side == "t":
            return self.q_t, self.k_t, self.v_t
        raise ContractError(f"unknown modality side {side!r}")

    def cross(self, x_r: Tensor, x_t: Tensor, ctx: RunContext) -> tuple[Tensor, Tensor]:
        """Token-level SCMA with residual from the query-side sequence."""
        if x_r.shape != x_t.shape:
            raise ShapeError(f"SCMA needs matching sequences, got {x_r.shape} vs {x_t.shape}")
        h = self.heads
        h_r = scaled_attention(split_heads(self.q_r(x_r), h),
                               split_heads(self.k_t(x_t), h),
                               split_heads(self.v_t(x_t), h))
        h_t = scaled_attention(split_heads(self.q_t(x_t), h),
                               split_heads(self.k_r(x_r), h),
                               split_heads(self.v_r(x_r), h))
        out_r = ad.dropout(self.out_r(merge_heads(h_r)), self.dropout, ctx.rng, ctx.training)
        out_t = ad.dropout(self.out_t(merge_heads(h_t)), self.dropout, ctx.rng, ctx.training)
        return ad.add(x_r, out_r), ad.add(x_t, out_t)


class McmaGate(Module):
    """Modulated cross-modal attention: conv features gated by the other modality."""

    def __init__(self, channels: int, rng: np.random.Generator):
        super().__init__()
        self.phi_r = ModuleList([Conv2d(channels, channels, 3, rng, padding=1),
                                 Conv2d(channels, channels, 3, rng, padding=1, init="linear")])
        self.phi_t = ModuleList([Conv2d(channels, channels, 3, rng, padding=1),
                                 Conv2d(channels, channels, 3, rng, padding=1, init="linear")])

    @staticmethod
    def _apply(stack: ModuleList, x: Tensor) -> Tensor:
        return stack[1](ad.relu(stack[0](x)))

    def __call__(self, f_r: Tensor, f_t: Tensor) -> tuple[Tensor, Tensor]:
        if f_r.shape != f_t.shape:
            raise ShapeError(f"MCMA needs matching maps, got {f_r.shape} vs {f_t.shape}")
        a_r = self._apply(self.phi_r, f_r)
        a_t = self._apply(self.phi_t, f_t)
        out_r = ad.add(ad.hadamard(a_r, ad.sigmoid(a_t)), f_r)
        out_t = ad.add(ad.hadamard(a_t, ad.sigmoid(a_r)), f_t)
        return out_r, out_t


class FeedForward(Module):
    """Two 1x1 convs with rectification, expansion factor applied to channels."""

    def __init__(self, channels: int, expansion: int, rng: np.random.Generator):
        super().__init__()
        hidden = channels * expansion
        self.up = Conv2d(channels, hidden, 1, rng)
        self.down = Conv2d(hidden, channels, 1, rng, init="linear")

    def __call__(self, x: Tensor) -> Tensor:
        return self.down(ad.relu(self.up(x)))


class HcmaBlock(Module):
    """One stage: SCMA (global) + MCMA (local) fused into per-modality maps.

    Ablation toggles swap a disabled branch for the plain 2-D view of the
    input tokens; vca mode keeps only SCMA + feed-forward (no gate, no
    concat-reduce), matching a vanilla cross-attention block.
    """

    def __init__(self, dim: int, heads: int, channels: int, dropout: float,
                 ffn_expansion: int, rng: np.random.Generator,
                 use_scma=True, use_mcma=True, vca=False):
        super().__init__()
        if vca and not use_scma:
            raise ContractError("vca mode requires the attention branch")
        self.use_scma = use_scma
        self.use_mcma = use_mcma
        self.vca = vca
        self.channels = channels
        self.attn = ModalAttention(dim, heads, dropout, rng) if use_scma else None
        self.unpatch_r = Unpatch(dim, channels, rng)
        self.unpatch_t = Unpatch(dim, channels, rng)
        if not vca:
            self.mcma = McmaGate(channels, rng) if use_mcma else None
            self.reduce_r = Conv2d(2 * channels, channels, 1, rng, init="linear")
            self.reduce_t = Conv2d(2 * channels, channels, 1, rng, init="linear")
        self.ffn_r = FeedForward(channels, ffn_expansion, rng)
        self.ffn_t = FeedForward(channels, ffn_expansion, rng)

    def scma(self, x_r: Tensor, x_t: Tensor, h: int, w: int,
             ctx: RunContext, drop_prefix: int = 0) -> tuple[Tensor, Tensor]:
        """Global branch: cross-attended tokens reshaped to 2-D maps."""
        tok_r, tok_t = self.attn.cross(x_r, x_t, ctx)
        if drop_prefix:
            tok_r, tok_t = tok_r[drop_prefix:], tok_t[drop_prefix:]
        return self.unpatch_r(tok_r, h, w), self.unpatch_t(tok_t, h, w)

    def fuse(self, f_global: Tensor, f_local: Tensor, side: str) -> Tensor:
        if f_global.shape != f_local.shape:
            raise ShapeError(f"fuse needs matching maps, got {f_global.shape} vs {f_local.shape}")
        reduce = self.reduce_r if side == "r" else self.reduce_t
        ffn = self.ffn_r if side == "r" else self.ffn_t
        return ffn(reduce(ad.concat([f_global, f_local], axis=0)))

    def __call__(self, x_r: Tensor, x_t: Tensor, h: int, w: int,
                 ctx: RunContext, drop_prefix: int = 0) -> tuple[Tensor, Tensor]:
        real_r = x_r[drop_prefix:] if drop_prefix else x_r
        real_t = x_t[drop_prefix:] if drop_prefix else x_t
        local_r = self.unpatch_r(real_r, h, w)
        local_t = self.unpatch_t(real_t, h, w)

        if self.use_scma:
            g_r, g_t = self.scma(x_r, x_t, h, w, ctx, drop_prefix)
        else:
            g_r, g_t = local_r, local_t

        if self.vca:
            return self.ffn_r(g_r), self.ffn_t(g_t)

        if self.use_mcma:
            l_r, l_t = self.mcma(local_r, local_t)
        else:
            l_r, l_t = local_r, local_t
        return self.fuse(g_r, l_r, "r"), self.fuse(g_t, l_t, "t")


class RegressionHead(Module):
    """Weighted modality sum through a small conv stack to a non-negative map."""

    def __init__(self, channels: int, rng: np.random.Generator):
        super().__init__()
        half, quarter = max(channels // 2, 1), max(channels // 4, 1)
        self.a = Tensor(0.0, requires_grad=True)     # alpha = sigmoid(a), starts at 0.5
        self.b = Tensor(0.0, requires_grad=True)
        self.conv1 = Conv2d(channels, half, 3, rng, padding=1)
        self.conv2 = Conv2d(half, quarter, 3, rng, padding=1)
        self.out = Conv2d(quarter, 1, 1, rng)
        # start near-zero density so the rectified output cannot die under
        # the first large loss gradients
        self.out.w.data *= 0.05

    def weights(self) -> tuple[Tensor, Tensor]:
        return ad.sigmoid(self.a), ad.sigmoid(self.b)

    def gamma(self, f: Tensor) -> Tensor:
        x = ad.relu(self.conv1(f))
        x = ad.relu(self.conv2(x))
        x = ad.relu(self.out(x))
        return ad.reshape(x, x.shape[1:])            # (1,h,w) -> (h,w)

    def __call__(self, f_r: Tensor, f_t: Tensor) -> Tensor:
        if f_r.shape != f_t.shape:
            raise ShapeError(f"regress needs matching maps, got {f_r.shape} vs {f_t.shape}")
        alpha, beta = self.weights()
        return self.gamma(ad.add(ad.hadamard(f_r, alpha), ad.hadamard(f_t, beta)))


@dataclass(frozen=True)
class StackConfig:
    dims: tuple = (64, 64, 64)
    patch_sizes: tuple = (2, 1, 1)
    heads: int = 4
    channels: int = 32
    dropout: float = 0.1
    ffn_expansion: int = 2
    use_scma: bool = True
    use_mcma: bool = True
    vca: bool = False


class HcmaStack(Module):
    """Chained blocks with per-stage patch re-embedding of the fused maps."""

    def __init__(self, in_channels: int, cfg: StackConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.embeds_r = ModuleList()
        self.embeds_t = ModuleList()
        self.blocks = ModuleList()
        ch = in_channels
        for dim, ps in zip(cfg.dims, cfg.patch_sizes):
            self.embeds_r.append(PatchEmbed(ch, ps, dim, rng))
            self.embeds_t.append(PatchEmbed(ch, ps, dim, rng))
            self.blocks.append(HcmaBlock(dim, cfg.heads, cfg.channels, cfg.dropout,
                                         cfg.ffn_expansion, rng,
                                         use_scma=cfg.use_scma, use_mcma=cfg.use_mcma,
                                         vca=cfg.vca))
            ch = cfg.channels

    def embed_stage(self, stage: int, f_r: Tensor, f_t: Tensor):
        _, h, w = f_r.shape
        x_r = self.embeds_r[stage](f_r)
        x_t = self.embeds_t[stage](f_t)
        return x_r, x_t, self.embeds_r[stage].grid(h, w)

    def forward(self, f_r: Tensor, f_t: Tensor, ctx: RunContext,
                seq_transform=None) -> tuple[Tensor, Tensor]:
        """Run all stages; seq_transform may rewrite the stage-1 sequences.

        seq_transform(x_r, x_t) -> (x_r', x_t', n_prefix) lets the
        emulation pass prompt and swap the token streams before block 1;
        n_prefix extra leading tokens are dropped at that block's output.
        """
        x_r, x_t, (h, w) = self.embed_stage(0, f_r, f_t)
        prefix = 0
        if seq_transform is not None:
            x_r, x_t, prefix = seq_transform(x_r, x_t)
        out_r = out_t = None
        for stage, block in enumerate(self.blocks):
            out_r, out_t = block(x_r, x_t, h, w, ctx, drop_prefix=prefix if stage == 0 else 0)
            if stage + 1 < len(self.blocks):
                x_r, x_t, (h, w) = self.embed_stage(stage + 1, out_r, out_t)
        return out_r, out_t

    __call__ = forward

    @property
    def first_attention(self) -> ModalAttention:
        if self.blocks[0].attn is None:
            raise ContractError("attention branch is disabled in this stack")
        return self.blocks[0].attn
