"""The full two-pass counter: backbone streams, fusion stack, head, prompts."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import PatchEmbedConfig, Stream, StreamConfig, replicate_channels
from .cme import AttentionPrompts, InputPrompts, emulation_transform
from .errors import ContractError
from .hcma import HcmaStack, RegressionHead, StackConfig
from .layers import Conv2d, Module, RunContext


@dataclass(frozen=True)
class ModelScale:
    backbone_channels: tuple
    dims: tuple
    patch_sizes: tuple
    channels: int          # C' of the fused maps
    heads: int = 4


SCALES = {
    # desk: tiny but structurally faithful; the default everywhere.
    "desk": ModelScale(backbone_channels=(8, 16, 32), dims=(64, 64, 64),
                       patch_sizes=(2, 1, 1), channels=32),
    # reduced dims for finite-difference checks of the full composite
    "tiny": ModelScale(backbone_channels=(4, 6, 8), dims=(8, 8, 8),
                       patch_sizes=(2, 1, 1), channels=4, heads=2),
    # paper configurations, used for shape-level fidelity only
    "small": ModelScale(backbone_channels=(64, 128, 256), dims=(256, 512, 512),
                        patch_sizes=(2, 1, 1), channels=256),
    "base": ModelScale(backbone_channels=(64, 128, 256), dims=(768, 768, 768),
                       patch_sizes=(2, 1, 1), channels=256),
}

PROMPTING_MODES = ("ap", "ip", "off")


class CrowdCounter(Module):
    """Two modality streams feeding a shared fusion stack and density head.

    The emulation pass reuses the stack's weights; enabling prompting
    adds exactly the prompt tensors (plus the optional pseudo-head
    reduction convs when that variant is requested).
    """

    def __init__(self, scale="desk", scma=True, mcma=True, prompting_mode="off",
                 vca=False, dropout=0.1, prompt_len=5, use_pseudo_in_head=False,
                 seed=0):
        super().__init__()
        if scale not in SCALES:
            raise ContractError(f"unknown model scale {scale!r}; pick from {sorted(SCALES)}")
        if prompting_mode not in PROMPTING_MODES:
            raise ContractError(f"unknown prompting mode {prompting_mode!r}")
        if vca and prompting_mode != "off":
            raise ContractError("the vanilla cross-attention variant has no emulation pass")
        ms = SCALES[scale]
        rng = np.random.default_rng([seed, 0x1217])
        self.scale = ms
        self.prompting_mode = prompting_mode
        self.stream_r = Stream(StreamConfig(channels=ms.backbone_channels), rng)
        self.stream_t = Stream(StreamConfig(channels=ms.backbone_channels), rng)
        self.stack = HcmaStack(ms.backbone_channels[-1],
                               StackConfig(dims=ms.dims, patch_sizes=ms.patch_sizes,
                                           heads=ms.heads, channels=ms.channels,
                                           dropout=dropout, use_scma=scma,
                                           use_mcma=mcma, vca=vca), rng)
        self.head = RegressionHead(ms.channels, rng)
        if prompting_mode == "ap":
            self.prompts = AttentionPrompts(prompt_len, ms.dims[0] // ms.heads, rng)
        elif prompting_mode == "ip":
            self.prompts = InputPrompts(prompt_len, ms.dims[0], rng)
        else:
            self.prompts = None
        if use_pseudo_in_head:
            self.pseudo_reduce_r = Conv2d(2 * ms.channels, ms.channels, 1, rng, init="linear")
            self.pseudo_reduce_t = Conv2d(2 * ms.channels, ms.channels, 1, rng, init="linear")
        else:
            self.pseudo_reduce_r = None
            self.pseudo_reduce_t = None

    # image pixels per density-map cell
    def density_stride(self) -> int:
        stride = 8
        for ps in self.scale.patch_sizes:
            stride *= ps
        return stride

    def features(self, rgb: Tensor, aux: Tensor) -> tuple[Tensor, Tensor]:
        f_r = self.stream_r.extract(rgb)
        f_t = self.stream_t.extract(replicate_channels(aux, 3))
        return f_r, f_t

    def infer_from(self, f_r: Tensor, f_t: Tensor, ctx: RunContext):
        """Inference pass: fused maps and the density prediction."""
        fhat_r, fhat_t = self.stack(f_r, f_t, ctx)
        return self.head(fhat_r, fhat_t), fhat_r, fhat_t

    def emulate_from(self, f_r: Tensor, f_t: Tensor, ctx: RunContext):
        """Emulation pass: (pseudo-RGB, pseudo-thermal) fused maps."""
        if self.prompts is None:
            raise ContractError("prompting is disabled; no emulation pass exists")
        transform = emulation_transform(self.prompts, self.stack.first_attention,
                                        self.prompting_mode)
        fbar_r, fbar_t = self.stack(f_r, f_t, ctx, seq_transform=transform)
        return fbar_r, fbar_t

    def predict(self, rgb: Tensor, aux: Tensor, ctx: RunContext = RunContext()):
        f_r, f_t = self.features(rgb, aux)
        d_hat, _, _ = self.infer_from(f_r, f_t, ctx)
        return d_hat

    def predict_pseudo_head(self, rgb: Tensor, aux: Tensor,
                            ctx: RunContext = RunContext()):
        """Variant head input: real and pseudo maps concatenated then reduced."""
        if self.prompts is None:
            raise ContractError("pseudo-head variant needs prompting enabled")
        if self.pseudo_reduce_r is None:
            raise ContractError("model built without the pseudo-head reduction convs")
        f_r, f_t = self.features(rgb, aux)
        _, fhat_r, fhat_t = self.infer_from(f_r, f_t, ctx)
        fbar_r, fbar_t = self.emulate_from(f_r, f_t, ctx)
        mix_r = self.pseudo_reduce_r(ad.concat([fhat_r, fbar_r], axis=0))
        mix_t = self.pseudo_reduce_t(ad.concat([fhat_t, fbar_t], axis=0))
        return self.head(mix_r, mix_t)
