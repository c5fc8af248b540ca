"""The unified decoder: latent + text queries attending pyramid features.

One decode pass runs `depth` layers. Every layer cross-attends one pyramid
level (cycling coarse to fine), restricted by the previous layer's predicted
masks, then self-attends under the task-mode interaction mask, then applies
an FFN. Mask and semantic heads run on the raw queries (layer 0) and after
every layer; intermediate predictions are kept for deep supervision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .attention import (
    FeedForward,
    MultiheadAttention,
    TaskMode,
    build_cross_bias,
    build_self_attention_mask,
    combine_cross_bias,
    mask_to_bias,
    validate_mode_counts,
)
from .config import AttentionSwitches, Config, ModelConfig
from .encoders import ImagePyramidEncoder, PixelFuser, TextEncoder, sinusoidal_positions
from .errors import InputError


@dataclass
class DecoderOutput:
    """One decode pass. mask_logits: (m, H0, W0); semantics: (m+n, dim).
    traces holds (mask_logits, semantics) before each layer, oldest first,
    so len(traces) == depth and the final prediction is separate."""

    mask_logits: torch.Tensor
    semantics: torch.Tensor
    traces: tuple[tuple[torch.Tensor, torch.Tensor], ...]
    mode: TaskMode
    m: int
    n: int

    @property
    def object_semantics(self) -> torch.Tensor:
        return self.semantics[: self.m - 1]

    @property
    def global_semantic(self) -> torch.Tensor:
        return self.semantics[self.m - 1]

    @property
    def text_semantics(self) -> torch.Tensor:
        return self.semantics[self.m :]


class DecoderLayer(nn.Module):
    def __init__(self, dim: int, heads: int, ffn_hidden: int):
        super().__init__()
        self.cross_attn = MultiheadAttention(dim, heads)
        self.norm1 = nn.LayerNorm(dim)
        self.self_attn = MultiheadAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn_hidden)
        self.norm3 = nn.LayerNorm(dim)

    def forward(self, x, mem_keys, mem_values, self_bias, cross_bias):
        x = self.norm1(x + self.cross_attn(x, mem_keys, mem_values, cross_bias))
        x = self.norm2(x + self.self_attn(x, x, x, self_bias))
        return self.norm3(x + self.ffn(x))


class XDecoder(nn.Module):
    """Full model: image pyramid encoder, pixel fuser, text encoder, and the
    query decoder with mask/semantic heads."""

    def __init__(self, cfg: ModelConfig, vocab_size: int, switches: AttentionSwitches):
        super().__init__()
        self.cfg = cfg
        self.switches = switches
        dim = cfg.dim
        self.image_encoder = ImagePyramidEncoder(dim, cfg.strides)
        self.pixel_fuser = PixelFuser(dim)
        self.text_encoder = TextEncoder(
            vocab_size, dim, cfg.text_layers, cfg.heads, cfg.max_text_len, cfg.ffn_ratio
        )
        self.latent_queries = nn.Parameter(torch.randn(cfg.num_latent_queries, dim) * 0.02)
        self.level_embed = nn.Parameter(torch.zeros(len(cfg.strides), dim))
        nn.init.normal_(self.level_embed, std=0.02)
        self.layers = nn.ModuleList(
            DecoderLayer(dim, cfg.heads, dim * cfg.ffn_ratio) for _ in range(cfg.depth)
        )
        self.out_norm = nn.LayerNorm(dim)
        self.sem_proj = nn.Linear(dim, dim)
        self.mask_proj = nn.Linear(dim, dim)
        self.logit_scale = nn.Parameter(torch.tensor(math.log(1.0 / 0.07)))

    @property
    def num_latent(self) -> int:
        return self.cfg.num_latent_queries

    def encode_image(self, images: torch.Tensor):
        """images: (B, 3, H, W) -> (pyramid fine-to-coarse, fused pixel map)."""
        pyramid = self.image_encoder(images)
        return pyramid, self.pixel_fuser(pyramid)

    def clamped_logit_scale(self) -> torch.Tensor:
        return self.logit_scale.clamp(0.0, math.log(100.0)).exp()

    def _predict(self, state: torch.Tensor, pixel_map: torch.Tensor):
        normed = self.out_norm(state)
        semantics = self.sem_proj(normed)
        mask_emb = self.mask_proj(normed[: self.num_latent])
        mask_logits = torch.einsum("qc,chw->qhw", mask_emb, pixel_map)
        return mask_logits, semantics

    def decode(
        self,
        pyramid: list[torch.Tensor],
        pixel_map: torch.Tensor,
        mode: TaskMode,
        text_states: torch.Tensor | None = None,
        forced_mask: torch.Tensor | None = None,
    ) -> DecoderOutput:
        """Run the decoder for one sample.

        pyramid: per-level (dim, H/s, W/s) features, fine to coarse
        pixel_map: (dim, H0, W0) fused map at the finest stride
        text_states: (n, dim) contextual text query states, or None
        forced_mask: optional (H, W) image-resolution bool region; every
            query's cross-attention is confined to it
        """
        m = self.num_latent
        n = 0 if text_states is None else text_states.shape[0]
        validate_mode_counts(mode, m, n)
        if len(pyramid) != len(self.cfg.strides):
            raise InputError(
                f"pyramid has {len(pyramid)} levels, expected {len(self.cfg.strides)}"
            )
        if any(level.dim() != 3 for level in pyramid) or pixel_map.dim() != 3:
            raise InputError("decode expects unbatched (dim, H, W) features")
        dtype = self.latent_queries.dtype
        if text_states is None:
            state = self.latent_queries
        else:
            state = torch.cat([self.latent_queries, text_states.to(dtype)], dim=0)
        allow = build_self_attention_mask(mode, m, n, self.switches)
        self_bias = mask_to_bias(allow, dtype)

        forced_per_level: list[torch.Tensor | None] = [None] * len(pyramid)
        if forced_mask is not None:
            if forced_mask.dim() != 2:
                raise InputError("forced_mask must be (H, W)")
            for li, level in enumerate(pyramid):
                h, w = level.shape[-2:]
                region = nn.functional.interpolate(
                    forced_mask.to(dtype)[None, None], size=(h, w), mode="nearest"
                )[0, 0] > 0.5
                fbias = torch.zeros(m + n, h * w, dtype=dtype)
                fbias[:, ~region.reshape(-1)] = float("-inf")
                forced_per_level[li] = fbias

        mask_logits, semantics = self._predict(state, pixel_map)
        traces: list[tuple[torch.Tensor, torch.Tensor]] = []
        num_levels = len(pyramid)
        for i, layer in enumerate(self.layers):
            li = num_levels - 1 - (i % num_levels)  # coarse to fine
            level = pyramid[li]
            h, w = level.shape[-2:]
            mem = level.reshape(level.shape[0], h * w).transpose(0, 1)  # (HW, dim)
            pos = sinusoidal_positions(h, w, level.shape[0], dtype) + self.level_embed[li]
            cross_bias = build_cross_bias(mask_logits, (h, w), n)
            cross_bias = combine_cross_bias(cross_bias, forced_per_level[li])
            traces.append((mask_logits, semantics))
            state = layer(state, mem + pos, mem, self_bias, cross_bias)
            mask_logits, semantics = self._predict(state, pixel_map)
        return DecoderOutput(
            mask_logits=mask_logits,
            semantics=semantics,
            traces=tuple(traces),
            mode=mode,
            m=m,
            n=n,
        )


def build_model(cfg: Config, vocab_size: int) -> XDecoder:
    """Construct a model with weights drawn from the configured seed."""
    torch.manual_seed(cfg.train.seed)
    return XDecoder(cfg.model, vocab_size, cfg.attention)
