"""Input encoders: image pyramid, fused pixel map, causal text encoder,
and concept embedding tables for open-vocabulary classification.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .attention import FeedForward, MultiheadAttention
from .errors import InputError
from .vocab import PAD_ID, TokenSequence, Vocabulary, tokenize


def _norm_groups(dim: int) -> int:
    return 8 if dim % 8 == 0 else 1


class _ConvStage(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int):
        super().__init__()
        self.down = nn.Conv2d(in_ch, out_ch, kernel_size=stride, stride=stride)
        self.norm1 = nn.GroupNorm(_norm_groups(out_ch), out_ch)
        self.mix = nn.Conv2d(out_ch, out_ch, kernel_size=3, padding=1)
        self.norm2 = nn.GroupNorm(_norm_groups(out_ch), out_ch)

    def forward(self, x):
        x = torch.nn.functional.gelu(self.norm1(self.down(x)))
        return torch.nn.functional.gelu(self.norm2(self.mix(x)))


class ImagePyramidEncoder(nn.Module):
    """Strided conv stages producing one feature map per stride, fine to
    coarse. Input (B, 3, H, W) with H and W divisible by the coarsest
    stride; output list of (B, dim, H/s, W/s)."""

    def __init__(self, dim: int, strides: tuple[int, ...]):
        super().__init__()
        self.strides = tuple(strides)
        stages = []
        prev = self.strides[0]
        stages.append(_ConvStage(3, dim, prev))
        for s in self.strides[1:]:
            if s % prev != 0:
                raise InputError(f"stride {s} not a multiple of previous {prev}")
            stages.append(_ConvStage(dim, dim, s // prev))
            prev = s
        self.stages = nn.ModuleList(stages)

    def forward(self, images: torch.Tensor) -> list[torch.Tensor]:
        if images.dim() != 4 or images.shape[1] != 3:
            raise InputError(f"expected (B, 3, H, W), got {tuple(images.shape)}")
        h, w = images.shape[-2:]
        coarsest = max(self.strides)
        if h % coarsest or w % coarsest:
            raise InputError(
                f"image size {h}x{w} not divisible by coarsest stride {coarsest}"
            )
        out = []
        x = images
        for stage in self.stages:
            x = stage(x)
            out.append(x)
        return out


class PixelFuser(nn.Module):
    """Fuses the pyramid into one finest-resolution map: bilinear upsample,
    sum, 1x1 projection. Zero input with a zero-bias projection gives an
    all-zero map."""

    def __init__(self, dim: int):
        super().__init__()
        self.proj = nn.Conv2d(dim, dim, kernel_size=1)

    def forward(self, pyramid: list[torch.Tensor]) -> torch.Tensor:
        if not pyramid:
            raise InputError("empty pyramid")
        target = pyramid[0].shape[-2:]
        acc = pyramid[0]
        for level in pyramid[1:]:
            acc = acc + nn.functional.interpolate(
                level, size=target, mode="bilinear", align_corners=False
            )
        return self.proj(acc)


def sinusoidal_positions(h: int, w: int, dim: int, dtype: torch.dtype) -> torch.Tensor:
    """Fixed 2D sine-cosine position features, (h*w, dim)."""
    if dim % 4 != 0:
        raise InputError(f"position dim {dim} must be divisible by 4")
    quarter = dim // 4
    freq = torch.exp(
        -math.log(10000.0) * torch.arange(quarter, dtype=dtype) / max(quarter, 1)
    )
    ys = torch.arange(h, dtype=dtype).unsqueeze(1) * freq  # (h, q)
    xs = torch.arange(w, dtype=dtype).unsqueeze(1) * freq  # (w, q)
    y_feat = torch.cat([ys.sin(), ys.cos()], dim=1)  # (h, dim/2)
    x_feat = torch.cat([xs.sin(), xs.cos()], dim=1)  # (w, dim/2)
    grid_y = y_feat.unsqueeze(1).expand(h, w, dim // 2)
    grid_x = x_feat.unsqueeze(0).expand(h, w, dim // 2)
    return torch.cat([grid_y, grid_x], dim=2).reshape(h * w, dim)


class _TextBlock(nn.Module):
    def __init__(self, dim: int, heads: int, ffn_hidden: int):
        super().__init__()
        self.attn = MultiheadAttention(dim, heads)
        self.norm1 = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn_hidden)
        self.norm2 = nn.LayerNorm(dim)

    def forward(self, x, bias):
        x = self.norm1(x + self.attn(x, x, x, bias))
        return self.norm2(x + self.ffn(x))


@dataclass
class TextEncoding:
    """states: (n, dim) one row per valid token; pooled: (dim,) state at the
    last valid position."""

    states: torch.Tensor
    pooled: torch.Tensor


class TextEncoder(nn.Module):
    """Causal transformer over fixed-width token rows. Sequences are always
    padded to max_len before attention, so the states of a given prefix do
    not depend on what follows it, bit for bit."""

    def __init__(
        self,
        vocab_size: int,
        dim: int,
        layers: int,
        heads: int,
        max_len: int,
        ffn_ratio: int = 4,
    ):
        super().__init__()
        self.max_len = max_len
        self.token_embed = nn.Embedding(vocab_size, dim)
        self.pos_embed = nn.Parameter(torch.zeros(max_len, dim))
        nn.init.normal_(self.pos_embed, std=0.02)
        self.blocks = nn.ModuleList(
            _TextBlock(dim, heads, dim * ffn_ratio) for _ in range(layers)
        )
        self.final_norm = nn.LayerNorm(dim)

    @property
    def vocab_size(self) -> int:
        return self.token_embed.num_embeddings

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        if ids.shape != (self.max_len,):
            raise InputError(
                f"token row must have shape ({self.max_len},), got {tuple(ids.shape)}"
            )
        dtype = self.token_embed.weight.dtype
        x = self.token_embed(ids) + self.pos_embed
        causal = torch.zeros(self.max_len, self.max_len, dtype=dtype)
        causal.masked_fill_(
            torch.ones(self.max_len, self.max_len, dtype=torch.bool).triu(1),
            float("-inf"),
        )
        for block in self.blocks:
            x = block(x, causal)
        return self.final_norm(x)

    def encode(self, tokens: TokenSequence) -> TextEncoding:
        if tokens.length > self.max_len or len(tokens.ids) != self.max_len:
            raise InputError(
                f"token sequence width {len(tokens.ids)} != encoder max_len {self.max_len}"
            )
        ids = torch.tensor(tokens.ids, dtype=torch.long)
        states = self.forward(ids)
        return TextEncoding(
            states=states[: tokens.length], pooled=states[tokens.length - 1]
        )


@dataclass
class ConceptEmbeddingTable:
    """Prompted category embeddings. The final row is always the synthetic
    "background" concept used as the no-object class."""

    names: tuple[str, ...]
    embeddings: torch.Tensor  # (C, dim)

    def __post_init__(self):
        if self.names[-1] != "background":
            raise InputError("concept table must end with the background row")
        if len(self.names) != self.embeddings.shape[0]:
            raise InputError("concept names and embeddings disagree in length")

    @property
    def background_index(self) -> int:
        return len(self.names) - 1


DEFAULT_PROMPT = "an image of {}"


def encode_concepts(
    encoder: TextEncoder,
    names,
    vocab: Vocabulary,
    template: str = DEFAULT_PROMPT,
) -> ConceptEmbeddingTable:
    """Embed category names through the prompt template, then append the
    background row. Rows are pooled text states, in input order."""
    names = list(names)
    if not names:
        raise InputError("no category names given")
    if template.count("{}") != 1:
        raise InputError(f"prompt template needs exactly one placeholder: {template!r}")
    if len(set(names)) != len(names):
        raise InputError("duplicate category names")
    if "background" in names:
        raise InputError('"background" is reserved for the no-object row')
    rows = []
    for name in names + ["background"]:
        tokens = tokenize(template.format(name), vocab, encoder.max_len)
        rows.append(encoder.encode(tokens).pooled)
    return ConceptEmbeddingTable(names=tuple(names) + ("background",), embeddings=torch.stack(rows))
