"""Attention primitives: task modes, query-interaction masks, mask-guided
cross-attention bias, and a plain multi-head attention block.

The decoder carries m latent queries (the last one is the global image
query) followed by n text queries. Which query may read which is a pure
function of (task mode, m, n, switches):

  * latent -> latent is always fully connected
  * a text query reads itself, earlier text (all text in VQA, which is
    non-causal), and the latent queries, subject to the switches
  * latents read text only in referring segmentation
  * the diagonal is always allowed
"""

from __future__ import annotations

import enum
import math

import torch
from torch import nn

from .config import AttentionSwitches
from .errors import InputError


class TaskMode(enum.Enum):
    GENERIC_SEG = "generic_seg"
    REFERRING_SEG = "referring_seg"
    RETRIEVAL = "retrieval"
    CAPTIONING = "captioning"
    VQA = "vqa"


LATENT_ONLY_MODES = frozenset({TaskMode.GENERIC_SEG, TaskMode.RETRIEVAL})


def validate_mode_counts(mode: TaskMode, m: int, n: int) -> None:
    if m < 2:
        raise InputError(f"m={m}: need at least one object query plus the global query")
    if n < 0:
        raise InputError(f"n={n} must be >= 0")
    if mode in LATENT_ONLY_MODES and n != 0:
        raise InputError(f"{mode.value} is latent-only but got n={n}")
    if mode not in LATENT_ONLY_MODES and n == 0:
        raise InputError(f"{mode.value} needs at least one text query")


def build_self_attention_mask(
    mode: TaskMode,
    m: int,
    n: int,
    switches: AttentionSwitches = AttentionSwitches(),
) -> torch.Tensor:
    """Boolean (m+n, m+n) matrix; entry [i, j] says query i may read query j."""
    validate_mode_counts(mode, m, n)
    size = m + n
    allow = torch.zeros(size, size, dtype=torch.bool)
    allow[:m, :m] = True
    if n > 0:
        if switches.text_attends_object_latents:
            allow[m:, : m - 1] = True
        if switches.text_attends_global:
            allow[m:, m - 1] = True
        if switches.text_attends_text:
            if mode is TaskMode.VQA:
                allow[m:, m:] = True
            else:
                for i in range(n):
                    allow[m + i, m : m + i + 1] = True
        if mode is TaskMode.REFERRING_SEG and switches.latent_attends_text:
            allow[:m, m:] = True
    allow |= torch.eye(size, dtype=torch.bool)
    return allow


def mask_to_bias(allow: torch.Tensor, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Boolean allow matrix -> additive bias (0 where allowed, -inf where not)."""
    bias = torch.zeros(allow.shape, dtype=dtype)
    bias[~allow] = float("-inf")
    return bias


def build_cross_bias(
    mask_logits: torch.Tensor,
    level_hw: tuple[int, int],
    n: int,
) -> torch.Tensor:
    """Additive cross-attention bias from the previous layer's mask logits.

    mask_logits: (m, H0, W0) at the finest feature resolution. Each latent
    query is restricted to pixels its current mask claims (sigmoid >= 0.5 at
    the target level); a query whose claim is empty falls back to the whole
    map. Text rows are never restricted. Result: (m + n, H*W), detached.
    """
    if mask_logits.dim() != 3:
        raise InputError(f"mask_logits must be (m, H, W), got {tuple(mask_logits.shape)}")
    m = mask_logits.shape[0]
    h, w = level_hw
    with torch.no_grad():
        logits = mask_logits.detach().unsqueeze(0)
        if logits.shape[-2:] != (h, w):
            logits = nn.functional.interpolate(
                logits, size=(h, w), mode="bilinear", align_corners=False
            )
        fg = logits[0].sigmoid() >= 0.5  # (m, h, w)
        fg = fg.reshape(m, h * w)
        dead = ~fg.any(dim=1)
        fg[dead] = True
        bias = torch.zeros(m + n, h * w, dtype=mask_logits.dtype)
        bias[:m][~fg] = float("-inf")
    return bias


def combine_cross_bias(bias: torch.Tensor, forced: torch.Tensor | None) -> torch.Tensor:
    """Overlay a forced-region bias on the per-query bias. Rows left with no
    readable key retreat to the forced region alone, then to unrestricted."""
    if forced is None:
        return bias
    if forced.shape != bias.shape:
        raise InputError(
            f"forced bias shape {tuple(forced.shape)} != bias shape {tuple(bias.shape)}"
        )
    combined = bias + forced
    dead = torch.isinf(combined).all(dim=1)
    if dead.any():
        combined[dead] = forced[dead]
        dead = torch.isinf(combined).all(dim=1)
        if dead.any():
            combined[dead] = 0.0
    return combined


class MultiheadAttention(nn.Module):
    """Unbatched multi-head attention over (n, dim) sequences with an
    optional additive bias broadcast across heads."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads != 0:
            raise InputError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.head_dim = dim // heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def forward(self, query, key, value, bias=None):
        nq, nk = query.shape[0], key.shape[0]
        q = self.q_proj(query).reshape(nq, self.heads, self.head_dim).transpose(0, 1)
        k = self.k_proj(key).reshape(nk, self.heads, self.head_dim).transpose(0, 1)
        v = self.v_proj(value).reshape(nk, self.heads, self.head_dim).transpose(0, 1)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)  # (h, nq, nk)
        if bias is not None:
            scores = scores + bias
        attn = torch.softmax(scores, dim=-1)
        out = (attn @ v).transpose(0, 1).reshape(nq, -1)
        return self.out_proj(out)


class FeedForward(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(nn.functional.gelu(self.fc1(x)))
