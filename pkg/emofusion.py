"""
Visual emotion conditioning: the caption is encoded to f_v, the visual
emotion token is cross-attended by f_v (f_v queries, tokens give keys and
values) and the result is injected residually, c_v = f_v + alpha * f_e.
"""

import logging
import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from synthworld import EmotionCategory
from textmodel import Vocabulary
from tokens import VisualEmotionTokens

logger = logging.getLogger(__name__)


@dataclass
class EncodedPrompt:
    features: torch.Tensor  # (N_max, d2)
    pad_mask: torch.Tensor  # (N_max,), True on PAD rows


def _masked_fill_min(scores: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    return scores.masked_fill(mask, torch.finfo(scores.dtype).min)


class PromptEncoder(nn.Module):
    """Embedding table plus one bidirectional self-attention block."""

    def __init__(self, vocab: Vocabulary, dim: int = 64, n_max: int = 16):
        super().__init__()
        self.vocab = vocab
        self.dim = dim
        self.n_max = n_max
        self.tok_emb = nn.Embedding(len(vocab), dim, padding_idx=Vocabulary.PAD)
        self.pos_emb = nn.Embedding(n_max, dim)
        self.ln1 = nn.LayerNorm(dim)
        self.q = nn.Linear(dim, dim, bias=False)
        self.k = nn.Linear(dim, dim, bias=False)
        self.v = nn.Linear(dim, dim, bias=False)
        self.proj = nn.Linear(dim, dim)
        self.ln2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 2 * dim), nn.GELU(), nn.Linear(2 * dim, dim))
        nn.init.normal_(self.pos_emb.weight, std=0.02)

    def tokenize(self, captions: list[str]) -> torch.Tensor:
        """(B, N_max) ids, PAD-filled; longer captions are truncated with a warning."""
        ids = torch.full((len(captions), self.n_max), Vocabulary.PAD, dtype=torch.long)
        for row, caption in enumerate(captions):
            words = self.vocab.encode(caption)
            if len(words) > self.n_max:
                logger.warning(
                    f"Caption truncated from {len(words)} to {self.n_max} tokens: '{caption}'"
                )
                words = words[: self.n_max]
            if words:
                ids[row, : len(words)] = torch.tensor(words, dtype=torch.long)
        return ids

    def forward(self, ids: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        pad = ids == Vocabulary.PAD
        x = self.tok_emb(ids) + self.pos_emb(torch.arange(ids.shape[1], device=ids.device))

        h = self.ln1(x)
        scores = self.q(h) @ self.k(h).transpose(-2, -1) / math.sqrt(self.dim)
        scores = _masked_fill_min(scores, pad[:, None, :])
        x = x + self.proj(torch.softmax(scores, dim=-1) @ self.v(h))
        x = x + self.mlp(self.ln2(x))
        return x.masked_fill(pad[..., None], 0.0), pad


def encode_prompt(encoder: PromptEncoder, caption: str) -> EncodedPrompt:
    """f_v = E_vis(C_t) for one caption."""
    features, pad = encoder(encoder.tokenize([caption]))
    return EncodedPrompt(features=features[0], pad_mask=pad[0])


class FusionBlock(nn.Module):
    """Single-head cross-attention W_Q, W_K, W_V (d_k = d2) and the injection scale alpha."""

    def __init__(self, dim: int = 64, alpha: float = 1.0):
        super().__init__()
        self.dim = dim
        self.alpha = alpha
        self.w_q = nn.Linear(dim, dim, bias=False)
        self.w_k = nn.Linear(dim, dim, bias=False)
        self.w_v = nn.Linear(dim, dim, bias=False)


def cross_attend(
    block: FusionBlock,
    f_v: torch.Tensor,
    v: torch.Tensor,
    pad_mask: torch.Tensor | None = None,
    return_weights: bool = False,
):
    """
    f_e = softmax(Q K^T / sqrt(d_k)) V with Q = W_Q f_v, K = W_K v, V = W_V v.

    Args:
        f_v: (N, d2) or (B, N, d2)
        v: emotion token(s), (d2,), (K, d2) or (B, K, d2)
        pad_mask: rows of f_v to zero in the output
        return_weights: also return the (…, N, K) attention weights
    """
    d = block.dim
    if f_v.shape[-1] != d or v.shape[-1] != d:
        raise ValueError(
            f"cross_attend expects last dim {d}, got f_v {tuple(f_v.shape)} and v {tuple(v.shape)}"
        )
    unbatched = f_v.dim() == 2
    if unbatched:
        f_v = f_v[None]
        v = v.reshape(1, -1, d)
        pad_mask = pad_mask[None] if pad_mask is not None else None
    elif v.dim() == 2:
        v = v[None].expand(f_v.shape[0], -1, -1)

    q = block.w_q(f_v)
    k = block.w_k(v)
    values = block.w_v(v)
    weights = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(d), dim=-1)
    f_e = weights @ values
    if pad_mask is not None:
        f_e = f_e.masked_fill(pad_mask[..., None], 0.0)

    if unbatched:
        f_e, weights = f_e[0], weights[0]
    return (f_e, weights) if return_weights else f_e


def inject(f_v: torch.Tensor, f_e: torch.Tensor, alpha: float) -> torch.Tensor:
    """c_v = f_v + alpha * f_e."""
    if f_v.shape != f_e.shape:
        raise ValueError(f"inject shape mismatch: f_v {tuple(f_v.shape)} vs f_e {tuple(f_e.shape)}")
    return f_v + alpha * f_e


def emotion_rows(tokens: VisualEmotionTokens, k: EmotionCategory | int | None = None, weights=None) -> torch.Tensor:
    """Key/value rows for one emotion (1, d2) or a mixture (K, d2)."""
    if weights is not None:
        return tokens.stacked(weights)
    if k is None:
        raise ValueError("Either an emotion or mixing weights are required")
    return tokens.row(k)[None]


def condition_batch(
    encoder: PromptEncoder,
    block: FusionBlock,
    ids: torch.Tensor,
    rows: torch.Tensor,
    alpha: float,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Batched encode -> cross_attend -> inject; rows is (B, K, d2)."""
    f_v, pad = encoder(ids)
    f_e = cross_attend(block, f_v, rows, pad_mask=pad)
    return inject(f_v, f_e, alpha), pad


def condition(
    encoder: PromptEncoder,
    block: FusionBlock,
    tokens: VisualEmotionTokens,
    k: EmotionCategory | int | None,
    caption: str,
    weights=None,
    alpha: float | None = None,
) -> EncodedPrompt:
    """
    c_v for one caption and one emotion (or a simplex mixture of emotions).

    This is the only path by which text and emotion reach the denoiser.
    """
    alpha = block.alpha if alpha is None else alpha
    rows = emotion_rows(tokens, k, weights)
    c_v, pad = condition_batch(encoder, block, encoder.tokenize([caption]), rows[None], alpha)
    return EncodedPrompt(features=c_v[0], pad_mask=pad[0])
