import logging

import torch
import torch.nn as nn

from synthworld import NUM_EMOTIONS, EmotionCategory

logger = logging.getLogger(__name__)

SIMPLEX_TOLERANCE = 1e-6


class SimplexError(ValueError):
    """Raised when mixing weights are not a point on the emotion simplex."""

    pass


def validate_mix_weights(weights) -> torch.Tensor:
    """Return the weights as a float64 tensor of length 8 on the simplex."""
    w = torch.as_tensor(weights, dtype=torch.float64).flatten()
    if w.numel() != NUM_EMOTIONS:
        raise SimplexError(f"Expected {NUM_EMOTIONS} mixing weights, got {w.numel()}")
    if not torch.isfinite(w).all() or (w < 0).any():
        raise SimplexError(f"Mixing weights must be finite and nonnegative, got {w.tolist()}")
    total = float(w.sum())
    if abs(total - 1.0) > SIMPLEX_TOLERANCE:
        raise SimplexError(f"Mixing weights must sum to 1, got {total:.6f}")
    return w


def weights_from_names(named: dict[str, float]) -> torch.Tensor:
    """{'amusement': 0.5, 'awe': 0.5} -> validated 8-vector."""
    w = torch.zeros(NUM_EMOTIONS, dtype=torch.float64)
    for name, value in named.items():
        w[EmotionCategory.from_name(name)] = float(value)
    return validate_mix_weights(w)


def one_hot_index(weights: torch.Tensor) -> int | None:
    nonzero = torch.nonzero(weights).flatten()
    if nonzero.numel() == 1 and float(weights[nonzero[0]]) == 1.0:
        return int(nonzero[0])
    return None


class EmotionTokens(nn.Module):
    """Eight learnable emotion embeddings, one row per category."""

    def __init__(self, dim: int, init_std: float = 0.02):
        super().__init__()
        self.dim = dim
        self.weight = nn.Parameter(torch.randn(NUM_EMOTIONS, dim) * init_std)

    def row(self, k: EmotionCategory | int) -> torch.Tensor:
        return self.weight[int(k)]

    def mix(self, weights) -> torch.Tensor:
        """Weighted sum of rows; one-hot weights return the row itself."""
        w = validate_mix_weights(weights)
        index = one_hot_index(w)
        if index is not None:
            return self.weight[index]
        return (w.to(self.weight.dtype)[:, None] * self.weight).sum(dim=0)

    def stacked(self, weights) -> torch.Tensor:
        """Rows w_k * v^k for every nonzero w_k, shape (K, dim)."""
        w = validate_mix_weights(weights)
        index = one_hot_index(w)
        if index is not None:
            return self.weight[index : index + 1]
        keep = torch.nonzero(w).flatten()
        return w[keep].to(self.weight.dtype)[:, None] * self.weight[keep]


class TextualEmotionTokens(EmotionTokens):
    """v_t: prepended to content embeddings in the language model."""

    pass


class VisualEmotionTokens(EmotionTokens):
    """v_v: cross-attended by the encoded prompt before diffusion."""

    pass
