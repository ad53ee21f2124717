"""
Pixel-space denoising diffusion conditioned on c_v.

Images live in [0, 1] outside this module and in [-1, 1] inside it.
Timesteps are 1-based: t in [1, T], with t = 0 standing for clean data.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

import checkpoint
from config import RunConfig
from emofusion import (
    EncodedPrompt,
    FusionBlock,
    PromptEncoder,
    condition,
    condition_batch,
)
from synthworld import EmotionCategory, WorldSpec
from textmodel import Vocabulary
from tokens import VisualEmotionTokens

logger = logging.getLogger(__name__)


# --- schedule ----------------------------------------------------------------


@dataclass
class DiffusionSchedule:
    """Linear beta schedule; index t - 1 holds step t."""

    betas: torch.Tensor

    def __post_init__(self):
        self.betas = self.betas.to(torch.float64)
        if not ((self.betas > 0) & (self.betas < 1)).all():
            raise ValueError("betas must lie strictly between 0 and 1")
        self.alphas = 1.0 - self.betas
        self.alpha_bars = torch.cumprod(self.alphas, dim=0)

    @classmethod
    def linear(cls, timesteps: int = 200, beta_start: float = 1e-4, beta_end: float = 0.02) -> "DiffusionSchedule":
        return cls(torch.linspace(beta_start, beta_end, timesteps, dtype=torch.float64))

    @property
    def timesteps(self) -> int:
        return self.betas.shape[0]

    def check_t(self, t: torch.Tensor, lowest: int = 0) -> None:
        """Noising steps are 1..T; the sampler also reads t = 0, the clean image."""
        if (t < lowest).any() or (t > self.timesteps).any():
            raise ValueError(f"Timestep out of range [{lowest}, {self.timesteps}]: {t.tolist()}")

    def alpha_bar(self, t: torch.Tensor | int) -> torch.Tensor:
        """alpha_bar_t with alpha_bar_0 = 1."""
        t = torch.as_tensor(t, dtype=torch.long)
        self.check_t(t)
        padded = torch.cat([torch.ones(1, dtype=torch.float64), self.alpha_bars])
        return padded[t]


def q_sample(schedule: DiffusionSchedule, z_0: torch.Tensor, t: torch.Tensor | int, eps: torch.Tensor) -> torch.Tensor:
    """z_t = sqrt(alpha_bar_t) z_0 + sqrt(1 - alpha_bar_t) eps."""
    if eps.shape != z_0.shape:
        raise ValueError(f"eps shape {tuple(eps.shape)} differs from z_0 shape {tuple(z_0.shape)}")
    schedule.check_t(torch.as_tensor(t, dtype=torch.long), lowest=1)
    ab = schedule.alpha_bar(t).to(z_0.dtype)
    if ab.dim() == 1:
        ab = ab.reshape(-1, *([1] * (z_0.dim() - 1)))
    return ab.sqrt() * z_0 + (1.0 - ab).sqrt() * eps


# --- denoiser ----------------------------------------------------------------


class SinusoidalTimeEmbedding(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        half = self.dim // 2
        freqs = torch.exp(torch.arange(half, device=t.device) * -(math.log(10000.0) / max(half - 1, 1)))
        angles = t.float()[:, None] * freqs[None, :]
        emb = torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)
        if self.dim % 2 == 1:
            emb = F.pad(emb, (0, 1))
        return emb


class ResidualBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, time_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, kernel_size=3, padding=1)
        self.time_mlp = nn.Sequential(nn.SiLU(), nn.Linear(time_dim, out_ch))
        self.norm2 = nn.GroupNorm(8, out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, kernel_size=3, padding=1)
        self.shortcut = nn.Conv2d(in_ch, out_ch, kernel_size=1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, t_emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_mlp(t_emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.shortcut(x)


class SpatialCrossAttention(nn.Module):
    """Spatial features attend to the rows of c_v; PAD rows are masked out."""

    def __init__(self, channels: int, context_dim: int):
        super().__init__()
        self.heads = max(1, channels // 32)
        self.norm = nn.GroupNorm(8, channels)
        self.q = nn.Linear(channels, channels, bias=False)
        self.k = nn.Linear(context_dim, channels, bias=False)
        self.v = nn.Linear(context_dim, channels, bias=False)
        self.out = nn.Linear(channels, channels)

    def forward(self, x: torch.Tensor, context: torch.Tensor, pad_mask: torch.Tensor) -> torch.Tensor:
        B, C, H, W = x.shape
        hd = C // self.heads
        h = self.norm(x).reshape(B, C, H * W).transpose(1, 2)
        q = self.q(h).reshape(B, H * W, self.heads, hd).transpose(1, 2)
        k = self.k(context).reshape(B, -1, self.heads, hd).transpose(1, 2)
        v = self.v(context).reshape(B, -1, self.heads, hd).transpose(1, 2)

        scores = q @ k.transpose(-2, -1) / math.sqrt(hd)
        scores = scores.masked_fill(pad_mask[:, None, None, :], torch.finfo(scores.dtype).min)
        out = (torch.softmax(scores, dim=-1) @ v).transpose(1, 2).reshape(B, H * W, C)
        return x + self.out(out).transpose(1, 2).reshape(B, C, H, W)


class Denoiser(nn.Module):
    """
    Two-resolution U-Net predicting the added noise.

    Conditioning enters only through the cross-attention layers, one per resolution.
    """

    def __init__(self, channels: int = 32, context_dim: int = 64, image_channels: int = 3):
        super().__init__()
        time_dim = channels * 4
        self.time_sin = SinusoidalTimeEmbedding(channels)
        self.time_mlp = nn.Sequential(
            nn.Linear(channels, time_dim),
            nn.SiLU(),
            nn.Linear(time_dim, time_dim),
        )
        wide = channels * 2
        self.inc = nn.Conv2d(image_channels, channels, kernel_size=3, padding=1)
        self.res_high = ResidualBlock(channels, channels, time_dim)
        self.down = nn.Conv2d(channels, wide, kernel_size=3, stride=2, padding=1)
        self.res_low1 = ResidualBlock(wide, wide, time_dim)
        self.attn_low = SpatialCrossAttention(wide, context_dim)
        self.res_low2 = ResidualBlock(wide, wide, time_dim)
        self.up = nn.Sequential(nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(wide, channels, kernel_size=3, padding=1))
        self.res_up = ResidualBlock(2 * channels, channels, time_dim)
        self.attn_high = SpatialCrossAttention(channels, context_dim)
        self.out = nn.Sequential(nn.GroupNorm(8, channels), nn.SiLU(), nn.Conv2d(channels, image_channels, kernel_size=3, padding=1))

    def forward(self, z_t: torch.Tensor, t: torch.Tensor, c_v: torch.Tensor, pad_mask: torch.Tensor) -> torch.Tensor:
        t_emb = self.time_mlp(self.time_sin(t).to(z_t.dtype))
        skip = self.res_high(self.inc(z_t), t_emb)
        h = self.res_low1(self.down(skip), t_emb)
        h = self.attn_low(h, c_v, pad_mask)
        h = self.res_low2(h, t_emb)
        h = self.res_up(torch.cat([self.up(h), skip], dim=1), t_emb)
        h = self.attn_high(h, c_v, pad_mask)
        return self.out(h)


def diffusion_loss(
    denoiser,
    schedule: DiffusionSchedule,
    z_0: torch.Tensor,
    c_v: torch.Tensor,
    pad_mask: torch.Tensor,
    generator: torch.Generator | None = None,
    t: torch.Tensor | None = None,
    noise: torch.Tensor | None = None,
) -> torch.Tensor:
    """
    Single-sample estimate of E ||eps - eps_theta(z_t, t, c_v)||^2, averaged per element.

    t and noise are drawn (t uniform on [1, T], noise standard normal) unless given.
    """
    B = z_0.shape[0]
    if t is None:
        t = torch.randint(1, schedule.timesteps + 1, (B,), generator=generator)
    if noise is None:
        noise = torch.randn(z_0.shape, generator=generator, dtype=z_0.dtype)
    z_t = q_sample(schedule, z_0, t, noise)
    prediction = denoiser(z_t, t, c_v, pad_mask)
    return F.mse_loss(prediction, noise)


# --- the visual stack --------------------------------------------------------


class VisualGenerator(nn.Module):
    """Prompt encoder, fusion block, visual tokens and denoiser trained together under L_v."""

    def __init__(self, vocab: Vocabulary, schedule: DiffusionSchedule, dim: int = 64, n_max: int = 16, alpha: float = 1.0, channels: int = 32, image_size: int = 32):
        super().__init__()
        if image_size % 2 != 0:
            raise ValueError(f"image_size must be even, got {image_size}")
        self.schedule = schedule
        self.image_size = image_size
        self.encoder = PromptEncoder(vocab, dim=dim, n_max=n_max)
        self.fusion = FusionBlock(dim=dim, alpha=alpha)
        self.tokens = VisualEmotionTokens(dim)
        self.denoiser = Denoiser(channels=channels, context_dim=dim)

    def condition(self, k: EmotionCategory | int | None, caption: str, weights=None, alpha: float | None = None) -> EncodedPrompt:
        return condition(self.encoder, self.fusion, self.tokens, k, caption, weights=weights, alpha=alpha)

    def generate(self, k: EmotionCategory | int | None, caption: str, rng_seed: int, steps: int | None = None, weights=None, alpha: float | None = None) -> np.ndarray:
        prompt = self.condition(k, caption, weights=weights, alpha=alpha)
        return sample(self.denoiser, self.schedule, prompt.features, prompt.pad_mask, rng_seed, steps or self.schedule.timesteps, self.image_size)


def build_visual_generator(world: WorldSpec, config: RunConfig) -> VisualGenerator:
    schedule = DiffusionSchedule.linear(config.timesteps, config.beta_start, config.beta_end)
    return VisualGenerator(
        Vocabulary.from_world(world),
        schedule,
        dim=config.visual_dim,
        n_max=config.n_max,
        alpha=config.alpha,
        channels=config.unet_channels,
        image_size=world.image_size,
    )


@dataclass
class ConditionedImage:
    """One diffusion training example."""

    image: np.ndarray
    caption: str
    emotion: int


@dataclass
class DiffusionTrainLog:
    losses: list[float] = field(default_factory=list)

    @property
    def first_window_mean(self) -> float:
        head = self.losses[:100]
        return float(np.mean(head)) if head else float("nan")

    @property
    def final_smoothed(self) -> float:
        tail = self.losses[-100:]
        return float(np.mean(tail)) if tail else float("nan")


def images_to_tensor(images: list[np.ndarray] | np.ndarray) -> torch.Tensor:
    """(N, H, W, 3) in [0, 1] -> (N, 3, H, W) in [-1, 1]."""
    array = np.stack([np.asarray(img, dtype=np.float32) for img in images])
    return torch.from_numpy(array).permute(0, 3, 1, 2).contiguous() * 2.0 - 1.0


def train_diffusion(visual: VisualGenerator, dataset: list[ConditionedImage], config: RunConfig, rng_seed: int, alpha: float | None = None) -> DiffusionTrainLog:
    """
    Train denoiser, prompt encoder, fusion block and visual tokens jointly under L_v.

    Args:
        alpha: injection strength used during training; 0 bypasses the visual tokens
    """
    if not dataset:
        raise ValueError("train_diffusion needs a nonempty dataset")
    alpha = visual.fusion.alpha if alpha is None else alpha

    generator = torch.Generator().manual_seed(rng_seed)
    images = images_to_tensor([item.image for item in dataset])
    ids = visual.encoder.tokenize([item.caption for item in dataset])
    emotions = torch.tensor([int(item.emotion) for item in dataset], dtype=torch.long)

    optimizer = torch.optim.Adam(visual.parameters(), lr=config.diffusion_lr)
    log = DiffusionTrainLog()
    visual.train()

    for step in range(1, config.diffusion_train_steps + 1):
        idx = torch.randint(len(dataset), (config.diffusion_batch,), generator=generator)
        rows = visual.tokens.weight[emotions[idx]][:, None, :]
        c_v, pad = condition_batch(visual.encoder, visual.fusion, ids[idx], rows, alpha)
        loss = diffusion_loss(visual.denoiser, visual.schedule, images[idx], c_v, pad, generator=generator)

        optimizer.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(visual.parameters(), 1.0)
        optimizer.step()
        log.losses.append(loss.item())

        if step % config.log_every == 0 or step == config.diffusion_train_steps:
            logger.info(f"[diffusion] step {step}/{config.diffusion_train_steps} loss={loss.item():.4f}")

    visual.eval()
    if len(log.losses) >= 200 and log.final_smoothed > 0.6 * log.first_window_mean:
        logger.warning(
            f"Diffusion loss fell from {log.first_window_mean:.4f} to {log.final_smoothed:.4f}, "
            "less than 40%"
        )
    return log


def respaced_timesteps(timesteps: int, steps: int) -> list[int]:
    """Descending, distinct timesteps from T down to 1."""
    if not 1 <= steps <= timesteps:
        raise ValueError(f"steps must be in [1, {timesteps}], got {steps}")
    grid = np.linspace(timesteps, 1, steps).round().astype(int)
    return sorted(set(grid.tolist()), reverse=True)


@torch.no_grad()
def sample(
    denoiser,
    schedule: DiffusionSchedule,
    c_v: torch.Tensor,
    pad_mask: torch.Tensor,
    rng_seed: int,
    steps: int,
    image_size: int,
    image_channels: int = 3,
) -> np.ndarray:
    """
    Ancestral sampling from z_T ~ N(0, I) over a (possibly respaced) timestep grid.

    Returns an H×W×3 image in [0, 1].
    """
    generator = torch.Generator().manual_seed(rng_seed)
    z = torch.randn((1, image_channels, image_size, image_size), generator=generator)
    ts = respaced_timesteps(schedule.timesteps, steps)

    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else 0
        ab_t = float(schedule.alpha_bar(t))
        ab_prev = float(schedule.alpha_bar(t_prev))
        beta = 1.0 - ab_t / ab_prev

        eps = denoiser(z, torch.tensor([t]), c_v[None], pad_mask[None])
        z = (z - beta / math.sqrt(1.0 - ab_t) * eps) / math.sqrt(1.0 - beta)
        if t_prev > 0:
            variance = beta * (1.0 - ab_prev) / (1.0 - ab_t)
            z = z + math.sqrt(variance) * torch.randn(z.shape, generator=generator)

    image = (z[0].clamp(-1.0, 1.0) + 1.0) / 2.0
    return image.permute(1, 2, 0).cpu().numpy().astype(np.float32)


# --- checkpoints -------------------------------------------------------------


def save_visual_checkpoint(path: str | Path, visual: VisualGenerator, config: RunConfig) -> Path:
    meta = {
        "vocabulary": visual.encoder.vocab.words[len(Vocabulary.SPECIALS) :],
        "dim": visual.encoder.dim,
        "n_max": visual.encoder.n_max,
        "alpha": visual.fusion.alpha,
        "channels": visual.denoiser.inc.out_channels,
        "image_size": visual.image_size,
        "schedule": {
            "timesteps": visual.schedule.timesteps,
            "beta_start": float(visual.schedule.betas[0]),
            "beta_end": float(visual.schedule.betas[-1]),
        },
        "config": config.model_dump(),
    }
    sections = {
        "denoiser": visual.denoiser.state_dict(),
        "prompt_encoder": visual.encoder.state_dict(),
        "fusion": visual.fusion.state_dict(),
        "visual_tokens": visual.tokens.state_dict(),
        "schedule": {"betas": visual.schedule.betas},
    }
    return checkpoint.save(path, sections, meta)


def load_visual_checkpoint(path: str | Path) -> VisualGenerator:
    sections, meta = checkpoint.load(path)
    spec = meta["schedule"]
    schedule = DiffusionSchedule.linear(spec["timesteps"], spec["beta_start"], spec["beta_end"])
    visual = VisualGenerator(
        Vocabulary(meta["vocabulary"]),
        schedule,
        dim=meta["dim"],
        n_max=meta["n_max"],
        alpha=meta["alpha"],
        channels=meta["channels"],
        image_size=meta["image_size"],
    )
    visual.denoiser.load_state_dict(sections["denoiser"])
    visual.encoder.load_state_dict(sections["prompt_encoder"])
    visual.fusion.load_state_dict(sections["fusion"])
    visual.tokens.load_state_dict(sections["visual_tokens"])
    visual.eval()
    return visual
