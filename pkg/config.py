import hashlib
import json
import logging
from pathlib import Path
from typing import Any

from dotenv import dotenv_values
from pydantic import BaseModel, ConfigDict, Field, model_validator

logger = logging.getLogger(__name__)


class RunConfig(BaseModel):
    """All knobs of one run. Unknown keys are rejected."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    # Data
    world_seed: int = 0
    train_size: int = Field(800, ge=1)
    test_size: int = Field(256, ge=1)
    image_size: int = Field(32, ge=8, le=128)

    # Textual stage
    text_dim: int = Field(64, ge=4)
    text_layers: int = Field(2, ge=1)
    text_heads: int = Field(2, ge=1)
    lora_rank: int = Field(4, ge=1)
    lora_scale: float = 1.0
    pretrain_steps: int = Field(400, ge=0)
    pretrain_lr: float = Field(3e-3, ge=0.0)
    text_steps: int = Field(600, ge=0)
    text_lr: float = Field(3e-3, ge=0.0)
    text_batch: int = Field(32, ge=1)
    token_only_prob: float = Field(0.1, ge=0.0, le=1.0)

    # Visual stage
    visual_dim: int = Field(64, ge=4)
    n_max: int = Field(16, ge=1)
    alpha: float = 1.0
    timesteps: int = Field(200, ge=2)
    beta_start: float = Field(1e-4, gt=0.0)
    beta_end: float = Field(0.02, lt=1.0)
    unet_channels: int = Field(32, ge=8)
    diffusion_train_steps: int = Field(3000, ge=0)
    diffusion_lr: float = Field(5e-4, ge=0.0)
    diffusion_batch: int = Field(32, ge=1)
    sample_steps: int = Field(200, ge=1)

    # Probes
    probe_steps: int = Field(600, ge=0)
    probe_lr: float = Field(2e-3, ge=0.0)
    probe_batch: int = Field(64, ge=1)
    probe_gate: float = Field(0.98, ge=0.0, le=1.0)

    # Ablation flags
    use_vt: bool = True
    use_vv: bool = True

    # Inference set and experiments
    inference_captions: int = Field(4, ge=0)
    inference_styles: int = Field(1, ge=0)
    visualization_seeds: int = Field(8, ge=1)
    mix_samples: int = Field(32, ge=1)

    # Runtime
    workers: int = Field(1, ge=1)
    log_every: int = Field(50, ge=1)
    output_dir: str = "runs/default"
    seed: int = 0

    @model_validator(mode="after")
    def _check_cross_fields(self) -> "RunConfig":
        if self.text_dim % self.text_heads != 0:
            raise ValueError(
                f"text_dim ({self.text_dim}) must be divisible by text_heads ({self.text_heads})"
            )
        if self.lora_rank > self.text_dim:
            raise ValueError(
                f"lora_rank ({self.lora_rank}) must not exceed text_dim ({self.text_dim})"
            )
        if not self.beta_start < self.beta_end:
            raise ValueError(
                f"beta_start ({self.beta_start}) must be below beta_end ({self.beta_end})"
            )
        if self.sample_steps > self.timesteps:
            raise ValueError(
                f"sample_steps ({self.sample_steps}) must not exceed timesteps ({self.timesteps})"
            )
        if self.unet_channels % 8 != 0:
            raise ValueError(
                f"unet_channels ({self.unet_channels}) must be a multiple of 8"
            )
        return self

    @property
    def ablation_label(self) -> str:
        if self.use_vt and self.use_vv:
            return "both"
        if self.use_vt:
            return "vt"
        if self.use_vv:
            return "vv"
        return "none"

    def fingerprint(self, fields: list[str] | tuple[str, ...]) -> str:
        """Short digest of the named fields; equal digests mean equal values."""
        values = {name: getattr(self, name) for name in sorted(fields)}
        return hashlib.sha256(json.dumps(values, sort_keys=True).encode("utf-8")).hexdigest()[:16]

    @property
    def run_dir(self) -> Path:
        return Path(self.output_dir)

    def with_overrides(self, **overrides: Any) -> "RunConfig":
        """Copy with overrides, re-running validation."""
        data = self.model_dump()
        data.update({k: v for k, v in overrides.items() if v is not None})
        return RunConfig.model_validate(data)


def load_config(path: str | Path | None = None, **overrides: Any) -> RunConfig:
    """
    Load a RunConfig from a KEY=VALUE file.

    Args:
        path: dotenv-style file; keys are case-insensitive. None means defaults.
        overrides: values that win over the file (e.g. seed and output_dir from the CLI)

    Raises:
        FileNotFoundError: If path is given but missing
        pydantic.ValidationError: On unknown keys or out-of-range values
    """
    values: dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"Config file not found: {path}")
        raw = dotenv_values(path)
        values = {key.lower(): value for key, value in raw.items() if value is not None}
        logger.info(f"Loaded {len(values)} config keys from {path}")

    values.update({k: v for k, v in overrides.items() if v is not None})
    config = RunConfig.model_validate(values)

    logger.info(
        f"Config initialized: seed={config.seed}, output_dir={config.output_dir}, "
        f"ablation={config.ablation_label}, alpha={config.alpha}"
    )
    return config
