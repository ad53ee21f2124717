import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import torch

from config import RunConfig
from diffusion import VisualGenerator
from rng import SAMPLING, mix
from savers import SampleSaver
from synthworld import EmotionCategory, WorldSpec
from textmodel import TextModel, sample_caption
from tokens import TextualEmotionTokens, validate_mix_weights

logger = logging.getLogger(__name__)


@dataclass
class InferenceItem:
    """One (content, emotion) request; weights replace emotion for mixed requests."""

    name: str
    content: str
    concept: str | None
    emotion: EmotionCategory | None
    seed: int
    weights: list[float] | None = None

    def __post_init__(self):
        if self.emotion is None and self.weights is None:
            raise ValueError(f"Inference item '{self.name}' needs an emotion or mixing weights")
        if self.weights is not None:
            self.weights = validate_mix_weights(self.weights).tolist()


def item_name(content: str, tag: str) -> str:
    slug = re.sub(r"[^a-z0-9]+", "-", content.lower()).strip("-") or "empty"
    return f"{slug}__{tag}"


def make_item(base_seed: int, world: WorldSpec, content: str, emotion: EmotionCategory, tag: str | None = None) -> InferenceItem:
    """Seed depends on content and emotion only, so every ablation label shares it."""
    tag = tag or emotion.label
    return InferenceItem(
        name=item_name(content, tag),
        content=content,
        concept=world.find_concept(content),
        emotion=emotion,
        seed=mix(base_seed, SAMPLING, content, tag),
    )


@dataclass
class ProcessResult:
    """Result of processing a batch of inference items."""

    saved_count: int
    skipped_count: int
    images: dict[str, np.ndarray] = field(default_factory=dict)


class SampleProcessor:
    """Turns inference items into captions and images, skipping finished ones."""

    def __init__(
        self,
        world: WorldSpec,
        config: RunConfig,
        text_model: TextModel,
        text_tokens: TextualEmotionTokens,
        visual: VisualGenerator,
        saver: SampleSaver,
        alpha: float | None = None,
    ):
        self.world = world
        self.config = config
        self.text_model = text_model
        self.text_tokens = text_tokens
        self.visual = visual
        self.saver = saver
        self.alpha = (config.alpha if alpha is None else alpha) if config.use_vv else 0.0

    def caption_for(self, item: InferenceItem) -> str:
        if not self.config.use_vt:
            # Neutral caption straight to the diffusion stage
            return self.world.neutral_caption(item.concept) if item.concept else ""
        return sample_caption(
            self.text_model,
            self.text_tokens,
            item.emotion,
            item.content,
            weights=item.weights,
        )

    def sidecar(self, item: InferenceItem, caption: str) -> dict:
        return {
            "name": item.name,
            "content": item.content,
            "concept": item.concept,
            "emotion": item.emotion.label if item.emotion is not None else None,
            "weights": item.weights,
            "caption": caption,
            "alpha": self.alpha,
            "seed": item.seed,
            "steps": self.config.sample_steps,
            "config_label": self.config.ablation_label,
        }

    def generate(self, item: InferenceItem) -> tuple[np.ndarray, dict]:
        with torch.no_grad():
            caption = self.caption_for(item)
            image = self.visual.generate(
                item.emotion,
                caption,
                item.seed,
                steps=self.config.sample_steps,
                weights=item.weights,
                alpha=self.alpha,
            )
        logger.debug(f"Generated {item.name}: '{caption}'")
        return image, self.sidecar(item, caption)

    def process(self, items: list[InferenceItem]) -> ProcessResult:
        """
        Generate every item whose sidecar is absent.

        Work may run on several threads; results are written in input order.
        """
        if not items:
            logger.info("No inference items")
            return ProcessResult(saved_count=0, skipped_count=0)

        pending = [item for item in items if not self.saver.exists(item.name)]
        skipped = len(items) - len(pending)
        if skipped:
            logger.info(f"Skipping {skipped} samples already on disk")

        if self.config.workers > 1 and len(pending) > 1:
            with ThreadPoolExecutor(max_workers=self.config.workers) as pool:
                outputs = list(pool.map(self.generate, pending))
        else:
            outputs = [self.generate(item) for item in pending]

        result = ProcessResult(saved_count=0, skipped_count=skipped)
        for item, (image, sidecar) in zip(pending, outputs):
            self.saver.add_records([{"name": item.name, "image": image, "sidecar": sidecar}])
            result.images[item.name] = image
            result.saved_count += 1
        logger.info(f"Saved {result.saved_count} new samples ({skipped} skipped)")
        return result
