"""
Procedural emotion world.

Emotion is carried by perceptual signatures (background hue, brightness and
grain), content by a drawn shape. Captions come from a closed word-level
grammar so the language side needs no subword tokenizer.
"""

import colorsys
import json
import logging
import math
from dataclasses import dataclass
from enum import IntEnum
from itertools import combinations
from pathlib import Path
from typing import Any

import numpy as np
from matplotlib.colors import rgb_to_hsv
from PIL import Image, ImageDraw
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from rng import numpy_rng
from savers import JsonlSaver

logger = logging.getLogger(__name__)

CONCEPT_SLOT = "{concept}"
CUE_SLOT = "{cue}"
STYLE_SLOT = "{style}"
NEUTRAL_TEMPLATE = "a {concept} in the scene"
STYLED_CONTENT = "a {style} {concept}"

MIN_HUE_SEPARATION = 30.0
MAX_VOCABULARY = 128
SUPERSAMPLE = 4
SHAPE_CONTRAST = 0.2
SATURATION = 0.65


class EmotionCategory(IntEnum):
    AMUSEMENT = 0
    AWE = 1
    CONTENTMENT = 2
    EXCITEMENT = 3
    ANGER = 4
    DISGUST = 5
    FEAR = 6
    SADNESS = 7

    @property
    def label(self) -> str:
        return self.name.lower()

    @property
    def polarity(self) -> str:
        return "positive" if self.value < 4 else "negative"

    @classmethod
    def from_name(cls, name: str) -> "EmotionCategory":
        try:
            return cls[name.strip().upper()]
        except KeyError:
            valid = ", ".join(e.label for e in cls)
            raise ValueError(f"Unknown emotion '{name}'. Valid emotions: {valid}") from None


EMOTION_NAMES = [e.label for e in EmotionCategory]
NUM_EMOTIONS = len(EMOTION_NAMES)


class UnknownConceptError(ValueError):
    """Raised when a concept is not part of the world."""

    def __init__(self, concept: str, valid: list[str]):
        super().__init__(f"Unknown concept '{concept}'. Valid concepts: {', '.join(valid)}")
        self.concept = concept
        self.valid = valid


class EmotionSignature(BaseModel):
    model_config = ConfigDict(frozen=True)

    base_hue: float = Field(ge=0.0, lt=360.0)
    brightness: float = Field(ge=0.0, le=1.0)
    noise_amplitude: float = Field(ge=0.0, le=1.0)


DEFAULT_SIGNATURES: dict[str, dict[str, float]] = {
    "amusement": {"base_hue": 45.0, "brightness": 0.68, "noise_amplitude": 0.04},
    "awe": {"base_hue": 180.0, "brightness": 0.62, "noise_amplitude": 0.02},
    "contentment": {"base_hue": 90.0, "brightness": 0.58, "noise_amplitude": 0.02},
    "excitement": {"base_hue": 315.0, "brightness": 0.72, "noise_amplitude": 0.06},
    "anger": {"base_hue": 0.0, "brightness": 0.42, "noise_amplitude": 0.06},
    "disgust": {"base_hue": 135.0, "brightness": 0.36, "noise_amplitude": 0.05},
    "fear": {"base_hue": 270.0, "brightness": 0.22, "noise_amplitude": 0.04},
    "sadness": {"base_hue": 225.0, "brightness": 0.30, "noise_amplitude": 0.03},
}

DEFAULT_CONCEPTS = ["circle", "square", "triangle", "star", "cross", "ring", "stripes", "dots"]

DEFAULT_LEXICON: dict[str, list[str]] = {
    "amusement": ["playful", "funny", "cheerful", "whimsical"],
    "awe": ["majestic", "vast", "towering", "sublime"],
    "contentment": ["calm", "cozy", "peaceful", "gentle"],
    "excitement": ["thrilling", "vibrant", "dazzling", "wild"],
    "anger": ["furious", "burning", "harsh", "violent"],
    "disgust": ["rotten", "slimy", "filthy", "moldy"],
    "fear": ["dark", "creepy", "shadowy", "haunted"],
    "sadness": ["lonely", "gloomy", "faded", "tearful"],
}

# Rendering ignores style; the words only widen what content may say.
DEFAULT_STYLES = ["sketch", "watercolor", "pixelated", "painted"]

DEFAULT_TEMPLATES = [
    "a {cue} {concept} in a {cue} and {cue} scene",
    "a {cue} {concept} under a {cue} sky",
    "the {concept} looks {cue} {cue} and {cue}",
    "a {cue} {cue} scene with a {concept}",
    "a {concept} bathed in {cue} and {cue} light",
    "a {cue} picture of a {cue} {concept} looking {cue}",
]


def _hue_distance(a: float, b: float) -> float:
    d = abs(a - b) % 360.0
    return min(d, 360.0 - d)


class WorldSpec(BaseModel):
    """Everything needed to regenerate the synthetic world."""

    model_config = ConfigDict(frozen=True)

    emotion_signatures: dict[str, EmotionSignature]
    concepts: list[str]
    lexicon: dict[str, list[str]]
    templates: list[str]
    styles: list[str] = Field(default_factory=lambda: list(DEFAULT_STYLES))
    image_size: int = Field(32, ge=8, le=128)
    seed: int = 0

    @field_validator("emotion_signatures")
    @classmethod
    def _check_signatures(cls, value: dict[str, EmotionSignature]) -> dict[str, EmotionSignature]:
        if sorted(value) != sorted(EMOTION_NAMES):
            raise ValueError(f"emotion_signatures must cover exactly {EMOTION_NAMES}")
        for a, b in combinations(EMOTION_NAMES, 2):
            sep = _hue_distance(value[a].base_hue, value[b].base_hue)
            if sep < MIN_HUE_SEPARATION:
                raise ValueError(
                    f"emotion_signatures: hue collision between {a} and {b} "
                    f"({sep:.1f} < {MIN_HUE_SEPARATION} degrees)"
                )
        return value

    @field_validator("concepts")
    @classmethod
    def _check_concepts(cls, value: list[str]) -> list[str]:
        if not value:
            raise ValueError("concepts must be nonempty")
        if len(set(value)) != len(value):
            raise ValueError(f"concepts contain duplicates: {value}")
        for concept in value:
            if not concept or " " in concept:
                raise ValueError(f"concepts must be single words, got '{concept}'")
        return value

    @field_validator("lexicon")
    @classmethod
    def _check_lexicon(cls, value: dict[str, list[str]]) -> dict[str, list[str]]:
        if sorted(value) != sorted(EMOTION_NAMES):
            raise ValueError(f"lexicon must cover exactly {EMOTION_NAMES}")
        owner: dict[str, str] = {}
        for emotion in EMOTION_NAMES:
            words = value[emotion]
            if len(words) < 4:
                raise ValueError(f"lexicon[{emotion}] needs at least 4 words, got {len(words)}")
            for word in words:
                if not word or " " in word:
                    raise ValueError(f"lexicon words must be single words, got '{word}'")
                if word in owner and owner[word] != emotion:
                    raise ValueError(
                        f"lexicon word '{word}' is shared by {owner[word]} and {emotion}"
                    )
                owner[word] = emotion
        return value

    @field_validator("styles")
    @classmethod
    def _check_styles(cls, value: list[str]) -> list[str]:
        if len(set(value)) != len(value):
            raise ValueError(f"styles contain duplicates: {value}")
        for style in value:
            if not style or " " in style:
                raise ValueError(f"styles must be single words, got '{style}'")
        return value

    @field_validator("templates")
    @classmethod
    def _check_templates(cls, value: list[str]) -> list[str]:
        if not value:
            raise ValueError("templates must be nonempty")
        for template in value:
            words = template.split()
            if words.count(CONCEPT_SLOT) != 1:
                raise ValueError(f"template '{template}' must contain {CONCEPT_SLOT} exactly once")
            if not 1 <= words.count(CUE_SLOT) <= 4:
                raise ValueError(f"template '{template}' must contain 1 to 4 {CUE_SLOT} slots")
        return value

    @model_validator(mode="after")
    def _check_vocabulary(self) -> "WorldSpec":
        cues = {w for words in self.lexicon.values() for w in words}
        frame = self.frame_words()
        styles = set(self.styles)
        concepts = set(self.concepts)
        clash = (concepts & cues) | (concepts & frame) | (cues & frame) | (styles & (concepts | cues | frame))
        if clash:
            raise ValueError(
                f"concepts, lexicon, styles and template words must be disjoint, overlap: {sorted(clash)}"
            )
        size = len(self.vocabulary_words())
        if size > MAX_VOCABULARY:
            raise ValueError(f"vocabulary has {size} words, limit is {MAX_VOCABULARY}")
        return self

    def frame_words(self) -> set[str]:
        """Template words other than the slots."""
        words = set(NEUTRAL_TEMPLATE.split()) | set(STYLED_CONTENT.split())
        for template in self.templates:
            words.update(template.split())
        return words - {CONCEPT_SLOT, CUE_SLOT, STYLE_SLOT}

    def vocabulary_words(self) -> list[str]:
        cues = {w for words in self.lexicon.values() for w in words}
        return sorted(self.frame_words() | cues | set(self.concepts) | set(self.styles))

    def signature(self, emotion: EmotionCategory) -> EmotionSignature:
        return self.emotion_signatures[EmotionCategory(emotion).label]

    def cue_words(self, emotion: EmotionCategory) -> list[str]:
        return self.lexicon[EmotionCategory(emotion).label]

    def emotion_of_word(self, word: str) -> EmotionCategory | None:
        for name, words in self.lexicon.items():
            if word in words:
                return EmotionCategory.from_name(name)
        return None

    def concept_index(self, concept: str) -> int:
        try:
            return self.concepts.index(concept)
        except ValueError:
            raise UnknownConceptError(concept, self.concepts) from None

    def neutral_caption(self, concept: str) -> str:
        self.concept_index(concept)
        return NEUTRAL_TEMPLATE.replace(CONCEPT_SLOT, concept)

    def styled_content(self, style: str, concept: str) -> str:
        """Content naming a concept in a style, e.g. "a sketch circle"."""
        self.concept_index(concept)
        if style not in self.styles:
            raise ValueError(f"Unknown style '{style}'. Valid styles: {', '.join(self.styles)}")
        return STYLED_CONTENT.replace(STYLE_SLOT, style).replace(CONCEPT_SLOT, concept)

    def find_concept(self, content: str) -> str | None:
        """The unique world concept named in content, if there is exactly one."""
        found = [w for w in content.split() if w in self.concepts]
        return found[0] if len(found) == 1 else None


@dataclass
class Quadruplet:
    """One training record."""

    emotion: EmotionCategory
    content: str
    affective_prompt: str
    image: np.ndarray
    concept: str


def make_world(seed: int = 0, overrides: dict[str, Any] | None = None) -> WorldSpec:
    """
    Build a WorldSpec from the fixed default tables plus overrides.

    Raises:
        pydantic.ValidationError: naming the offending field
    """
    data: dict[str, Any] = {
        "emotion_signatures": DEFAULT_SIGNATURES,
        "concepts": DEFAULT_CONCEPTS,
        "lexicon": DEFAULT_LEXICON,
        "templates": DEFAULT_TEMPLATES,
        "styles": DEFAULT_STYLES,
        "image_size": 32,
        "seed": seed,
    }
    data.update(overrides or {})
    world = WorldSpec.model_validate(data)
    logger.debug(
        f"World built: seed={seed}, concepts={len(world.concepts)}, "
        f"image_size={world.image_size}, vocabulary={len(world.vocabulary_words())}"
    )
    return world


# --- rendering ---------------------------------------------------------------


def luminance(rgb: np.ndarray) -> np.ndarray:
    """Rec.601 luma over the last axis."""
    return rgb[..., 0] * 0.299 + rgb[..., 1] * 0.587 + rgb[..., 2] * 0.114


def color_at(hue: float, target_luminance: float, saturation: float = SATURATION) -> np.ndarray:
    """RGB with the given hue and luma. Scaling and mixing with white keep the hue."""
    base = np.array(colorsys.hsv_to_rgb(hue / 360.0, saturation, 1.0))
    base_luminance = float(luminance(base))
    if target_luminance <= base_luminance:
        return base * (target_luminance / base_luminance)
    t = (target_luminance - base_luminance) / (1.0 - base_luminance)
    return base * (1.0 - t) + t


def _regular_polygon(cx: float, cy: float, radius: float, points: int, inner: float | None) -> list:
    vertices = []
    steps = points * 2 if inner is not None else points
    for i in range(steps):
        angle = -math.pi / 2 + i * 2 * math.pi / steps
        r = radius if inner is None or i % 2 == 0 else radius * inner
        vertices.append((cx + r * math.cos(angle), cy + r * math.sin(angle)))
    return vertices


def _draw_shape(draw: ImageDraw.ImageDraw, concept: str, cx: float, cy: float, half: float) -> None:
    left, top, right, bottom = cx - half, cy - half, cx + half, cy + half
    if concept == "circle":
        draw.ellipse((left, top, right, bottom), fill=255)
    elif concept == "square":
        inset = half * 0.2
        draw.rectangle((left + inset, top + inset, right - inset, bottom - inset), fill=255)
    elif concept == "triangle":
        draw.polygon([(cx, top), (right, bottom), (left, bottom)], fill=255)
    elif concept == "star":
        draw.polygon(_regular_polygon(cx, cy, half, 5, 0.45), fill=255)
    elif concept == "cross":
        bar = half / 3
        draw.rectangle((cx - bar, top, cx + bar, bottom), fill=255)
        draw.rectangle((left, cy - bar, right, cy + bar), fill=255)
    elif concept == "ring":
        draw.ellipse((left, top, right, bottom), fill=255)
        hole = half * 0.55
        draw.ellipse((cx - hole, cy - hole, cx + hole, cy + hole), fill=0)
    elif concept == "stripes":
        band = 2 * half / 7
        for i in range(3):
            y0 = top + band * (2 * i + 0.5)
            draw.rectangle((left, y0, right, y0 + band), fill=255)
    elif concept == "dots":
        dot = half / 5
        for gx in (-1, 0, 1):
            for gy in (-1, 0, 1):
                x, y = cx + gx * half * 0.66, cy + gy * half * 0.66
                draw.ellipse((x - dot, y - dot, x + dot, y + dot), fill=255)
    else:
        # Unknown shape names in custom worlds fall back to a regular polygon
        # with a concept-dependent vertex count so they stay distinguishable.
        points = 3 + sum(map(ord, concept)) % 6
        draw.polygon(_regular_polygon(cx, cy, half, points, None), fill=255)


def shape_mask(concept: str, size: int, rng: np.random.Generator) -> np.ndarray:
    """Anti-aliased coverage mask in [0, 1] with jittered scale and position."""
    big = size * SUPERSAMPLE
    scale = rng.uniform(0.85, 1.0)
    offset = rng.uniform(-0.08, 0.08, size=2) * big
    half = big * 0.35 * scale
    canvas = Image.new("L", (big, big), 0)
    _draw_shape(ImageDraw.Draw(canvas), concept, big / 2 + offset[0], big / 2 + offset[1], half)
    small = canvas.resize((size, size), Image.Resampling.BOX)
    return np.asarray(small, dtype=np.float64) / 255.0


def render_image(world: WorldSpec, concept: str, emotion: EmotionCategory, rng_seed: int) -> np.ndarray:
    """
    Render one H×W×3 image in [0, 1].

    The shape keeps the emotion's hue at a shifted luma; the background luma
    is compensated so the whole image averages the emotion's brightness.
    Grain is added equally to all channels, which leaves pixel hue intact.
    """
    world.concept_index(concept)
    signature = world.signature(emotion)
    rng = numpy_rng(rng_seed, "render")
    size = world.image_size

    mask = shape_mask(concept, size, rng)
    area = float(mask.mean())
    b = signature.brightness
    shape_lum = b - SHAPE_CONTRAST if b > 0.5 else b + SHAPE_CONTRAST
    background_lum = (b - area * shape_lum) / (1.0 - area) if area < 1.0 else b
    background_lum = float(np.clip(background_lum, 0.02, 0.98))

    background = color_at(signature.base_hue, background_lum)
    foreground = color_at(signature.base_hue, shape_lum)
    image = background * (1.0 - mask[..., None]) + foreground * mask[..., None]

    grain = rng.normal(0.0, signature.noise_amplitude, size=(size, size, 1))
    image = np.clip(image + grain, 0.0, 1.0)
    return image.astype(np.float32)


def measure_signature(image: np.ndarray) -> tuple[float, float]:
    """
    Chroma-weighted circular mean hue (degrees) and mean luma of an image.
    """
    rgb = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    hsv = rgb_to_hsv(rgb)
    chroma = rgb.max(axis=-1) - rgb.min(axis=-1)
    angle = hsv[..., 0] * 2 * math.pi
    x = float((np.cos(angle) * chroma).sum())
    y = float((np.sin(angle) * chroma).sum())
    hue = math.degrees(math.atan2(y, x)) % 360.0
    return hue, float(luminance(rgb).mean())


def hue_distance(a: float, b: float) -> float:
    return _hue_distance(a, b)


# --- captions ----------------------------------------------------------------


def make_affective_prompt(world: WorldSpec, concept: str, emotion: EmotionCategory, rng_seed: int) -> str:
    """Instantiate a template with the concept once and distinct cue words of one emotion."""
    world.concept_index(concept)
    rng = numpy_rng(rng_seed, "prompt")
    template = world.templates[int(rng.integers(len(world.templates)))]
    words = template.split()
    cues = list(rng.permutation(world.cue_words(emotion)))

    out = []
    for word in words:
        if word == CONCEPT_SLOT:
            out.append(concept)
        elif word == CUE_SLOT:
            out.append(str(cues.pop(0)))
        else:
            out.append(word)
    return " ".join(out)


def agnostic_caption(world: WorldSpec, concept: str, rng: np.random.Generator) -> str:
    """A template caption whose cue words ignore emotion (base-model corpus)."""
    world.concept_index(concept)
    pool = [w for words in world.lexicon.values() for w in words]
    template = world.templates[int(rng.integers(len(world.templates)))]
    out = []
    for word in template.split():
        if word == CONCEPT_SLOT:
            out.append(concept)
        elif word == CUE_SLOT:
            out.append(pool[int(rng.integers(len(pool)))])
        else:
            out.append(word)
    return " ".join(out)


# --- datasets ----------------------------------------------------------------


def generate_dataset(world: WorldSpec, n: int, split: str, rng_seed: int) -> list[Quadruplet]:
    """
    Sample n quadruplets with uniform emotion × concept cells.

    Content is the bare concept with probability 0.5, otherwise the neutral caption.
    """
    if n < 1:
        raise ValueError(f"Dataset size must be at least 1, got {n}")
    if split not in ("train", "test"):
        raise ValueError(f"Unknown split '{split}', expected 'train' or 'test'")

    rng = numpy_rng(world.seed, rng_seed, "dataset", split)
    records = []
    for _ in range(n):
        emotion = EmotionCategory(int(rng.integers(NUM_EMOTIONS)))
        concept = world.concepts[int(rng.integers(len(world.concepts)))]
        content = concept if rng.random() < 0.5 else world.neutral_caption(concept)
        item_seed = int(rng.integers(2**31 - 1))
        records.append(
            Quadruplet(
                emotion=emotion,
                content=content,
                affective_prompt=make_affective_prompt(world, concept, emotion, item_seed),
                image=render_image(world, concept, emotion, item_seed),
                concept=concept,
            )
        )
    logger.info(f"Generated {n} {split} quadruplets (seed={rng_seed})")
    return records


def to_png(image: np.ndarray) -> Image.Image:
    array = np.clip(np.asarray(image) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    return Image.fromarray(array, mode="RGB")


def read_png(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0


def save_dataset(world: WorldSpec, quadruplets: list[Quadruplet], directory: str | Path) -> Path:
    """Write meta.json, data.jsonl and images/*.png."""
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    (directory / "meta.json").write_text(world.model_dump_json(indent=2), encoding="utf-8")

    saver = JsonlSaver(directory / "data.jsonl", mode="w")
    try:
        records = []
        for i, quad in enumerate(quadruplets):
            relative = f"images/{i:06d}.png"
            to_png(quad.image).save(directory / relative)
            records.append(
                {
                    "emotion": quad.emotion.label,
                    "content": quad.content,
                    "affective_prompt": quad.affective_prompt,
                    "image": relative,
                    "concept": quad.concept,
                }
            )
        saver.add_records(records)
    finally:
        saver.close()
    logger.info(f"Saved {len(quadruplets)} quadruplets to {directory}")
    return directory


def load_world(directory: str | Path) -> WorldSpec:
    path = Path(directory) / "meta.json"
    return WorldSpec.model_validate_json(path.read_text(encoding="utf-8"))


def import_quadruplets(path: str | Path, world: WorldSpec) -> list[Quadruplet]:
    """
    Read quadruplets from a JSONL file (image paths relative to the file).

    Raises:
        ValueError: On unknown emotions, size mismatch, unresolvable concepts
            or words outside the world's vocabulary
    """
    path = Path(path)
    vocabulary = set(world.vocabulary_words())
    quadruplets = []
    with open(path, "r", encoding="utf-8") as file:
        for line_no, line in enumerate(file, start=1):
            if not line.strip():
                continue
            record = json.loads(line)
            where = f"{path}:{line_no}"

            emotion = EmotionCategory.from_name(record["emotion"])
            content = record.get("content", "")
            prompt = record["affective_prompt"]
            for word in content.split() + prompt.split():
                if word not in vocabulary:
                    raise ValueError(f"{where}: word '{word}' is not in the world vocabulary")

            concept = record.get("concept") or world.find_concept(content) or world.find_concept(prompt)
            if concept is None:
                raise ValueError(f"{where}: cannot resolve a single concept from '{content}'")
            world.concept_index(concept)

            image = read_png(path.parent / record["image"])
            if image.shape != (world.image_size, world.image_size, 3):
                raise ValueError(
                    f"{where}: image shape {image.shape} does not match "
                    f"image_size={world.image_size}"
                )
            quadruplets.append(
                Quadruplet(
                    emotion=emotion,
                    content=content,
                    affective_prompt=prompt,
                    image=image,
                    concept=concept,
                )
            )
    logger.info(f"Imported {len(quadruplets)} quadruplets from {path}")
    return quadruplets


def load_dataset(directory: str | Path) -> tuple[WorldSpec, list[Quadruplet]]:
    directory = Path(directory)
    world = load_world(directory)
    return world, import_quadruplets(directory / "data.jsonl", world)
