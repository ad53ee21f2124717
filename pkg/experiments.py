"""
Experiments built on the pipeline: the four-way token ablation, token-only
visualization grids and mixed-emotion generation.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from config import RunConfig
from metrics import CSV_COLUMNS, MetricReport, load_probes, predict_logits, top_k_emotions
from processor import InferenceItem, item_name
from report import render_markdown
from rng import SAMPLING, mix
from runner import SHARED_STAGES, TRAINING_STAGES, PipelineRunner
from savers import CsvSaver, JsonlSaver
from synthworld import NUM_EMOTIONS, EmotionCategory, read_png, to_png
from tokens import weights_from_names

logger = logging.getLogger(__name__)

ABLATION_FLAGS = {
    "none": (False, False),
    "vt": (True, False),
    "vv": (False, True),
    "both": (True, True),
}

MIX_PRESETS = {
    "amusement+awe": {"amusement": 0.5, "awe": 0.5},
    "sadness+disgust": {"sadness": 0.5, "disgust": 0.5},
    "amusement+fear": {"amusement": 0.5, "fear": 0.5},
}


# --- ablation ----------------------------------------------------------------


def run_ablation(config: RunConfig, alpha: float | None = None) -> list[MetricReport]:
    """
    Run none / vt / vv / both on the same data, text model and probes.

    Each configuration trains its own diffusion stage under run_dir/ablation/<label>.
    """
    base = config.with_overrides(alpha=alpha)
    shared = PipelineRunner(base)
    shared.run(only=SHARED_STAGES)

    folder = "ablation" if alpha is None else f"ablation-alpha-{alpha:g}"
    reports = []
    for label, (use_vt, use_vv) in ABLATION_FLAGS.items():
        variant = base.with_overrides(use_vt=use_vt, use_vv=use_vv)
        runner = PipelineRunner(variant, run_dir=base.run_dir / folder / label, shared_dir=base.run_dir)
        runner.run(upstream_ran=shared.executed)
        reports.append(runner.report())

    csv_path = base.run_dir / "reports" / f"{folder}.csv"
    saver = CsvSaver(csv_path, CSV_COLUMNS, mode="w")
    saver.add_records([report.to_row() for report in reports])
    saver.close()
    (base.run_dir / "reports" / f"{folder}.md").write_text(render_markdown(reports), encoding="utf-8")

    logger.info("Ablation results:")
    for report in reports:
        logger.info(f"  {report.config_label:>5}: Emo-A={report.emo_a:.4f} EC-A={report.ec_a:.4f}")
    return reports


# --- token-only visualization -----------------------------------------------


@dataclass
class VisualizationResult:
    grid_path: Path
    majorities: dict[str, str]

    @property
    def matching_rows(self) -> int:
        return sum(1 for emotion, majority in self.majorities.items() if emotion == majority)


def visualization_items(config: RunConfig, seeds: list[int] | None = None) -> list[InferenceItem]:
    """Empty content for every emotion; column s uses the same seed in every row."""
    seeds = seeds if seeds is not None else [mix(config.seed, SAMPLING, "visualize", s) for s in range(config.visualization_seeds)]
    return [
        InferenceItem(
            name=item_name("", f"{emotion.label}-{column:02d}"),
            content="",
            concept=None,
            emotion=emotion,
            seed=seed,
        )
        for emotion in EmotionCategory
        for column, seed in enumerate(seeds)
    ]


def majority_label(predictions: np.ndarray) -> str:
    """Most frequent class; ties go to the lowest id."""
    counts = np.bincount(predictions, minlength=NUM_EMOTIONS)
    return EmotionCategory(int(np.argmax(counts))).label


def save_grid(images: list[np.ndarray], rows: int, columns: int, path: Path) -> Path:
    size = images[0].shape[0]
    grid = Image.new("RGB", (columns * size, rows * size))
    for i, image in enumerate(images):
        grid.paste(to_png(image), ((i % columns) * size, (i // columns) * size))
    grid.save(path)
    return path


def run_visualization(config: RunConfig, seeds: list[int] | None = None) -> VisualizationResult:
    """8 × S grid of token-only samples, rows are emotions, with a probe majority per row."""
    runner = PipelineRunner(config)
    runner.run(only=TRAINING_STAGES)

    out_dir = config.run_dir / "visualization"
    items = visualization_items(config, seeds)
    processor = runner.processor(out_dir)
    try:
        processor.process(items)
    finally:
        processor.saver.close()

    images = [read_png(processor.saver.image_path(item.name)) for item in items]
    columns = len(items) // NUM_EMOTIONS
    grid_path = save_grid(images, NUM_EMOTIONS, columns, out_dir / "grid.png")

    probes = load_probes(runner.layout.probes_checkpoint)
    predictions = np.argmax(predict_logits(probes.emotion, images), axis=1)
    majorities = {}
    records = []
    for row, emotion in enumerate(EmotionCategory):
        row_predictions = predictions[row * columns : (row + 1) * columns]
        majorities[emotion.label] = majority_label(row_predictions)
        records.append(
            {
                "emotion": emotion.label,
                "majority": majorities[emotion.label],
                "predictions": [EmotionCategory(int(p)).label for p in row_predictions],
            }
        )
    saver = JsonlSaver(out_dir / "majority.jsonl", mode="w")
    saver.add_records(records)
    saver.close()

    result = VisualizationResult(grid_path, majorities)
    logger.info(f"Visualization grid {grid_path}: {result.matching_rows}/{NUM_EMOTIONS} rows match their emotion")
    return result


# --- mixed emotions ----------------------------------------------------------


def parse_weight_spec(text: str) -> dict[str, float]:
    """'amusement=0.5,awe=0.5' -> {'amusement': 0.5, 'awe': 0.5}."""
    named = {}
    for part in text.split(","):
        if not part.strip():
            continue
        name, sep, value = part.partition("=")
        if not sep:
            raise ValueError(f"Expected name=weight, got '{part}'")
        named[name.strip()] = float(value)
    return named


@dataclass
class MixResult:
    name: str
    weights: list[float]
    records: list[dict] = field(default_factory=list)

    @property
    def hit_rate(self) -> float:
        """Fraction of samples whose top-2 probe classes are exactly the mixed emotions."""
        return float(np.mean([r["hit"] for r in self.records])) if self.records else 0.0


def mix_items(config: RunConfig, name: str, weights: list[float], content: str = "") -> list[InferenceItem]:
    """Sample i uses the same seed for every weight set."""
    return [
        InferenceItem(
            name=item_name(name, f"{i:03d}"),
            content=content,
            concept=None,
            emotion=None,
            seed=mix(config.seed, SAMPLING, "mix", i),
            weights=weights,
        )
        for i in range(config.mix_samples)
    ]


def run_multi_emotion(config: RunConfig, weight_sets: dict[str, dict[str, float]] | None = None, content: str = "") -> list[MixResult]:
    """
    Generate with mixed textual and visual tokens and record the emotion
    probe's top-2 classes per sample.

    Raises:
        SimplexError: If any weight set is not on the simplex
    """
    weight_sets = weight_sets or MIX_PRESETS
    validated = {name: weights_from_names(named).tolist() for name, named in weight_sets.items()}

    runner = PipelineRunner(config)
    runner.run(only=TRAINING_STAGES)
    probes = load_probes(runner.layout.probes_checkpoint)
    out_dir = config.run_dir / "mix"
    world, _, _ = runner.data()
    concept = world.find_concept(content) if content else None

    results = []
    processor = runner.processor(out_dir)
    try:
        for name, weights in validated.items():
            items = mix_items(config, name, weights, content)
            for item in items:
                item.concept = concept
            processor.process(items)
            images = [read_png(processor.saver.image_path(item.name)) for item in items]
            expected = {EmotionCategory(i).label for i in np.argsort(-np.asarray(weights), kind="stable")[:2]}

            result = MixResult(name, weights)
            for item, top2 in zip(items, top_k_emotions(probes.emotion, images, k=2)):
                result.records.append(
                    {"set": name, "sample": item.name, "weights": weights, "top2": top2, "hit": set(top2) == expected}
                )
            logger.info(f"Mix {name}: top-2 hit rate {result.hit_rate:.3f} over {len(items)} samples")
            results.append(result)
    finally:
        processor.saver.close()

    saver = JsonlSaver(config.run_dir / "reports" / "mix.jsonl", mode="w")
    saver.add_records([record for result in results for record in result.records])
    saver.close()
    return results
