import logging
import shutil
from dataclasses import asdict, dataclass
from pathlib import Path

from config import RunConfig
from diffusion import (
    ConditionedImage,
    VisualGenerator,
    build_visual_generator,
    load_visual_checkpoint,
    save_visual_checkpoint,
    train_diffusion,
)
from metrics import CSV_COLUMNS, MetricReport, ProbeSet, evaluate_images, load_probes, read_metric_reports, save_probes, train_probes
from processor import InferenceItem, ProcessResult, SampleProcessor, make_item
from rng import DATA, DIFF_TRAIN, PROBES, TEXT_TRAIN, mix, seed_torch
from savers import CsvSaver, JsonlSaver, SampleSaver
from state import StateManager
from synthworld import (
    EmotionCategory,
    Quadruplet,
    WorldSpec,
    generate_dataset,
    load_dataset,
    make_world,
    read_png,
    save_dataset,
)
from textmodel import (
    TextModel,
    build_text_model,
    load_text_checkpoint,
    pretrain_base,
    save_text_checkpoint,
    train_text,
)
from tokens import TextualEmotionTokens

logger = logging.getLogger(__name__)

STAGES = [
    "gen-data",
    "pretrain-text",
    "train-text",
    "train-diffusion",
    "generate",
    "train-probes",
    "evaluate",
]
DEPENDS_ON = {
    "gen-data": [],
    "pretrain-text": ["gen-data"],
    "train-text": ["pretrain-text"],
    "train-diffusion": ["gen-data"],
    "generate": ["train-text", "train-diffusion"],
    "train-probes": ["gen-data"],
    "evaluate": ["generate", "train-probes"],
}
# Produced once and reused by every ablation configuration
SHARED_STAGES = ("gen-data", "pretrain-text", "train-text", "train-probes")
TRAINING_STAGES = ("gen-data", "pretrain-text", "train-text", "train-diffusion", "train-probes")
# Config fields whose values each stage's outputs depend on
STAGE_FIELDS = {
    "gen-data": ("seed", "world_seed", "train_size", "test_size", "image_size"),
    "pretrain-text": (
        "seed", "text_dim", "text_layers", "text_heads", "pretrain_steps", "pretrain_lr", "text_batch", "token_only_prob",
    ),
    "train-text": ("seed", "lora_rank", "lora_scale", "text_steps", "text_lr", "text_batch", "token_only_prob"),
    "train-diffusion": (
        "seed", "visual_dim", "n_max", "alpha", "timesteps", "beta_start", "beta_end", "unet_channels",
        "diffusion_train_steps", "diffusion_lr", "diffusion_batch", "use_vt", "use_vv",
    ),
    "generate": ("seed", "sample_steps", "inference_captions", "inference_styles", "use_vt", "use_vv"),
    "train-probes": ("seed", "probe_steps", "probe_lr", "probe_batch", "probe_gate"),
    "evaluate": ("seed", "inference_captions", "inference_styles", "use_vt", "use_vv"),
}


class StageError(Exception):
    """Raised when a pipeline stage fails; earlier outputs stay on disk."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"Stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class RunLayout:
    """Where every artifact of a run lives."""

    run_dir: Path
    shared_dir: Path | None = None

    @property
    def _shared(self) -> Path:
        return self.shared_dir or self.run_dir

    @property
    def train_dir(self) -> Path:
        return self._shared / "data" / "train"

    @property
    def test_dir(self) -> Path:
        return self._shared / "data" / "test"

    @property
    def text_base_checkpoint(self) -> Path:
        return self._shared / "checkpoints" / "text_base.npz"

    @property
    def text_checkpoint(self) -> Path:
        return self._shared / "checkpoints" / "text.npz"

    @property
    def probes_checkpoint(self) -> Path:
        return self._shared / "checkpoints" / "probes.npz"

    @property
    def visual_checkpoint(self) -> Path:
        return self.run_dir / "checkpoints" / "visual.npz"

    @property
    def samples_dir(self) -> Path:
        return self.run_dir / "samples"

    @property
    def reports_dir(self) -> Path:
        return self.run_dir / "reports"

    @property
    def metrics_csv(self) -> Path:
        return self.reports_dir / "metrics.csv"

    def outputs(self, stage: str) -> list[Path]:
        return {
            "gen-data": [self.train_dir / "data.jsonl", self.test_dir / "data.jsonl"],
            "pretrain-text": [self.text_base_checkpoint],
            "train-text": [self.text_checkpoint],
            "train-diffusion": [self.visual_checkpoint],
            "generate": [self.samples_dir],
            "train-probes": [self.probes_checkpoint],
            "evaluate": [self.metrics_csv],
        }[stage]


@dataclass
class InferenceSet:
    """(content, emotion) requests: every concept, a few caption-style and styled contents, times 8 emotions."""

    items: list[InferenceItem]

    def __post_init__(self):
        if not self.items:
            raise ValueError("InferenceSet must not be empty")

    @classmethod
    def default(cls, world: WorldSpec, config: RunConfig) -> "InferenceSet":
        contents = list(world.concepts)
        contents += [world.neutral_caption(c) for c in world.concepts[: config.inference_captions]]
        if world.styles:
            contents += [
                world.styled_content(world.styles[i % len(world.styles)], c)
                for i, c in enumerate(world.concepts[: config.inference_styles])
            ]
        items = [make_item(config.seed, world, content, emotion) for content in contents for emotion in EmotionCategory]
        return cls(items)

    def __len__(self) -> int:
        return len(self.items)


class PipelineRunner:
    """Runs the stages in order, skipping those already completed on disk."""

    def __init__(self, config: RunConfig, run_dir: str | Path | None = None, shared_dir: str | Path | None = None):
        self.config = config
        self.layout = RunLayout(
            Path(run_dir) if run_dir is not None else config.run_dir,
            Path(shared_dir) if shared_dir is not None else None,
        )
        self.state_manager = StateManager(self.layout.run_dir)
        self.stages = [s for s in STAGES if shared_dir is None or s not in SHARED_STAGES]
        self.executed: list[str] = []
        self._world: WorldSpec | None = None
        self._train: list[Quadruplet] | None = None
        self._test: list[Quadruplet] | None = None

    # --- orchestration -------------------------------------------------------

    def run(self, until: str | None = None, only: list[str] | tuple[str, ...] | None = None, upstream_ran: list[str] | tuple[str, ...] = ()) -> Path:
        """
        Run every stage up to and including `until` (default: all).

        Args:
            only: restrict the run to these stages
            upstream_ran: stages that re-ran elsewhere (shared artifacts), forcing dependents to re-run
        """
        if until is not None and until not in STAGES:
            raise ValueError(f"Unknown stage '{until}', expected one of {STAGES}")

        logger.info("=" * 60)
        logger.info(f"Pipeline starting: {self.layout.run_dir} (config={self.config.ablation_label})")
        logger.info("=" * 60)

        state = self.state_manager.get_state()
        state.config_label = self.config.ablation_label
        ran: set[str] = set(upstream_ran)

        for stage in self.stages:
            if until is not None and STAGES.index(stage) > STAGES.index(until):
                break
            if only is not None and stage not in only:
                continue
            fingerprint = self.config.fingerprint(STAGE_FIELDS[stage])
            recorded = state.fingerprints.get(stage)
            changed = recorded is not None and recorded != fingerprint
            stale = [d for d in DEPENDS_ON[stage] if d in ran]
            missing = [p for p in self.layout.outputs(stage) if not p.exists()]
            if state.is_completed(stage) and not stale and not missing and not changed:
                logger.info(f"Stage '{stage}' already completed, skipping")
                continue
            if missing and state.is_completed(stage):
                logger.info(f"Stage '{stage}' output missing ({missing[0]}), re-running")
            if changed and state.is_completed(stage):
                logger.info(f"Stage '{stage}' was run with a different config, re-running")
            self.state_manager.forget(state, [stage])
            if stale or changed:
                self.clear_outputs(stage)
            self.run_stage(stage)
            self.state_manager.mark_completed(state, stage, fingerprint)
            ran.add(stage)

        logger.info("=" * 60)
        logger.info(f"Pipeline finished, stages run: {self.executed or 'none'}")
        logger.info("=" * 60)
        return self.layout.run_dir

    def clear_outputs(self, stage: str) -> None:
        """Remove directory outputs so items from an older upstream are not reused."""
        for path in self.layout.outputs(stage):
            if path.is_dir():
                logger.info(f"Removing stale outputs in {path}")
                shutil.rmtree(path)

    def run_stage(self, stage: str) -> None:
        handler = {
            "gen-data": self.gen_data,
            "pretrain-text": self.pretrain_text,
            "train-text": self.train_text,
            "train-diffusion": self.train_diffusion,
            "generate": self.generate,
            "train-probes": self.train_probes,
            "evaluate": self.evaluate,
        }[stage]
        logger.info(f"--- Stage {stage} ---")
        try:
            handler()
        except Exception as e:
            logger.error(f"Stage '{stage}' failed: {e}")
            raise StageError(stage, e) from e
        self.executed.append(stage)

    # --- data ----------------------------------------------------------------

    def data(self) -> tuple[WorldSpec, list[Quadruplet], list[Quadruplet]]:
        """Datasets as read back from disk, so every stage sees PNG-quantized images."""
        if self._world is None:
            self._world, self._train = load_dataset(self.layout.train_dir)
            _, self._test = load_dataset(self.layout.test_dir)
        return self._world, self._train, self._test

    def gen_data(self) -> None:
        world = make_world(self.config.world_seed, {"image_size": self.config.image_size})
        seed = mix(self.config.seed, DATA)
        for split, size, directory in (
            ("train", self.config.train_size, self.layout.train_dir),
            ("test", self.config.test_size, self.layout.test_dir),
        ):
            if directory.exists():
                shutil.rmtree(directory)
            save_dataset(world, generate_dataset(world, size, split, seed), directory)
        self._world = None

    # --- training ------------------------------------------------------------

    def pretrain_text(self) -> None:
        world, _, _ = self.data()
        seed_torch(self.config.seed, TEXT_TRAIN, "init")
        model = build_text_model(world, self.config)
        tokens = TextualEmotionTokens(self.config.text_dim)
        log = pretrain_base(model, world, self.config, mix(self.config.seed, TEXT_TRAIN))
        logger.info(f"Base pre-training loss {log.initial_loss:.4f} -> {log.final_loss:.4f}")
        save_text_checkpoint(self.layout.text_base_checkpoint, model, tokens, self.config)

    def train_text(self) -> None:
        _, train, _ = self.data()
        model, tokens = load_text_checkpoint(self.layout.text_base_checkpoint)
        log = train_text(model, tokens, train, self.config, mix(self.config.seed, TEXT_TRAIN))
        logger.info(f"Emotion token training loss {log.initial_loss:.4f} -> {log.final_loss:.4f}")
        save_text_checkpoint(self.layout.text_checkpoint, model, tokens, self.config)

    def diffusion_dataset(self) -> list[ConditionedImage]:
        """Affective prompts when textual tokens are on, otherwise the neutral caption."""
        world, train, _ = self.data()
        return [
            ConditionedImage(
                image=q.image,
                caption=q.affective_prompt if self.config.use_vt else world.neutral_caption(q.concept),
                emotion=int(q.emotion),
            )
            for q in train
        ]

    def train_diffusion(self) -> None:
        world, _, _ = self.data()
        seed_torch(self.config.seed, DIFF_TRAIN, "init")
        visual = build_visual_generator(world, self.config)
        alpha = self.config.alpha if self.config.use_vv else 0.0
        log = train_diffusion(visual, self.diffusion_dataset(), self.config, mix(self.config.seed, DIFF_TRAIN), alpha=alpha)
        logger.info(f"Diffusion loss {log.first_window_mean:.4f} -> {log.final_smoothed:.4f}")
        save_visual_checkpoint(self.layout.visual_checkpoint, visual, self.config)

    def train_probes(self) -> None:
        world, train, test = self.data()
        probes = train_probes(world, train, test, self.config, mix(self.config.seed, PROBES))
        save_probes(self.layout.probes_checkpoint, probes)

    # --- generation and evaluation ------------------------------------------

    def load_models(self) -> tuple[TextModel, TextualEmotionTokens, VisualGenerator]:
        model, tokens = load_text_checkpoint(self.layout.text_checkpoint)
        return model, tokens, load_visual_checkpoint(self.layout.visual_checkpoint)

    def processor(self, samples_dir: Path, alpha: float | None = None) -> SampleProcessor:
        world, _, _ = self.data()
        model, tokens, visual = self.load_models()
        return SampleProcessor(world, self.config, model, tokens, visual, SampleSaver(samples_dir), alpha=alpha)

    def inference_set(self) -> InferenceSet:
        world, _, _ = self.data()
        return InferenceSet.default(world, self.config)

    def generate_into(self, samples_dir: Path, alpha: float | None = None) -> ProcessResult:
        processor = self.processor(samples_dir, alpha=alpha)
        try:
            return processor.process(self.inference_set().items)
        finally:
            processor.saver.close()

    def generate(self) -> None:
        self.generate_into(self.layout.samples_dir)

    def evaluate_dir(self, samples_dir: Path, metrics_csv: Path) -> MetricReport:
        world, _, _ = self.data()
        items = self.inference_set().items
        saver = SampleSaver(samples_dir)
        missing = [item.name for item in items if not saver.exists(item.name)]
        if missing:
            raise FileNotFoundError(f"{len(missing)} samples missing in {samples_dir}, e.g. {missing[0]}")

        probes: ProbeSet = load_probes(self.layout.probes_checkpoint)
        report = evaluate_images(
            probes,
            [read_png(saver.image_path(item.name)) for item in items],
            [item.emotion for item in items],
            [world.concept_index(item.concept) for item in items],
            self.config.ablation_label,
            self.config.seed,
        )
        csv_saver = CsvSaver(metrics_csv, CSV_COLUMNS, mode="w")
        csv_saver.add_records([report.to_row()])
        csv_saver.close()
        json_saver = JsonlSaver(metrics_csv.with_suffix(".jsonl"), mode="w")
        json_saver.add_records([asdict(report)])
        json_saver.close()
        return report

    def evaluate(self) -> None:
        self.evaluate_dir(self.layout.samples_dir, self.layout.metrics_csv)

    def sweep_alpha(self, alpha: float) -> MetricReport:
        """Generate and evaluate at another injection strength without retraining."""
        self.run(only=TRAINING_STAGES)
        tag = f"alpha-{alpha:g}"
        result = self.generate_into(self.layout.samples_dir.parent / f"samples-{tag}", alpha=alpha)
        logger.info(f"Alpha {alpha:g}: {result.saved_count} new samples")
        return self.evaluate_dir(
            self.layout.samples_dir.parent / f"samples-{tag}",
            self.layout.reports_dir / f"metrics-{tag}.csv",
        )

    def report(self) -> MetricReport:
        """Metric report of a finished run, as written to disk."""
        return read_metric_reports(self.layout.metrics_csv)[0]


def run_pipeline(config: RunConfig, run_dir: str | Path | None = None) -> Path:
    return PipelineRunner(config, run_dir=run_dir).run()
