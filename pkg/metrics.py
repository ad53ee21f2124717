"""
Evaluation of generated images with probe classifiers trained on the world.

Accuracies use argmax with ties broken by the lowest class id. Every
reduction runs over images in input order so sums are reproducible.
"""

import csv
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

import checkpoint
from config import RunConfig
from rng import PROBES, seed_torch, torch_generator
from synthworld import NUM_EMOTIONS, EmotionCategory, Quadruplet, WorldSpec

logger = logging.getLogger(__name__)

EVAL_BATCH = 128
CSV_COLUMNS = ["config_label", "n", "emo_a", "clip_a", "ec_a", "diversity", "sem_c", "polarity_a", "seed"]
GATE_MARGIN = 0.01


class ProbeGateError(Exception):
    """Raised when a probe misses the held-out accuracy gate."""

    def __init__(self, probe: str, accuracy: float, gate: float):
        super().__init__(f"{probe} probe reached {accuracy:.4f} held-out accuracy, gate is {gate:.4f}")
        self.probe = probe
        self.accuracy = accuracy
        self.gate = gate


class ProbeClassifier(nn.Module):
    """Small CNN; the penultimate layer doubles as the perceptual feature space."""

    def __init__(self, num_classes: int, width: int = 16, feature_dim: int = 64):
        super().__init__()
        self.num_classes = num_classes
        self.body = nn.Sequential(
            nn.Conv2d(3, width, kernel_size=3, padding=1),
            nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(width, 2 * width, kernel_size=3, padding=1),
            nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(2 * width, 2 * width, kernel_size=3, padding=1),
            nn.ReLU(),
            nn.AdaptiveAvgPool2d(4),
            nn.Flatten(),
            nn.Linear(2 * width * 16, feature_dim),
            nn.ReLU(),
        )
        self.head = nn.Linear(feature_dim, num_classes)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.body((x - 0.5) * 2.0)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))


@dataclass
class ProbeSet:
    emotion: ProbeClassifier
    content: ProbeClassifier
    emotion_accuracy: float
    content_accuracy: float


def _to_tensor(images) -> torch.Tensor:
    array = np.stack([np.asarray(img, dtype=np.float32) for img in images])
    return torch.from_numpy(array).permute(0, 3, 1, 2).contiguous()


@torch.no_grad()
def _batched(fn, images) -> np.ndarray:
    outputs = []
    for start in range(0, len(images), EVAL_BATCH):
        outputs.append(fn(_to_tensor(images[start : start + EVAL_BATCH])).double().numpy())
    return np.concatenate(outputs, axis=0)


def predict_logits(probe: ProbeClassifier, images) -> np.ndarray:
    probe.eval()
    return _batched(probe, images)


def probe_features(probe: ProbeClassifier, images) -> np.ndarray:
    probe.eval()
    return _batched(probe.features, images)


def _fit_probe(name: str, probe: ProbeClassifier, images: torch.Tensor, labels: torch.Tensor, config: RunConfig, generator: torch.Generator) -> None:
    optimizer = torch.optim.Adam(probe.parameters(), lr=config.probe_lr)
    probe.train()
    for step in range(1, config.probe_steps + 1):
        idx = torch.randint(len(labels), (config.probe_batch,), generator=generator)
        loss = F.cross_entropy(probe(images[idx]), labels[idx])
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        if step % config.log_every == 0 or step == config.probe_steps:
            logger.info(f"[probe:{name}] step {step}/{config.probe_steps} loss={loss.item():.4f}")
    probe.eval()


def check_gate(probe: str, accuracy: float, gate: float) -> None:
    """Raise below the gate; warn when the accuracy clears it by less than GATE_MARGIN."""
    if accuracy < gate:
        logger.error(f"{probe.capitalize()} probe failed the gate ({accuracy:.4f} < {gate})")
        raise ProbeGateError(probe, accuracy, gate)
    if gate > 0 and accuracy < gate + GATE_MARGIN:
        logger.warning(f"{probe.capitalize()} probe is within {GATE_MARGIN} of the gate ({accuracy:.4f} vs {gate})")


def train_probes(world: WorldSpec, train: list[Quadruplet], test: list[Quadruplet], config: RunConfig, rng_seed: int) -> ProbeSet:
    """
    Train the emotion and content probes and enforce the held-out gate.

    Raises:
        ProbeGateError: If either probe scores below config.probe_gate on test
    """
    if not train or not test:
        raise ValueError("train_probes needs nonempty train and test sets")

    images = _to_tensor([q.image for q in train])
    emotion_labels = torch.tensor([int(q.emotion) for q in train], dtype=torch.long)
    concept_labels = torch.tensor([world.concept_index(q.concept) for q in train], dtype=torch.long)

    seed_torch(rng_seed, PROBES, "init")
    emotion_probe = ProbeClassifier(NUM_EMOTIONS)
    content_probe = ProbeClassifier(len(world.concepts))

    _fit_probe("emotion", emotion_probe, images, emotion_labels, config, torch_generator(rng_seed, PROBES, "emotion"))
    _fit_probe("content", content_probe, images, concept_labels, config, torch_generator(rng_seed, PROBES, "content"))

    test_images = [q.image for q in test]
    emotion_acc = emo_accuracy(emotion_probe, test_images, [q.emotion for q in test])
    content_acc = clip_accuracy(content_probe, test_images, [world.concept_index(q.concept) for q in test])
    logger.info(f"Probe held-out accuracy: emotion={emotion_acc:.4f}, content={content_acc:.4f}")

    check_gate("emotion", emotion_acc, config.probe_gate)
    check_gate("content", content_acc, config.probe_gate)

    return ProbeSet(emotion_probe, content_probe, emotion_acc, content_acc)


# --- accuracies --------------------------------------------------------------


def _check_batch(images, targets=None) -> None:
    if len(images) == 0:
        raise ValueError("Metric needs a nonempty batch")
    if targets is not None and len(targets) != len(images):
        raise ValueError(f"{len(images)} images but {len(targets)} targets")


def accuracy_from_logits(logits: np.ndarray, targets) -> float:
    """np.argmax returns the first maximum, so ties go to the lowest id."""
    predictions = np.argmax(logits, axis=1)
    return float(np.mean(predictions == np.asarray(targets, dtype=np.int64)))


def joint_accuracy_from_logits(emotion_logits: np.ndarray, content_logits: np.ndarray, emotions, concepts) -> float:
    emotion_ok = np.argmax(emotion_logits, axis=1) == np.asarray(emotions, dtype=np.int64)
    content_ok = np.argmax(content_logits, axis=1) == np.asarray(concepts, dtype=np.int64)
    return float(np.mean(emotion_ok & content_ok))


def polarity_accuracy_from_logits(emotion_logits: np.ndarray, emotions) -> float:
    predicted = np.argmax(emotion_logits, axis=1) < NUM_EMOTIONS // 2
    target = np.asarray(emotions, dtype=np.int64) < NUM_EMOTIONS // 2
    return float(np.mean(predicted == target))


def emo_accuracy(probe: ProbeClassifier, images, targets) -> float:
    """Emo-A: fraction of images whose predicted emotion is the target."""
    _check_batch(images, targets)
    return accuracy_from_logits(predict_logits(probe, images), [int(t) for t in targets])


def clip_accuracy(probe: ProbeClassifier, images, targets) -> float:
    """CLIP-A analogue: fraction of images whose predicted concept is the target index."""
    _check_batch(images, targets)
    return accuracy_from_logits(predict_logits(probe, images), [int(t) for t in targets])


def joint_accuracy(emotion_probe: ProbeClassifier, content_probe: ProbeClassifier, images, emotions, concepts) -> float:
    """EC-A: both predictions right at once."""
    _check_batch(images, emotions)
    _check_batch(images, concepts)
    return joint_accuracy_from_logits(
        predict_logits(emotion_probe, images),
        predict_logits(content_probe, images),
        [int(e) for e in emotions],
        [int(c) for c in concepts],
    )


def polarity_accuracy(probe: ProbeClassifier, images, targets) -> float:
    """Fraction of images whose predicted emotion shares the target's polarity."""
    _check_batch(images, targets)
    return polarity_accuracy_from_logits(predict_logits(probe, images), [int(t) for t in targets])


# --- diversity and clarity ---------------------------------------------------


def feature_diversity(features: np.ndarray) -> float:
    """Mean cosine distance over unordered pairs of feature vectors, in [0, 2]."""
    features = np.asarray(features, dtype=np.float64)
    n = features.shape[0]
    if n < 2:
        raise ValueError(f"Diversity needs at least 2 images, got {n}")
    norms = np.linalg.norm(features, axis=1, keepdims=True)
    unit = features / np.maximum(norms, 1e-12)
    distances = 1.0 - unit @ unit.T
    # Identical rows, including two all-zero rows, are at distance 0
    identical = (features[:, None, :] == features[None, :, :]).all(axis=-1)
    distances[identical] = 0.0
    upper = distances[np.triu_indices(n, k=1)]
    return float(np.clip(upper.mean(), 0.0, 2.0))


def perceptual_diversity(probe: ProbeClassifier, images) -> float:
    """LPIPS analogue over emotion-probe features."""
    if len(images) < 2:
        raise ValueError(f"Diversity needs at least 2 images, got {len(images)}")
    return feature_diversity(probe_features(probe, images))


def mean_max_probability(logits: np.ndarray) -> float:
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=1, keepdims=True)
    probs = np.exp(shifted)
    probs /= probs.sum(axis=1, keepdims=True)
    return float(probs.max(axis=1).mean())


def semantic_clarity(content_probe: ProbeClassifier, images) -> float:
    """Sem-C: mean max-softmax probability of the content probe."""
    _check_batch(images)
    return mean_max_probability(predict_logits(content_probe, images))


def top_k_emotions(probe: ProbeClassifier, images, k: int = 2) -> list[list[str]]:
    logits = predict_logits(probe, images)
    order = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    return [[EmotionCategory(int(i)).label for i in row] for row in order]


# --- report ------------------------------------------------------------------


@dataclass
class MetricReport:
    config_label: str
    n: int
    emo_a: float
    clip_a: float
    ec_a: float
    diversity: float
    sem_c: float
    polarity_a: float
    seed: int

    def __post_init__(self):
        for name in ("emo_a", "clip_a", "ec_a", "polarity_a"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {value}")
        if self.ec_a > min(self.emo_a, self.clip_a) + 1e-12:
            raise ValueError(
                f"ec_a ({self.ec_a}) exceeds min(emo_a, clip_a) = {min(self.emo_a, self.clip_a)}"
            )

    def to_row(self) -> dict:
        row = asdict(self)
        for name in ("emo_a", "clip_a", "ec_a", "diversity", "sem_c", "polarity_a"):
            row[name] = f"{row[name]:.6f}"
        return row


def evaluate_images(probes: ProbeSet, images, emotions, concepts, config_label: str, seed: int) -> MetricReport:
    """All metrics for one generated set; concepts are indices into the world's concepts."""
    _check_batch(images, emotions)
    emotions = [int(e) for e in emotions]
    concepts = [int(c) for c in concepts]
    emotion_logits = predict_logits(probes.emotion, images)
    content_logits = predict_logits(probes.content, images)

    report = MetricReport(
        config_label=config_label,
        n=len(images),
        emo_a=accuracy_from_logits(emotion_logits, emotions),
        clip_a=accuracy_from_logits(content_logits, concepts),
        ec_a=joint_accuracy_from_logits(emotion_logits, content_logits, emotions, concepts),
        diversity=perceptual_diversity(probes.emotion, images) if len(images) >= 2 else 0.0,
        sem_c=mean_max_probability(content_logits),
        polarity_a=polarity_accuracy_from_logits(emotion_logits, emotions),
        seed=seed,
    )
    logger.info(
        f"[{config_label}] n={report.n} Emo-A={report.emo_a:.4f} CLIP-A={report.clip_a:.4f} "
        f"EC-A={report.ec_a:.4f} diversity={report.diversity:.4f} Sem-C={report.sem_c:.4f}"
    )
    return report


# --- checkpoints -------------------------------------------------------------


def save_probes(path: str | Path, probes: ProbeSet) -> Path:
    meta = {
        "num_concepts": probes.content.num_classes,
        "emotion_accuracy": probes.emotion_accuracy,
        "content_accuracy": probes.content_accuracy,
    }
    sections = {"emotion_probe": probes.emotion.state_dict(), "content_probe": probes.content.state_dict()}
    return checkpoint.save(path, sections, meta)


def load_probes(path: str | Path) -> ProbeSet:
    sections, meta = checkpoint.load(path)
    emotion = ProbeClassifier(NUM_EMOTIONS)
    content = ProbeClassifier(meta["num_concepts"])
    emotion.load_state_dict(sections["emotion_probe"])
    content.load_state_dict(sections["content_probe"])
    emotion.eval()
    content.eval()
    return ProbeSet(emotion, content, meta["emotion_accuracy"], meta["content_accuracy"])


def read_metric_reports(path: str | Path) -> list[MetricReport]:
    """Rows of a metrics CSV, in file order."""
    with open(path, "r", encoding="utf-8", newline="") as file:
        rows = list(csv.DictReader(file))
    return [
        MetricReport(
            config_label=row["config_label"],
            n=int(row["n"]),
            emo_a=float(row["emo_a"]),
            clip_a=float(row["clip_a"]),
            ec_a=float(row["ec_a"]),
            diversity=float(row["diversity"]),
            sem_c=float(row["sem_c"]),
            polarity_a=float(row["polarity_a"]),
            seed=int(row["seed"]),
        )
        for row in rows
    ]
