"""
Named-array checkpoint container.

A checkpoint is an uncompressed .npz archive. Every array entry is named
"<section>/<name>" and stored as row-major float32 with its shape; the entry
"__meta__" holds UTF-8 JSON with the format version, the section list and any
caller metadata (vocabulary, dimensions, config echo).
"""

import json
import logging
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import torch

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
META_KEY = "__meta__"


class CheckpointError(Exception):
    """Raised when a checkpoint is missing, malformed or of another version."""

    pass


def save(path: str | Path, sections: Mapping[str, Mapping[str, torch.Tensor]], meta: dict[str, Any] | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    arrays: dict[str, np.ndarray] = {}
    shapes: dict[str, list[int]] = {}
    for section, tensors in sections.items():
        for name, tensor in tensors.items():
            key = f"{section}/{name}"
            array = np.ascontiguousarray(torch.as_tensor(tensor).detach().cpu().numpy(), dtype=np.float32)
            arrays[key] = array
            shapes[key] = list(array.shape)

    header = {
        "version": FORMAT_VERSION,
        "sections": sorted(sections),
        "shapes": shapes,
        "meta": meta or {},
    }
    arrays[META_KEY] = np.frombuffer(json.dumps(header, sort_keys=True).encode("utf-8"), dtype=np.uint8)

    # np.savez appends .npz to names without it; write through a handle to keep the path
    with open(path, "wb") as file:
        np.savez(file, **arrays)
    logger.info(f"Checkpoint saved: {path} ({len(shapes)} arrays, sections={sorted(sections)})")
    return path


def load(path: str | Path) -> tuple[dict[str, dict[str, torch.Tensor]], dict[str, Any]]:
    """Return ({section: {name: float32 tensor}}, meta)."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"Checkpoint not found: {path}")

    try:
        with np.load(path, allow_pickle=False) as archive:
            header = json.loads(archive[META_KEY].tobytes().decode("utf-8"))
            if header.get("version") != FORMAT_VERSION:
                raise CheckpointError(
                    f"Unsupported checkpoint version {header.get('version')} in {path}, "
                    f"expected {FORMAT_VERSION}"
                )
            sections: dict[str, dict[str, torch.Tensor]] = {s: {} for s in header["sections"]}
            for key in archive.files:
                if key == META_KEY:
                    continue
                section, name = key.split("/", 1)
                sections[section][name] = torch.from_numpy(archive[key].copy())
    except CheckpointError:
        raise
    except Exception as e:
        logger.error(f"Failed to read checkpoint {path}: {e}")
        raise CheckpointError(f"Failed to read checkpoint {path}: {e}") from e

    logger.debug(f"Checkpoint loaded: {path}")
    return sections, header["meta"]
