import csv
import json
import logging
from pathlib import Path
from typing import Protocol

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)


class RecordSaver(Protocol):
    """Protocol for record savers"""

    def add_records(self, records: list[dict]) -> None:
        """Add records to storage"""
        ...

    def close(self) -> None:
        """Close the saver and release resources"""
        ...


def format_records(records: list[dict]) -> str:
    return "\n".join(json.dumps(record, ensure_ascii=False, sort_keys=True) for record in records)


class JsonlSaver:
    """One JSON object per line."""

    def __init__(self, path: str | Path, mode: str = "a"):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if mode == "w":
            self.path.write_text("", encoding="utf-8")
        logger.debug(f"JsonlSaver initialized with path: {self.path}")

    def add_records(self, records: list[dict]) -> None:
        if not records:
            return
        try:
            with open(self.path, "a", encoding="utf-8") as file:
                file.write(format_records(records) + "\n")
            logger.debug(f"Added {len(records)} records to {self.path}")
        except Exception as e:
            logger.error(f"Failed to add records to {self.path}: {e}")
            raise

    def close(self) -> None:
        """No-op, maintains interface consistency"""
        pass


class CsvSaver:
    """Appends rows to a CSV file, writing the header once."""

    def __init__(self, path: str | Path, columns: list[str], mode: str = "a"):
        self.path = Path(path)
        self.columns = columns
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if mode == "w" and self.path.exists():
            self.path.unlink()
        logger.debug(f"CsvSaver initialized: path={self.path}, columns={len(columns)}")

    def add_records(self, records: list[dict]) -> None:
        write_header = not self.path.exists() or self.path.stat().st_size == 0
        try:
            with open(self.path, "a", encoding="utf-8", newline="") as file:
                writer = csv.DictWriter(file, fieldnames=self.columns, extrasaction="raise")
                if write_header:
                    writer.writeheader()
                for record in records:
                    writer.writerow(record)
            logger.info(f"Appended {len(records)} rows to {self.path}")
        except Exception as e:
            logger.error(f"Failed to append rows to {self.path}: {e}")
            raise

    def close(self) -> None:
        """No-op, maintains interface consistency"""
        pass


class SampleSaver:
    """Writes a PNG per sample plus a sidecar JSON with the same stem."""

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.saved = 0

    def sidecar_path(self, name: str) -> Path:
        return self.directory / f"{name}.json"

    def image_path(self, name: str) -> Path:
        return self.directory / f"{name}.png"

    def exists(self, name: str) -> bool:
        return self.sidecar_path(name).exists() and self.image_path(name).exists()

    def add_records(self, records: list[dict]) -> None:
        """
        Each record needs 'name', 'image' (H×W×3 in [0, 1]) and 'sidecar' (dict).
        """
        for record in records:
            name = record["name"]
            array = np.clip(np.asarray(record["image"]) * 255.0 + 0.5, 0, 255).astype(np.uint8)
            Image.fromarray(array, mode="RGB").save(self.image_path(name))
            # Sidecar last: its presence marks the sample as complete
            with open(self.sidecar_path(name), "w", encoding="utf-8") as file:
                json.dump(record["sidecar"], file, indent=2, sort_keys=True)
            self.saved += 1
        logger.debug(f"Saved {len(records)} samples to {self.directory}")

    def close(self) -> None:
        logger.info(f"SampleSaver closed, {self.saved} samples written to {self.directory}")
