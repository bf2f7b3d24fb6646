# Artifact repository rooted at the configured output directory
# Datasets live under data/, model checkpoints under checkpoints/, tables and
# JSON documents under reports/. Nothing is ever written outside the root.

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Any, Union

import pandas as pd

from cvae import CvaeModel, load_cvae, save_cvae
from didactic_sim import Dataset, load_dataset, save_dataset
from errors import UsageError
from risk_biaser import BiaserModel, load_biaser, save_biaser

logger = logging.getLogger(__name__)

CSV_FLOAT_FORMAT = "%.10g"


class ArtifactStore:
    """Repository for every on-disk artifact of a run."""

    DATA_DIR = "data"
    CHECKPOINT_DIR = "checkpoints"
    REPORT_DIR = "reports"

    def __init__(self, root: Union[str, Path]):
        self.root = Path(root).resolve()

    def path(self, *parts: str) -> Path:
        """Resolve a path under the root; names escaping it are rejected."""
        candidate = self.root.joinpath(*parts).resolve()
        if candidate != self.root and self.root not in candidate.parents:
            raise UsageError(f"path {'/'.join(parts)!r} escapes the output directory {self.root}")
        return candidate

    def _writable(self, *parts: str) -> Path:
        target = self.path(*parts)
        target.parent.mkdir(parents=True, exist_ok=True)
        return target

    # ----- datasets -----

    def dataset_path(self, name: str) -> Path:
        return self.path(self.DATA_DIR, f"{name}.rbd")

    def save_dataset(self, dataset: Dataset, name: str) -> Path:
        target = self._writable(self.DATA_DIR, f"{name}.rbd")
        save_dataset(dataset, target)
        logger.info("dataset %s (%d scenes) -> %s", name, len(dataset), target)
        return target

    def load_dataset(self, name: str) -> Dataset:
        return load_dataset(self.dataset_path(name))

    # ----- checkpoints -----

    def cvae_path(self) -> Path:
        return self.path(self.CHECKPOINT_DIR, "cvae.ckpt")

    def biaser_path(self) -> Path:
        return self.path(self.CHECKPOINT_DIR, "biaser.ckpt")

    def save_cvae(self, model: CvaeModel) -> Path:
        target = self._writable(self.CHECKPOINT_DIR, "cvae.ckpt")
        save_cvae(model, target)
        return target

    def load_cvae(self) -> CvaeModel:
        return load_cvae(self.cvae_path())

    def save_biaser(self, biaser: BiaserModel) -> Path:
        target = self._writable(self.CHECKPOINT_DIR, "biaser.ckpt")
        save_biaser(biaser, target)
        return target

    def load_biaser(self, cvae: CvaeModel) -> BiaserModel:
        return load_biaser(self.biaser_path(), cvae)

    # ----- reports -----

    def write_table(self, name: str, frame: pd.DataFrame) -> Path:
        target = self._writable(self.REPORT_DIR, f"{name}.csv")
        frame.to_csv(target, index=False, float_format=CSV_FLOAT_FORMAT)
        return target

    def write_json(self, name: str, payload: Any) -> Path:
        target = self._writable(self.REPORT_DIR, f"{name}.json")
        target.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return target

    def write_text(self, relative: str, text: str) -> Path:
        target = self._writable(relative)
        target.write_text(text, encoding="utf-8")
        return target
