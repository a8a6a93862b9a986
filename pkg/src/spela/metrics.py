from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np


class TrainingDivergedError(FloatingPointError):
    """Raised when a non-finite value shows up in trainable parameters."""


@dataclass
class RunMetrics:
    records: list = field(default_factory=list)
    ledger: object = None
    info: dict = field(default_factory=dict)

    def add(self, epoch: int, layer: int, split: str, accuracy: float, loss: float) -> None:
        self.records.append({"epoch": epoch, "layer": layer, "split": split,
                             "accuracy": float(accuracy), "loss": float(loss)})

    def final(self, split: str = "test", layer: int | None = None) -> float:
        """Accuracy of the last recorded epoch for ``split`` at ``layer`` (default: deepest)."""
        rows = [r for r in self.records if r["split"] == split]
        if not rows:
            raise KeyError(f"no {split} records")
        last = max(r["epoch"] for r in rows)
        rows = [r for r in rows if r["epoch"] == last]
        if layer is None:
            layer = max(r["layer"] for r in rows)
        for r in rows:
            if r["layer"] == layer:
                return r["accuracy"]
        raise KeyError(f"no {split} record for layer {layer}")

    def series(self, split: str, layer: int, key: str = "accuracy") -> np.ndarray:
        rows = sorted((r for r in self.records if r["split"] == split and r["layer"] == layer),
                      key=lambda r: r["epoch"])
        return np.array([r[key] for r in rows])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=["epoch", "layer", "split", "accuracy", "loss"],
                           lineterminator="\n")
        w.writeheader()
        for r in self.records:
            w.writerow({**r, "accuracy": f"{r['accuracy']:.6f}", "loss": f"{r['loss']:.6f}"})
        return buf.getvalue()
