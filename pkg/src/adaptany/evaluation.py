"""Checkpoint evaluation: per-category accuracies, confusion matrix, and
feature dumps for external projection tools."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .manifest import DatasetManifest
from .nnkit import Batch, ModelState
from .splitter import PseudoLabelTable
from .uda import predict_probs


@dataclass
class EvalMetrics:
    overall_accuracy: float
    per_category_accuracy: list[float]
    mean_per_category_accuracy: float
    confusion_matrix: list[list[int]]
    category_names: list[str]

    def to_dict(self) -> dict:
        return {
            "overall_accuracy": self.overall_accuracy,
            "per_category_accuracy": self.per_category_accuracy,
            "mean_per_category_accuracy": self.mean_per_category_accuracy,
            "confusion_matrix": self.confusion_matrix,
            "category_names": self.category_names,
        }

    def write(self, path) -> None:
        Path(path).write_text(
            json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def table_text(self) -> str:
        """Per-category accuracies plus AVG, one row per line."""
        lines = [f"{name:<20s} {acc if not np.isnan(acc) else float('nan'):.4f}"
                 for name, acc in zip(self.category_names,
                                      self.per_category_accuracy)]
        lines.append(f"{'AVG':<20s} {self.mean_per_category_accuracy:.4f}")
        lines.append(f"{'OVERALL':<20s} {self.overall_accuracy:.4f}")
        return "\n".join(lines)


def evaluate(model: ModelState, manifest: DatasetManifest) -> EvalMetrics:
    """Accuracy metrics on a labeled manifest (evaluation only)."""
    if not manifest.records:
        raise ValueError("cannot evaluate an empty manifest")
    if not manifest.has_labels():
        raise ValueError("evaluation requires a fully labeled manifest")
    if model.category_count != manifest.category_count:
        raise ValueError("model/manifest category count mismatch")

    labels = manifest.labels()
    preds = predict_probs(model, manifest.images()).argmax(axis=1)
    n = manifest.category_count
    cm = np.zeros((n, n), dtype=np.int64)
    for t, p in zip(labels, preds):
        cm[t, p] += 1

    row_sums = cm.sum(axis=1)
    per_cat = [float(cm[c, c] / row_sums[c]) if row_sums[c] else float("nan")
               for c in range(n)]
    populated = [a for a in per_cat if not np.isnan(a)]
    return EvalMetrics(
        overall_accuracy=float(np.trace(cm) / cm.sum()),
        per_category_accuracy=per_cat,
        mean_per_category_accuracy=float(np.mean(populated)),
        confusion_matrix=cm.tolist(),
        category_names=list(manifest.category_names))


def dump_embeddings(model: ModelState, manifest: DatasetManifest, out_path,
                    pseudo_labels: PseudoLabelTable | None = None) -> Path:
    """Write (sample_id, label, feature...) rows as TSV for projection.

    Unlabeled samples use the pseudo-label table when given, else -1.
    """
    model.net.eval()
    out_path = Path(out_path)
    with open(out_path, "w") as fh:
        for i in range(0, len(manifest.records), 256):
            records = manifest.records[i:i + 256]
            with torch.no_grad():
                feats = model.net.features(
                    Batch(images=manifest.images(records)).to_tensor()).numpy()
            for record, vec in zip(records, feats):
                if record.label is not None:
                    label = record.label
                elif pseudo_labels and record.sample_id in pseudo_labels.entries:
                    label = pseudo_labels.entries[record.sample_id][0]
                else:
                    label = -1
                values = "\t".join(f"{v:.8f}" for v in vec)
                fh.write(f"{record.sample_id}\t{label}\t{values}\n")
    return out_path
