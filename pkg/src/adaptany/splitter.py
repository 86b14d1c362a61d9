"""Confidence split of the target domain.

The stage-2 model pseudo-labels every target sample; each pseudo-category is
then split at its own mean confidence into a confident (treated as labeled)
and an unconfident (treated as unlabeled) part.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .manifest import DatasetManifest
from .nnkit import ModelState
from .uda import predict_probs


@dataclass
class PseudoLabelTable:
    # sample_id -> (pseudo_label, confidence)
    entries: dict[str, tuple[int, float]]
    model_checkpoint_id: str = ""

    def __len__(self):
        return len(self.entries)


@dataclass
class SplitPartition:
    confident_ids: set[str]
    unconfident_ids: set[str]
    per_category_threshold: dict[int, float]
    table: PseudoLabelTable | None = field(default=None, repr=False)

    def assert_partition(self, all_ids) -> None:
        all_ids = set(all_ids)
        if self.confident_ids & self.unconfident_ids:
            raise AssertionError("confident/unconfident sets overlap")
        if self.confident_ids | self.unconfident_ids != all_ids:
            raise AssertionError("split does not cover all target ids")


def pseudo_label(model: ModelState, target: DatasetManifest,
                 checkpoint_id: str = "") -> PseudoLabelTable:
    """Head-averaged argmax prediction with max-softmax confidence."""
    if model.category_count != target.category_count:
        raise ValueError(f"model has {model.category_count} categories, "
                         f"manifest has {target.category_count}")
    entries = {}
    if target.records:
        probs = predict_probs(model, target.images())
        # np.argmax breaks ties toward the lowest category index
        labels = probs.argmax(axis=1)
        confidences = probs.max(axis=1)
        for record, lab, conf in zip(target.records, labels, confidences):
            entries[record.sample_id] = (int(lab), float(conf))
    return PseudoLabelTable(entries=entries,
                            model_checkpoint_id=checkpoint_id)


def split_by_category_mean(table: PseudoLabelTable) -> SplitPartition:
    """Per pseudo-category, samples at or above the category's mean
    confidence are confident; the rest are unconfident."""
    if not table.entries:
        raise ValueError("cannot split an empty pseudo-label table")
    by_category: dict[int, list[float]] = {}
    for label, conf in table.entries.values():
        by_category.setdefault(label, []).append(conf)
    # the mean can round above the max when all confidences are equal, which
    # would empty the confident side; clamping keeps max >= threshold exact
    thresholds = {c: min(float(np.mean(confs)), max(confs))
                  for c, confs in by_category.items()}

    confident, unconfident = set(), set()
    for sid, (label, conf) in table.entries.items():
        if conf >= thresholds[label]:
            confident.add(sid)
        else:
            unconfident.add(sid)
    assert confident, "internal error: empty confident side with >= rule"
    partition = SplitPartition(confident_ids=confident,
                               unconfident_ids=unconfident,
                               per_category_threshold=thresholds,
                               table=table)
    partition.assert_partition(table.entries.keys())
    return partition


def write_partition(partition: SplitPartition, path) -> None:
    table = partition.table
    if table is None:
        raise ValueError("partition has no attached pseudo-label table")
    header = {
        "per_category_threshold": {str(k): v for k, v in
                                   sorted(partition.per_category_threshold.items())},
        "model_checkpoint_id": table.model_checkpoint_id,
    }
    with open(path, "w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for sid in sorted(table.entries):
            label, conf = table.entries[sid]
            side = "confident" if sid in partition.confident_ids else "unconfident"
            fh.write(json.dumps({"sample_id": sid, "pseudo_label": label,
                                 "confidence": conf, "side": side}) + "\n")


def load_partition(path) -> SplitPartition:
    lines = Path(path).read_text().splitlines()
    header = json.loads(lines[0])
    entries = {}
    confident, unconfident = set(), set()
    for line in lines[1:]:
        if not line.strip():
            continue
        row = json.loads(line)
        entries[row["sample_id"]] = (row["pseudo_label"], row["confidence"])
        (confident if row["side"] == "confident" else
         unconfident).add(row["sample_id"])
    table = PseudoLabelTable(entries=entries,
                             model_checkpoint_id=header["model_checkpoint_id"])
    return SplitPartition(
        confident_ids=confident, unconfident_ids=unconfident,
        per_category_threshold={int(k): v for k, v in
                                header["per_category_threshold"].items()},
        table=table)
