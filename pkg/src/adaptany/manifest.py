"""Dataset manifests: the unit of data passed between pipeline stages.

A manifest is a header line (category list, image shape, provenance) plus one
JSON record per sample. Loading re-validates every invariant and reports all
violations at once.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

DOMAIN_TAGS = ("synthetic", "target")


class ManifestError(ValueError):
    """Invariant violations found while loading or validating a manifest."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("manifest invariant violations:\n  " +
                         "\n  ".join(self.violations))


@dataclass(frozen=True)
class SampleRecord:
    sample_id: str
    image_path: str  # relative to the manifest's root directory
    label: int | None
    domain_tag: str
    prompt_text: str | None = None
    confidence: float | None = None

    def __post_init__(self):
        if self.domain_tag not in DOMAIN_TAGS:
            raise ValueError(f"unknown domain_tag {self.domain_tag!r}")
        if self.domain_tag == "synthetic":
            if self.label is None or self.prompt_text is None:
                raise ValueError(
                    "synthetic records need both label and prompt_text")
        if self.confidence is not None and not 0.0 <= self.confidence <= 1.0:
            raise ValueError("confidence must lie in [0, 1]")


@dataclass
class DatasetManifest:
    records: list[SampleRecord]
    category_names: list[str]
    domain_tag: str
    image_shape: tuple[int, int, int]
    root_dir: Path
    provenance: dict = field(default_factory=dict)

    @property
    def category_count(self) -> int:
        return len(self.category_names)

    def validate(self, check_files: bool = True) -> None:
        violations = []
        for r in self.records:
            if r.domain_tag != self.domain_tag:
                violations.append(
                    f"{r.sample_id}: domain_tag {r.domain_tag!r} != "
                    f"manifest {self.domain_tag!r}")
            if r.label is not None and not 0 <= r.label < self.category_count:
                violations.append(
                    f"{r.sample_id}: label {r.label} out of range "
                    f"[0, {self.category_count})")
            if check_files and not (self.root_dir / r.image_path).is_file():
                violations.append(f"{r.sample_id}: missing image file "
                                  f"{r.image_path}")
        if violations:
            raise ManifestError(violations)

    def image_array(self, record: SampleRecord) -> np.ndarray:
        """Load one image as float64 (H, W, C) scaled to [0, 1]."""
        img = np.asarray(Image.open(self.root_dir / record.image_path))
        if img.shape != self.image_shape:
            raise ManifestError([f"{record.sample_id}: image shape "
                                 f"{img.shape} != {self.image_shape}"])
        return img.astype(np.float64) / 255.0

    def images(self, records=None) -> np.ndarray:
        records = self.records if records is None else records
        return np.stack([self.image_array(r) for r in records])

    def labels(self, records=None) -> np.ndarray:
        records = self.records if records is None else records
        if any(r.label is None for r in records):
            raise ValueError("manifest has unlabeled records")
        return np.array([r.label for r in records], dtype=np.int64)

    def has_labels(self) -> bool:
        return bool(self.records) and all(r.label is not None
                                          for r in self.records)

    def without_labels(self) -> "DatasetManifest":
        if self.domain_tag != "target":
            raise ValueError("only target manifests can drop labels")
        stripped = [replace(r, label=None) for r in self.records]
        return replace(self, records=stripped)


def write_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    path = Path(path)
    header = {
        "category_names": manifest.category_names,
        "domain_tag": manifest.domain_tag,
        "image_shape": list(manifest.image_shape),
        "provenance": manifest.provenance,
    }
    with open(path, "w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for r in manifest.records:
            fh.write(json.dumps({
                "sample_id": r.sample_id,
                "image_path": r.image_path,
                "label": r.label,
                "domain_tag": r.domain_tag,
                "prompt_text": r.prompt_text,
                "confidence": r.confidence,
            }) + "\n")


def load_manifest(path: str | Path, check_files: bool = True) -> DatasetManifest:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines:
        raise ManifestError([f"empty manifest file: {path}"])
    header = json.loads(lines[0])
    records = [SampleRecord(**json.loads(line)) for line in lines[1:]
               if line.strip()]
    manifest = DatasetManifest(
        records=records,
        category_names=list(header["category_names"]),
        domain_tag=header["domain_tag"],
        image_shape=tuple(header["image_shape"]),
        root_dir=path.parent,
        provenance=header.get("provenance", {}),
    )
    manifest.validate(check_files=check_files)
    return manifest
