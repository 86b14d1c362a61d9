"""Desk-scale procedural benchmark builders.

Produces labeled manifests for any surrogate domain in the style table, so
source/target pairs like "flat" -> "textured" can be built without real data.
Target manifests keep their true labels for evaluation only.
"""

from __future__ import annotations

from pathlib import Path

from PIL import Image

from .manifest import DatasetManifest, SampleRecord, write_manifest
from .seeding import derive_seed
from .synthesis import DEFAULT_IMAGE_SHAPE, STYLE_TABLE, procedural_render


def make_procedural_manifest(style_name: str, category_names, per_category,
                             out_dir, seed, domain_tag="target",
                             image_shape=DEFAULT_IMAGE_SHAPE,
                             labeled=True) -> DatasetManifest:
    style = STYLE_TABLE[style_name]
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for cid, name in enumerate(category_names):
        for rep in range(per_category):
            draw_seed = derive_seed("benchmark", style_name, seed, cid, rep)
            img = procedural_render(cid, style, image_shape, draw_seed)
            sid = f"{derive_seed(style_name, seed, cid, rep):016x}"
            rel = f"images/cat{cid:03d}_{rep:04d}_{sid}.png"
            Image.fromarray(img).save(out_dir / rel, format="PNG")
            records.append(SampleRecord(
                sample_id=sid, image_path=rel,
                label=cid if (labeled or domain_tag == "synthetic") else None,
                domain_tag=domain_tag,
                prompt_text=(f"procedural {style_name} {name}"
                             if domain_tag == "synthetic" else None)))
    manifest = DatasetManifest(
        records=records, category_names=list(category_names),
        domain_tag=domain_tag, image_shape=tuple(image_shape),
        root_dir=out_dir,
        provenance={"generator_id": f"procedural:{style_name}", "seed": seed,
                    "per_category": per_category})
    write_manifest(manifest, out_dir / "manifest.jsonl")
    return manifest
