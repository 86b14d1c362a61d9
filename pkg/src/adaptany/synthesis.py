"""Synthetic source data generation.

Turns a prompt set into a labeled image manifest through a text-to-image
client. The procedural client is the deterministic desk-scale stand-in: each
category owns a glyph family drawn over a style-controlled background, so
surrogate "domains" can be built without any real data. Label noise injection
models semantically mismatched generations.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Protocol

import httpx
import numpy as np
from PIL import Image

from .manifest import DatasetManifest, SampleRecord, write_manifest
from .prompt_engine import PromptSet
from .seeding import derive_seed, rng

DEFAULT_IMAGE_SHAPE = (32, 32, 3)

BACKGROUND_TEXTURES = ("flat", "textured", "sketch")


class SynthesisError(RuntimeError):
    def __init__(self, message, completed_categories=()):
        self.completed_categories = list(completed_categories)
        super().__init__(message)


@dataclass(frozen=True)
class StyleParams:
    background_texture: str
    palette: tuple[tuple[int, int, int], ...]
    stroke_jitter: float = 0.0
    noise_level: float = 0.05
    geometric_warp: float = 0.1

    def __post_init__(self):
        if self.background_texture not in BACKGROUND_TEXTURES:
            raise ValueError(
                f"unknown background_texture {self.background_texture!r}")
        if len(self.palette) < 2:
            raise ValueError("palette needs a background and >=1 foreground")
        if self.stroke_jitter < 0 or self.geometric_warp < 0:
            raise ValueError("jitter/warp must be >= 0")
        if not 0.0 <= self.noise_level <= 1.0:
            raise ValueError("noise_level must lie in [0, 1]")


# Named surrogate domains. "flat" and "textured" are the default benchmark
# pair; "sketch" gives a third domain for multi-domain experiments.
STYLE_TABLE = {
    "flat": StyleParams(
        background_texture="flat",
        palette=((40, 44, 52), (220, 80, 60), (80, 200, 120),
                 (90, 140, 230), (235, 200, 80)),
        stroke_jitter=0.0, noise_level=0.03, geometric_warp=0.08),
    "textured": StyleParams(
        background_texture="textured",
        palette=((110, 110, 105), (220, 80, 60), (80, 200, 120),
                 (90, 140, 230), (235, 200, 80)),
        stroke_jitter=0.03, noise_level=0.06, geometric_warp=0.14),
    "sketch": StyleParams(
        background_texture="sketch",
        palette=((245, 245, 240), (30, 30, 30), (70, 70, 90),
                 (50, 80, 60), (90, 50, 50)),
        stroke_jitter=0.15, noise_level=0.06, geometric_warp=0.15),
}

_GLYPH_FAMILIES = ("disk", "square", "triangle", "cross",
                   "diamond", "ring", "hbars", "checker")


def _glyph_mask(family, xx, yy, size, angle, jitter, jrng):
    c, s = np.cos(angle), np.sin(angle)
    xr = c * xx + s * yy
    yr = -s * xx + c * yy
    if jitter > 0:
        xr = xr + jrng.normal(0.0, jitter, xr.shape)
        yr = yr + jrng.normal(0.0, jitter, yr.shape)
    if family == "disk":
        return xr ** 2 + yr ** 2 <= size ** 2
    if family == "square":
        return (np.abs(xr) <= size) & (np.abs(yr) <= size)
    if family == "triangle":
        return (yr >= -size) & (np.abs(xr) <= (size - yr) * 0.6)
    if family == "cross":
        w = size * 0.35
        return ((np.abs(xr) <= w) & (np.abs(yr) <= size)) | \
               ((np.abs(yr) <= w) & (np.abs(xr) <= size))
    if family == "diamond":
        return np.abs(xr) + np.abs(yr) <= size * 1.2
    if family == "ring":
        r2 = xr ** 2 + yr ** 2
        return (r2 <= size ** 2) & (r2 >= (size * 0.55) ** 2)
    if family == "hbars":
        return (np.abs(xr) <= size) & (np.abs(yr) <= size) & \
               (np.floor((yr / size + 1.0) * 2.5).astype(int) % 2 == 0)
    if family == "checker":
        inside = (np.abs(xr) <= size) & (np.abs(yr) <= size)
        cell = (np.floor((xr / size + 1.0) * 2).astype(int) +
                np.floor((yr / size + 1.0) * 2).astype(int)) % 2 == 0
        return inside & cell
    raise ValueError(f"unsupported glyph family {family!r}")


def _background(style, shape, brng):
    h, w, _ = shape
    base = np.array(style.palette[0], dtype=np.float64)
    if style.background_texture == "flat":
        img = np.tile(base, (h, w, 1))
        img += brng.normal(0.0, 3.0, (h, w, 3))
    elif style.background_texture == "textured":
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
        fx, fy = brng.uniform(0.15, 0.7, 2)
        phase = brng.uniform(0, 2 * np.pi)
        wave = 16.0 * np.sin(fx * xx + fy * yy + phase)
        img = base[None, None, :] + wave[:, :, None]
        img += brng.normal(0.0, 6.0, (h, w, 3))
    else:  # sketch
        img = np.tile(base, (h, w, 1))
        for _ in range(6):
            row = brng.integers(0, h)
            img[row, :, :] -= brng.uniform(20, 60)
    return img


def procedural_render(category_id: int, style: StyleParams, image_shape,
                      seed: int) -> np.ndarray:
    """Deterministic uint8 (H, W, 3) render: category glyph over style bg."""
    if category_id < 0:
        raise ValueError("category_id must be >= 0")
    h, w, c = image_shape
    if c != 3:
        raise ValueError("procedural renderer produces 3-channel images")

    grng = rng("render", seed, category_id, style.background_texture)
    img = _background(style, image_shape, grng)

    family = _GLYPH_FAMILIES[category_id % len(_GLYPH_FAMILIES)]
    # Categories sharing a family are separated by scale and base rotation.
    tier = category_id // len(_GLYPH_FAMILIES)
    base_size = 0.62 / (1.0 + 0.28 * tier)
    base_angle = 0.9 * tier

    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    xx = (xx - (w - 1) / 2) / (w / 2)
    yy = (yy - (h - 1) / 2) / (h / 2)
    warp = style.geometric_warp
    dx, dy = grng.uniform(-warp, warp, 2)
    scale = 1.0 + grng.uniform(-warp, warp) * 0.5
    angle = base_angle + grng.uniform(-0.5, 0.5) * (0.4 + warp)
    mask = _glyph_mask(family, (xx - dx) * scale, (yy - dy) * scale,
                       base_size, angle, style.stroke_jitter, grng)

    fg = np.array(style.palette[1 + grng.integers(0, len(style.palette) - 1)],
                  dtype=np.float64)
    img[mask] = fg

    if style.noise_level > 0:
        img += grng.normal(0.0, style.noise_level * 255.0, img.shape)
    return np.clip(img, 0, 255).astype(np.uint8)


class T2IClient(Protocol):
    generator_id: str

    def generate(self, prompt: str, category_id: int, image_shape,
                 seed: int) -> np.ndarray:
        """Return one uint8 (H, W, 3) image for the prompt."""
        ...


class ProceduralT2IClient:
    """Offline stand-in for a text-to-image service.

    Deterministic in (prompt, category_id, seed); the prompt text perturbs the
    draw so distinct prompts yield distinct images.
    """

    def __init__(self, style: StyleParams | str = "flat"):
        if isinstance(style, str):
            style_name = style
            style = STYLE_TABLE[style]
        else:
            style_name = style.background_texture
        self.style = style
        self.generator_id = f"procedural:{style_name}"

    def generate(self, prompt, category_id, image_shape, seed):
        return procedural_render(category_id, self.style, image_shape,
                                 derive_seed(seed, prompt))


class RemoteT2IClient:
    """HTTP text-to-image client; sampling parameters are pass-through."""

    def __init__(self, endpoint, generator_id="remote", max_retries=3,
                 timeout=120.0, extra_params=None):
        self.endpoint = endpoint
        self.generator_id = generator_id
        self.max_retries = max_retries
        self.timeout = timeout
        self.extra_params = dict(extra_params or {})

    def generate(self, prompt, category_id, image_shape, seed):
        h, w, _ = image_shape
        payload = {"prompt": prompt, "seed": seed, "width": w, "height": h,
                   **self.extra_params}
        last_err = None
        for _ in range(self.max_retries):
            try:
                resp = httpx.post(self.endpoint, json=payload,
                                  timeout=self.timeout)
                resp.raise_for_status()
                img = Image.open(io.BytesIO(resp.content)).convert("RGB")
                if img.size != (w, h):
                    img = img.resize((w, h))
                return np.asarray(img)
            except httpx.HTTPError as err:
                last_err = err
        raise SynthesisError(f"text-to-image request failed after "
                             f"{self.max_retries} attempts: {last_err}")


def _category_names_from(prompts: PromptSet) -> list[str]:
    by_id = {}
    for r in prompts.records:
        by_id.setdefault(r.category_id, r.category_name)
    n = max(by_id) + 1
    missing = [i for i in range(n) if i not in by_id]
    if missing:
        raise ValueError(f"prompt set has no prompts for category ids "
                         f"{missing}")
    return [by_id[i] for i in range(n)]


def synthesize(prompts: PromptSet, generator: T2IClient, per_category: int,
               out_dir, seed: int,
               image_shape=DEFAULT_IMAGE_SHAPE) -> DatasetManifest:
    """Render per_category images for every category in the prompt set.

    Labels come from each prompt's category_id; prompts cycle round-robin
    until the per-category count is met. Output order is (category, index),
    independent of any execution scheduling.
    """
    if per_category < 1:
        raise ValueError("per_category must be >= 1")
    category_names = _category_names_from(prompts)
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)

    records = []
    completed = []
    for cid in range(len(category_names)):
        cat_prompts = prompts.for_category(cid)
        for rep in range(per_category):
            prompt = cat_prompts[rep % len(cat_prompts)]
            draw_seed = derive_seed(seed, cid, rep)
            try:
                img = generator.generate(prompt.text, cid, image_shape,
                                         draw_seed)
            except Exception as err:
                raise SynthesisError(
                    f"generator failed on category {cid} "
                    f"({category_names[cid]!r}) draw {rep}: {err}",
                    completed_categories=completed) from err
            sid = f"{derive_seed(generator.generator_id, seed, cid, rep, prompt.text):016x}"
            rel = f"images/cat{cid:03d}_{rep:04d}_{sid}.png"
            Image.fromarray(img).save(out_dir / rel, format="PNG")
            records.append(SampleRecord(
                sample_id=sid, image_path=rel, label=cid,
                domain_tag="synthetic", prompt_text=prompt.text))
        completed.append(cid)

    manifest = DatasetManifest(
        records=records, category_names=category_names,
        domain_tag="synthetic", image_shape=tuple(image_shape),
        root_dir=out_dir,
        provenance={"generator_id": generator.generator_id, "seed": seed,
                    "per_category": per_category,
                    "prompt_mechanism": prompts.created_with,
                    "task_id": prompts.task_id})
    write_manifest(manifest, out_dir / "manifest.jsonl")
    return manifest


def inject_label_noise(manifest: DatasetManifest, rate: float,
                       seed: int) -> DatasetManifest:
    """Resample round(rate*N) labels uniformly from the other categories."""
    if manifest.domain_tag != "synthetic":
        raise ValueError("label noise applies to synthetic manifests only")
    if not 0.0 <= rate <= 1.0:
        raise ValueError("rate must lie in [0, 1]")
    n = len(manifest.records)
    n_flip = int(round(rate * n))
    if n_flip > 0 and manifest.category_count < 2:
        raise ValueError("cannot flip labels with a single category")

    nrng = rng("label-noise", seed)
    flip_idx = set(nrng.choice(n, size=n_flip, replace=False).tolist())
    new_records = []
    for i, r in enumerate(manifest.records):
        if i in flip_idx:
            choices = [c for c in range(manifest.category_count)
                       if c != r.label]
            new_label = int(choices[nrng.integers(0, len(choices))])
            new_records.append(replace(r, label=new_label))
        else:
            new_records.append(r)
    provenance = dict(manifest.provenance)
    provenance["label_noise"] = {"rate": rate, "seed": seed}
    return replace(manifest, records=new_records, provenance=provenance)
