"""Procedural multi-class shapes benchmark.

Each sample is a small RGB image of colored geometric shapes on a dark
background plus its pixel-level class map. Later shapes occlude earlier
ones, so classes compete for pixels the same way real scene labels do.

Reproducibility contract: every sample is a pure function of
(config.seed, index) through the splitmix64/Philox scheme in
:mod:`cit_css.seeding`. Noise is drawn as integers and scaled, and the
texture uses a piecewise-linear wave, so regeneration is bit-identical
across runs and platforms.
"""

from __future__ import annotations

import functools
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .seeding import make_rng

SHAPE_KINDS = (
    "circle",
    "square",
    "triangle",
    "cross",
    "ring",
    "diamond",
    "bar",
    "ellipse",
)

EXPORT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class SynthConfig:
    num_classes: int = 8
    image_size: int = 64
    shapes_min: int = 2
    shapes_max: int = 5
    noise_std: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.image_size < 16:
            raise ValueError("image_size must be >= 16")
        if not (0.0 <= self.noise_std < 0.5):
            raise ValueError("noise_std must be in [0, 0.5)")
        if not (1 <= self.shapes_min <= self.shapes_max):
            raise ValueError("need 1 <= shapes_min <= shapes_max")
        if not (0 <= self.seed < 2**64):
            raise ValueError("seed must fit in uint64")

    def to_json_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "image_size": self.image_size,
            "shapes_min": self.shapes_min,
            "shapes_max": self.shapes_max,
            "noise_std": self.noise_std,
            "seed": self.seed,
        }


@dataclass
class SegSample:
    """One labeled image: image [3,H,W] float32 in [0,1], label [H,W] int32
    with values in {0..K} (0 = background)."""

    image: np.ndarray
    label: np.ndarray
    sample_id: int

    def validate(self, num_classes: int | None = None) -> None:
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise ValueError(f"image must be [3,H,W], got {self.image.shape}")
        if self.label.shape != self.image.shape[1:]:
            raise ValueError("label spatial shape must match image")
        if not np.isfinite(self.image).all():
            raise ValueError("image contains non-finite values")
        if self.label.min() < 0:
            raise ValueError("negative label id")
        if num_classes is not None and self.label.max() > num_classes:
            raise ValueError("label id exceeds num_classes")


@dataclass(frozen=True)
class ClassPalette:
    """Per-class draw style: shape kind, base RGB color, texture phase."""

    kinds: tuple[str, ...]
    colors: np.ndarray  # [K, 3] in [0,1]
    phases: np.ndarray  # [K]

    @property
    def num_classes(self) -> int:
        return len(self.kinds)


@functools.lru_cache(maxsize=32)
def build_palette(config: SynthConfig) -> ClassPalette:
    """Deterministic palette: kinds cycle through SHAPE_KINDS, colors are
    drawn until every (kind, color) pair is clearly distinct."""
    rng = make_rng(config.seed, "palette")
    k = config.num_classes
    kinds = tuple(SHAPE_KINDS[c % len(SHAPE_KINDS)] for c in range(k))
    colors = np.zeros((k, 3))
    for c in range(k):
        while True:
            cand = rng.uniform(0.3, 0.95, size=3)
            clash = any(
                kinds[p] == kinds[c] and np.max(np.abs(colors[p] - cand)) < 0.15
                for p in range(c)
            )
            if not clash:
                colors[c] = cand
                break
    phases = rng.uniform(0.0, 1.0, size=k)
    return ClassPalette(kinds=kinds, colors=colors, phases=phases)


def _shape_mask(kind: str, cx: float, cy: float, r: float, xx, yy) -> np.ndarray:
    dx = xx - cx
    dy = yy - cy
    if kind == "circle":
        return dx * dx + dy * dy <= r * r
    if kind == "square":
        return np.maximum(np.abs(dx), np.abs(dy)) <= 0.85 * r
    if kind == "triangle":
        # isoceles, apex up: half-width grows linearly below the apex
        m = dy + r
        return (m >= 0) & (m <= 2 * r) & (np.abs(dx) <= 0.55 * m)
    if kind == "cross":
        arm = 0.35 * r
        box = np.maximum(np.abs(dx), np.abs(dy)) <= r
        return box & ((np.abs(dx) <= arm) | (np.abs(dy) <= arm))
    if kind == "ring":
        d2 = dx * dx + dy * dy
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    if kind == "diamond":
        return np.abs(dx) + np.abs(dy) <= 1.1 * r
    if kind == "bar":
        return (np.abs(dx) <= 1.15 * r) & (np.abs(dy) <= 0.38 * r)
    if kind == "ellipse":
        return (dx / (1.15 * r)) ** 2 + (dy / (0.62 * r)) ** 2 <= 1.0
    raise ValueError(f"unknown shape kind {kind!r}")


def _triangle_wave(t: np.ndarray) -> np.ndarray:
    # piecewise-linear in [0,1]; exact float ops only (no transcendentals)
    return np.abs(2.0 * (t - np.floor(t + 0.5)))


def generate_sample(config: SynthConfig, index: int) -> SegSample:
    """Draw sample `index`. Pure in (config, index); later shapes occlude
    earlier ones."""
    if index < 0:
        raise ValueError("index must be >= 0")
    palette = build_palette(config)
    rng = make_rng(config.seed, "sample", index)
    s = config.image_size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)

    base = rng.uniform(0.05, 0.16, size=3)
    grad = 0.05 * (yy / (s - 1))
    image = base[:, None, None] + grad[None, :, :]
    label = np.zeros((s, s), dtype=np.int32)

    n_shapes = int(rng.integers(config.shapes_min, config.shapes_max + 1))
    for _ in range(n_shapes):
        cid = int(rng.integers(1, config.num_classes + 1))
        kind = palette.kinds[cid - 1]
        r = rng.uniform(0.12, 0.26) * s
        cx = rng.uniform(0.12 * s, 0.88 * s)
        cy = rng.uniform(0.12 * s, 0.88 * s)
        mask = _shape_mask(kind, cx, cy, r, xx, yy)
        if not mask.any():
            continue
        freq = rng.uniform(0.05, 0.15)
        tex = 0.12 * (_triangle_wave((xx + yy) * freq + palette.phases[cid - 1]) - 0.5)
        color = palette.colors[cid - 1]
        for ch in range(3):
            plane = image[ch]
            plane[mask] = color[ch] + tex[mask]
        label[mask] = cid

    if config.noise_std > 0:
        ints = rng.integers(-(2**31), 2**31, size=(3, s, s))
        image = image + ints * (config.noise_std / 2**31)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return SegSample(image=image, label=label, sample_id=index)


def generate_dataset(config: SynthConfig, n: int, start_index: int = 0) -> list[SegSample]:
    """Samples start_index .. start_index+n-1, in order."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return [generate_sample(config, start_index + i) for i in range(n)]


def dataset_digest(samples: list[SegSample]) -> str:
    """Order-sensitive SHA-256 over ids, labels and image bytes."""
    if not samples:
        raise ValueError("cannot digest an empty dataset")
    h = hashlib.sha256()
    for sample in samples:
        h.update(int(sample.sample_id).to_bytes(8, "little", signed=False))
        h.update(np.ascontiguousarray(sample.label, dtype=np.int32).tobytes())
        h.update(np.ascontiguousarray(sample.image, dtype=np.float32).tobytes())
    return h.hexdigest()


# --- pure augmentation hooks -------------------------------------------------


def flip_horizontal(sample: SegSample) -> SegSample:
    return SegSample(
        image=np.ascontiguousarray(sample.image[:, :, ::-1]),
        label=np.ascontiguousarray(sample.label[:, ::-1]),
        sample_id=sample.sample_id,
    )


def crop(sample: SegSample, top: int, left: int, height: int, width: int) -> SegSample:
    if top < 0 or left < 0 or top + height > sample.image.shape[1] or left + width > sample.image.shape[2]:
        raise ValueError("crop window out of bounds")
    return SegSample(
        image=np.ascontiguousarray(sample.image[:, top : top + height, left : left + width]),
        label=np.ascontiguousarray(sample.label[top : top + height, left : left + width]),
        sample_id=sample.sample_id,
    )


# --- optional on-disk export --------------------------------------------------


def export_dataset(samples: list[SegSample], config: SynthConfig, out_dir) -> dict:
    """PNG image/label pairs plus a JSON manifest {config, digest, ...}.

    Label PNGs store the class id in a single 8-bit channel; images are
    quantized to 8-bit RGB (the manifest digest refers to the exact
    in-memory dataset regenerable from `config`).
    """
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    if config.num_classes > 255:
        raise ValueError("8-bit label export supports at most 255 classes")
    for sample in samples:
        rgb = np.clip(np.rint(sample.image * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(rgb.transpose(1, 2, 0), mode="RGB").save(
            out / "images" / f"sample_{sample.sample_id:06d}.png"
        )
        Image.fromarray(sample.label.astype(np.uint8), mode="L").save(
            out / "labels" / f"sample_{sample.sample_id:06d}.png"
        )
    manifest = {
        "format_version": EXPORT_FORMAT_VERSION,
        "config": config.to_json_dict(),
        "count": len(samples),
        "digest": dataset_digest(samples),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_exported_dataset(in_dir) -> tuple[list[SegSample], dict]:
    """Read back an exported directory. Images come back 8-bit quantized."""
    root = Path(in_dir)
    manifest = json.loads((root / "manifest.json").read_text())
    if manifest.get("format_version") != EXPORT_FORMAT_VERSION:
        raise ValueError(f"unsupported dataset format_version {manifest.get('format_version')}")
    samples = []
    for img_path in sorted((root / "images").glob("sample_*.png")):
        sid = int(img_path.stem.split("_")[1])
        lab_path = root / "labels" / img_path.name
        rgb = np.asarray(Image.open(img_path), dtype=np.float32) / 255.0
        label = np.asarray(Image.open(lab_path), dtype=np.int32)
        samples.append(SegSample(image=rgb.transpose(2, 0, 1), label=label, sample_id=sid))
    return samples, manifest
