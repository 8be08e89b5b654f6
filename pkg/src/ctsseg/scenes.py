"""Seeded synthetic scenes: images, masks, dataset I/O, superpatch stats.

A scene is a background of class 0 plus a few axis-aligned rectangles and
ellipses of classes 1..C-1. Every class has a fixed base color; the image
is the per-pixel base color plus seeded gaussian noise, clipped to [0,1].
Identical SceneSpec values produce bit-identical outputs.
"""

import math
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import fileio
from .errors import ConfigError


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    height: int = 64
    width: int = 64
    num_classes: int = 5
    num_shapes: int = 6
    noise_amplitude: float = 0.02


def class_palette(num_classes: int) -> np.ndarray:
    """[C, 3] base colors, evenly spread on a hue wheel, away from 0/1."""
    angles = 2.0 * math.pi * np.arange(num_classes) / num_classes
    phases = np.array([0.0, -2.0 * math.pi / 3.0, 2.0 * math.pi / 3.0])
    return 0.5 + 0.38 * np.cos(angles[:, None] + phases[None, :])


def generate_scene(spec: SceneSpec):
    """Return (image [3,H,W] float64 in [0,1], mask [H,W] int64)."""
    if spec.num_classes < 2:
        raise ConfigError(f"need at least 2 classes, got {spec.num_classes}")
    if spec.height < 2 or spec.width < 2 or spec.height % 2 or spec.width % 2:
        raise ConfigError(
            f"scene dims must be positive and even, got {spec.height}x{spec.width}"
        )
    if spec.num_shapes < 0 or spec.noise_amplitude < 0:
        raise ConfigError("num_shapes and noise_amplitude must be non-negative")

    h, w = spec.height, spec.width
    rng = np.random.default_rng(spec.seed)
    mask = np.zeros((h, w), dtype=np.int64)
    ys = np.arange(h)[:, None]
    xs = np.arange(w)[None, :]
    for _ in range(spec.num_shapes):
        cls = int(rng.integers(1, spec.num_classes))
        kind = int(rng.integers(0, 2))
        cy = rng.uniform(0.1, 0.9) * h
        cx = rng.uniform(0.1, 0.9) * w
        ry = rng.uniform(0.08, 0.22) * h
        rx = rng.uniform(0.08, 0.22) * w
        if kind == 0:
            y0, y1 = max(0, round(cy - ry)), min(h, round(cy + ry))
            x0, x1 = max(0, round(cx - rx)), min(w, round(cx + rx))
            mask[y0:y1, x0:x1] = cls
        else:
            inside = ((ys - cy) / ry) ** 2 + ((xs - cx) / rx) ** 2 <= 1.0
            mask[inside] = cls

    image = class_palette(spec.num_classes)[mask].transpose(2, 0, 1)
    image = image + spec.noise_amplitude * rng.standard_normal((3, h, w))
    np.clip(image, 0.0, 1.0, out=image)
    return np.ascontiguousarray(image), mask


# ------------------------------------------------------------- superpatches


def single_class_grid(mask: np.ndarray, patch_size: int) -> np.ndarray:
    """Boolean [H/(2P), W/(2P)] grid: true where a superpatch is one class."""
    sp = 2 * patch_size
    h, w = mask.shape
    if sp < 2 or h % sp or w % sp:
        raise ConfigError(
            f"mask {h}x{w} not divisible into {sp}x{sp} superpatches"
        )
    blocks = mask.reshape(h // sp, sp, w // sp, sp).transpose(0, 2, 1, 3)
    return blocks.max(axis=(2, 3)) == blocks.min(axis=(2, 3))


NUM_STAT_BINS = 20  # 5%-wide bins over [0, 100]


def superpatch_stats(masks, patch_size: int) -> np.ndarray:
    """Histogram (20 bins of width 5%) over per-image percentages of
    single-class superpatches; counts sum to the number of masks."""
    hist = np.zeros(NUM_STAT_BINS, dtype=np.int64)
    for mask in masks:
        grid = single_class_grid(mask, patch_size)
        pct = 100.0 * float(grid.mean())
        hist[min(int(pct // 5), NUM_STAT_BINS - 1)] += 1
    return hist


# ---------------------------------------------------------------- datasets


def write_dataset(root, specs) -> None:
    """Write img_<idx>.ctsf / mask_<idx>.ctsm pairs plus manifest.txt."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    blocks = []
    for idx, spec in enumerate(specs):
        image, mask = generate_scene(spec)
        fileio.write_image(root / f"img_{idx}.ctsf", image)
        fileio.write_mask(root / f"mask_{idx}.ctsm", mask)
        lines = [f"index={idx}"]
        lines += [f"{f.name}={getattr(spec, f.name)}" for f in fields(SceneSpec)]
        blocks.append("\n".join(lines))
    (root / "manifest.txt").write_text(
        "\n\n".join(blocks) + "\n", encoding="utf-8"
    )


def read_manifest(root) -> list:
    """Parse manifest.txt back into an index-ordered list of SceneSpec."""
    path = Path(root) / "manifest.txt"
    if not path.is_file():
        raise ConfigError(f"no manifest.txt under {root}")
    field_types = {f.name: f.type for f in fields(SceneSpec)}
    specs = {}
    for block in path.read_text(encoding="utf-8").split("\n\n"):
        entries = {}
        for line in block.splitlines():
            line = line.strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigError(f"malformed manifest line {line!r}")
            entries[key] = value
        if not entries:
            continue
        if "index" not in entries:
            raise ConfigError("manifest block without an index entry")
        idx = int(entries.pop("index"))
        kwargs = {}
        for key, value in entries.items():
            if key not in field_types:
                raise ConfigError(f"unknown manifest key {key!r}")
            kwargs[key] = field_types[key](value)
        specs[idx] = SceneSpec(**kwargs)
    return [specs[i] for i in sorted(specs)]


def load_dataset(root) -> list:
    """Load all (image, mask) pairs named by the manifest, in index order."""
    root = Path(root)
    specs = read_manifest(root)
    pairs = []
    for idx in range(len(specs)):
        image = fileio.read_image(root / f"img_{idx}.ctsf")
        mask = fileio.read_mask(root / f"mask_{idx}.ctsm")
        pairs.append((image, mask))
    return pairs
