"""Texture exemplar storage and procedural exemplar generation.

On disk an exemplar is a pair of PNGs, `<id>.png` (RGB) + `<id>.labels.png`
(class map), listed in a `manifest.tsv` with columns id / provenance /
license. The procedural generators build brain-surface-like exemplars
(pinkish parenchyma, dark red vessels, near-black background) with seeded
per-texture color and grain variation, used by the demos and the synthetic
evaluation case.
"""

from __future__ import annotations

import colorsys
import csv
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .rasterizer import load_label_png, load_rgb_png, save_label_png, save_rgb_png, LabelImage
from .synthesis import TextureExemplar

MANIFEST_NAME = "manifest.tsv"


def save_texture(tex: TextureExemplar, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_rgb_png(tex.image, directory / f"{tex.id}.png")
    save_label_png(LabelImage(tex.class_map), directory / f"{tex.id}.labels.png")


def load_texture(directory, tex_id: str) -> TextureExemplar:
    directory = Path(directory)
    image = load_rgb_png(directory / f"{tex_id}.png")
    labels = load_label_png(directory / f"{tex_id}.labels.png")
    return TextureExemplar(tex_id, image, labels.labels)


def write_texture_manifest(directory, entries: list[tuple[str, str, str]]) -> None:
    """entries: (id, provenance, license) rows."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / MANIFEST_NAME, "w", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t")
        writer.writerow(["id", "provenance", "license"])
        writer.writerows(entries)


def load_texture_dir(directory) -> list[TextureExemplar]:
    """Load every exemplar listed in manifest.tsv (or every paired PNG if absent)."""
    directory = Path(directory)
    manifest = directory / MANIFEST_NAME
    if manifest.exists():
        with open(manifest, newline="") as fh:
            rows = list(csv.reader(fh, delimiter="\t"))
        ids = [r[0] for r in rows[1:] if r]
    else:
        ids = sorted(
            p.stem for p in directory.glob("*.png") if not p.name.endswith(".labels.png")
        )
    if not ids:
        raise ValueError(f"no texture exemplars found under {directory}")
    return [load_texture(directory, i) for i in ids]


def _band_noise(rng: np.random.Generator, shape, scales=(2.0, 6.0), amps=(1.0, 0.5)) -> np.ndarray:
    """Multi-scale smoothed noise, normalized to roughly unit amplitude."""
    out = np.zeros(shape)
    for s, a in zip(scales, amps):
        n = gaussian_filter(rng.standard_normal(shape), s)
        n /= max(n.std(), 1e-9)
        out += a * n
    return out / sum(amps)


def _exemplar_layout(size: int, rng: np.random.Generator) -> np.ndarray:
    """Class map with a parenchyma disk, vessel curves and background frame."""
    yy, xx = np.mgrid[0:size, 0:size]
    cy, cx = size / 2.0, size / 2.0
    radius = 0.42 * size
    labels = np.zeros((size, size), dtype=np.uint8)
    labels[(yy - cy) ** 2 + (xx - cx) ** 2 < radius**2] = 1
    n_curves = rng.integers(3, 6)
    width = max(2.0, 0.02 * size)
    for _ in range(n_curves):
        a0 = rng.uniform(0, 2 * np.pi)
        a1 = a0 + rng.uniform(np.pi * 0.5, np.pi * 1.2)
        r0, r1 = rng.uniform(0.12, 0.38, size=2) * size
        bend = rng.uniform(-0.35, 0.35)
        t = np.linspace(0.0, 1.0, 4 * size)
        ang = a0 + (a1 - a0) * t + bend * np.sin(np.pi * t)
        rad = r0 + (r1 - r0) * t
        px = cx + rad * np.cos(ang)
        py = cy + rad * np.sin(ang)
        for x, y in zip(px, py):
            x0, x1 = int(x - width), int(x + width) + 1
            y0, y1 = int(y - width), int(y + width) + 1
            if x1 < 0 or y1 < 0 or x0 >= size or y0 >= size:
                continue
            sy, sx = np.mgrid[max(y0, 0) : min(y1, size), max(x0, 0) : min(x1, size)]
            hit = (sy - y) ** 2 + (sx - x) ** 2 < (width / 2.0) ** 2
            region = labels[max(y0, 0) : min(y1, size), max(x0, 0) : min(x1, size)]
            region[hit & (region == 1)] = 2
    return labels


def procedural_texture(tex_id: str, seed: int, size: int = 128) -> TextureExemplar:
    """Brain-surface-like exemplar with seeded color palette and grain."""
    rng = np.random.default_rng(seed)
    labels = _exemplar_layout(size, rng)

    hue = rng.uniform(0.96, 1.06) % 1.0  # pink..red..tan band
    sat = rng.uniform(0.25, 0.55)
    val = rng.uniform(0.55, 0.8)
    paren = np.array(colorsys.hsv_to_rgb(hue, sat, val))
    vessel = np.array(colorsys.hsv_to_rgb((hue + rng.uniform(-0.03, 0.02)) % 1.0,
                                          rng.uniform(0.6, 0.85), rng.uniform(0.2, 0.38)))
    bg = np.array(colorsys.hsv_to_rgb(rng.uniform(0.55, 0.7), rng.uniform(0.1, 0.3),
                                      rng.uniform(0.03, 0.1)))

    img = np.zeros((size, size, 3), dtype=np.float64)
    grain_scale = rng.uniform(1.5, 4.0)
    for cls, base, amp in ((0, bg, 0.02), (1, paren, 0.07), (2, vessel, 0.05)):
        mask = labels == cls
        noise = _band_noise(rng, (size, size), scales=(grain_scale, 3 * grain_scale))
        tint = _band_noise(rng, (size, size), scales=(6 * grain_scale,), amps=(1.0,))
        for ch in range(3):
            img[..., ch][mask] = base[ch] + amp * noise[mask] + 0.03 * tint[mask]
    return TextureExemplar(tex_id, np.clip(img, 0.0, 1.0).astype(np.float32), labels)


def make_procedural_textures(n: int, seed: int = 0, size: int = 128) -> list[TextureExemplar]:
    """A family of n distinct procedural exemplars (ids tex00, tex01, ...)."""
    return [procedural_texture(f"tex{i:02d}", seed * 10_007 + i, size=size) for i in range(n)]


def write_procedural_textures(directory, n: int, seed: int = 0, size: int = 128) -> list[str]:
    """Generate, save and manifest n procedural exemplars; returns their ids."""
    textures = make_procedural_textures(n, seed=seed, size=size)
    for tex in textures:
        save_texture(tex, directory)
    write_texture_manifest(
        directory, [(t.id, f"procedural seed={seed}", "synthetic") for t in textures]
    )
    return [t.id for t in textures]
