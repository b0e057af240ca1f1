"""Synthetic crowd scenes for desk-scale experiments, plus dataset I/O.

A scene is a smooth textured background with small Gaussian-intensity blobs
("heads") of jittered radius and brightness.  Blob centers are the
annotation points, in the same pixel convention as the density splatter
(pixel ``i`` spans ``[i, i+1)``).

On-disk layout of a dataset directory::

    images/<name>.png
    annotations/<name>.json
    density/<name>.L<n>.dcdm      (one file per pyramid level)
"""

import json
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image
from scipy import ndimage

from .density import AnnotatedImage, build_pyramid, max_levels, splat_gaussian
from .formats import read_dcdm, write_dcdm
from .trainer import Sample

PROFILES = {
    "sparse": (1, 15),
    "dense": (40, 120),
    "mixed": (1, 120),
}


@dataclass
class SyntheticScene:
    seed: int
    canvas_hw: tuple
    head_range: tuple
    image: np.ndarray
    annotation: AnnotatedImage


def _background(rng, h, w):
    coarse = ndimage.gaussian_filter(rng.standard_normal((h, w, 3)), (6, 6, 0), mode="wrap")
    coarse /= coarse.std() + 1e-12
    fine = rng.standard_normal((h, w, 1))
    tint = rng.uniform(0.25, 0.45, size=3)
    return tint + 0.06 * coarse + 0.025 * fine


def render_scene(rng, canvas_hw, head_range, seed=0):
    h, w = canvas_hw
    lo, hi = head_range
    n = int(rng.integers(lo, hi + 1))
    xs = rng.uniform(0, w, size=n)
    ys = rng.uniform(0, h, size=n)
    img = _background(rng, h, w)
    yy = np.arange(h) + 0.5
    xx = np.arange(w) + 0.5
    for x, y in zip(xs, ys):
        r = rng.uniform(1.2, 2.4)
        amp = rng.uniform(0.35, 0.6)
        color = rng.uniform(0.7, 1.0, size=3)
        y0, y1 = max(int(y - 4 * r), 0), min(int(y + 4 * r) + 1, h)
        x0, x1 = max(int(x - 4 * r), 0), min(int(x + 4 * r) + 1, w)
        gy = np.exp(-0.5 * ((yy[y0:y1] - y) / r) ** 2)
        gx = np.exp(-0.5 * ((xx[x0:x1] - x) / r) ** 2)
        img[y0:y1, x0:x1] += amp * np.outer(gy, gx)[..., None] * color
    img = np.clip(img, 0.0, 1.0)
    pts = np.stack([xs, ys], axis=1) if n else np.zeros((0, 2))
    ann = AnnotatedImage(w, h, pts, img)
    return SyntheticScene(seed, (h, w), (lo, hi), img, ann)


def quantize(img):
    return np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)


def gen_synthetic(out_dir, count, canvas_hw=(96, 128), density_profile="mixed", seed=0,
                  sigma=5.0, prefix="scene"):
    """Write ``count`` scenes with annotations and density pyramids; returns the names."""
    if count < 1:
        raise ValueError("count must be >= 1")
    try:
        head_range = PROFILES[density_profile]
    except KeyError:
        raise ValueError(f"unknown density profile {density_profile!r}; choose from {sorted(PROFILES)}") from None
    for sub in ("images", "annotations", "density"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
    levels = max_levels(*canvas_hw)
    children = np.random.SeedSequence(seed).spawn(count)
    names = []
    for i, child in enumerate(children):
        name = f"{prefix}_{i:04d}"
        scene = render_scene(np.random.default_rng(child), canvas_hw, head_range, seed)
        Image.fromarray(quantize(scene.image)).save(os.path.join(out_dir, "images", name + ".png"))
        with open(os.path.join(out_dir, "annotations", name + ".json"), "w") as fh:
            json.dump(scene.annotation.to_json(), fh)
        write_pyramid(os.path.join(out_dir, "density", name), splat_gaussian(scene.annotation, sigma), levels)
        names.append(name)
    return names


def write_pyramid(stem, base, levels):
    pyr = build_pyramid(base, levels)
    for n, lv in enumerate(pyr.levels):
        write_dcdm(f"{stem}.L{n}.dcdm", lv)
    return pyr


def read_pyramid(stem):
    levels = []
    n = 0
    while os.path.exists(f"{stem}.L{n}.dcdm"):
        levels.append(read_dcdm(f"{stem}.L{n}.dcdm").astype(np.float64))
        n += 1
    if not levels:
        raise FileNotFoundError(f"no density levels found for {stem}")
    return levels


def load_image(path):
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def list_names(data_dir):
    ann_dir = os.path.join(data_dir, "annotations")
    if not os.path.isdir(ann_dir):
        raise FileNotFoundError(f"{data_dir} has no annotations/ directory")
    return sorted(f[:-5] for f in os.listdir(ann_dir) if f.endswith(".json"))


def load_dataset(data_dir, sigma=5.0):
    """Samples from a dataset directory; missing density files are regenerated in memory."""
    samples = []
    for name in list_names(data_dir):
        with open(os.path.join(data_dir, "annotations", name + ".json")) as fh:
            ann = AnnotatedImage.from_json(json.load(fh))
        image = load_image(os.path.join(data_dir, "images", name + ".png"))
        stem = os.path.join(data_dir, "density", name)
        if os.path.exists(f"{stem}.L0.dcdm"):
            density = read_dcdm(f"{stem}.L0.dcdm").astype(np.float64)
        else:
            density = splat_gaussian(ann, sigma)
        samples.append(Sample(image, density, float(ann.count), name))
    return samples


def make_samples(count, canvas_hw=(96, 128), density_profile="mixed", seed=0, sigma=5.0):
    """In-memory equivalent of :func:`gen_synthetic` (images quantized the same way)."""
    head_range = PROFILES[density_profile]
    out = []
    for i, child in enumerate(np.random.SeedSequence(seed).spawn(count)):
        scene = render_scene(np.random.default_rng(child), canvas_hw, head_range, seed)
        img = quantize(scene.image).astype(np.float32) / 255.0
        out.append(Sample(img, splat_gaussian(scene.annotation, sigma), float(scene.annotation.count), f"scene_{i:04d}"))
    return out
