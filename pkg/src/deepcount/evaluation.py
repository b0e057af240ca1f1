"""Tiled inference on arbitrary-size images and MAE/RMSE evaluation."""

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .network import Prediction
from .trainer import normalize_images


@dataclass(frozen=True)
class TilePlan:
    original_hw: tuple
    padded_hw: tuple
    tile_hw: tuple

    @property
    def grid(self):
        return self.padded_hw[0] // self.tile_hw[0], self.padded_hw[1] // self.tile_hw[1]

    def tiles(self):
        """``(row, col, y0, x0)`` for every tile in row-major order."""
        th, tw = self.tile_hw
        gr, gc = self.grid
        return [(r, c, r * th, c * tw) for r in range(gr) for c in range(gc)]


def plan_tiles(image_hw, tile_hw):
    h, w = (int(v) for v in image_hw)
    th, tw = (int(v) for v in tile_hw)
    if min(h, w, th, tw) <= 0:
        raise ValueError(f"extents must be positive, got image {image_hw} and tile {tile_hw}")
    ph = -(-h // th) * th
    pw = -(-w // tw) * tw
    return TilePlan((h, w), (ph, pw), (th, tw))


def pad_to_plan(image, plan):
    """Zero (black) pad on the right and bottom to the planned canvas."""
    h, w = plan.original_hw
    if image.shape[:2] != (h, w):
        raise ValueError(f"image shape {image.shape[:2]} does not match plan {plan.original_hw}")
    ph, pw = plan.padded_hw
    pad = [(0, ph - h), (0, pw - w)] + [(0, 0)] * (image.ndim - 2)
    return np.pad(image, pad)


def split_tiles(canvas, plan, factor=1):
    """Cut a padded canvas (or a map at 1/``factor`` resolution) into tiles."""
    th, tw = plan.tile_hw[0] // factor, plan.tile_hw[1] // factor
    return [canvas[r * th : (r + 1) * th, c * tw : (c + 1) * tw] for r, c, _, _ in plan.tiles()]


def merge_tiles(tiles, plan, factor=1):
    th, tw = plan.tile_hw[0] // factor, plan.tile_hw[1] // factor
    ph, pw = plan.padded_hw[0] // factor, plan.padded_hw[1] // factor
    first = np.asarray(tiles[0])
    out = np.zeros((ph, pw) + first.shape[2:], dtype=first.dtype)
    for (r, c, _, _), t in zip(plan.tiles(), tiles):
        out[r * th : (r + 1) * th, c * tw : (c + 1) * tw] = t
    return out


def parse_source(source):
    """``"backbone"`` -> 0, ``"branchK"`` -> K."""
    if source == "backbone":
        return 0
    if source.startswith("branch"):
        try:
            k = int(source[len("branch"):])
        except ValueError:
            k = -1
        if k >= 1:
            return k
    raise ValueError(f"source must be 'backbone' or 'branchK', got {source!r}")


def infer_count(model, image, plan=None, source="backbone"):
    """Count the heads in an ``H x W x 3`` image (values in [0, 1]).

    Tiles run one at a time so the total is the plain sum of single-tile
    results.  For a branch source the tile maps are merged on the padded
    canvas, cropped to the cells covering the original image, then summed.
    The backbone count over a padded canvas includes whatever the network
    predicts for the black padding.
    """
    k = parse_source(source)
    spec = model.spec
    if k > spec.depth:
        raise ValueError(f"source branch{k} beyond model depth {spec.depth}")
    if plan is None:
        plan = plan_tiles(image.shape[:2], spec.input_hw)
    if plan.tile_hw != spec.input_hw:
        raise ValueError(f"tile extent {plan.tile_hw} must equal model input {spec.input_hw}")
    canvas = normalize_images(pad_to_plan(np.asarray(image, dtype=np.float32), plan))
    h, w = plan.original_hw
    dtype = model.params["backbone.fc.weight"].dtype
    counts = []
    maps = []
    for tile in split_tiles(canvas, plan):
        pred = model.predict(tile[None].astype(dtype), branches=(k,) if k else ())
        counts.append(float(pred.count[0]))
        if k:
            maps.append(pred.density_maps[k][0])
    if not k:
        return Prediction(math.fsum(counts), {})
    factor = 2 ** (3 + k - 1)
    merged = merge_tiles(maps, plan, factor)
    cropped = merged[: -(-h // factor), : -(-w // factor)]
    return Prediction(math.fsum(cropped.ravel().tolist()), {k: cropped})


@dataclass
class EvalResult:
    ids: list
    predicted: np.ndarray
    ground_truth: np.ndarray
    mae: float
    rmse: float


def metrics(predicted, ground_truth):
    """Exactly rounded MAE and RMSE, independent of item order."""
    p = np.asarray(predicted, dtype=np.float64)
    g = np.asarray(ground_truth, dtype=np.float64)
    if p.shape != g.shape or p.size == 0:
        raise ValueError("need equal-length, nonempty prediction and ground-truth lists")
    err = (p - g).tolist()
    n = len(err)
    mae = math.fsum(abs(e) for e in err) / n
    rmse = math.sqrt(math.fsum(e * e for e in err) / n)
    return mae, rmse


def evaluate(model, dataset, source="backbone"):
    """``dataset`` holds objects with ``image``, ``count`` and ``name``."""
    if not dataset:
        raise ValueError("cannot evaluate on an empty dataset")
    ids, preds, gts = [], [], []
    for s in dataset:
        pred = infer_count(model, s.image, source=source)
        ids.append(s.name)
        preds.append(float(pred.count))
        gts.append(float(s.count))
    mae, rmse = metrics(preds, gts)
    return EvalResult(ids, np.asarray(preds), np.asarray(gts), mae, rmse)


def write_eval_csv(path, result):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["image_id", "gt_count", "pred_count", "abs_err"])
        for i, p, g in zip(result.ids, result.predicted, result.ground_truth):
            w.writerow([i, repr(float(g)), repr(float(p)), repr(abs(float(p) - float(g)))])
        w.writerow(["MAE", "", "", repr(result.mae)])
        w.writerow(["RMSE", "", "", repr(result.rmse)])


def upsample_display(density, target_hw, smooth_sigma=None):
    """Bilinear up-sampling for display, mass-preserving, then separable Gaussian smoothing."""
    src = np.asarray(density, dtype=np.float64)
    sh, sw = src.shape
    th, tw = target_hw
    if th < sh or tw < sw:
        raise ValueError(f"target {target_hw} smaller than source {src.shape}")
    if (th, tw) == (sh, sw):
        up = src.copy()
    else:
        up = ndimage.zoom(src, (th / sh, tw / sw), order=1, mode="nearest", grid_mode=True)
        up *= (sh * sw) / (th * tw)
    if smooth_sigma is None:
        smooth_sigma = max(th / sh, tw / sw) / 2.0
    # reflect mode keeps mass from leaking out at the borders
    return ndimage.gaussian_filter(up, smooth_sigma, mode="reflect")
