"""Ground-truth density maps: head splatting, sum-pooled pyramids, SNR law."""

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels

DEFAULT_SIGMA = 5.0
TRUNCATE = 4.0


@dataclass
class AnnotatedImage:
    width: int
    height: int
    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    image: np.ndarray = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        self.points = pts
        if pts.size:
            bad = (pts[:, 0] < 0) | (pts[:, 0] >= self.width) | (pts[:, 1] < 0) | (pts[:, 1] >= self.height)
            if bad.any():
                x, y = pts[np.argmax(bad)]
                raise ValueError(f"head point ({x}, {y}) outside {self.width}x{self.height} image")
        if self.image is not None and self.image.shape[:2] != (self.height, self.width):
            raise ValueError(f"image shape {self.image.shape} does not match {self.height}x{self.width}")

    @property
    def count(self):
        return len(self.points)

    def padded(self, multiple):
        """Same annotations on a zero-padded canvas rounded up to ``multiple``."""
        h = -(-self.height // multiple) * multiple
        w = -(-self.width // multiple) * multiple
        img = None
        if self.image is not None:
            img = np.zeros((h, w) + self.image.shape[2:], dtype=self.image.dtype)
            img[: self.height, : self.width] = self.image
        return AnnotatedImage(w, h, self.points.copy(), img)

    def to_json(self):
        return {"width": int(self.width), "height": int(self.height), "points": self.points.tolist()}

    @classmethod
    def from_json(cls, doc):
        try:
            return cls(int(doc["width"]), int(doc["height"]), doc.get("points", []))
        except KeyError as exc:
            raise ValueError(f"annotation document missing field {exc}") from None


def load_annotation(path):
    with open(path) as fh:
        return AnnotatedImage.from_json(json.load(fh))


def save_annotation(ann, path):
    with open(path, "w") as fh:
        json.dump(ann.to_json(), fh)


def splat_gaussian(ann, sigma=DEFAULT_SIGMA):
    """Full-resolution density map with one unit-mass fixed Gaussian per head.

    Each head is split bilinearly over its four nearest pixel centers, blurred
    by a Gaussian truncated at ``4*sigma``, clipped to the image and rescaled
    so it still sums to exactly one.
    """
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    radius = int(math.ceil(TRUNCATE * sigma))
    pts = ann.points
    xs = np.ascontiguousarray(pts[:, 0])
    ys = np.ascontiguousarray(pts[:, 1])
    return _kernels.splat(xs, ys, int(ann.height), int(ann.width), float(sigma), radius)


def pool2(a):
    """2x2 sum pooling of a plain 2-D array."""
    h, w = a.shape
    if h % 2 or w % 2:
        raise ValueError(f"sum pooling needs even extents, got {h}x{w}")
    return a.reshape(h // 2, 2, w // 2, 2).sum(axis=(1, 3))


@dataclass
class DensityPyramid:
    levels: list
    head_count: float

    @property
    def depth(self):
        return len(self.levels) - 1

    def flipped(self):
        """Horizontal mirror; commutes with sum pooling."""
        return DensityPyramid([lv[:, ::-1].copy() for lv in self.levels], self.head_count)


def max_levels(height, width):
    n = 0
    while height % 2 == 0 and width % 2 == 0:
        height //= 2
        width //= 2
        n += 1
    return n


def build_pyramid(base, levels, head_count=None):
    base = np.asarray(base, dtype=np.float64)
    h, w = base.shape
    m = 2 ** levels
    if h % m or w % m:
        raise ValueError(
            f"density map {h}x{w} is not divisible by 2^{levels}={m}; "
            "pad the annotations/image to a multiple of that size first"
        )
    out = [base]
    for _ in range(levels):
        out.append(pool2(out[-1]))
    if head_count is None:
        head_count = float(base.sum())
    return DensityPyramid(out, float(head_count))


def pyramid_from_annotation(ann, levels, sigma=DEFAULT_SIGMA):
    return build_pyramid(splat_gaussian(ann, sigma), levels, head_count=ann.count)


def branch_levels(depth):
    """Pyramid levels supervising branches 1..depth (finest first)."""
    return [3 + k for k in range(depth)]


def training_targets(pyr, input_hw, depth=5):
    """Branch target maps (finest first) plus the global count."""
    h, w = input_hw
    if pyr.levels[0].shape != (h, w):
        raise ValueError(f"pyramid base {pyr.levels[0].shape} does not match input {h}x{w}")
    need = branch_levels(depth)
    if need[-1] > pyr.depth:
        raise ValueError(f"pyramid has {pyr.depth} pooling levels; branch targets need {need[-1]}")
    return [pyr.levels[n] for n in need], pyr.head_count


# ---------------------------------------------------------------------------
# SNR of pixelated maps
# ---------------------------------------------------------------------------

@dataclass
class SNRModel:
    mu0: float
    sigma0: float
    signal_var: float = 0.0  # spread of the per-pixel signal; does not enter the SNR law

    def __post_init__(self):
        if not self.sigma0 > 0:
            raise ValueError(f"sigma0 must be positive, got {self.sigma0}")
        if self.signal_var < 0:
            raise ValueError(f"signal_var must be nonnegative, got {self.signal_var}")

    @property
    def C(self):
        return self.mu0 ** 2 / self.sigma0 ** 2

    def analytic_snr(self, level):
        return self.C * 4.0 ** level


@dataclass
class PixelationStats:
    """Per-level Monte-Carlo estimates; index 0 is the unpooled map."""

    mean: np.ndarray
    noise_var: np.ndarray
    snr: np.ndarray

    def ratios(self, which="snr"):
        v = getattr(self, which)
        return v[1:] / v[:-1]


def pixelation_stats(model, levels, trials, seed=0, chunk=None):
    """Simulate signal-plus-noise patches and pool them ``levels`` times.

    Each trial draws a ``2^levels x 2^levels`` patch of i.i.d. pixels; every
    level's cells across all trials feed the mean and noise-variance estimates.
    """
    if trials < 2:
        raise ValueError("need at least two trials to estimate a variance")
    rng = np.random.default_rng(seed)
    side = 2 ** levels
    if chunk is None:
        chunk = max(1, min(trials, 2 ** 22 // (side * side)))
    s1 = np.zeros(levels + 1)
    n1 = np.zeros(levels + 1)
    e1 = np.zeros(levels + 1)
    e2 = np.zeros(levels + 1)
    done = 0
    sd = math.sqrt(model.signal_var)
    while done < trials:
        t = min(chunk, trials - done)
        signal = model.mu0 + sd * rng.standard_normal((t, side, side)) if sd else np.full((t, side, side), model.mu0)
        noise = model.sigma0 * rng.standard_normal((t, side, side))
        for n in range(levels + 1):
            obs = signal + noise
            s1[n] += obs.sum()
            n1[n] += obs.size
            e1[n] += noise.sum()
            e2[n] += np.vdot(noise, noise)
            if n < levels:
                k = signal.shape[1] // 2
                signal = signal.reshape(t, k, 2, k, 2).sum(axis=(2, 4))
                noise = noise.reshape(t, k, 2, k, 2).sum(axis=(2, 4))
        done += t
    mean = s1 / n1
    nmean = e1 / n1
    noise_var = (e2 / n1 - nmean ** 2) * n1 / (n1 - 1)
    return PixelationStats(mean, noise_var, mean ** 2 / noise_var)


def simulate_snr(model, levels, trials, seed=0):
    """Empirical SNR per pixelation level (length ``levels + 1``)."""
    return list(pixelation_stats(model, levels, trials, seed).snr)
