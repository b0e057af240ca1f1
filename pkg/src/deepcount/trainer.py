"""Gradient-fusion training: the multi-term L1 objective, SGD with momentum
and split learning rates, and the branch-ablation protocol.

The objective for a batch of N images is::

    L = omega / (2N) * sum_n sum_k B(k) * sum_ij |y_nk - f_k(X_n)|_ij + lambda/2 * ||W||^2

where k runs over the live branches plus the global count, ``B(count) = beta``
and ``B(branch) = 1``.  Every term back-propagates into the shared backbone;
the per-term gradients simply add up in the parameter buffers.
"""

import csv
import logging
import math
import os
import time
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import tensor as T
from .density import branch_levels, pool2
from .formats import format_key_values, parse_key_values
from .network import branch_of, build

log = logging.getLogger(__name__)

IMAGE_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
IMAGE_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)


def normalize_images(images):
    """ImageNet-style per-channel standardization of images in [0, 1]."""
    return (np.asarray(images, dtype=np.float32) - IMAGE_MEAN) / IMAGE_STD


@dataclass
class TrainConfig:
    lambda_: float = 1e-5
    omega: float = 1e-2
    beta: float = 16.0
    alpha: float = 0.2
    lr: float = 1e-4
    momentum: float = 0.9
    batch_size: int = 32
    epochs: int = 100
    ablated_branches: frozenset = frozenset()
    activation_mode: str = "prelu"
    seed: int = 0
    fusion: str = "graph"
    augment: bool = True

    def __post_init__(self):
        self.ablated_branches = frozenset(int(k) for k in self.ablated_branches)
        if self.lambda_ < 0:
            raise ValueError("lambda must be nonnegative")
        for name in ("omega", "beta", "lr"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.activation_mode not in ("prelu", "relu"):
            raise ValueError(f"unknown activation mode {self.activation_mode!r}")
        if self.fusion not in ("graph", "terms"):
            raise ValueError(f"fusion must be 'graph' or 'terms', got {self.fusion!r}")

    @classmethod
    def desk(cls, **kw):
        """Settings for the 96x128, 1/8-channel, depth-3 laboratory model."""
        base = dict(lr=2e-3, batch_size=8, epochs=50)
        base.update(kw)
        return cls(**base)

    def check_depth(self, depth):
        bad = sorted(k for k in self.ablated_branches if not 1 <= k <= depth)
        if bad:
            raise ValueError(f"ablated branches {bad} outside 1..{depth}")

    # -- key=value files ---------------------------------------------------

    def to_text(self):
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "ablated_branches":
                v = ",".join(str(k) for k in sorted(v))
            out[_key(f.name)] = v
        return format_key_values(out)

    @classmethod
    def from_text(cls, text, source="<config>"):
        return cls.from_mapping(parse_key_values(text, source), source)

    @classmethod
    def from_mapping(cls, pairs, source="<config>", base=None):
        kinds = {_key(f.name): f for f in fields(cls)}
        kw = {}
        for key, raw in pairs.items():
            f = kinds.get(key)
            if f is None:
                raise ValueError(f"{source}: unknown config key {key!r}")
            kw[f.name] = _coerce(f, raw, source)
        if base is not None:
            return replace(base, **kw)
        return cls(**kw)


def _key(name):
    return "lambda" if name == "lambda_" else name


def _coerce(f, raw, source):
    if not isinstance(raw, str):
        return raw
    try:
        if f.name == "ablated_branches":
            return frozenset(int(p) for p in raw.split(",") if p.strip())
        if f.type in ("int", int):
            return int(raw)
        if f.type in ("float", float):
            return float(raw)
        if f.type in ("bool", bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
    except ValueError:
        raise ValueError(f"{source}: bad value {raw!r} for {_key(f.name)}") from None
    return raw


@dataclass
class OptimizerState:
    velocity: dict = field(default_factory=dict)

    @classmethod
    def for_model(cls, model):
        return cls({n: np.zeros_like(p.data) for n, p in model.params.items()})


# ---------------------------------------------------------------------------
# Samples and batches
# ---------------------------------------------------------------------------

@dataclass
class Sample:
    """One training image with its full-resolution density map."""

    image: np.ndarray  # H x W x 3 in [0, 1]
    density: np.ndarray  # H x W
    count: float
    name: str = ""


@dataclass
class Batch:
    images: np.ndarray  # N x H x W x 3, normalized
    maps: list  # per branch (finest first): N x h_k x w_k
    counts: np.ndarray  # N


def _pooled(density, levels):
    out = {}
    cur = density
    for n in range(1, max(levels) + 1):
        cur = pool2(cur)
        if n in levels:
            out[n] = cur
    return out


def make_batch(samples, spec, rng=None, augment=False):
    """Assemble crops/mirrors of ``samples`` into network inputs and targets."""
    h, w = spec.input_hw
    levels = branch_levels(spec.depth)
    images, counts = [], []
    maps = [[] for _ in levels]
    for s in samples:
        img, den = s.image, s.density
        H, W = den.shape
        if H < h or W < w:
            raise ValueError(f"sample {s.name!r} is {H}x{W}, smaller than the {h}x{w} input")
        cropped = (H, W) != (h, w)
        if cropped:
            if rng is None:
                y0, x0 = 0, 0
            else:
                y0 = int(rng.integers(0, H - h + 1))
                x0 = int(rng.integers(0, W - w + 1))
            img = img[y0 : y0 + h, x0 : x0 + w]
            den = den[y0 : y0 + h, x0 : x0 + w]
        if augment and rng is not None and rng.random() < 0.5:
            img = img[:, ::-1]
            den = den[:, ::-1]
        pooled = _pooled(np.ascontiguousarray(den), levels)
        images.append(img)
        counts.append(float(den.sum()) if cropped else float(s.count))
        for i, n in enumerate(levels):
            maps[i].append(pooled[n])
    return Batch(normalize_images(np.stack(images)), [np.stack(m) for m in maps], np.asarray(counts))


# ---------------------------------------------------------------------------
# Objective
# ---------------------------------------------------------------------------

@dataclass
class LossResult:
    total: T.Tensor
    terms: dict  # name -> scalar Tensor, in fixed order
    count_pred: np.ndarray
    branch_integrals: dict  # k -> N-vector of predicted map sums

    @property
    def breakdown(self):
        return {k: v.item() for k, v in self.terms.items()}


def live_branches(depth, cfg):
    return [k for k in range(1, depth + 1) if k not in cfg.ablated_branches]


def live_parameters(model, cfg):
    return [p for n, p in model.params.items()
            if branch_of(n) is None or branch_of(n) not in cfg.ablated_branches]


def loss(model, batch, cfg):
    """Forward pass plus every objective term.  Ablated branches are not evaluated."""
    spec = model.spec
    cfg.check_depth(spec.depth)
    n = batch.images.shape[0]
    if len(batch.maps) != spec.depth:
        raise ValueError(f"batch has {len(batch.maps)} target maps; model has {spec.depth} branches")
    if batch.counts.shape != (n,):
        raise ValueError(f"counts shape {batch.counts.shape} does not match batch size {n}")
    dtype = model.params["backbone.fc.weight"].dtype
    images = T.Tensor(batch.images.astype(dtype, copy=False))
    count, taps, bottleneck = model.forward_backbone(images)
    terms = {}
    integrals = {}
    unit = cfg.omega / (2.0 * n)
    for k in live_branches(spec.depth, cfg):
        pred = model.forward_branch(k, bottleneck, taps)
        pred = T.reshape(pred, pred.shape[:3])
        target = batch.maps[k - 1].astype(dtype, copy=False)
        terms[f"branch{k}"] = T.scale(T.l1_loss(pred, target), unit)
        integrals[k] = pred.data.reshape(n, -1).sum(axis=1)
    counts = batch.counts.astype(dtype).reshape(n, 1)
    terms["count"] = T.scale(T.l1_loss(count, counts), unit * cfg.beta)
    if cfg.lambda_ > 0:
        weights = [p for p in live_parameters(model, cfg) if p.name.endswith(".weight")]
        terms["l2"] = T.scale(T.add(*[T.sum_squares(p) for p in weights]), cfg.lambda_ / 2.0)
    for name, t in terms.items():
        if not np.isfinite(t.data).all():
            raise FloatingPointError(f"non-finite loss term {name}: {t.item()}")
    total = T.add(*terms.values())
    return LossResult(total, terms, count.data[:, 0].copy(), integrals)


def compute_gradients(model, batch, cfg):
    """Zero gradients, evaluate the loss and back-propagate it.

    With ``cfg.fusion == "terms"`` each term is back-propagated on its own
    and the results accumulate into the shared buffers, so a parameter's
    gradient is literally the sum of its per-term gradients.
    """
    model.zero_grad()
    res = loss(model, batch, cfg)
    if cfg.fusion == "terms":
        for t in res.terms.values():
            T.backward(t)
    else:
        T.backward(res.total)
    return res


def step(model, state, cfg):
    """``v <- momentum * v + g;  theta <- theta - lr * scale * v``."""
    for name, p in model.params.items():
        if p.grad is None:
            raise ValueError(f"missing gradient for parameter {name}")
        v = state.velocity.get(name)
        if v is None or v.shape != p.shape:
            raise ValueError(f"optimizer state has no velocity matching {name}")
        v *= cfg.momentum
        v += p.grad
        p.data -= (cfg.lr * p.learn_rate_scale) * v


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainingLog:
    epochs: list = field(default_factory=list)

    def losses(self):
        return [e["total_loss"] for e in self.epochs]


LOG_FIXED = ("epoch", "total_loss")


def _log_columns(depth):
    terms = [f"term_branch{k}" for k in range(1, depth + 1)] + ["term_count", "term_l2"]
    maes = ["mae_backbone"] + [f"mae_branch{k}" for k in range(1, depth + 1)]
    return list(LOG_FIXED) + terms + ["lr", "wall_seconds"] + maes


def append_log_row(path, row, depth):
    cols = _log_columns(depth)
    new = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, restval="", extrasaction="ignore", lineterminator="\n")
        if new:
            w.writeheader()
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def train(model, dataset, cfg, log_path=None, on_epoch=None):
    """Train ``model`` in place on a list of :class:`Sample`; returns a :class:`TrainingLog`."""
    spec = model.spec
    cfg.check_depth(spec.depth)
    if not dataset:
        raise ValueError("empty training set")
    if cfg.activation_mode != spec.activation_mode or cfg.alpha != spec.alpha:
        raise ValueError(
            f"config activation {cfg.activation_mode}({cfg.alpha}) does not match model "
            f"{spec.activation_mode}({spec.alpha})"
        )
    rng = np.random.default_rng(cfg.seed)
    state = OptimizerState.for_model(model)
    history = TrainingLog()
    model.unfreeze()
    start = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(dataset))
        sums = {}
        total = 0.0
        steps = 0
        abs_err = {"backbone": 0.0}
        for lo in range(0, len(order), cfg.batch_size):
            chunk = [dataset[i] for i in order[lo : lo + cfg.batch_size]]
            batch = make_batch(chunk, spec, rng, augment=cfg.augment)
            res = compute_gradients(model, batch, cfg)
            step(model, state, cfg)
            steps += 1
            total += res.total.item()
            for k, v in res.breakdown.items():
                sums[k] = sums.get(k, 0.0) + v
            abs_err["backbone"] += float(np.abs(res.count_pred - batch.counts).sum())
            for k, integ in res.branch_integrals.items():
                key = f"branch{k}"
                abs_err[key] = abs_err.get(key, 0.0) + float(np.abs(integ - batch.counts).sum())
        row = {"epoch": epoch, "total_loss": total / steps, "lr": cfg.lr,
               "wall_seconds": time.perf_counter() - start}
        for k, v in sums.items():
            row[f"term_{k}"] = v / steps
        for k, v in abs_err.items():
            row[f"mae_{k}"] = v / len(dataset)
        history.epochs.append(row)
        log.info("epoch %d loss %.5g mae %.4g", epoch, row["total_loss"], row["mae_backbone"])
        if log_path is not None:
            append_log_row(log_path, row, spec.depth)
        if on_epoch is not None:
            on_epoch(row)
    return history


@dataclass
class AblationRow:
    label: str
    ablated: frozenset
    mae: float
    rmse: float


def ablation_label(a, depth):
    if a == 0:
        return "No ablation"
    if a == 1:
        return "Branch 1 ablated"
    return f"Branch 1-{a} ablated"


def ablation_suite(train_set, eval_set, spec, cfg, seed=0):
    """Retrain with branches removed cumulatively from the finest one."""
    from .evaluation import evaluate

    rows = []
    for a in range(spec.depth + 1):
        ablated = frozenset(range(1, a + 1))
        model = build(spec, seed=seed)
        train(model, train_set, replace(cfg, ablated_branches=ablated))
        model.freeze()
        res = evaluate(model, eval_set, "backbone")
        rows.append(AblationRow(ablation_label(a, spec.depth), ablated, res.mae, res.rmse))
        log.info("%s: MAE %.4g", rows[-1].label, res.mae)
    return rows


def mean_count_baseline(train_set, eval_set):
    """MAE of always predicting the training-set mean count."""
    mean = math.fsum(s.count for s in train_set) / len(train_set)
    return math.fsum(abs(s.count - mean) for s in eval_set) / len(eval_set)
