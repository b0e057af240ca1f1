"""The DeepCount topology: a down-sampling count regressor (backbone) plus
detachable up-sampling density branches.

At full scale the backbone maps a 384x512x3 image through a VGG-16-shaped
frontend (10 convs, 1/8 reduction) to 48x64x512, then alternates stride-1
"tap" convs (512->256) and stride-2 "down" convs (256->512) until 3x4, then a
3x4 valid conv to 1x1x1024 and a 1024->1 fully connected layer.  Branch k
starts from the 1x1x1024 bottleneck, up-samples with one 3x4 transposed conv
and ``depth - k`` stride-2 transposed convs, appending the matching backbone
tap after each, and ends in a 1x1 conv producing a single-channel map.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .analysis import LayerSpec
from .tensor import Parameter

VGG_FRONTEND = (64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512)
FRONTEND_LR_SCALE = 0.5
ACTIVATIONS = ("prelu", "relu")


def scaled(channels, scale):
    return max(1, int(round(channels * scale)))


@dataclass(frozen=True)
class NetworkSpec:
    input_hw: tuple = (384, 512)
    depth: int = 5
    channel_scale: float = 1.0
    activation_mode: str = "prelu"
    alpha: float = 0.2
    frontend_activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "input_hw", tuple(int(v) for v in self.input_hw))
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if not 0 < self.channel_scale <= 1:
            raise ValueError(f"channel_scale must lie in (0, 1], got {self.channel_scale}")
        for mode in (self.activation_mode, self.frontend_activation):
            if mode not in ACTIVATIONS:
                raise ValueError(f"activation mode must be one of {ACTIVATIONS}, got {mode!r}")
        m = 2 ** (self.depth + 2)
        h, w = self.input_hw
        if h % m or w % m:
            raise ValueError(
                f"input {h}x{w} must be divisible by 2^(depth+2)={m} for depth {self.depth}"
            )

    @classmethod
    def full(cls, **kw):
        return cls(**kw)

    @classmethod
    def desk(cls, **kw):
        kw.setdefault("input_hw", (96, 128))
        kw.setdefault("depth", 3)
        kw.setdefault("channel_scale", 1 / 8)
        return cls(**kw)

    @property
    def bottleneck_hw(self):
        m = 2 ** (self.depth + 2)
        return self.input_hw[0] // m, self.input_hw[1] // m

    def tap_hw(self, i):
        """Spatial extent of backbone tap ``i`` (1-based, finest first)."""
        m = 2 ** (3 + i - 1)
        return self.input_hw[0] // m, self.input_hw[1] // m

    def branch_hw(self, k):
        return self.tap_hw(k)

    def c(self, channels):
        return scaled(channels, self.channel_scale)


def _chain_error(name, what, got, want):
    raise ValueError(f"layer {name}: {what} is {got}, expected {want}")


def layer_specs(spec, branches=True):
    """Every learnable layer in build order, with dimensions checked as they chain."""
    layers = []
    h, w = spec.input_hw
    c = 3
    block, idx = 1, 1
    for entry in VGG_FRONTEND:
        if entry == "M":
            if h % 2 or w % 2:
                _chain_error(f"frontend.pool{block}", "input extent", (h, w), "even extents")
            h, w = h // 2, w // 2
            block, idx = block + 1, 1
            continue
        cout = spec.c(entry)
        layers.append(LayerSpec("conv", 3, 3, c, cout, 1, 1, h, w, f"frontend.conv{block}_{idx}", h, w))
        c = cout
        idx += 1

    for i in range(1, spec.depth + 1):
        if (h, w) != spec.tap_hw(i):
            _chain_error(f"backbone.tap{i}", "input extent", (h, w), spec.tap_hw(i))
        layers.append(LayerSpec("conv", 3, 3, c, spec.c(256), 1, 1, h, w, f"backbone.tap{i}", h, w))
        c = spec.c(256)
        if i < spec.depth:
            oh, ow = T.conv_output_extent(h, 3, 2, 1), T.conv_output_extent(w, 3, 2, 1)
            layers.append(LayerSpec("conv", 3, 3, c, spec.c(512), 2, 1, oh, ow, f"backbone.down{i}", h, w))
            h, w, c = oh, ow, spec.c(512)
    k1, k2 = spec.bottleneck_hw
    if (h, w) != (k1, k2):
        _chain_error("backbone.bottleneck", "input extent", (h, w), (k1, k2))
    layers.append(LayerSpec("conv", k1, k2, c, spec.c(1024), 1, 0, 1, 1, "backbone.bottleneck", h, w))
    layers.append(LayerSpec("fully_connected", 1, 1, spec.c(1024), 1, 1, 0, 1, 1, "backbone.fc", 1, 1))

    if branches:
        for k in range(1, spec.depth + 1):
            layers.extend(_branch_specs(spec, k))
    return layers


def _branch_specs(spec, k):
    out = []
    h, w = spec.bottleneck_hw
    tap_c = spec.c(256)
    oh = T.conv_transposed_output_extent(1, h, 1, 0)
    ow = T.conv_transposed_output_extent(1, w, 1, 0)
    out.append(LayerSpec("conv_transposed", h, w, spec.c(1024), spec.c(256), 1, 0, oh, ow, f"branch{k}.up0", 1, 1))
    c = spec.c(256) + tap_c
    tap = spec.depth
    if (oh, ow) != spec.tap_hw(tap):
        _chain_error(f"branch{k}.up0", "output extent", (oh, ow), spec.tap_hw(tap))
    for j in range(1, spec.depth - k + 1):
        nh = T.conv_transposed_output_extent(oh, 4, 2, 1)
        nw = T.conv_transposed_output_extent(ow, 4, 2, 1)
        out.append(LayerSpec("conv_transposed", 4, 4, c, spec.c(256), 2, 1, nh, nw, f"branch{k}.up{j}", oh, ow))
        tap -= 1
        if (nh, nw) != spec.tap_hw(tap):
            _chain_error(f"branch{k}.up{j}", "output extent", (nh, nw), spec.tap_hw(tap))
        oh, ow = nh, nw
        c = spec.c(256) + tap_c
    out.append(LayerSpec("conv", 1, 1, c, 1, 1, 0, oh, ow, f"branch{k}.head", oh, ow))
    return out


def branch_of(name):
    """Branch index owning a parameter name, or ``None`` for backbone parameters."""
    head = name.split(".", 1)[0]
    if head.startswith("branch"):
        return int(head[len("branch"):])
    return None


@dataclass
class Prediction:
    count: np.ndarray
    density_maps: dict = field(default_factory=dict)


class BranchUnavailable(RuntimeError):
    pass


class Model:
    """Parameters plus the forward passes of one DeepCount network."""

    def __init__(self, spec, layers, params, has_branches=True):
        self.spec = spec
        self.layers = {l.name: l for l in layers}
        self.params = params
        self.has_branches = has_branches

    @property
    def frontend_names(self):
        return [n for n in self.params if n.startswith("frontend.")]

    def parameters(self):
        return list(self.params.values())

    def num_parameters(self, group=None):
        return sum(
            p.size for n, p in self.params.items()
            if group is None or n.startswith(group)
        )

    def state_dict(self):
        return {n: p.data for n, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def freeze(self):
        """Drop gradient tracking; a frozen model is safe for concurrent forward passes."""
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None
        return self

    def unfreeze(self):
        for p in self.params.values():
            p.requires_grad = True
        return self

    # -- forward -----------------------------------------------------------

    def _conv(self, x, name, act):
        layer = self.layers[name]
        wt, b = self.params[name + ".weight"], self.params[name + ".bias"]
        if layer.kind == "conv_transposed":
            y = T.conv2d_transposed(x, wt, b, layer.stride, layer.padding)
        else:
            y = T.conv2d(x, wt, b, layer.stride, layer.padding)
        if act is None:
            return y
        return T.activation(y, act, self.spec.alpha)

    def forward_backbone(self, image):
        """Return ``(count, taps, bottleneck)``; count has shape ``(N, 1)``."""
        x = image if isinstance(image, T.Tensor) else T.Tensor(image)
        h, w = self.spec.input_hw
        if x.data.ndim != 4 or x.shape[1:] != (h, w, 3):
            raise ValueError(f"expected images of shape (N, {h}, {w}, 3), got {x.shape}")
        f_act = self.spec.frontend_activation
        act = self.spec.activation_mode
        block, idx = 1, 1
        for entry in VGG_FRONTEND:
            if entry == "M":
                x = T.max_pool2(x)
                block, idx = block + 1, 1
                continue
            x = self._conv(x, f"frontend.conv{block}_{idx}", f_act)
            idx += 1
        taps = []
        for i in range(1, self.spec.depth + 1):
            t = self._conv(x, f"backbone.tap{i}", act)
            taps.append(t)
            if i < self.spec.depth:
                x = self._conv(t, f"backbone.down{i}", act)
        bottleneck = self._conv(taps[-1], "backbone.bottleneck", act)
        flat = T.reshape(bottleneck, (bottleneck.shape[0], bottleneck.shape[3]))
        count = T.fully_connected(flat, self.params["backbone.fc.weight"], self.params["backbone.fc.bias"])
        return count, taps, bottleneck

    def forward_branch(self, k, bottleneck, taps):
        """Density map of branch ``k`` with shape ``(N, h_k, w_k, 1)``."""
        if not self.has_branches:
            raise BranchUnavailable("branch unavailable: model has been detached from its branches")
        if not 1 <= k <= self.spec.depth:
            raise ValueError(f"branch index {k} outside 1..{self.spec.depth}")
        if len(taps) != self.spec.depth:
            raise ValueError(f"expected {self.spec.depth} taps, got {len(taps)}")
        for i, t in enumerate(taps, 1):
            want = self.spec.tap_hw(i)
            if t.shape[1:3] != want or t.shape[0] != bottleneck.shape[0]:
                raise ValueError(f"stale tap {i}: shape {t.shape} does not match {want} / batch {bottleneck.shape[0]}")
        act = self.spec.activation_mode
        y = self._conv(bottleneck, f"branch{k}.up0", act)
        tap = self.spec.depth
        y = T.concat_channels(y, taps[tap - 1])
        for j in range(1, self.spec.depth - k + 1):
            y = self._conv(y, f"branch{k}.up{j}", act)
            tap -= 1
            y = T.concat_channels(y, taps[tap - 1])
        return self._conv(y, f"branch{k}.head", None)

    def predict(self, images, branches=()):
        count, taps, bottleneck = self.forward_backbone(images)
        maps = {}
        for k in branches:
            maps[k] = self.forward_branch(k, bottleneck, taps).data[..., 0]
        return Prediction(count.data[:, 0], maps)

    def detach_branches(self):
        """Backbone-only inference model; parameters are copied."""
        keep = [l for l in self.layers.values() if branch_of(l.name) is None]
        params = {}
        for n, p in self.params.items():
            if branch_of(n) is None:
                q = Parameter(n, p.data.copy(), p.learn_rate_scale)
                q.requires_grad = p.requires_grad
                params[n] = q
        return Model(self.spec, keep, params, has_branches=False)


def _xavier(rng, layer, dtype):
    if layer.kind == "fully_connected":
        fan_in, fan_out = layer.cin, layer.cout
    else:
        rf = layer.k1 * layer.k2
        fan_in, fan_out = rf * layer.cin, rf * layer.cout
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=layer.weight_shape).astype(dtype)


def build(spec, seed=0, dtype=np.float32, branches=True):
    """Xavier-uniform weights, zero biases, deterministic under ``seed``.

    Parameters are drawn in a fixed layer order with the backbone first, so
    the backbone of a branchless build equals that of a full one.
    """
    layers = layer_specs(spec, branches=branches)
    rng = np.random.default_rng(seed)
    params = {}
    for layer in layers:
        lr = FRONTEND_LR_SCALE if layer.name.startswith("frontend.") else 1.0
        params[layer.name + ".weight"] = Parameter(layer.name + ".weight", _xavier(rng, layer, dtype), lr)
        params[layer.name + ".bias"] = Parameter(layer.name + ".bias", np.zeros(layer.cout, dtype=dtype), lr)
    return Model(spec, layers, params, has_branches=branches)


def spec_from_shapes(shapes, activation_mode="prelu", alpha=0.2, frontend_activation="relu"):
    """Recover the structural spec from ``{name: shape}`` of a saved model."""
    try:
        depth = sum(1 for n in shapes if n.startswith("backbone.tap") and n.endswith(".weight"))
        k1, k2, _, c1024 = shapes["backbone.bottleneck.weight"]
    except (KeyError, ValueError):
        raise ValueError("weights do not describe a DeepCount backbone") from None
    m = 2 ** (depth + 2)
    spec = NetworkSpec((k1 * m, k2 * m), depth, c1024 / 1024, activation_mode, alpha, frontend_activation)
    for layer in layer_specs(spec, branches=False):
        got = tuple(shapes.get(layer.name + ".weight", ()))
        if got != layer.weight_shape:
            spec = None
            break
    if spec is None:
        raise ValueError("weight shapes do not match any DeepCount configuration")
    return spec


def from_state(state, activation_mode="prelu", alpha=0.2, frontend_activation="relu", dtype=np.float32):
    """Rebuild a model from a name -> array mapping (e.g. a decoded DCWT file)."""
    spec = spec_from_shapes({n: a.shape for n, a in state.items()}, activation_mode, alpha, frontend_activation)
    has_branches = any(branch_of(n) is not None for n in state)
    layers = layer_specs(spec, branches=has_branches)
    params = {}
    for layer in layers:
        for suffix in (".weight", ".bias"):
            name = layer.name + suffix
            if name not in state:
                raise ValueError(f"missing parameter {name}")
            want = layer.weight_shape if suffix == ".weight" else (layer.cout,)
            if tuple(state[name].shape) != want:
                raise ValueError(f"parameter {name} has shape {state[name].shape}, expected {want}")
            lr = FRONTEND_LR_SCALE if name.startswith("frontend.") else 1.0
            params[name] = Parameter(name, np.array(state[name], dtype=dtype), lr)
    extra = set(state) - set(params)
    if extra:
        raise ValueError(f"unexpected parameters: {sorted(extra)[:5]}")
    return Model(spec, layers, params, has_branches=has_branches)


def with_activation(spec, mode):
    return replace(spec, activation_mode=mode)
