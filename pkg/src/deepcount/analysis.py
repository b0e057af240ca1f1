"""Static cost analysis: per-layer FLOPs and parameter counts.

FLOPs follow the output-size convention ``H * W * C * K1 * K2 * C'``: one
multiply-accumulate per kernel tap per output element, bias and activation
excluded, the same formula for ordinary and transposed convolutions.
"""

import csv
import io
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal

KINDS = ("conv", "conv_transposed", "fully_connected")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    k1: int
    k2: int
    cin: int
    cout: int
    stride: int
    padding: int
    out_h: int
    out_w: int
    name: str = ""
    in_h: int = 0
    in_w: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        for f in ("k1", "k2", "cin", "cout", "stride", "out_h", "out_w"):
            if getattr(self, f) <= 0:
                raise ValueError(f"layer {self.name or self.kind}: {f} must be positive")

    @property
    def weight_shape(self):
        if self.kind == "fully_connected":
            return (self.cin, self.cout)
        return (self.k1, self.k2, self.cin, self.cout)

    @property
    def label(self):
        tag = {"conv": "Conv", "conv_transposed": "Conv-tr", "fully_connected": "Fc"}[self.kind]
        if self.kind == "fully_connected":
            return f"{tag} {self.cin}x{self.cout}"
        return f"{tag}-s{self.stride} {self.k1}x{self.k2}x{self.cin}x{self.cout}"


def flops(layer):
    return layer.out_h * layer.out_w * layer.cout * layer.k1 * layer.k2 * layer.cin


def params(layer):
    return layer.k1 * layer.k2 * layer.cin * layer.cout + layer.cout


def millions(value):
    """Millions, rounded half-up to an integer; sub-million values keep one significant digit."""
    d = Decimal(int(value)) / Decimal(10 ** 6)
    if d >= 1 or d == 0:
        return int(d.quantize(Decimal(1), rounding=ROUND_HALF_UP))
    exp = d.adjusted()
    return float(d.quantize(Decimal(1).scaleb(exp), rounding=ROUND_HALF_UP))


@dataclass
class CostReport:
    title: str
    layers: list

    @property
    def layer_flops(self):
        return [flops(l) for l in self.layers]

    @property
    def layer_params(self):
        return [params(l) for l in self.layers]

    @property
    def total_flops(self):
        return sum(self.layer_flops)

    @property
    def total_params(self):
        return sum(self.layer_params)

    @property
    def mflops(self):
        return [millions(f) for f in self.layer_flops]

    @property
    def total_mflops(self):
        return millions(self.total_flops)

    def to_text(self):
        rows = [("layer", "name", "output", "MFLOPs", "params")]
        for l, f, p in zip(self.layers, self.layer_flops, self.layer_params):
            rows.append((l.label, l.name, f"{l.out_h}x{l.out_w}x{l.cout}", str(millions(f)), str(p)))
        rows.append(("Total", "", "", str(self.total_mflops), str(self.total_params)))
        widths = [max(len(r[i]) for r in rows) for i in range(5)]
        lines = [self.title]
        for r in rows:
            lines.append("  ".join(c.ljust(w) if i < 3 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths))))
        return "\n".join(lines) + "\n"

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "name", "kind", "k1", "k2", "cin", "cout", "stride", "padding",
                    "out_h", "out_w", "flops", "mflops", "params"])
        for l, f, p in zip(self.layers, self.layer_flops, self.layer_params):
            w.writerow([l.label, l.name, l.kind, l.k1, l.k2, l.cin, l.cout, l.stride, l.padding,
                        l.out_h, l.out_w, f, millions(f), p])
        w.writerow(["Total", "", "", "", "", "", "", "", "", "", "", self.total_flops,
                    self.total_mflops, self.total_params])
        return buf.getvalue()


def report(layers, title="report"):
    return CostReport(title, list(layers))


# ---------------------------------------------------------------------------
# Hand-written full-scale layer tables (384x512 input).  These are kept
# independent of the network builder so the two can be cross-checked.
# ---------------------------------------------------------------------------

def _rows(rows):
    return [LayerSpec(*r) for r in rows]


# (kind, K1, K2, Cin, Cout, stride, padding, out_h, out_w)
PRESET_ROWS = {
    "vgg16-frontend": [
        ("conv", 3, 3, 3, 64, 1, 1, 384, 512),
        ("conv", 3, 3, 64, 64, 1, 1, 384, 512),
        ("conv", 3, 3, 64, 128, 1, 1, 192, 256),
        ("conv", 3, 3, 128, 128, 1, 1, 192, 256),
        ("conv", 3, 3, 128, 256, 1, 1, 96, 128),
        ("conv", 3, 3, 256, 256, 1, 1, 96, 128),
        ("conv", 3, 3, 256, 256, 1, 1, 96, 128),
        ("conv", 3, 3, 256, 512, 1, 1, 48, 64),
        ("conv", 3, 3, 512, 512, 1, 1, 48, 64),
        ("conv", 3, 3, 512, 512, 1, 1, 48, 64),
    ],
    # Dilation does not change the cost model, so CSRNet's dilated 3x3 convs
    # are listed as plain same-padded ones.
    "csrnet-backend": [
        ("conv", 3, 3, 512, 512, 1, 1, 48, 64),
        ("conv", 3, 3, 512, 512, 1, 1, 48, 64),
        ("conv", 3, 3, 512, 512, 1, 1, 48, 64),
        ("conv", 3, 3, 512, 256, 1, 1, 48, 64),
        ("conv", 3, 3, 256, 128, 1, 1, 48, 64),
        ("conv", 3, 3, 128, 64, 1, 1, 48, 64),
        ("conv", 1, 1, 64, 1, 1, 0, 48, 64),
    ],
    "deepcount-backend": [
        ("conv", 3, 3, 512, 256, 1, 1, 48, 64),
        ("conv", 3, 3, 256, 512, 2, 1, 24, 32),
        ("conv", 3, 3, 512, 256, 1, 1, 24, 32),
        ("conv", 3, 3, 256, 512, 2, 1, 12, 16),
        ("conv", 3, 3, 512, 256, 1, 1, 12, 16),
        ("conv", 3, 3, 256, 512, 2, 1, 6, 8),
        ("conv", 3, 3, 512, 256, 1, 1, 6, 8),
        ("conv", 3, 3, 256, 512, 2, 1, 3, 4),
        ("conv", 3, 3, 512, 256, 1, 1, 3, 4),
        ("conv", 3, 4, 256, 1024, 1, 0, 1, 1),
        ("fully_connected", 1, 1, 1024, 1, 1, 0, 1, 1),
    ],
    "branch1": [
        ("conv_transposed", 3, 4, 1024, 256, 1, 0, 3, 4),
        ("conv_transposed", 4, 4, 512, 256, 2, 1, 6, 8),
        ("conv_transposed", 4, 4, 512, 256, 2, 1, 12, 16),
        ("conv_transposed", 4, 4, 512, 256, 2, 1, 24, 32),
        ("conv_transposed", 4, 4, 512, 256, 2, 1, 48, 64),
        ("conv", 1, 1, 512, 1, 1, 0, 48, 64),
    ],
    "branch2": [
        ("conv_transposed", 3, 4, 1024, 256, 1, 0, 3, 4),
        ("conv_transposed", 4, 4, 512, 256, 2, 1, 6, 8),
        ("conv_transposed", 4, 4, 512, 256, 2, 1, 12, 16),
        ("conv_transposed", 4, 4, 512, 256, 2, 1, 24, 32),
        ("conv", 1, 1, 512, 1, 1, 0, 24, 32),
    ],
    "branch3": [
        ("conv_transposed", 3, 4, 1024, 256, 1, 0, 3, 4),
        ("conv_transposed", 4, 4, 512, 256, 2, 1, 6, 8),
        ("conv_transposed", 4, 4, 512, 256, 2, 1, 12, 16),
        ("conv", 1, 1, 512, 1, 1, 0, 12, 16),
    ],
    "branch4": [
        ("conv_transposed", 3, 4, 1024, 256, 1, 0, 3, 4),
        ("conv_transposed", 4, 4, 512, 256, 2, 1, 6, 8),
        ("conv", 1, 1, 512, 1, 1, 0, 6, 8),
    ],
    "branch5": [
        ("conv_transposed", 3, 4, 1024, 256, 1, 0, 3, 4),
        ("conv", 1, 1, 512, 1, 1, 0, 3, 4),
    ],
}

PRESETS = tuple(PRESET_ROWS)


def preset(name):
    try:
        rows = PRESET_ROWS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}") from None
    return report(_rows(rows), title=name)


def audit(model_or_spec, detached=False):
    """Cost report over the layers a model is (or would be) built from."""
    from .network import Model, layer_specs

    if isinstance(model_or_spec, Model):
        layers = list(model_or_spec.layers.values())
        title = "model"
    else:
        layers = layer_specs(model_or_spec, branches=not detached)
        title = "detached model" if detached else "model"
    return report(layers, title=title)
