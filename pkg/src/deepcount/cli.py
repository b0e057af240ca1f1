"""Command-line entry point: ``deepcount <subcommand> ...``.

Exit status is 0 on success, 1 on usage errors, 2 on runtime failures.
Every command that writes files writes them under ``--out`` only, together
with a ``manifest.json`` describing how to reproduce the run.
"""

import argparse
import datetime
import json
import logging
import os
import sys
from dataclasses import asdict, fields, replace

import numpy as np

from . import analysis, density, evaluation, formats, network, synthetic, trainer

log = logging.getLogger("deepcount")

NETWORK_KEYS = ("input_hw", "depth", "channel_scale", "frontend_activation")
SHARED_KEYS = ("activation_mode", "alpha")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def _parse_hw(text):
    parts = text.lower().replace(",", "x").split("x")
    if len(parts) != 2:
        raise ValueError(f"expected HEIGHTxWIDTH, got {text!r}")
    return int(parts[0]), int(parts[1])


def load_run_config(path, preset="desk"):
    """Split a key=value file into a NetworkSpec and a TrainConfig.

    Keys not belonging to either are hard errors.
    """
    spec = network.NetworkSpec.desk() if preset == "desk" else network.NetworkSpec.full()
    cfg = trainer.TrainConfig.desk() if preset == "desk" else trainer.TrainConfig()
    if path is None:
        return spec, cfg
    with open(path) as fh:
        pairs = formats.parse_key_values(fh.read(), path)
    net_kw, train_kw = {}, {}
    for key, value in pairs.items():
        if key in NETWORK_KEYS:
            if key == "input_hw":
                net_kw[key] = _parse_hw(value)
            elif key == "depth":
                net_kw[key] = int(value)
            elif key == "channel_scale":
                net_kw[key] = _parse_fraction(value)
            else:
                net_kw[key] = value
        else:
            train_kw[key] = value
            if key in SHARED_KEYS:
                net_kw[key] = float(value) if key == "alpha" else value
    cfg = trainer.TrainConfig.from_mapping(train_kw, path, base=cfg)
    spec = replace(spec, **net_kw)
    return spec, cfg


def _parse_fraction(text):
    if "/" in text:
        a, b = text.split("/", 1)
        return float(a) / float(b)
    return float(text)


def spec_to_text(spec):
    return formats.format_key_values({
        "input_hw": f"{spec.input_hw[0]}x{spec.input_hw[1]}",
        "depth": spec.depth,
        "channel_scale": repr(spec.channel_scale),
        "frontend_activation": spec.frontend_activation,
    })


def _inside(out_dir, name):
    """Resolve ``name`` under ``out_dir``, refusing anything that escapes it."""
    root = os.path.realpath(out_dir)
    path = os.path.realpath(os.path.join(root, name))
    if os.path.commonpath([root, path]) != root:
        raise ValueError(f"refusing to write {name!r} outside --out {out_dir!r}")
    return path


def write_manifest(out_dir, command, argv, **extra):
    doc = {"command": command, "argv": list(argv),
           "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat()}
    doc.update(extra)
    with open(_inside(out_dir, "manifest.json"), "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True, default=str)


def _load_model(weights, activation=None, alpha=None):
    state = formats.read_dcwt(weights)
    manifest = os.path.join(os.path.dirname(os.path.abspath(weights)), "manifest.json")
    act, a, fa = "prelu", 0.2, "relu"
    if os.path.exists(manifest):
        with open(manifest) as fh:
            spec = json.load(fh).get("spec") or {}
        act = spec.get("activation_mode", act)
        a = spec.get("alpha", a)
        fa = spec.get("frontend_activation", fa)
    if activation is not None:
        act = activation
    if alpha is not None:
        a = alpha
    return network.from_state(state, act, a, fa).freeze()


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_gt(args, argv):
    paths = []
    if os.path.isdir(args.annotations):
        paths = sorted(os.path.join(args.annotations, f) for f in os.listdir(args.annotations) if f.endswith(".json"))
    else:
        paths = [args.annotations]
    if not paths:
        raise ValueError(f"no annotation files found in {args.annotations}")
    os.makedirs(args.out, exist_ok=True)
    for p in paths:
        ann = density.load_annotation(p).padded(2 ** args.levels)
        stem = os.path.splitext(os.path.basename(p))[0]
        pyr = synthetic.write_pyramid(_inside(args.out, stem), density.splat_gaussian(ann, args.sigma), args.levels)
        print(f"{stem}: {ann.height}x{ann.width} canvas, {ann.count} heads, "
              f"levels {' '.join(f'{l.shape[0]}x{l.shape[1]}' for l in pyr.levels)}")
    write_manifest(args.out, "gen-gt", argv, annotations=args.annotations, sigma=args.sigma, levels=args.levels)
    return 0


def cmd_synth(args, argv):
    os.makedirs(args.out, exist_ok=True)
    names = synthetic.gen_synthetic(_inside(args.out, "."), args.count, (args.height, args.width),
                                    args.profile, args.seed, sigma=args.sigma)
    write_manifest(args.out, "synth", argv, seed=args.seed, count=args.count, profile=args.profile)
    print(f"wrote {len(names)} scenes to {args.out}")
    return 0


def _configure(args):
    spec, cfg = load_run_config(args.config, args.preset)
    over = {}
    if args.epochs is not None:
        over["epochs"] = args.epochs
    if args.seed is not None:
        over["seed"] = args.seed
    if args.activation is not None:
        over["activation_mode"] = args.activation
        spec = replace(spec, activation_mode=args.activation)
    if getattr(args, "ablate", None):
        over["ablated_branches"] = frozenset(int(k) for k in args.ablate.split(","))
    if over:
        cfg = replace(cfg, **over)
    spec = replace(spec, alpha=cfg.alpha, activation_mode=cfg.activation_mode)
    return spec, cfg


def cmd_train(args, argv):
    spec, cfg = _configure(args)
    data = synthetic.load_dataset(args.data)
    if args.init_weights:
        model = _load_model(args.init_weights, cfg.activation_mode, cfg.alpha)
        if model.spec.input_hw != spec.input_hw or model.spec.depth != spec.depth:
            raise ValueError("--init-weights model does not match the configured network")
        spec = model.spec
        model.unfreeze()
    else:
        model = network.build(spec, seed=cfg.seed)
    os.makedirs(args.out, exist_ok=True)
    log_path = _inside(args.out, "train_log.csv")
    if os.path.exists(log_path):
        os.remove(log_path)
    with open(_inside(args.out, "config.txt"), "w") as fh:
        fh.write(cfg.to_text() + spec_to_text(spec))
    hist = trainer.train(model, data, cfg, log_path=log_path)
    weights = _inside(args.out, "weights.dcwt")
    formats.write_dcwt(weights, model.state_dict())
    formats.write_dcwt(_inside(args.out, "backbone.dcwt"), model.detach_branches().state_dict())
    write_manifest(args.out, "train", argv, seed=cfg.seed, dataset=args.data, weights=weights,
                   config=cfg.to_text(), spec=asdict(spec), init_weights=args.init_weights)
    last = hist.epochs[-1] if hist.epochs else {}
    print(f"trained {cfg.epochs} epochs; final loss {last.get('total_loss', float('nan')):.6g}")
    return 0


def cmd_infer(args, argv):
    model = _load_model(args.weights, args.activation)
    k = evaluation.parse_source(args.source)
    if k and not model.has_branches:
        raise network.BranchUnavailable(f"branch unavailable: {args.weights} holds a detached backbone")
    map_path = None
    if args.out_map:
        if not k:
            raise UsageError("infer: --out-map needs a branch source")
        if not args.out:
            raise UsageError("infer: --out-map needs --out")
        map_path = _inside(args.out, args.out_map)
    image = synthetic.load_image(args.image)
    pred = evaluation.infer_count(model, image, source=args.source)
    print(f"count {float(pred.count):.6f}")
    if map_path:
        os.makedirs(args.out, exist_ok=True)
        formats.write_dcdm(map_path, pred.density_maps[k])
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        write_manifest(args.out, "infer", argv, weights=args.weights, image=args.image, source=args.source,
                       count=float(pred.count))
    return 0


def cmd_eval(args, argv):
    model = _load_model(args.weights, args.activation)
    k = evaluation.parse_source(args.source)
    if k and not model.has_branches:
        raise network.BranchUnavailable(f"branch unavailable: {args.weights} holds a detached backbone")
    data = synthetic.load_dataset(args.data)
    res = evaluation.evaluate(model, data, args.source)
    os.makedirs(args.out, exist_ok=True)
    evaluation.write_eval_csv(_inside(args.out, "eval.csv"), res)
    write_manifest(args.out, "eval", argv, weights=args.weights, dataset=args.data, source=args.source,
                   mae=res.mae, rmse=res.rmse)
    print(f"MAE {res.mae:.4f}  RMSE {res.rmse:.4f}  (N={len(res.ids)})")
    return 0


def cmd_flops(args, argv):
    if (args.preset is None) == (args.config is None):
        raise UsageError("flops: give exactly one of --preset or --config")
    if args.preset:
        rep = analysis.preset(args.preset)
    else:
        spec, _ = load_run_config(args.config, "full")
        rep = analysis.audit(spec, detached=args.detached)
    sys.stdout.write(rep.to_csv() if args.csv else rep.to_text())
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(_inside(args.out, "flops.csv"), "w") as fh:
            fh.write(rep.to_csv())
    return 0


def cmd_snr(args, argv):
    model = density.SNRModel(args.mu0, args.sigma0, args.signal_var)
    stats = density.pixelation_stats(model, args.levels, args.trials, seed=args.seed)
    print("level  mean        noise_var   snr         analytic")
    for n in range(args.levels + 1):
        print(f"{n:<5d}  {stats.mean[n]:<10.5g}  {stats.noise_var[n]:<10.5g}  {stats.snr[n]:<10.5g}  "
              f"{model.analytic_snr(n):.5g}")
    print("ratios " + " ".join(f"{r:.4f}" for r in stats.ratios()))
    return 0


def cmd_ablate(args, argv):
    spec, cfg = _configure(args)
    train_set = synthetic.load_dataset(args.data)
    eval_set = synthetic.load_dataset(args.eval_data)
    rows = trainer.ablation_suite(train_set, eval_set, spec, cfg, seed=cfg.seed)
    os.makedirs(args.out, exist_ok=True)
    with open(_inside(args.out, "ablation.csv"), "w") as fh:
        fh.write("ablation,mae,rmse\n")
        for r in rows:
            fh.write(f"{r.label},{r.mae!r},{r.rmse!r}\n")
    write_manifest(args.out, "ablate", argv, seed=cfg.seed, dataset=args.data, eval_dataset=args.eval_data,
                   config=cfg.to_text(), spec=asdict(spec))
    for r in rows:
        print(f"{r.label:<22s} MAE {r.mae:.4f}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_train_options(p):
    p.add_argument("--config", help="key=value file with network and training settings")
    p.add_argument("--preset", choices=("desk", "full"), default="desk")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--activation", choices=network.ACTIVATIONS)


def build_parser():
    parser = _Parser(prog="deepcount", description="DeepCount crowd-counting laboratory")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-gt", help="annotations -> density pyramids")
    p.add_argument("--annotations", required=True, help="JSON file or directory of JSON files")
    p.add_argument("--out", required=True)
    p.add_argument("--sigma", type=float, default=density.DEFAULT_SIGMA)
    p.add_argument("--levels", type=int, default=7)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_gt)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--height", type=int, default=96)
    p.add_argument("--width", type=int, default=128)
    p.add_argument("--profile", choices=sorted(synthetic.PROFILES), default="mixed")
    p.add_argument("--sigma", type=float, default=density.DEFAULT_SIGMA)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--init-weights", help="start from these weights (pretrain-then-finetune)")
    p.add_argument("--ablate", help="comma-separated branch indices to drop from the loss")
    _add_train_options(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="count one image")
    p.add_argument("--weights", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--source", default="backbone")
    p.add_argument("--out")
    p.add_argument("--out-map", help="DCDM file name (inside --out) for the branch density map")
    p.add_argument("--activation", choices=network.ACTIVATIONS)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="MAE/RMSE over a dataset")
    p.add_argument("--weights", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--source", default="backbone")
    p.add_argument("--out", required=True)
    p.add_argument("--activation", choices=network.ACTIVATIONS)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("flops", help="FLOPs and parameter report")
    p.add_argument("--preset", choices=analysis.PRESETS)
    p.add_argument("--config", help="key=value network description")
    p.add_argument("--detached", action="store_true", help="omit branch layers (with --config)")
    p.add_argument("--csv", action="store_true")
    p.add_argument("--out")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("snr", help="Monte-Carlo check of SNR growth under pixelation")
    p.add_argument("--mu0", type=float, required=True)
    p.add_argument("--sigma0", type=float, required=True)
    p.add_argument("--signal-var", type=float, default=0.0)
    p.add_argument("--levels", type=int, default=3)
    p.add_argument("--trials", type=int, default=100000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_snr)

    p = sub.add_parser("ablate", help="branch ablation protocol")
    p.add_argument("--data", required=True)
    p.add_argument("--eval-data", required=True)
    p.add_argument("--out", required=True)
    _add_train_options(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("deepcount: error: a subcommand is required")
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if not exc.code else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except (ValueError, OSError, FloatingPointError, RuntimeError) as exc:
        print(f"deepcount {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
