"""Command-line interface.

Exit codes: 0 ok, 1 usage error or failed check, 2 malformed input file,
3 training divergence.
"""

import argparse
import csv
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import analysis
from .config import ConfigError
from .factory import build_model, parse_ring_size
from .io import datasets, ringpack
from .nn.gradcheck import grad_check
from .train import RECORD_FIELDS, DivergenceError, TrainConfig, evaluate, \
    prune_model, train_model

log = logging.getLogger("rpgnet")

EXIT_OK, EXIT_USAGE, EXIT_FORMAT, EXIT_DIVERGED = 0, 1, 2, 3

SWEEP_FIELDS = ["ring_size", "fraction", "backbone_params", "total_params",
                "epochs", "train_loss", "train_acc", "val_acc"]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _int_list(text):
    return [int(t) for t in text.split(",") if t.strip()]


def _add_model_flags(p):
    p.add_argument("--arch", choices=["tiny", "micro_resnet"], default="micro_resnet")
    p.add_argument("--widths", type=_int_list, default=None,
                   help="comma-separated channel widths")
    p.add_argument("--grouping", choices=["global", "block"], default="global")
    p.add_argument("--mode", choices=["perm+sign", "perm", "sign", "none"],
                   default="perm+sign")
    p.add_argument("--no-scale", action="store_true",
                   help="generate kernels with scale 1 instead of sqrt(2/fan_in)")
    p.add_argument("--no-head-gen", action="store_true",
                   help="keep the classifier head out of the rings")
    p.add_argument("--seed", type=int, default=0)


def _add_data_flags(p):
    p.add_argument("--dataset", choices=["mnist", "cifar10", "synthetic"],
                   required=True)
    p.add_argument("--data-dir")
    p.add_argument("--limit", type=int, default=None,
                   help="truncate both splits to this many examples")


def _add_train_flags(p):
    _add_model_flags(p)
    _add_data_flags(p)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--bs", type=int, default=128)
    p.add_argument("--wd", type=float, default=5e-4)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--milestones", type=_int_list, default=[60, 120, 160])
    p.add_argument("--gamma", type=float, default=0.1)
    p.add_argument("--precision", type=int, choices=[32, 64], default=32)
    p.add_argument("--count-bn", action="store_true",
                   help="count batch-norm parameters as backbone")


def build_parser():
    parser = _Parser(prog="rpgnet", description=__doc__.splitlines()[0])
    parser.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    p = sub.add_parser("train", help="train a ring-generated model")
    _add_train_flags(p)
    p.add_argument("--ring-size", default="100%",
                   help="ring length: count, fraction or percentage of kernels")
    p.add_argument("--out", help="ring-pack output path")
    p.add_argument("--metrics", help="per-epoch metrics CSV path")

    p = sub.add_parser("eval", help="evaluate a ring-pack")
    p.add_argument("--pack", required=True)
    _add_data_flags(p)

    p = sub.add_parser("verify-props", help="Monte Carlo orthogonality checks")
    p.add_argument("--m", type=_int_list, default=[4, 9, 27, 64])
    p.add_argument("--trials", type=int, default=100000)
    p.add_argument("--ensemble", choices=["haar", "perm_sign", "both"],
                   default="both")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="CSV path (default stdout)")

    p = sub.add_parser("sweep", help="train across ring sizes")
    _add_train_flags(p)
    p.add_argument("--ring-sizes", required=True,
                   help="comma-separated sizes (counts, fractions or percentages)")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--metrics", help="per-size CSV path (default stdout)")
    p.add_argument("--out-dir", help="write one ring-pack per size here")

    p = sub.add_parser("fit-powerlaw", help="fit ln y = a + b ln n")
    p.add_argument("--metrics", required=True)
    p.add_argument("--x-col", default="backbone_params")
    p.add_argument("--y-col", default="val_acc")
    p.add_argument("--max-fraction", type=float, default=None,
                   help="only use rows whose 'fraction' column is <= this")

    p = sub.add_parser("prune", help="magnitude-prune rings of a ring-pack")
    p.add_argument("--pack", required=True)
    p.add_argument("--fraction", type=float, required=True)
    p.add_argument("--finetune-epochs", type=int, default=0)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--bs", type=int, default=128)
    p.add_argument("--wd", type=float, default=5e-4)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="pruned ring-pack output path")
    _add_data_flags(p)

    p = sub.add_parser("analyze-features", help="channel correlation histogram")
    p.add_argument("--pack", required=True)
    p.add_argument("--layer", default=None,
                   help="layer name whose output is analysed (default: last residual)")
    p.add_argument("--bins", type=int, default=20)
    p.add_argument("--out", help="CSV path (default stdout)")
    _add_data_flags(p)

    p = sub.add_parser("grad-check", help="finite-difference check of ring gradients")
    _add_model_flags(p)
    p.add_argument("--ring-size", default="150")
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--tolerance", type=float, default=1e-4)
    return parser


# -- helpers -------------------------------------------------------------------
def _open_out(path):
    if path is None:
        return sys.stdout, False
    return open(path, "w", newline=""), True


def _write_csv(path, fields, rows):
    fh, close = _open_out(path)
    try:
        writer = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    finally:
        if close:
            fh.close()


def _load_data(args):
    return datasets.load_dataset(args.dataset, args.data_dir, limit=args.limit)


def _train_cfg(args):
    return TrainConfig(batch_size=args.bs, epochs=args.epochs, lr=args.lr,
                       momentum=args.momentum, weight_decay=args.wd,
                       lr_gamma=args.gamma, lr_milestones=args.milestones,
                       seed=args.seed, precision=args.precision)


def _meta(args, train_set, ring_size):
    return {"arch": args.arch, "dataset": args.dataset, "grouping": args.grouping,
            "mode": args.mode, "seed": args.seed, "ring_size": str(ring_size),
            "in_shape": list(train_set.shape)}


def _model_for(args, train_set, ring_size):
    return build_model(args.arch, train_set.shape, train_set.num_classes,
                       ring_size, args.grouping, args.mode, args.seed,
                       args.precision, args.widths, not args.no_head_gen,
                       not args.no_scale)


def run_single(args, ring_size, train_set=None, test_set=None, pack_path=None):
    """Train one configuration; returns ``(model, records)``."""
    if train_set is None:
        train_set, test_set = _load_data(args)
    model = _model_for(args, train_set, ring_size)
    records = train_model(model, train_set, _train_cfg(args), test_set,
                          count_bn=args.count_bn)
    if pack_path:
        ringpack.save(pack_path, model, _meta(args, train_set, ring_size))
    return model, records


def _sweep_job(payload):
    args, size_text = payload
    size = parse_ring_size(size_text)
    pack_path = None
    if args.out_dir:
        safe = size_text.replace("%", "pct")
        pack_path = os.path.join(args.out_dir, f"ring_{safe}.rpg")
    model, records = run_single(args, size, pack_path=pack_path)
    dense = model.config.dense_kernel_count
    ring_total = model.generator.size
    last = records[-1] if records else None
    return {
        "ring_size": ring_total,
        "fraction": ring_total / dense,
        "backbone_params": model.param_counts(args.count_bn)[0],
        "total_params": model.param_counts(args.count_bn)[1],
        "epochs": len(records),
        "train_loss": last.train_loss if last else "",
        "train_acc": last.train_acc if last else "",
        "val_acc": last.val_acc if last else "",
    }


# -- commands ------------------------------------------------------------------
def cmd_train(args):
    train_set, test_set = _load_data(args)
    size = parse_ring_size(args.ring_size)
    records = []
    try:
        model, records = run_single(args, size, train_set, test_set, args.out)
    except DivergenceError as e:
        records = e.records
        raise
    finally:
        if args.metrics:
            _write_csv(args.metrics, RECORD_FIELDS, [r.as_row() for r in records])
    if records:
        print(f"final val_acc {records[-1].val_acc:.4f}")
    return EXIT_OK


def cmd_eval(args):
    model, meta = ringpack.load(args.pack)
    _, test_set = _load_data(args)
    acc = evaluate(model, test_set)
    print(f"accuracy {acc:.4f}")
    return EXIT_OK


def cmd_verify_props(args):
    ensembles = ["haar", "perm_sign"] if args.ensemble == "both" else [args.ensemble]
    if args.trials < 1000:
        raise UsageError("--trials must be at least 1000")
    rows = []
    ok = True
    for m in args.m:
        for ens in ensembles:
            s = analysis.prop_stats(m, args.trials, ens, args.seed)
            ok &= s.prop1_passed and s.prop2_passed
            rows.append({
                "M": m, "ensemble": ens, "trials": s.trials,
                "mean_inner": repr(s.mean_inner), "std_inner": repr(s.std_inner),
                "prop1_threshold": repr(s.prop1_threshold),
                "prop1_pass": int(s.prop1_passed),
                "mean_cos2": repr(s.mean_cos2), "std_cos2": repr(s.std_cos2),
                "target_cos2": repr(1.0 / m),
                "prop2_threshold": repr(s.prop2_threshold),
                "prop2_pass": int(s.prop2_passed),
            })
    _write_csv(args.out, list(rows[0]) if rows else ["M"], rows)
    return EXIT_OK if ok else EXIT_USAGE


def cmd_sweep(args):
    sizes = [t.strip() for t in args.ring_sizes.split(",") if t.strip()]
    if not sizes:
        raise UsageError("--ring-sizes is empty")
    for t in sizes:
        parse_ring_size(t)
    if args.out_dir:
        os.makedirs(args.out_dir, exist_ok=True)
    jobs = [(args, t) for t in sizes]
    if args.workers > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            rows = list(pool.map(_sweep_job, jobs))
    else:
        rows = [_sweep_job(j) for j in jobs]
    _write_csv(args.metrics, SWEEP_FIELDS, rows)
    return EXIT_OK


def cmd_fit_powerlaw(args):
    with open(args.metrics, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if rows and (args.x_col not in rows[0] or args.y_col not in rows[0]):
        raise datasets.FormatError(
            f"{args.metrics}: needs columns {args.x_col} and {args.y_col}")
    if args.max_fraction is not None:
        rows = [r for r in rows if float(r["fraction"]) <= args.max_fraction + 1e-12]
    points = [(float(r[args.x_col]), float(r[args.y_col])) for r in rows]
    a, b, r2 = analysis.fit_power_law(points)
    print("a,b,r2")
    print(f"{a!r},{b!r},{r2!r}")
    return EXIT_OK


def cmd_prune(args):
    model, meta = ringpack.load(args.pack)
    train_set, test_set = _load_data(args)
    before = evaluate(model, test_set)
    prune_model(model, args.fraction)
    pruned = evaluate(model, test_set)
    print(f"accuracy before {before:.4f}")
    print(f"accuracy pruned {pruned:.4f}")
    if args.finetune_epochs:
        cfg = TrainConfig(batch_size=args.bs, epochs=args.finetune_epochs,
                          lr=args.lr, momentum=args.momentum,
                          weight_decay=args.wd, lr_milestones=[], seed=args.seed)
        records = train_model(model, train_set, cfg, test_set)
        print(f"accuracy finetuned {records[-1].val_acc:.4f}")
    if args.out:
        meta = dict(meta, pruned_fraction=args.fraction)
        ringpack.save(args.out, model, meta)
    return EXIT_OK


def cmd_analyze_features(args):
    model, _ = ringpack.load(args.pack)
    _, test_set = _load_data(args)
    layer = args.layer
    if layer is None:
        adds = [l.name for l in model.config.layers if l.kind == "residual_add"]
        relus = [l.name for l in model.config.layers if l.kind == "relu"]
        layer = (adds or relus)[-1]
    try:
        model.config.layer(layer)
    except KeyError:
        raise UsageError(f"unknown layer {layer!r}") from None
    model.forward(test_set.images[:1000], train=False, capture=layer)
    hist, edges, n_const = analysis.feature_similarity(model.captured, args.bins)
    rows = [{"bin_lo": repr(float(lo)), "bin_hi": repr(float(hi)),
             "density": repr(float(h))}
            for lo, hi, h in zip(edges[:-1], edges[1:], hist)]
    _write_csv(args.out, ["bin_lo", "bin_hi", "density"], rows)
    if n_const:
        print(f"warning: {n_const} constant channel(s)", file=sys.stderr)
    return EXIT_OK


def cmd_grad_check(args):
    in_ch = 1 if args.arch == "tiny" else 3
    shape = (in_ch, args.image_size, args.image_size)
    widths = args.widths
    size = parse_ring_size(args.ring_size)
    model = build_model(args.arch, shape, 5, size, args.grouping, args.mode,
                        args.seed, 64, widths, not args.no_head_gen,
                        not args.no_scale)
    rng = np.random.default_rng(args.seed)
    x = rng.standard_normal((args.batch,) + shape)
    y = rng.integers(0, 5, args.batch)
    report = grad_check(model, x, y, args.tolerance)
    print(f"max_rel_error {report.max_rel_error:.3e} over {report.checked} ring elements")
    if report.kinks:
        print(f"  {report.kinks} element(s) straddle a ReLU/maxpool kink at every step")
    if not report.passed:
        for idx, a, n, err in report.worst:
            print(f"  ring element {idx}: analytic {a:.6e} numeric {n:.6e} "
                  f"rel {err:.3e}")
        print("gradient check FAILED", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


COMMANDS = {
    "train": cmd_train, "eval": cmd_eval, "verify-props": cmd_verify_props,
    "sweep": cmd_sweep, "fit-powerlaw": cmd_fit_powerlaw, "prune": cmd_prune,
    "analyze-features": cmd_analyze_features, "grad-check": cmd_grad_check,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=args.log_level.upper(),
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (datasets.FormatError, ringpack.PackError) as e:
        print(f"format error: {e}", file=sys.stderr)
        return EXIT_FORMAT
    except DivergenceError as e:
        print(f"diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (FileNotFoundError, IsADirectoryError, PermissionError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
