"""Command-line entry point: ``proxdiff bench | rates | denoise-train | denoise-apply``."""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np

from .bench import (
    CURVE_COLUMNS,
    DegenerateInstanceError,
    ExperimentSpec,
    curve_rates,
    emit_csv,
    read_csv,
    run_error_curves,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DEGENERATE = 2

BENCH_DEFAULTS = {"problem": "lasso", "m": None, "n": None, "group_size": 8, "seed": 0,
                  "iters": None, "q": 5.0, "lam": None, "out": "curves.csv"}
TRAIN_DEFAULTS = {"data": None, "epochs": 5, "inner_iters": 200, "filters": 6, "seed": 1,
                  "lr": 1e-4, "momentum": 0.75, "q": 5.0, "patch": 16, "count": 5,
                  "channels": 1, "noise_std": 40.0 / 255.0, "out": "theta.csv", "log": "loss.csv",
                  "full_scale": False}
FULL_SCALE = {"epochs": 30, "inner_iters": 500, "filters": 24, "patch": 50, "channels": 3}


def _merge(args, defaults, config_path):
    """Defaults < JSON config file < explicit command-line flags."""
    merged = dict(defaults)
    if config_path:
        try:
            cfg = json.loads(Path(config_path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise SystemExit(f"cannot read config {config_path}: {exc}")
        cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
        unknown = set(cfg) - set(defaults)
        if unknown:
            raise SystemExit(f"unknown config keys: {sorted(unknown)}")
        merged.update(cfg)
    for k in defaults:
        v = getattr(args, k, None)
        if v is not None:
            merged[k] = v
    return merged


def _cmd_bench(args) -> int:
    opts = _merge(args, BENCH_DEFAULTS, args.config)
    kind = opts["problem"].replace("-", "_")
    base = ExperimentSpec.desk(kind)
    spec = ExperimentSpec(
        problem=kind,
        m=opts["m"] or base.m,
        n=opts["n"] or base.n,
        group_size=opts["group_size"],
        seed=int(opts["seed"]),
        iters=opts["iters"] or base.iters,
        q=float(opts["q"]),
        reg_weight=opts["lam"],
    )
    try:
        curves = run_error_curves(spec)
    except DegenerateInstanceError as exc:
        print(f"degenerate instance: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    emit_csv(curves, opts["out"])
    meta = curves.meta
    print(f"wrote {opts['out']}: {spec.problem} {spec.m}x{spec.n} seed={spec.seed} K={spec.iters} "
          f"lam={meta['reg_weight']:.6g} support={meta['support']} gap={meta['min_gap']:.3g}")
    return EXIT_OK


def _cmd_rates(args) -> int:
    curves = read_csv(args.curves)
    rates = curve_rates(curves, floor=args.floor)
    print(f"{'sequence':<14} {'slope':>12} {'factor':>10} {'window':>13} {'r2':>7}")
    for c in CURVE_COLUMNS:
        r = rates[c]
        if r is None:
            print(f"{c:<14} {'n/a':>12}")
            continue
        win = f"{r.window[0]}-{r.window[1]}"
        print(f"{c:<14} {r.slope:>12.6f} {r.factor:>10.6f} {win:>13} {r.r_squared:>7.4f}")
    return EXIT_OK


def _write_theta(path, weights):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in weights:
            w.writerow([f"{v:.16e}" for v in row])


def _read_theta(path):
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    return np.array([[float(v) for v in r] for r in rows])


def _load_dataset(opts):
    from .denoise import add_noise, load_ppm, synthetic_patches

    size, count = int(opts["patch"]), int(opts["count"])
    if opts["data"]:
        files = sorted(p for p in Path(opts["data"]).iterdir() if p.suffix.lower() in (".ppm", ".pgm"))
        if not files:
            raise SystemExit(f"no .ppm/.pgm images in {opts['data']}")
        clean = []
        for f in files[:count]:
            img = load_ppm(f)
            if img.shape[0] < size or img.shape[1] < size:
                raise SystemExit(f"{f} is smaller than the {size}x{size} patch")
            y0 = (img.shape[0] - size) // 2
            x0 = (img.shape[1] - size) // 2
            clean.append(img[y0 : y0 + size, x0 : x0 + size])
    else:
        clean = synthetic_patches(count, size, int(opts["channels"]), seed=int(opts["seed"]))
    noisy = add_noise(clean, float(opts["noise_std"]), seed=int(opts["seed"]))
    return list(zip(noisy, clean))


def _cmd_denoise_train(args) -> int:
    from .denoise import TrainConfig, train

    opts = _merge(args, TRAIN_DEFAULTS, args.config)
    if opts["full_scale"]:
        for k, v in FULL_SCALE.items():
            if getattr(args, k, None) is None:
                opts[k] = v
    cfg = TrainConfig(epochs=int(opts["epochs"]), inner_iters=int(opts["inner_iters"]),
                      q=float(opts["q"]), lr=float(opts["lr"]), momentum=float(opts["momentum"]),
                      n_filters=int(opts["filters"]), seed=int(opts["seed"]),
                      noise_std=float(opts["noise_std"]))
    data = _load_dataset(opts)
    t0 = time.perf_counter()
    res = train(data, cfg)
    _write_theta(opts["out"], res.bank.weights)
    with open(opts["log"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "step", "image_id", "loss", "psnr"])
        for row in res.log:
            w.writerow([row["epoch"], row["step"], row["image_id"], f"{row['loss']:.16e}",
                        f"{row['psnr']:.16e}"])
    print(f"trained {cfg.n_filters} filters for {cfg.epochs} epochs on {len(data)} images "
          f"in {time.perf_counter() - t0:.1f}s; mean loss epoch 0 {res.epoch_mean(0):.6g}, "
          f"epoch {cfg.epochs} {res.epoch_mean(cfg.epochs):.6g}")
    return EXIT_OK


def _cmd_denoise_apply(args) -> int:
    from .denoise import FilterBank, dct_basis_5x5, denoise_dual_apg, load_ppm, save_ppm

    weights = _read_theta(args.theta)
    basis = dct_basis_5x5()
    if weights.ndim != 2 or weights.shape[1] != basis.shape[0]:
        raise SystemExit(f"{args.theta}: expected {basis.shape[0]} columns")
    img = load_ppm(args.input)
    sol = denoise_dual_apg(FilterBank(weights, basis), img, args.inner_iters, args.q)
    save_ppm(args.output, np.clip(sol.denoised, 0.0, 1.0))
    print(f"wrote {args.output}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="proxdiff", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    b = sub.add_parser("bench", help="error curves of AD and fixed-point AD on a random instance")
    b.add_argument("--config", help="JSON file with any of the flags below")
    b.add_argument("--problem", choices=["lasso", "group_lasso", "group-lasso"])
    b.add_argument("--m", type=int)
    b.add_argument("--n", type=int)
    b.add_argument("--group-size", dest="group_size", type=int)
    b.add_argument("--seed", type=int)
    b.add_argument("--iters", type=int)
    b.add_argument("--q", type=float)
    b.add_argument("--lam", type=float, help="fixed regularization weight (skips selection)")
    b.add_argument("--out")
    b.set_defaults(func=_cmd_bench)

    r = sub.add_parser("rates", help="fit linear rates to a curves CSV")
    r.add_argument("curves")
    r.add_argument("--floor", type=float, default=1e-11)
    r.set_defaults(func=_cmd_rates)

    t = sub.add_parser("denoise-train", help="learn filter weights by bilevel SGD")
    t.add_argument("--config")
    t.add_argument("--data", help="directory of .ppm/.pgm images (synthetic patches if omitted)")
    t.add_argument("--epochs", type=int)
    t.add_argument("--inner-iters", dest="inner_iters", type=int)
    t.add_argument("--filters", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--momentum", type=float)
    t.add_argument("--q", type=float)
    t.add_argument("--patch", type=int)
    t.add_argument("--count", type=int)
    t.add_argument("--channels", type=int, choices=[1, 3])
    t.add_argument("--noise-std", dest="noise_std", type=float)
    t.add_argument("--out")
    t.add_argument("--log")
    t.add_argument("--full-scale", "--paper-scale", dest="full_scale", action="store_true", default=None,
                   help="30 epochs, K=500, 24 filters, 50x50 color patches (slow)")
    t.set_defaults(func=_cmd_denoise_train)

    a = sub.add_parser("denoise-apply", help="denoise an image with learned weights")
    a.add_argument("--theta", required=True)
    a.add_argument("--in", dest="input", required=True)
    a.add_argument("--out", dest="output", required=True)
    a.add_argument("--inner-iters", dest="inner_iters", type=int, default=500)
    a.add_argument("--q", type=float, default=5.0)
    a.set_defaults(func=_cmd_denoise_apply)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
