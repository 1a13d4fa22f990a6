"""Command-line entry point.

Subcommands: gen-synth, train, train-ensemble, eval, predict, gradcheck, report.
Exit codes: 0 success, 1 gradcheck failure, 2 config error,
3 data/shape/checkpoint error, 4 numerical abort.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as D
from .architectures import build_model
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, resolve
from .errors import ConfigError, DataError, NumericalError, ShapeError
from .gradcheck import CHECKS, run_gradchecks
from .metrics import binarize, evaluate, format_table
from .training import History, train_ensemble_two_stage, train_model

log = logging.getLogger("crackseg")

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3, 4


def _out_dir(path: str) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"{out}: cannot create output directory ({exc})") from exc
    return out


def _load_splits(cfg: RunConfig):
    if not cfg.data:
        raise ConfigError("no dataset given (use --data or 'data = ...' in the config)")
    ds = D.load_dataset(cfg.data, size=cfg.image_size)
    return D.split(ds, cfg.split, seed=cfg.seed)


def _ckpt_extra(cfg: RunConfig) -> dict:
    return {"image_size": cfg.image_size, "split": list(cfg.split), "seed": cfg.seed}


def cmd_gen_synth(args) -> int:
    ds = D.gen_synthetic(args.n, args.size, args.seed)
    root = Path(args.out)
    try:
        D.save_dataset(ds, root)
    except DataError as exc:
        raise ConfigError(str(exc)) from exc
    print(f"wrote {len(ds)} image/mask pairs to {root}")
    return EXIT_OK


def _overrides(args, **extra) -> dict:
    keys = {"data": "data", "out": "out", "epochs": "epochs", "batch_size": "batch_size",
            "lr": "learning_rate", "seed": "seed", "size": "image_size"}
    ov = {dst: getattr(args, src, None) for src, dst in keys.items()}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        ov[k.strip()] = v.strip()
    ov.update({k: v for k, v in extra.items() if v is not None})
    return ov


def cmd_train(args) -> int:
    cfg = resolve(args.config, _overrides(args, model=args.model, kernel_size=args.kernel))
    out = _out_dir(cfg.out)
    cfg.write(out)
    train, val, _ = _load_splits(cfg)
    model = build_model(cfg.model, vars(cfg.net_config()), seed=cfg.seed)
    hist = train_model(model, train, val, cfg.train_config())
    save_checkpoint(model, out / "model.ckpt", _ckpt_extra(cfg))
    (out / "history.csv").write_text(hist.to_csv(cfg.record_timing))
    print(f"{cfg.model}: final train loss {hist.train_loss[-1]:.5f}, val loss {hist.val_loss[-1]:.5f}")
    return EXIT_OK


def cmd_train_ensemble(args) -> int:
    cfg = resolve(args.config, _overrides(args))
    out = _out_dir(cfg.out)
    cfg.write(out)
    train, val, _ = _load_splits(cfg)
    extra = _ckpt_extra(cfg)

    def on_base(i, model, hist):
        save_checkpoint(model, out / f"base_{i}.ckpt", extra)
        (out / f"history_base_{i}.csv").write_text(hist.to_csv(cfg.record_timing))

    base_cfgs = [cfg.net_config(k) for k in cfg.base_kernel_sizes]
    ens, hists = train_ensemble_two_stage(base_cfgs, train, val, cfg.train_config(),
                                          cfg.stage2_config(), cfg.ensemble_config(), on_base)
    save_checkpoint(ens, out / "ensemble.ckpt", extra)
    (out / "history_ensemble.csv").write_text(hists[-1].to_csv(cfg.record_timing))
    print(f"ensemble: final train loss {hists[-1].train_loss[-1]:.5f}, "
          f"val loss {hists[-1].val_loss[-1]:.5f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    reports = {}
    csv_rows = ["model,id,loss,iou,dice"]
    for path in args.checkpoint:
        model = load_checkpoint(path)
        extra = getattr(model, "extra", {}) or {}
        size = args.size or extra.get("image_size")
        ds = D.load_dataset(args.data, size=size)
        if args.subset != "all":
            ratios = tuple(extra.get("split", (0.8, 0.1, 0.1)))
            seed = args.seed if args.seed is not None else extra.get("seed", 0)
            parts = dict(zip(("train", "val", "test"), D.split(ds, ratios, seed)))
            ds = parts[args.subset]
        if args.name and len(args.checkpoint) == 1:
            name = args.name
        else:
            stem = Path(path).stem
            name = model.family if stem == "model" else stem
        rep = evaluate(model, ds, threshold=args.threshold)
        reports[name] = rep
        csv_rows += [f"{name},{r.id},{r.loss!r},{r.iou!r},{r.dice!r}" for r in rep.rows]
    out = _out_dir(args.out)
    (out / "eval.csv").write_text("\n".join(csv_rows) + "\n")
    print(format_table(reports))
    return EXIT_OK


def cmd_predict(args) -> int:
    model = load_checkpoint(args.checkpoint)
    extra = getattr(model, "extra", {}) or {}
    grid = D.load_image_grayscale(args.image)
    size = args.size or extra.get("image_size")
    if size and grid.shape != (size, size):
        grid = D.resize_bilinear(grid, size, size)
    prob = model.predict(grid[None, None])[0, 0]
    out = Path(args.out)
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        D.save_grayscale_png(prob, out)
        if args.threshold is not None:
            D.save_grayscale_png(binarize(prob, args.threshold).astype(np.float32),
                                 out.with_name(out.stem + "_bin.png"))
    except OSError as exc:
        raise ConfigError(f"{out}: cannot write prediction ({exc})") from exc
    print(f"wrote {out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = run_gradchecks(args.seed, args.n_seeds, inject=args.inject)
    width = max(len(r.op) for r in results)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{r.op:<{width}}  max_rel_err={r.max_error:.3e}  checked={r.checked:<5d} "
              f"skipped={r.skipped:<4d} {status}")
    ok = all(r.passed for r in results)
    print("all checks passed" if ok else "gradient check FAILED")
    return EXIT_OK if ok else EXIT_CHECK


def _history_name(path: Path) -> str:
    # history_base_0.csv -> base_0; <run>/history.csv -> <run>
    if path.stem == "history":
        return path.parent.name or "history"
    return path.stem.removeprefix("history_") or path.stem


def cmd_report(args) -> int:
    series = []
    for p in map(Path, args.histories):
        try:
            series.append((_history_name(p), History.from_csv(p.read_text())))
        except OSError as exc:
            raise DataError(f"{p}: cannot read history ({exc})") from exc
    n = max(len(h) for _, h in series)
    header = ["epoch"] + [f"{name}_{kind}" for name, _ in series for kind in ("train", "val")]
    lines = [",".join(header)]
    for e in range(n):
        row = [str(e + 1)]
        for _, h in series:
            row += [repr(h.train_loss[e]), repr(h.val_loss[e])] if e < len(h) else ["", ""]
        lines.append(",".join(row))
    text = "\n".join(lines) + "\n"
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)
        print(f"wrote {out}")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="crackseg", description="Crack segmentation with residual U-Net ensembles")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-synth", help="write a synthetic crack dataset")
    g.add_argument("--n", type=int, default=64)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_synth)

    def training_flags(sp):
        sp.add_argument("--data")
        sp.add_argument("--config")
        sp.add_argument("--out")
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--batch-size", type=int)
        sp.add_argument("--lr", type=float)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--size", type=int, help="image side length after resizing")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override any config key (repeatable)")

    t = sub.add_parser("train", help="train a single model")
    t.add_argument("--model", choices=("unet", "segnet", "resunet"))
    t.add_argument("--kernel", type=int)
    training_flags(t)
    t.set_defaults(func=cmd_train)

    te = sub.add_parser("train-ensemble", help="two-stage residual U-Net ensemble training")
    training_flags(te)
    te.set_defaults(func=cmd_train_ensemble)

    e = sub.add_parser("eval", help="test loss, IoU and DICE of one or more checkpoints")
    e.add_argument("--checkpoint", action="append", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--threshold", type=float, default=0.5)
    e.add_argument("--subset", choices=("all", "train", "val", "test"), default="all")
    e.add_argument("--seed", type=int, help="split seed (defaults to the training seed)")
    e.add_argument("--size", type=int)
    e.add_argument("--name", help="row label for a single checkpoint")
    e.add_argument("--out", default=".")
    e.set_defaults(func=cmd_eval)

    pr = sub.add_parser("predict", help="write a probability mask for one image")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--image", required=True)
    pr.add_argument("--out", required=True)
    pr.add_argument("--threshold", type=float, help="also write a thresholded <out>_bin.png")
    pr.add_argument("--size", type=int)
    pr.set_defaults(func=cmd_predict)

    gc = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--n-seeds", type=int, default=10)
    gc.add_argument("--inject", choices=sorted(CHECKS), help=argparse.SUPPRESS)
    gc.set_defaults(func=cmd_gradcheck)

    r = sub.add_parser("report", help="merge history CSVs into one loss-curve table")
    r.add_argument("histories", nargs="+")
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ShapeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
