"""Command-line entry point: ``stvfm {synth,train,eval,forecast,gradcheck,sweep}``."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import config as run_config
from . import gradcheck
from .gridio import SynthParams, load_grid, save_grid, synthesize
from .runner import SPLITS, eval_baseline, eval_checkpoint, forecast, run_training
from .train import TrainingDiverged, load_checkpoint

log = logging.getLogger("stvfm")


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def cmd_synth(args) -> int:
    params = {"channels": args.channels, "height": args.height, "width": args.width, "steps": args.steps}
    for item in args.param or []:
        key, _, value = item.partition("=")
        params[key] = _parse_value(value)
    try:
        grid = synthesize(args.kind, SynthParams(**params), seed=args.seed)
    except (TypeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    save_grid(grid, args.out)
    C, H, W, T = grid.shape
    print(json.dumps({"path": str(args.out), "kind": args.kind, "C": C, "H": H, "W": W, "T": T}))
    return 0


def _load_run_config(args):
    try:
        cfg = run_config.load(args.config)
    except run_config.ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return None
    if getattr(args, "out_dir", None):
        cfg = replace(cfg, output_dir=args.out_dir)
    return cfg


def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    if cfg is None:
        return 2
    print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    try:
        out = run_training(cfg, out_dir=cfg.output_dir)
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return 3
    print(json.dumps({"checkpoint": str(out.checkpoint), "best_val_rmse": out.result.best_val_rmse,
                      "best_step": out.result.best_step, "steps": out.result.steps}))
    return 0


def cmd_eval(args) -> int:
    grid = load_grid(args.data)
    if args.model in ("ha", "persistence"):
        report = eval_baseline(args.model, grid, args.P, args.Q, args.split)
    else:
        if not args.checkpoint:
            print("error: --checkpoint is required unless --model is ha or persistence", file=sys.stderr)
            return 2
        report = eval_checkpoint(load_checkpoint(args.checkpoint), grid, args.split)
    text = json.dumps(report.to_dict(), indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def cmd_forecast(args) -> int:
    pred = forecast(load_checkpoint(args.checkpoint), load_grid(args.data), args.end)
    save_grid(pred, args.out)
    C, H, W, T = pred.shape
    print(json.dumps({"path": str(args.out), "C": C, "H": H, "W": W, "T": T}))
    return 0


def cmd_gradcheck(args) -> int:
    scopes = gradcheck.SCOPES if args.scope == "all" else (args.scope,)
    results = [r for s in scopes for r in gradcheck.run(s, seed=args.seed)]
    print(gradcheck.format_report(results))
    return 0 if all(r.ok for r in results) else 1


def sweep_rows(cfg, values: list[str], split: str = "test") -> list[tuple[str, float, float]]:
    rows = []
    grid = cfg.load_data()
    for text in values:
        lam = float(text)
        run = replace(cfg, train=replace(cfg.train, lam=lam))
        out = run_training(run, grid)
        from .train import predictor
        from .metrics import evaluate
        report = evaluate(predictor(out.model), getattr(out.data, split), out.data.normalizer,
                          grid.meta.scale_factor)
        rows.append((text, report.mae, report.rmse))
    return rows


def format_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["lambda", "mae", "rmse"])
    for lam, m, r in rows:
        w.writerow([lam, repr(m), repr(r)])
    return buf.getvalue()


def cmd_sweep(args) -> int:
    if args.param != "lambda":
        print(f"error: only 'lambda' can be swept, got {args.param!r}", file=sys.stderr)
        return 2
    cfg = _load_run_config(args)
    if cfg is None:
        return 2
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    try:
        bad = [v for v in values if not float(v) >= 0]
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if bad:
        print(f"error: lambda must be >= 0, got {bad}", file=sys.stderr)
        return 2
    text = format_csv(sweep_rows(cfg, values, args.split))
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stvfm", description="Dual-branch spatio-temporal forecaster.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic STG1 grid")
    s.add_argument("--kind", choices=("advection", "diffusion", "periodic"), default="advection")
    s.add_argument("--channels", type=int, default=1)
    s.add_argument("--height", type=int, default=16)
    s.add_argument("--width", type=int, default=20)
    s.add_argument("--steps", type=int, default=200)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--param", action="append", metavar="KEY=VALUE",
                   help="extra generator parameter, e.g. period=6 or velocities=[[1,0]]")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train from a JSON run config")
    t.add_argument("--config", required=True)
    t.add_argument("--out-dir", help="override output_dir from the config")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="metrics JSON for a checkpoint or a baseline")
    e.add_argument("--checkpoint")
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=SPLITS, default="test")
    e.add_argument("--model", choices=("checkpoint", "ha", "persistence"), default="checkpoint")
    e.add_argument("--P", type=int, default=6, help="history length for baselines")
    e.add_argument("--Q", type=int, default=6, help="horizon for baselines")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    f = sub.add_parser("forecast", help="write the predicted next Q frames as STG1")
    f.add_argument("--checkpoint", required=True)
    f.add_argument("--data", required=True)
    f.add_argument("--end", type=int, help="history ends before this frame (default: grid end)")
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_forecast)

    g = sub.add_parser("gradcheck", help="finite-difference gradient report")
    g.add_argument("--scope", choices=(*gradcheck.SCOPES, "all"), default="all")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)

    w = sub.add_parser("sweep", help="retrain over lambda values and emit CSV (lambda, mae, rmse)")
    w.add_argument("--config", required=True)
    w.add_argument("--param", default="lambda")
    w.add_argument("--values", required=True, help="comma-separated, e.g. 0.1,0.5,1,2")
    w.add_argument("--split", choices=SPLITS, default="test")
    w.add_argument("--out")
    w.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
