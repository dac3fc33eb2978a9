"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 data or checkpoint error,
4 numerical divergence. ``TRAJDIFF_CONFIG_DIR`` names the directory that
relative ``--config`` names (and a missing ``--config``) are resolved in.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import pipeline as pl
from .context import ContextModel
from .denoiser import MLPDenoiser
from .io import ConfigError, DataError, DivergenceError, write_csv, write_loss_trace
from .scenario_gen import export_csv, generate_dataset, load_dataset, save_dataset

log = logging.getLogger("trajdiff")

EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGENCE = 2, 3, 4


def _add_common(p: argparse.ArgumentParser, config: bool = True) -> None:
    if config:
        p.add_argument("--config", help="key-value config file")
        p.add_argument("--seed", type=int, help="override every seed in the config")


def _indices(args, n: int) -> range:
    start = args.start
    count = n - start if args.count is None else args.count
    if start < 0 or count < 0 or start + count > n:
        raise ConfigError(f"scenario range [{start}, {start + count}) outside dataset of {n}")
    return range(start, start + count)


def _sidecar(out, suffix: str) -> Path:
    out = Path(out)
    return out.with_name(out.name + suffix)


def cmd_gen_data(args) -> None:
    cfg, h = pl.load_config(args.config, args.seed)
    ds = generate_dataset(cfg.gen)
    save_dataset(ds, args.out)
    outputs = [Path(args.out).name]
    if args.csv:
        export_csv(ds, args.csv)
        outputs.append(Path(args.csv).name)
    pl.write_json(_sidecar(args.out, ".manifest.json"), pl.manifest("gen-data", cfg, h, {}, outputs))
    log.info("wrote %d scenarios to %s", len(ds), args.out)


def cmd_train_context(args) -> None:
    cfg, h = pl.load_config(args.config, args.seed)
    ds = load_dataset(args.data)
    model, trace = pl.run_context_training(ds, cfg, args.out)
    write_loss_trace(_sidecar(args.out, ".loss.csv"), trace)
    pl.write_json(_sidecar(args.out, ".manifest.json"),
                  pl.manifest("train-context", cfg, h, {"data": args.data}, [Path(args.out).name],
                              {"final_loss": trace[-1]}))
    log.info("context loss %.6g -> %.6g", trace[0], trace[-1])


def cmd_train_diffusion(args) -> None:
    cfg, h = pl.load_config(args.config, args.seed)
    ds = load_dataset(args.data)
    context = ContextModel.load(args.context)
    den, trace = pl.run_diffusion_training(ds, context, cfg, args.out)
    write_loss_trace(_sidecar(args.out, ".loss.csv"), trace)
    pl.write_json(_sidecar(args.out, ".manifest.json"),
                  pl.manifest("train-diffusion", cfg, h, {"data": args.data, "context": args.context},
                              [Path(args.out).name], {"final_loss": trace[-1]}))
    log.info("velocity loss %.6g -> %.6g", trace[0], trace[-1])


def cmd_predict(args) -> None:
    cfg, h = pl.load_config(args.config, args.seed)
    sampling = cfg.sampling
    if args.samples is not None:
        sampling = replace(sampling, n_samples=args.samples)
    if args.ddim_steps is not None:
        sampling = replace(sampling, ddim_steps=args.ddim_steps)
    cfg = replace(cfg, sampling=sampling)
    ds = load_dataset(args.data)
    context = ContextModel.load(args.context)
    den = MLPDenoiser.load(args.model)
    preds = pl.predict_dataset(ds, context, den, cfg, _indices(args, len(ds)), with_gt=False)
    names = pl.write_predictions(args.out, preds)
    inputs = {"data": args.data, "context": args.context, "model": args.model}
    pl.write_json(Path(args.out) / "manifest.json",
                  pl.manifest("predict", cfg, h, inputs, names, {"n_scenarios": len(preds)}))
    log.info("predicted %d scenarios into %s", len(preds), args.out)


def cmd_evaluate(args) -> None:
    ds = load_dataset(args.data)
    stored = pl.read_predictions(args.pred)
    rows, summary = pl.evaluate_predictions(stored, ds, args.squared)
    write_csv(args.out, pl.REPORT_HEADER, rows)
    pl.write_json(_sidecar(args.out, ".json"), summary)
    log.info("evaluated %d scenarios", summary["n"])


def cmd_ablate_q(args) -> None:
    cfg, h = pl.load_config(args.config, args.seed)
    try:
        grid = [int(v) for v in args.grid.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad --grid {args.grid!r}") from exc
    if not grid or min(grid) < 1:
        raise ConfigError("--grid needs positive integers")
    train_ds = load_dataset(args.data)
    eval_ds = load_dataset(args.eval_data) if args.eval_data else train_ds
    rows = pl.run_ablation(train_ds, eval_ds, cfg, grid, _indices(args, len(eval_ds)))
    write_csv(args.out, pl.ABLATION_HEADER, rows)
    inputs = {"data": args.data, **({"eval_data": args.eval_data} if args.eval_data else {})}
    pl.write_json(_sidecar(args.out, ".manifest.json"),
                  pl.manifest("ablate-q", cfg, h, inputs, [Path(args.out).name], {"grid": grid}))


def cmd_diag_kl(args) -> None:
    data = args.data
    if data is None:
        try:
            data = json.loads((Path(args.pred) / "manifest.json").read_text())["inputs"]["data"]["path"]
        except (OSError, KeyError, ValueError) as exc:
            raise DataError(f"{args.pred}: no --data given and no usable manifest") from exc
    ds = load_dataset(data)
    records = pl.kl_diagnostic(pl.read_predictions(args.pred), ds, args.bins)
    write_csv(args.out, ["token", "n_q", "kl", "note"], [[r.token, r.n_q, r.kl, r.note] for r in records])


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="trajdiff", description="Context-conditioned diffusion trajectory prediction")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic highway dataset")
    _add_common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--csv", help="also export a per-scenario CSV")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-context", help="train and freeze the context module")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_context)

    p = sub.add_parser("train-diffusion", help="train the conditional denoiser")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--context", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_diffusion)

    def add_range(p):
        p.add_argument("--start", type=int, default=0, help="first scenario index")
        p.add_argument("--count", type=int, help="number of scenarios (default: to the end)")

    p = sub.add_parser("predict", help="sample, aggregate and write predictions")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--context", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--samples", type=int)
    p.add_argument("--ddim-steps", type=int)
    p.add_argument("--out", required=True)
    add_range(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="score a prediction directory against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--squared", action="store_true", help="use squared displacement errors")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate-q", help="retrain and evaluate across codebook sizes")
    _add_common(p)
    p.add_argument("--grid", default="30,60,90,128,256")
    p.add_argument("--data", required=True)
    p.add_argument("--eval-data")
    p.add_argument("--out", required=True)
    add_range(p)
    p.set_defaults(func=cmd_ablate_q)

    p = sub.add_parser("diag-kl", help="per-token endpoint KL diagnostic")
    p.add_argument("--pred", required=True)
    p.add_argument("--data", help="dataset (default: the one recorded in the prediction manifest)")
    p.add_argument("--bins", type=int, default=32)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_diag_kl)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    return 0


if __name__ == "__main__":
    sys.exit(main())
