"""Command-line entry point: ``efm {gen-data,train,generate,transfer,eval}``.

Every command is deterministic under ``--seed``.  Tabular outputs are CSV,
reports are JSON, and ``--plot`` renders a matplotlib figure next to them.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .dataset import DEFAULT_ROTATION, load_dataset, make_synthetic_2d, save_dataset
from .errors import EFMError
from .inference import METHODS, generate, transfer
from .metrics import DEFAULT_EVAL_SIZE, evaluate_conditions, summarize_report
from .training import (
    COUPLINGS,
    TrainConfig,
    load_training_checkpoint,
    save_training_checkpoint,
    train_efm,
    train_otcfm_baseline,
)

log = logging.getLogger("efm")


class CLIError(Exception):
    pass


def parse_condition(text):
    try:
        return np.array([float(v) for v in text.split(",")], dtype=float)
    except ValueError:
        raise CLIError(f"cannot parse condition {text!r}; expected comma-separated numbers") from None


def parse_condition_list(text):
    return [parse_condition(part) for part in text.split(";") if part.strip()]


def write_points(path, x, labels=None):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{i + 1}" for i in range(x.shape[1])] + (["cluster"] if labels is not None else []))
        for j, row in enumerate(x):
            writer.writerow([repr(float(v)) for v in row] + ([int(labels[j])] if labels is not None else []))


def _load_model(path):
    if not Path(path).exists():
        raise CLIError(f"checkpoint not found: {path}")
    return load_training_checkpoint(path)


def _warn_outside(c, payload):
    lo = np.array(payload["omega_min"])
    hi = np.array(payload["omega_max"])
    if c.shape != lo.shape:
        raise CLIError(f"condition has {c.size} coordinates, model expects {lo.size}")
    if np.any(c < lo) or np.any(c > hi):
        print(f"warning: condition {c.tolist()} lies outside Omega; extrapolating", file=sys.stderr)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args):
    conditions = parse_condition_list(args.conditions) if args.conditions else None
    ds = make_synthetic_2d(
        n_per_cluster=args.n_per_cluster,
        inner_radius=args.inner_radius,
        outer_radius=args.outer_radius,
        spread=args.spread,
        seed=args.seed,
        conditions=conditions,
        rotation=args.rotation,
    )
    out = Path(args.out)
    if not out.parent.is_dir():
        raise CLIError(f"output directory does not exist: {out.parent}")
    save_dataset(ds, out)
    print(f"wrote {out} ({ds.num_conditions} conditions x {len(ds.samples[0])} samples, d={ds.dim_data}, k={ds.dim_cond})")


def _build_config(args, base=None):
    data = dict(base or {})
    if args.config:
        try:
            data.update(json.loads(Path(args.config).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise CLIError(f"cannot read config {args.config}: {exc}") from None
    for name in ("iterations", "seed", "coupling", "lr", "batch_size"):
        value = getattr(args, name, None)
        if value is not None:
            data[name] = value
    return TrainConfig.from_dict(data)


def cmd_train(args):
    ds = load_dataset(args.dataset)
    trainer = train_otcfm_baseline if args.method == "otcfm" else train_efm
    prev = base = None
    if args.resume:
        prev, payload = _load_model(args.resume)
        if prev.method != args.method:
            raise CLIError(f"checkpoint was trained with method {prev.method!r}")
        base = {k: v for k, v in payload["config"].items() if k != "iterations"}
    config = _build_config(args, base)
    config.validate(ds)
    out = Path(args.out)

    def on_checkpoint(result):
        save_training_checkpoint(out.with_name(f"{out.stem}.it{result.iteration}{out.suffix}"), result, config, ds)

    result = trainer(ds, config, resume=prev, on_checkpoint=on_checkpoint)
    save_training_checkpoint(out, result, config, ds)
    trace_path = Path(args.trace) if args.trace else out.with_suffix(".trace.csv")
    with open(trace_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "loss"])
        for it, loss in result.loss_trace:
            writer.writerow([it, repr(loss)])
    if args.plot:
        from .plotting import loss_curve

        loss_curve(args.plot, result.loss_trace)
    final = result.loss_trace[-1][1] if result.loss_trace else float("nan")
    print(f"wrote {out} and {trace_path} (iterations={result.iteration}, skipped={result.skipped}, final_loss={final:.6g})")


def cmd_generate(args):
    result, payload = _load_model(args.checkpoint)
    c = parse_condition(args.condition)
    _warn_outside(c, payload)
    rng = np.random.default_rng(args.seed)
    x, traj = generate(result.inference_model, result.source, c, args.n, args.steps, args.integrator, rng, return_trajectory=True)
    write_points(args.out, x)
    if args.plot:
        from .plotting import scatter_samples

        gt = None
        if args.dataset:
            ds = load_dataset(args.dataset)
            hit = np.flatnonzero(np.all(np.isclose(ds.conditions, c), axis=1))
            gt = ds.samples[hit[0]] if len(hit) else None
        scatter_samples(args.plot, x, gt, traj.states, title=f"generation at c = {c.tolist()}")
    print(f"wrote {args.out} ({len(x)} samples at c={c.tolist()})")


def cmd_transfer(args):
    result, payload = _load_model(args.checkpoint)
    c1 = parse_condition(args.from_)
    c2 = parse_condition(args.to)
    _warn_outside(c1, payload)
    _warn_outside(c2, payload)
    ds = load_dataset(args.dataset)
    hit = np.flatnonzero(np.all(np.isclose(ds.conditions, c1), axis=1))
    if not len(hit):
        raise CLIError(f"dataset has no samples at source condition {c1.tolist()}")
    x = ds.samples[hit[0]]
    labels = ds.labels[hit[0]] if ds.labels is not None else None
    if args.n is not None and args.n < len(x):
        pick = np.sort(np.random.default_rng(args.seed).choice(len(x), size=args.n, replace=False))
        x = x[pick]
        labels = labels[pick] if labels is not None else None
    y, traj = transfer(result.inference_model, x, c1, c2, args.steps, args.integrator, return_trajectory=True)
    write_points(args.out, y, labels)
    if args.plot:
        from .plotting import scatter_samples

        tgt = np.flatnonzero(np.all(np.isclose(ds.conditions, c2), axis=1))
        gt = ds.samples[tgt[0]] if len(tgt) else None
        scatter_samples(args.plot, y, gt, traj.states, title=f"transfer {c1.tolist()} -> {c2.tolist()}")
    print(f"wrote {args.out} ({len(y)} samples {c1.tolist()} -> {c2.tolist()})")


def cmd_eval(args):
    result, payload = _load_model(args.checkpoint)
    gt = load_dataset(args.dataset)
    if gt.dim_data != result.model.dim_data or gt.dim_cond != result.model.dim_cond:
        raise CLIError(
            f"dimension mismatch: dataset (d={gt.dim_data}, k={gt.dim_cond}) vs "
            f"model (d={result.model.dim_data}, k={result.model.dim_cond})"
        )

    model = result.inference_model

    def sample_fn(c, n, rng):
        return generate(model, result.source, c, n, args.steps, args.integrator, rng)

    report = evaluate_conditions(sample_fn, gt, np.array(payload["train_conditions"]), n=args.n, seed=args.seed)
    Path(args.out).write_text(json.dumps(report, indent=2))
    writer = csv.writer(sys.stdout)
    writer.writerow(["group", "mean_W1", "count"])
    for group, stats in summarize_report(report).items():
        writer.writerow([group, f"{stats['mean_W1']:.6f}", stats["count"]])
    if args.plot:
        from .plotting import w1_bars

        w1_bars(args.plot, report)


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="efm", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write the synthetic four-corner dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-per-cluster", type=int, default=50)
    p.add_argument("--inner-radius", type=float, default=0.5)
    p.add_argument("--outer-radius", type=float, default=1.5)
    p.add_argument("--spread", type=float, default=0.15)
    p.add_argument("--rotation", type=float, default=DEFAULT_ROTATION, help="cluster-axis turn in degrees per unit of c1 - c2")
    p.add_argument("--conditions", help='override the corners, e.g. "0.5,0.5;0,0.5"')
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a matrix field")
    p.add_argument("--dataset", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--method", choices=("efm", "otcfm"), default="efm")
    p.add_argument("--coupling", choices=COUPLINGS)
    p.add_argument("--iterations", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", help="continue from this checkpoint")
    p.add_argument("--trace", help="loss trace CSV (default: <out>.trace.csv)")
    p.add_argument("--plot", help="write a loss-curve figure here")
    p.set_defaults(func=cmd_train)

    def add_integration(p):
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--steps", type=int, default=100)
        p.add_argument("--integrator", choices=METHODS, default="rk4")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--plot", help="write a scatter/trajectory figure here")

    p = sub.add_parser("generate", help="sample at a condition")
    add_integration(p)
    p.add_argument("--condition", required=True)
    p.add_argument("--n", type=int, default=DEFAULT_EVAL_SIZE)
    p.add_argument("--dataset", help="ground truth drawn in the figure")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("transfer", help="move dataset samples between conditions")
    add_integration(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--from", dest="from_", required=True)
    p.add_argument("--to", required=True)
    p.add_argument("--n", type=int)
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("eval", help="per-condition W1 against held-out ground truth")
    add_integration(p)
    p.add_argument("--dataset", required=True, help="held-out ground-truth dataset")
    p.add_argument("--n", type=int, default=DEFAULT_EVAL_SIZE)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except (CLIError, EFMError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
