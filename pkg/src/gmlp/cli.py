"""Command-line interface: ``gmlp <command> [options]``."""
from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import checkpoint
from .accounting import analyze, count_params
from .checkpoint import CheckpointError, atomic_write
from .data import MASK_ONLY, synth_task_generate
from .export import attention_max_map, dump_filters, matrix_csv
from .gradcheck import SCOPES, TOL, corrupted_adjoint, run_scope
from .metrics import fit_power_law
from .models import PRESETS, ConfigError, ModelConfig, init_params, load_config
from .training import DESK_TRAIN, METRIC_FIELDS, TrainConfig, TrainingDiverged, train

log = logging.getLogger("gmlp")


def resolve_seed(seed: int | None) -> int:
    if seed is not None:
        return seed
    env = os.environ.get("GMLP_SEED")
    return int(env) if env not in (None, "") else 0


def _metrics_csv(records) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=METRIC_FIELDS, lineterminator="\n")
    writer.writeheader()
    for r in records:
        writer.writerow({k: repr(r[k]) if isinstance(r[k], float) else r[k] for k in METRIC_FIELDS})
    return buf.getvalue()


def _train_config(args) -> TrainConfig:
    tc = DESK_TRAIN.replace(seed=resolve_seed(args.seed), total_steps=args.steps,
                            warmup_steps=min(DESK_TRAIN.warmup_steps, args.steps), dtype=args.dtype)
    if args.lr is not None:
        tc = tc.replace(peak_lr=args.lr)
    if args.batch_size is not None:
        tc = tc.replace(batch_size=args.batch_size)
    return tc


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_analyze(args) -> int:
    try:
        config = load_config(args.config)
        rows = analyze(config, args.seq_len)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        if "available" not in str(exc):
            print(f"available presets: {', '.join(PRESETS)}", file=sys.stderr)
        return 2
    if args.format == "csv":
        writer = csv.DictWriter(sys.stdout, fieldnames=["component", "params", "macs", "flops"], lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
        return 0
    print(f"{'component':<28} {'params':>14} {'MACs':>18} {'FLOPs':>18}")
    for r in rows:
        if r["component"] == "total":
            print("-" * 81)
        print(f"{r['component']:<28} {r['params']:>14,} {r['macs']:>18,} {r['flops']:>18,}")
    total = rows[-1]
    print(f"\ntotal: {total['params'] / 1e6:.2f}M params, {total['macs'] / 1e9:.3f}B MACs, "
          f"{total['flops'] / 1e9:.3f}B FLOPs")
    return 0


def cmd_gradcheck(args) -> int:
    seed = resolve_seed(args.seed)
    seeds = range(seed, seed + args.seeds)
    scopes = list(SCOPES) if args.scope == "all" else [args.scope]
    reports = []
    if args.corrupt_adjoint:
        with corrupted_adjoint():
            for s in scopes:
                reports += run_scope(s, seeds, args.tol)
    else:
        for s in scopes:
            reports += run_scope(s, seeds, args.tol)
    failed = 0
    for rep in reports:
        print(rep.format())
        failed += not rep.passed
    print(f"\n{len(reports) - failed}/{len(reports)} checks passed at tol {args.tol:g}")
    return 0 if failed == 0 else 1


def _run_training(config, task, tc, out_dir: Path | None, freeze=False):
    records = []

    def on_record(rec):
        records.append(rec)
        if out_dir is not None:
            atomic_write(out_dir / "metrics.csv", _metrics_csv(records))

    return train(config, task, tc, freeze_spatial=freeze, on_record=on_record)


def cmd_train(args) -> int:
    config = load_config(args.config)
    if config.protocol != "mlm_token":
        print("error: train needs an mlm_token config", file=sys.stderr)
        return 2
    tc = _train_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write(out / "config.json", json.dumps(config.to_dict(), indent=2) + "\n")
    atomic_write(out / "train_config.json", json.dumps(dataclass_dict(tc), indent=2) + "\n")
    try:
        result = _run_training(config, args.task, tc, out, args.freeze_spatial)
    except TrainingDiverged as exc:
        print(f"error: {exc}; partial metrics kept in {out / 'metrics.csv'}", file=sys.stderr)
        return 3
    checkpoint.save(out / "checkpoint.gmlp", result.params.state_dict())
    print(f"final eval loss: {result.final_eval_loss:.6f} (log vocab = {math.log(config.vocab_size):.6f})")
    print(f"toeplitzness: init {result.initial_toeplitzness:.4f} -> final {result.records[-1]['toeplitzness_mean']:.4f}")
    print(f"wall time: {result.wall_time:.1f}s")
    return 0


def dataclass_dict(obj) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(obj).items()}


def cmd_ablate(args) -> int:
    base = load_config(args.config)
    tc = _train_config(args)
    runs: list[tuple[str, ModelConfig, bool]] = [
        (v, base.replace(block_type="gmlp", sgu_variant=v), False) for v in args.variants
    ]
    if args.mixer:
        runs.append(("mixer_token_mlp", base.replace(block_type="mixer", d_spatial=base.d_spatial or 2 * base.n), False))
    if args.frozen_control:
        runs.append(("frozen_spatial_control", base.replace(block_type="gmlp", sgu_variant="multiplicative_split"), True))
    rows = []
    for label, cfg, freeze in runs:
        try:
            res = train(cfg, args.task, tc, freeze_spatial=freeze)
        except TrainingDiverged as exc:
            print(f"error: {label}: {exc}", file=sys.stderr)
            return 3
        rows.append({"variant": label, "params": count_params(cfg).total, "final_eval_loss": res.final_eval_loss})
    print(f"{'variant':<26} {'params':>10} {'final eval loss':>16}")
    for r in rows:
        print(f"{r['variant']:<26} {r['params']:>10,} {r['final_eval_loss']:>16.6f}")
    print(f"(log vocab = {math.log(base.vocab_size):.6f})")
    if args.out:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=["variant", "params", "final_eval_loss"], lineterminator="\n")
        w.writeheader()
        w.writerows({**r, "final_eval_loss": repr(r["final_eval_loss"])} for r in rows)
        atomic_write(args.out, buf.getvalue())
    return 0


def cmd_dump_filters(args) -> int:
    try:
        tensors = checkpoint.load(args.checkpoint)
    except (OSError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        written = dump_filters(tensors, args.out, args.format, args.rows)
    except KeyError as exc:
        print(f"error: checkpoint is missing tensor {exc.args[0]}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    config_path = Path(args.config) if args.config else Path(args.checkpoint).with_name("config.json")
    if config_path.is_file():
        config = ModelConfig.from_json(config_path.read_text())
        if config.tiny_attn and config.protocol == "mlm_token":
            store = init_params(config, np.random.default_rng(0))
            try:
                store.load_state(tensors)
            except KeyError as exc:
                print(f"error: {exc}", file=sys.stderr)
                return 2
            batch = synth_task_generate(args.task, config.n, config.vocab_size,
                                        np.random.default_rng(resolve_seed(args.seed)), 1, 0.15, MASK_ONLY)
            amap = attention_max_map(config, store, batch.inputs)[0]
            path = Path(args.out) / "attention_max.csv"
            atomic_write(path, matrix_csv(amap))
            written.append(path)
    for p in written:
        print(p)
    return 0


def read_points(path) -> list[tuple[float, float]]:
    """Parse ``params,metric`` rows; a non-numeric first line is a header."""
    points = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) < 2:
                raise ValueError(f"line {lineno}: expected two columns, got {len(row)}")
            try:
                x, y = float(row[0]), float(row[1])
            except ValueError:
                if lineno == 1:
                    continue
                raise ValueError(f"line {lineno}: non-numeric value in {row[:2]}") from None
            if x <= 0 or y <= 0 or not (math.isfinite(x) and math.isfinite(y)):
                raise ValueError(f"line {lineno}: values must be finite and positive")
            points.append((x, y))
    return points


def cmd_fit_scaling(args) -> int:
    try:
        points = read_points(args.points)
        fit = fit_power_law(points)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"coefficient a = {fit.coefficient:.12g}")
    print(f"exponent alpha = {fit.exponent:.12g}")
    print(f"residual (log-space SSE) = {fit.residual:.6g}")
    if args.samples_out:
        xs = np.asarray([p[0] for p in points])
        grid = np.geomspace(xs.min(), xs.max(), args.samples)
        lines = ["x,y"] + [f"{x!r},{y!r}" for x, y in zip(grid.tolist(), fit.predict(grid).tolist())]
        atomic_write(args.samples_out, "\n".join(lines) + "\n")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _add_training_args(p):
    p.add_argument("--task", default="copy_shift_1")
    p.add_argument("--config", default="micro", help="preset name or JSON config path")
    p.add_argument("--steps", type=int, default=DESK_TRAIN.total_steps)
    p.add_argument("--seed", type=int, default=None, help="falls back to $GMLP_SEED, then 0")
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--dtype", choices=["float32", "float64"], default="float32")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gmlp", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", help="parameter and multiply-add accounting")
    p.add_argument("--config", required=True, help="preset name or JSON config path")
    p.add_argument("--seq-len", type=int, default=None)
    p.add_argument("--format", choices=["table", "csv"], default="table")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--scope", choices=[*SCOPES, "all"], default="op")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds")
    p.add_argument("--tol", type=float, default=TOL)
    p.add_argument("--corrupt-adjoint", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train", help="train on a synthetic MLM task")
    _add_training_args(p)
    p.add_argument("--out", required=True)
    p.add_argument("--freeze-spatial", action="store_true", help="zero and freeze all spatial weights")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="compare SGU variants on one task")
    _add_training_args(p)
    p.add_argument("--variants", type=lambda s: [v.strip() for v in s.split(",") if v.strip()],
                   default=["linear", "additive", "multiplicative", "multiplicative_split"])
    p.add_argument("--no-mixer", dest="mixer", action="store_false", help="skip the token-MLP row")
    p.add_argument("--no-frozen-control", dest="frozen_control", action="store_false")
    p.add_argument("--out", default=None, help="optional CSV output")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("dump-filters", help="export spatial weights (and attention maps)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=["csv", "pgm"], default="csv")
    p.add_argument("--rows", type=lambda s: [int(v) for v in s.split(",")], default=None)
    p.add_argument("--config", default=None, help="config JSON (default: config.json next to the checkpoint)")
    p.add_argument("--task", default="copy_shift_1", help="task for the attention-map example")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_dump_filters)

    p = sub.add_parser("fit-scaling", help="fit metric ~ a * params^(-alpha)")
    p.add_argument("--points", required=True, help="CSV of params,metric rows")
    p.add_argument("--samples", type=int, default=50)
    p.add_argument("--samples-out", default=None, help="write fitted-curve samples as CSV")
    p.set_defaults(func=cmd_fit_scaling)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
