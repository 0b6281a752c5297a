"""Command-line entry point: prepare, train, eval, sweep, bench, synth.

Settings come from (lowest to highest priority) built-in defaults, a flat
``key = value`` config file given by ``--config``, and command-line flags.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, load_record_cache, save_checkpoint, save_record_cache
from .data import (
    UNSW_SCHEMA,
    RecordTable,
    apply_normalization,
    encode,
    histogram_text,
    load_csv,
    make_windows,
    prepare,
    split_validation,
    write_csv,
)
from .evaluation import (
    benchmark_prediction_time,
    evaluate,
    linear_fit,
    sweep_sequence_length,
    write_rows_csv,
)
from .layers import init_params
from .synth import RULES, synth_generate
from .training import TrainConfig, TrainingDiverged, build_spec, train


class UsageError(Exception):
    pass


# flag dest -> TrainConfig field
_CONFIG_FLAGS = {
    "task": "task",
    "mode": "loss_mode",
    "embed": "embed",
    "model": "kind",
    "seq_len": "sequence_length",
    "lr": "learning_rate",
    "batch": "batch_size",
    "epochs": "epochs",
    "dropout": "dropout_rate",
    "seed": "seed",
    "patience": "early_stop_patience",
    "hidden": "hidden",
    "val_fraction": "validation_fraction",
    "clip_norm": "clip_norm",
}


def parse_config_file(path: str | Path) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _coerce(field_name: str, value):
    types = {f.name: f.type for f in fields(TrainConfig)}
    kind = types[field_name]
    if isinstance(value, str):
        if kind in ("bool",):
            if value.lower() in ("on", "true", "1", "yes"):
                return True
            if value.lower() in ("off", "false", "0", "no"):
                return False
            raise UsageError(f"{field_name}: expected on/off, got {value!r}")
        if kind == "int":
            return int(value)
        if kind == "float":
            return float(value)
        if kind.startswith("float | None"):
            return None if value.lower() in ("", "none") else float(value)
    return value


def resolve_config(args: argparse.Namespace) -> TrainConfig:
    values: dict[str, object] = {}
    if getattr(args, "config", None):
        for key, value in parse_config_file(args.config).items():
            name = _CONFIG_FLAGS.get(key, key)
            if name not in {f.name for f in fields(TrainConfig)}:
                raise UsageError(f"{args.config}: unknown key {key!r}")
            values[name] = value
    for flag, name in _CONFIG_FLAGS.items():
        v = getattr(args, flag, None)
        if v is not None:
            values[name] = v
    try:
        return TrainConfig(**{k: _coerce(k, v) for k, v in values.items()})
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--task", choices=["binary", "multi", "m2b"])
    p.add_argument("--mode", choices=["m2m", "m2o"])
    p.add_argument("--embed", choices=["on", "off"])
    p.add_argument("--model", choices=["lstm", "mlp"])
    p.add_argument("--seq-len", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--val-fraction", type=float)
    p.add_argument("--clip-norm", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nidslstm", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--threads", type=int, help="cap on BLAS worker threads")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="parse CSVs, report class histograms, write caches")
    p.add_argument("--train", required=True)
    p.add_argument("--test")
    p.add_argument("--cache-dir", required=True)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    p.add_argument("--train", required=True)
    p.add_argument("--test", help="optional test CSV evaluated after training")
    p.add_argument("--cache-dir")
    p.add_argument("--out-dir", required=True)
    _add_train_flags(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a test CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--cache-dir")
    p.add_argument("--out-dir")

    p = sub.add_parser("sweep", help="validation accuracy across sequence lengths")
    p.add_argument("--train", required=True)
    p.add_argument("--test")
    p.add_argument("--cache-dir")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--lengths", required=True, help="comma-separated, e.g. 10,60,110")
    _add_train_flags(p)

    p = sub.add_parser("bench", help="prediction time per sequence across lengths")
    p.add_argument("--checkpoint", help="model to time; default is a freshly initialised LSTM")
    p.add_argument("--lengths", default="10,60,110,160,210,260,310")
    p.add_argument("--reps", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir")

    p = sub.add_parser("synth", help="write a synthetic stream in UNSW-NB15 CSV layout")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--vocab", type=int, default=24)
    p.add_argument("--noise", type=float, default=0.005)
    p.add_argument("--rule", choices=RULES, default="vote")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    return parser


def _require_file(path: str | None) -> None:
    if path is not None and not Path(path).is_file():
        raise UsageError(f"no such file: {path}")


def _load(path: str, cache_dir: str | None) -> RecordTable:
    if cache_dir is None:
        return load_csv(path, UNSW_SCHEMA)
    cache = Path(cache_dir) / (Path(path).name + ".cache")
    table = load_record_cache(cache, UNSW_SCHEMA, path)
    if table is None:
        table = load_csv(path, UNSW_SCHEMA)
        Path(cache_dir).mkdir(parents=True, exist_ok=True)
        save_record_cache(cache, table, path)
    return table


def _config_lines(config: dict) -> list[str]:
    return [f"{k} = {v}" for k, v in sorted(config.items())]


def _write_report(out_dir: Path, report, config: dict, stem: str = "report") -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    text = report.text() + "\n\neffective config:\n" + "\n".join("  " + l for l in _config_lines(config))
    (out_dir / f"{stem}.txt").write_text(text + "\n", encoding="utf-8")
    with (out_dir / f"{stem}.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "value"])
        for name, value in report.rows():
            w.writerow([name, repr(value) if isinstance(value, float) else value])


def cmd_prepare(args) -> int:
    _require_file(args.train)
    _require_file(args.test)
    for label, path in (("train", args.train), ("test", args.test)):
        if path is None:
            continue
        table = _load(path, args.cache_dir)
        print(f"{label}: {path}")
        print(histogram_text(table.class_counts()))
    return 0


def cmd_train(args) -> int:
    _require_file(args.train)
    _require_file(args.test)
    config = resolve_config(args)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_table = _load(args.train, args.cache_dir)
    test_table = _load(args.test, args.cache_dir) if args.test else None
    data = prepare(train_table, test_table)
    windows = make_windows(data.train, config.sequence_length)
    tr, val = split_validation(windows, config.validation_fraction, config.seed)
    spec = build_spec(
        config,
        [data.vocabs[n].size for n in UNSW_SCHEMA.categorical],
        len(UNSW_SCHEMA.continuous),
        UNSW_SCHEMA.categorical,
        UNSW_SCHEMA.schema_hash(),
    )
    effective = {**config.to_dict(), "train_csv": Path(args.train).name}
    if args.test:
        effective["test_csv"] = Path(args.test).name
    (out_dir / "config.txt").write_text("\n".join(_config_lines(effective)) + "\n", encoding="utf-8")
    ckpt = out_dir / "model.ckpt"
    try:
        params, history = train(spec, tr, val, config, log=print)
    except TrainingDiverged as exc:
        save_checkpoint(ckpt, exc.params, effective, data.vocabs, data.stats, UNSW_SCHEMA)
        raise
    save_checkpoint(ckpt, params, effective, data.vocabs, data.stats, UNSW_SCHEMA)
    with (out_dir / "history.csv").open("w", newline="", encoding="utf-8") as fh:
        csv.writer(fh, lineterminator="\n").writerows(history.csv_rows())
    print(f"checkpoint written to {ckpt}")
    if data.test is not None:
        report = evaluate(params, make_windows(data.test, config.sequence_length), config.task)
        _write_report(out_dir, report, effective)
        print(report.text())
    return 0


def cmd_eval(args) -> int:
    _require_file(args.checkpoint)
    _require_file(args.test)
    ckpt = load_checkpoint(args.checkpoint, UNSW_SCHEMA)
    config = TrainConfig.from_dict(ckpt.config)
    table = _load(args.test, args.cache_dir)
    records = apply_normalization(encode(table, ckpt.vocabs), ckpt.stats)
    report = evaluate(ckpt.params, make_windows(records, config.sequence_length), config.task)
    print(report.text())
    effective = {**ckpt.config, "checkpoint": Path(args.checkpoint).name, "eval_csv": Path(args.test).name}
    _write_report(Path(args.out_dir) if args.out_dir else Path(args.checkpoint).parent, report, effective, "eval")
    return 0


def _parse_lengths(text: str) -> list[int]:
    try:
        lengths = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"bad length list {text!r}") from None
    if not lengths or min(lengths) < 1:
        raise UsageError("lengths must be positive integers")
    return lengths


def cmd_sweep(args) -> int:
    _require_file(args.train)
    _require_file(args.test)
    config = resolve_config(args)
    lengths = _parse_lengths(args.lengths)
    train_table = _load(args.train, args.cache_dir)
    test_table = _load(args.test, args.cache_dir) if args.test else None
    data = prepare(train_table, test_table)
    rows = sweep_sequence_length(
        data.train,
        [data.vocabs[n].size for n in UNSW_SCHEMA.categorical],
        config,
        lengths,
        test_records=data.test,
        log=print,
    )
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_rows_csv(out_dir / "sweep.csv", rows)
    print(f"sweep written to {out_dir / 'sweep.csv'}")
    return 0


def cmd_bench(args) -> int:
    lengths = _parse_lengths(args.lengths)
    if args.checkpoint:
        _require_file(args.checkpoint)
        params = load_checkpoint(args.checkpoint, UNSW_SCHEMA).params
    else:
        spec = build_spec(TrainConfig(), (25, 5, 4), len(UNSW_SCHEMA.continuous))
        params = init_params(spec, np.random.default_rng(args.seed))
    try:
        rows = benchmark_prediction_time(params, lengths, repetitions=args.reps, seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    for row in rows:
        print(f"L={row['length']:>5}  {row['seconds_per_sequence'] * 1e3:.3f} ms/sequence")
    if len(rows) >= 2:
        slope, intercept, r2 = linear_fit([r["length"] for r in rows], [r["seconds_per_sequence"] for r in rows])
        print(f"linear fit: {slope * 1e6:.3f} us/step + {intercept * 1e3:.3f} ms, R^2 = {r2:.4f}")
    if args.out_dir:
        Path(args.out_dir).mkdir(parents=True, exist_ok=True)
        write_rows_csv(Path(args.out_dir) / "timing.csv", rows)
    return 0


def cmd_synth(args) -> int:
    try:
        data = synth_generate(
            args.n, args.classes, args.k, seed=args.seed, vocab_size=args.vocab,
            noise=args.noise, rule=args.rule,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_csv(args.out, data.to_table())
    print(f"wrote {args.n} records to {args.out}")
    return 0


COMMANDS = {
    "prepare": cmd_prepare,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "bench": cmd_bench,
    "synth": cmd_synth,
}


def _thread_limit(n: int | None):
    if n is None:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        with _thread_limit(args.threads):
            return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"nidslstm: error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, TrainingDiverged) as exc:
        print(f"nidslstm: error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())
