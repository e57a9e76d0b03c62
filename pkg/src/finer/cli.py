"""Command-line entry point: ``finer <command> ...``.

Every command prints one JSON document on stdout and logs to stderr. Exit code
0 means success, 2 a usage or input problem, 1 anything unexpected.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path
from typing import Sequence

from . import bench as benchmod
from .aggregation import AggregationConfig, aggregate_fpts, init_aggregation, query_arrays
from .dataset import (Dataset, DatasetError, LearningCell, SynthConfig, parse_csv, split_long_sequences,
                      synth_generate, train_val_test_split, write_csv)
from .fusion import ModelConfig
from .metrics import conflict_analysis
from .neural import CheckpointError, ParamStore, load_checkpoint, save_checkpoint
from .plotting import plot_bench, plot_training_curve
from .train import TrainConfig, evaluate, train
from .trie import FetchState, TrieFormatError, advance, build, deserialize, query, serialize

log = logging.getLogger("finer")


class UsageError(Exception):
    """Bad arguments or input; maps to exit code 2."""


class ConfigError(UsageError):
    pass


# ---------------------------------------------------------------------------
# config files

_KEY_ALIASES = {"lambda": "lam"}
PREDICTION_HEADER = ("student_id", "position", "question_id", "correct", "probability")


def parse_config_text(text: str, source: str = "<config>") -> TrainConfig:
    """``key = value`` lines over the :class:`TrainConfig` fields; ``#`` starts a comment."""
    fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    allowed = {k for k in fields if k not in _KEY_ALIASES.values()} | set(_KEY_ALIASES)
    values: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}: line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in allowed:
            raise ConfigError(f"{source}: line {lineno}: unknown key {key!r}")
        name = _KEY_ALIASES.get(key, key)
        default = getattr(TrainConfig, name)
        try:
            if isinstance(default, bool):
                if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(value)
                values[name] = value.lower() in ("true", "1", "yes")
            elif isinstance(default, int):
                values[name] = int(value)
            elif isinstance(default, float):
                values[name] = float(value)
            else:
                values[name] = value
        except ValueError:
            raise ConfigError(f"{source}: line {lineno}: bad value {value!r} for key {key!r}") from None
    cfg = TrainConfig(**values)
    try:
        cfg.validate()
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    return cfg


def load_config(path: str | Path | None) -> TrainConfig:
    if path is None:
        return TrainConfig()
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"{path}: no such config file")
    return parse_config_text(path.read_text(encoding="utf-8"), str(path))


# ---------------------------------------------------------------------------
# helpers


def parse_sequence(text: str) -> list[tuple[int, int]]:
    """``"7:1,7:0,3:1"`` -> ``[(7, 1), (7, 0), (3, 1)]``; the empty string is the empty stream."""
    out = []
    for item in filter(None, (part.strip() for part in text.split(","))):
        q, sep, r = item.partition(":")
        if not sep:
            raise UsageError(f"sequence item {item!r} is not 'question:response'")
        try:
            cell = (int(q), int(r))
        except ValueError:
            raise UsageError(f"sequence item {item!r} is not 'question:response'") from None
        if cell[1] not in (0, 1):
            raise UsageError(f"sequence item {item!r}: response must be 0 or 1")
        out.append(cell)
    return out


def _read_file(path: str | Path) -> bytes:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"{path}: no such file")
    return path.read_bytes()


def _load_trie(path: str | Path):
    return deserialize(_read_file(path))


def _load_model(path: str | Path) -> tuple[ParamStore, ModelConfig, dict]:
    store, header = load_checkpoint(_read_file(path))
    try:
        mcfg = ModelConfig(**header["model"])
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: checkpoint has no usable model config ({exc})") from None
    return store, mcfg, header


def _sidecar_trie(model: str | Path) -> Path:
    return Path(str(model) + ".trie")


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _split_with_offsets(ds: Dataset, max_len: int) -> tuple[Dataset, dict[str, tuple[str, int]]]:
    """Split like :func:`split_long_sequences` and remember where each chunk started."""
    split = split_long_sequences(ds, max_len)
    origin: dict[str, tuple[str, int]] = {}
    it = iter(split.sequences)
    for seq in ds.sequences:
        n_chunks = max(1, -(-len(seq) // max_len))
        for j in range(n_chunks):
            origin[next(it).student] = (seq.student, j * max_len)
    return split, origin


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> dict:
    cfg = SynthConfig(students=args.students, questions=args.questions, seq_len=args.seq_len,
                      scenario2_fraction=args.scenario2_fraction, seed=args.seed, signals=args.signals,
                      targets=args.targets, blocks=args.blocks)
    ds = synth_generate(cfg)
    write_csv(ds, args.out)
    log.info("wrote %d students / %d cells to %s", len(ds.sequences), ds.cell_count, args.out)
    return {"out": str(args.out), "students": len(ds.sequences), "cells": ds.cell_count,
            "questions": ds.question_count, "config": dataclasses.asdict(cfg)}


def cmd_build_trie(args) -> dict:
    ds = parse_csv(args.input)
    t0 = time.perf_counter()
    trie = build(ds, args.xi, args.zbar, args.ibar)
    elapsed = time.perf_counter() - t0
    Path(args.out).write_bytes(serialize(trie))
    log.info("built trie with %d nodes in %.3fs", len(trie.nodes), elapsed)
    stats = trie.counters()
    stats.update(out=str(args.out), students=len(ds.sequences), cells=ds.cell_count, build_seconds=elapsed)
    return stats


def cmd_fetch(args) -> dict:
    trie = _load_trie(args.trie)
    try:
        target = trie.dense_question(args.target)
        cells = [LearningCell(trie.dense_question(q), r) for q, r in parse_sequence(args.sequence)]
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    state = FetchState()
    for cell in cells:
        state = advance(trie, state, cell)
    q = query(trie, state, target)
    out = q.to_json()
    out["target"] = args.target
    out["hops"] = state.hops
    if args.explain:
        p = trie.params
        if args.model:
            store, mcfg, _ = _load_model(args.model)
            acfg = mcfg.aggregation
            if (acfg.ibar, acfg.zbar) != (p.ibar, p.zbar):
                raise UsageError(f"model expects ibar={acfg.ibar}, zbar={acfg.zbar}; trie has {p.ibar}, {p.zbar}")
        else:
            acfg = AggregationConfig(ibar=p.ibar, zbar=p.zbar)
            store = ParamStore(seed=args.seed)
            init_aggregation(store, acfg)
        agg = aggregate_fpts(*query_arrays([q]), store, acfg)
        out["explain"] = {
            "D": agg.D.data[0].tolist() if agg.D is not None else None,
            "att": agg.att.data[0].tolist(),
            "e_omega": agg.e_omega.data[0].tolist(),
            "T": agg.T.data[0].tolist(),
            "weights": "model" if args.model else f"untrained (seed {args.seed})",
        }
    return out


def cmd_train(args) -> dict:
    cfg = load_config(args.config)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if args.no_fpt:
        overrides["use_fpt"] = False
    if args.no_similarity:
        overrides["similarity"] = False
    cfg = dataclasses.replace(cfg, **overrides)
    cfg.validate()

    ds = split_long_sequences(parse_csv(args.data), cfg.max_seq_len)
    tr, va, te = train_val_test_split(ds, seed=cfg.seed)
    log.info("split %d sequences into %d/%d/%d", len(ds.sequences), len(tr.sequences), len(va.sequences),
             len(te.sequences))
    res = train(tr, va, cfg)
    report = evaluate(res.store, res.model_config, te, res.trie).to_json()

    out = Path(args.out)
    header = {"model": res.model_config.to_dict(), "train": dataclasses.asdict(cfg),
              "question_ids": list(ds.question_ids)}
    out.write_bytes(save_checkpoint(res.store, header))
    trie_path = _sidecar_trie(out)
    trie_path.write_bytes(serialize(res.trie))
    curve_path = Path(args.curve) if args.curve else out.with_name(out.name + ".curve.csv")
    with curve_path.open("w", newline="", encoding="utf-8") as fh:
        keys = ["epoch", "train_loss", "val_auc", "val_acc", "val_loss"]
        writer = csv.DictWriter(fh, keys, extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        writer.writerows(res.curve)
    plot_path = Path(args.plot) if args.plot else out.with_name(out.name + ".curve.png")
    plot_training_curve(res.curve, plot_path, res.best_epoch)
    return {
        "initial_loss": res.initial_loss,
        "final_train_loss": res.curve[-1]["train_loss"],
        "best_epoch": res.best_epoch,
        "epochs_run": len(res.curve),
        "test": report,
        "model": str(out),
        "trie": str(trie_path),
        "curve": str(curve_path),
        "plot": str(plot_path),
    }


def cmd_eval(args) -> dict:
    store, mcfg, header = _load_model(args.model)
    trie = _load_trie(args.trie or _sidecar_trie(args.model))
    ids = header.get("question_ids") or None
    ds = parse_csv(args.data, question_ids=ids)
    if ds.question_count != mcfg.question_count:
        raise UsageError(f"data has {ds.question_count} questions, model expects {mcfg.question_count}")
    max_len = header.get("train", {}).get("max_seq_len", 200)
    split, origin = _split_with_offsets(ds, max_len)
    ev = evaluate(store, mcfg, split, trie)
    preds = {}
    for (student, pos), alpha in ev.predictions().items():
        orig, offset = origin[student]
        preds[(orig, offset + pos)] = alpha
    stats = conflict_analysis(ds, preds)
    if args.predictions_out:
        by_student = ds.by_student()
        with open(args.predictions_out, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(PREDICTION_HEADER)
            for (student, pos), alpha in preds.items():
                cell = by_student[student].cells[pos]
                writer.writerow([student, pos, ds.original_question(cell.question), cell.response, repr(alpha)])
    out = ev.to_json()
    out["conflict"] = stats.to_json()
    return out


def read_predictions(path: str | Path) -> dict[tuple[str, int], float]:
    """Read the ``student_id,position,probability`` columns of a predictions CSV."""
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"{path}: no such file")
    preds = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        needed = {"student_id", "position", "probability"}
        if reader.fieldnames is None or not needed <= {h.strip() for h in reader.fieldnames}:
            raise UsageError(f"{path}: line 1: header must include student_id, position and probability")
        reader.fieldnames = [h.strip() for h in reader.fieldnames]
        for lineno, row in enumerate(reader, start=2):
            try:
                preds[(row["student_id"].strip(), int(row["position"]))] = float(row["probability"])
            except (TypeError, ValueError, AttributeError):
                raise UsageError(f"{path}: line {lineno}: bad student_id,position,probability values") from None
    return preds


def cmd_conflicts(args) -> dict:
    ds = parse_csv(args.data)
    preds = read_predictions(args.predictions) if args.predictions else None
    return conflict_analysis(ds, preds, adjacent=args.adjacent).to_json()


def cmd_bench(args) -> dict:
    rows = []
    modes = ("trie", "oracle") if args.mode == "both" else (args.mode,)
    for path in args.data:
        ds = parse_csv(path)
        for mode in modes:
            if mode == "trie":
                res = benchmod.bench_trie(ds, args.queries, seed=args.seed, threads=args.threads,
                                          xi=args.xi, zbar=args.zbar, ibar=args.ibar)
            else:
                n = args.oracle_queries or args.queries
                res = benchmod.bench_oracle(ds, n, seed=args.seed, xi=args.xi, zbar=args.zbar, ibar=args.ibar)
            log.info("%s %s: %.3g s/fetch over %d cells", path, mode, res.seconds_per_query, res.corpus_cells)
            rows.append({"data": str(path), **res.to_json()})
    if args.csv:
        with open(args.csv, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, list(rows[0]), lineterminator="\n")
            writer.writeheader()
            writer.writerows(rows)
    if args.plot:
        plot_bench(rows, args.plot)
    return {"results": rows, "csv": args.csv, "plot": args.plot}


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="finer", description="Follow-up performance trends for knowledge tracing")
    parser.add_argument("-q", "--quiet", action="store_true", help="only log warnings")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic correlation-conflict dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--students", type=int, default=400)
    p.add_argument("--questions", type=int, default=60)
    p.add_argument("--seq-len", type=int, default=24)
    p.add_argument("--scenario2-fraction", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--signals", type=int, default=4)
    p.add_argument("--targets", type=int, default=24)
    p.add_argument("--blocks", type=int, default=2)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("build-trie", help="build a pattern trie from a CSV")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--xi", type=int, default=3)
    p.add_argument("--zbar", type=int, default=2)
    p.add_argument("--ibar", type=int, default=2)
    p.set_defaults(func=cmd_build_trie)

    p = sub.add_parser("fetch", help="fetch FPT rows for a target after a sequence")
    p.add_argument("--trie", required=True)
    p.add_argument("--sequence", required=True, help='"question:response" items, comma separated')
    p.add_argument("--target", type=int, required=True)
    p.add_argument("--explain", action="store_true", help="add similarity, attention and confidence arrays")
    p.add_argument("--model", help="checkpoint whose aggregation weights --explain should use")
    p.add_argument("--seed", type=int, default=0, help="weight seed for --explain without --model")
    p.set_defaults(func=cmd_fetch)

    p = sub.add_parser("train", help="train on a CSV with early stopping")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path; the trie goes to <out>.trie")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--curve", help="training-curve CSV (default <out>.curve.csv)")
    p.add_argument("--plot", help="training-curve PNG (default <out>.curve.png)")
    p.add_argument("--no-fpt", action="store_true", help="zero all FPT inputs (ablation)")
    p.add_argument("--no-similarity", action="store_true", help="frequency-only attention")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a trained model on a CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--trie", help="default <model>.trie")
    p.add_argument("--predictions-out", help="write student_id,position,question_id,correct,probability rows")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("conflicts", help="correlation-conflict statistics")
    p.add_argument("--data", required=True)
    p.add_argument("--predictions", help="predictions CSV with student_id,position,probability columns (eval --predictions-out)")
    p.add_argument("--adjacent", action="store_true", help="require the two correct answers to be adjacent")
    p.set_defaults(func=cmd_conflicts)

    p = sub.add_parser("bench", help="fetch latency: trie cursor vs brute-force rescan")
    p.add_argument("--data", required=True, nargs="+")
    p.add_argument("--mode", choices=("trie", "oracle", "both"), default="both")
    p.add_argument("--queries", type=int, default=10000)
    p.add_argument("--oracle-queries", type=int, help="queries for the oracle (default --queries)")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--xi", type=int, default=3)
    p.add_argument("--zbar", type=int, default=2)
    p.add_argument("--ibar", type=int, default=2)
    p.add_argument("--csv", help="also write the rows as CSV")
    p.add_argument("--plot", help="PNG of seconds per fetch against corpus size")
    p.set_defaults(func=cmd_bench)
    return parser


_INPUT_ERRORS = (UsageError, DatasetError, TrieFormatError, CheckpointError, ValueError, OSError)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s", force=True)
    try:
        _emit(args.func(args))
    except _INPUT_ERRORS as exc:
        print(f"finer {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"finer {args.command}: internal error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
