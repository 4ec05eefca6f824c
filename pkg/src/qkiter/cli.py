"""Command-line entry point: gen-data, train, embed, evaluate, compare.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import encoder as E
from .config import ExperimentConfig, dump_config, load_config
from .data import (
    DatasetFiles,
    SynthConfig,
    build_eval_split,
    read_dataset,
    read_vectors,
    write_dataset,
    write_vectors,
)
from .errors import ContractError, DataError, DegenerateInputError, QKError
from .metrics import (
    evaluate_baseline,
    metrics_report,
    rank_all_pairs,
    read_ground_truth,
    write_metrics,
    write_pr_csv,
)
from .trainer import TrainState, prepare_train_data, run_qk_iteration, run_simclr

log = logging.getLogger("qkiter")

TABLE_FIELDS = ["phase", "kind", "steps", "mu_ap", "macro_ap", "early_stopped"]


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if getattr(args, "seed_override", None) is not None:
        cfg = cfg.with_seed(args.seed_override)
    return cfg


def _workers(args, cfg) -> int:
    return args.workers if args.workers is not None else cfg.workers


def _write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_table(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, TABLE_FIELDS, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)


def _format_table(rows, fields) -> str:
    cells = [[str(f) for f in fields]]
    for r in rows:
        cells.append([f"{r[f]:.4f}" if isinstance(r[f], float) else str(r[f]) for f in fields])
    widths = [max(len(c[i]) for c in cells) for i in range(len(fields))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(row, widths)) for row in cells)


# --- gen-data ---------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    split = build_eval_split(
        cfg.synth, cfg.eval.n_eval_queries, cfg.eval.n_distractors, cfg.eval.n_extra_keys
    )
    files = write_dataset(args.out, cfg.synth, split)
    print(f"wrote dataset to {files.root}")
    return 0


# --- train ------------------------------------------------------------------


def _dataset_synth(data_dir) -> SynthConfig:
    manifest = json.loads(DatasetFiles(data_dir).manifest.read_text())
    return SynthConfig(**manifest["synth"])


def setup_training(cfg: ExperimentConfig, data_dir, workers: int = 1):
    """Dataset, featurizer and freshly initialized encoders for a run."""
    keys, split = read_dataset(data_dir)
    synth = _dataset_synth(data_dir)
    m = cfg.model
    fz = E.build_featurizer(m.featurizer_seed, keys, m.d_proj, m.d_out)
    data = prepare_train_data(keys, synth, fz, workers)
    dims = (m.backbone_width, m.d_mid, m.head_hidden, m.d_out, m.init_seed, m.featurizer_seed)
    q = E.init_encoder("query", data.queries, *dims)
    k = E.init_encoder("key", data.keys, *dims)
    return TrainState(q, k, fz), data, split


def train_run(cfg: ExperimentConfig, data_dir, out_dir, mode: str, workers: int = 1,
              resume: bool = False, stop_after: int | None = None) -> dict:
    """One training run in ``mode`` ("qk" or "simclr"); returns the summary
    written to ``phases.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    state, data, split = setup_training(cfg, data_dir, workers)
    rc = cfg.run_config(workers)
    baseline = evaluate_baseline(state.featurizer, split, cfg.loss.tau)
    dump_config(cfg, out / "config.json")
    E.save_featurizer(state.featurizer, out / "featurizer.qkfz")
    t0 = time.perf_counter()
    if mode == "qk":
        state, rows, _ = run_qk_iteration(
            cfg.schedule(), state, data, split, rc, out, resume=resume, stop_after=stop_after
        )
    elif mode == "simclr":
        steps = cfg.simclr_steps()
        curve_every = cfg.schedule().phases[0].max_steps
        state, evals = run_simclr(
            state, data, split, rc, steps, cfg.train.seed, cfg.simclr.lr0, curve_every, out
        )
        final = evals[-1][1]
        rows = [
            {
                "phase": "simclr",
                "kind": "S",
                "steps": steps,
                "mu_ap": final["mu_ap"],
                "macro_ap": final["macro_ap"],
                "early_stopped": False,
            }
        ]
    else:
        raise ValueError(f"unknown mode {mode!r}")
    wall = time.perf_counter() - t0
    E.write_checkpoint(state.q, out / "query.qkcp")
    E.write_checkpoint(state.k, out / "key.qkcp")
    summary = {"mode": mode, "baseline": baseline, "phases": rows}
    _write_json(summary, out / "phases.json")
    _write_table(rows, out / "phases.csv")
    _write_json({"wall_time": wall}, out / "run_timing.json")
    summary["wall_time"] = wall
    return summary


def cmd_train(args) -> int:
    cfg = _config(args)
    s = train_run(
        cfg, args.data, args.out, args.mode, _workers(args, cfg), args.resume, args.stop_after
    )
    print(f"baseline mu_ap {s['baseline']['mu_ap']:.4f}")
    print(_format_table(s["phases"], TABLE_FIELDS))
    return 0


# --- embed / evaluate -------------------------------------------------------


def cmd_embed(args) -> int:
    enc = E.read_checkpoint(args.checkpoint, expect_role=args.role)
    fz_path = args.featurizer or Path(args.checkpoint).parent / "featurizer.qkfz"
    fz = E.load_featurizer(fz_path)
    rows, id_offset, _ = read_vectors(args.input)
    if len(rows) == 0:
        raise DegenerateInputError(f"{args.input}: no rows to embed")
    if rows.shape[1] != enc.d_in:
        raise DataError(f"{args.input}: width {rows.shape[1]}, model expects {enc.d_in}")
    workers = args.workers or 1
    write_vectors(args.out, E.embed(enc, fz, rows, workers), id_offset, role=args.role)
    print(f"wrote {len(rows)} {args.role} descriptors to {args.out}")
    return 0


def evaluate_files(q_path, k_path, gt_path, tau: float = 0.07, pr_csv=None) -> dict:
    q, q_off, q_role = read_vectors(q_path, "QKDV")
    k, k_off, k_role = read_vectors(k_path, "QKDV")
    if q_role != "query" or k_role != "key":
        raise ContractError(f"expected query and key descriptors, got {q_role} and {k_role}")
    if q.shape[1] != k.shape[1]:
        raise DataError(f"descriptor widths differ: {q.shape[1]} vs {k.shape[1]}")
    rpl = rank_all_pairs(
        q,
        k,
        tau,
        read_ground_truth(gt_path),
        q_off + np.arange(len(q)),
        k_off + np.arange(len(k)),
    )
    if pr_csv:
        write_pr_csv(rpl, pr_csv)
    return metrics_report(rpl)


def cmd_evaluate(args) -> int:
    tau = load_config(args.config).loss.tau if args.config else args.tau
    report = evaluate_files(args.queries, args.keys, args.ground_truth, tau, args.pr_csv)
    write_metrics(report, args.out)
    print(json.dumps(report, sort_keys=True))
    return 0


# --- compare ----------------------------------------------------------------


def compare_runs(cfg: ExperimentConfig, data_dir, out_dir, workers: int = 1) -> dict:
    """QK Iteration and the in-batch baseline from the same seed, same data
    and the same number of optimizer steps."""
    out = Path(out_dir)
    results = {m: train_run(cfg, data_dir, out / m, m, workers) for m in ("qk", "simclr")}
    rows = []
    for mode, s in results.items():
        final = s["phases"][-1]
        rows.append(
            {
                "mode": mode,
                "steps": sum(r["steps"] for r in s["phases"]),
                "baseline_mu_ap": s["baseline"]["mu_ap"],
                "mu_ap": final["mu_ap"],
                "macro_ap": final["macro_ap"],
            }
        )
    _write_json({"rows": rows}, out / "compare.json")
    with open(out / "compare.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    _write_json({m: s["wall_time"] for m, s in results.items()}, out / "compare_timing.json")
    return {"rows": rows, "runs": results}


def cmd_compare(args) -> int:
    cfg = _config(args)
    res = compare_runs(cfg, args.data, args.out, _workers(args, cfg))
    print(_format_table(res["rows"], ["mode", "steps", "baseline_mu_ap", "mu_ap", "macro_ap"]))
    return 0


# --- argument parsing -------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qkiter", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True):
        sp.add_argument("--config", help="experiment config JSON (defaults if omitted)")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--workers", type=int, default=None, help="thread fan-out")
        sp.add_argument("--seed-override", type=int, default=None, help="replace every seed")
        if data:
            sp.add_argument("--data", required=True, help="directory written by gen-data")

    sp = sub.add_parser("gen-data", help="write the synthetic dataset and eval split")
    common(sp, data=False)
    sp.set_defaults(fn=cmd_gen_data)

    sp = sub.add_parser("train", help="train with QK Iteration or the in-batch baseline")
    common(sp)
    sp.add_argument("--mode", choices=("qk", "simclr"), default="qk")
    sp.add_argument("--resume", action="store_true", help="continue after the last finished phase")
    sp.add_argument("--stop-after", type=int, default=None, help="stop after this many phases")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("embed", help="write QKDV descriptors for a QKDS input file")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--featurizer", help="QKFZ file (default: next to the checkpoint)")
    sp.add_argument("--input", required=True)
    sp.add_argument("--role", choices=E.ROLES, required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--workers", type=int, default=None)
    sp.set_defaults(fn=cmd_embed)

    sp = sub.add_parser("evaluate", help="micro/macro AP of descriptor files")
    sp.add_argument("--queries", required=True)
    sp.add_argument("--keys", required=True)
    sp.add_argument("--ground-truth", required=True)
    sp.add_argument("--out", required=True, help="metrics JSON path")
    sp.add_argument("--pr-csv", help="also write (precision, recall) points")
    sp.add_argument("--config", help="take tau from this config")
    sp.add_argument("--tau", type=float, default=0.07)
    sp.set_defaults(fn=cmd_evaluate)

    sp = sub.add_parser("compare", help="QK vs in-batch baseline, side by side")
    common(sp)
    sp.set_defaults(fn=cmd_compare)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(message)s",
    )
    try:
        return args.fn(args)
    except QKError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
