"""Command-line entry points: gen-toy, train, sample, eval, analyze.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig
from .datasets import generate_toy_dataset
from .denoiser.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .denoiser.loss import GradientError
from .denoiser.training import TrainingDiverged, train
from .flows import FlowError, sample_molecules, trajectory_from_jsonl, trajectory_to_jsonl
from .metrics import (
    assignment_cdf,
    assignment_times,
    cdf_to_csv,
    evaluate_batch,
    load_ring_library,
    median_lag,
)
from .molgraph import (
    MoleculeFormatError,
    PatternSyntaxError,
    data_path,
    default_vocabulary,
    extract_ring_systems,
    load_molecules,
    load_patterns,
    save_molecules,
    toy_vocabulary,
)
from .molgraph.molecule import atomic_write_text

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
LOSS_COLUMNS = ["step", "total", "x", "a", "c", "e"]


class DataError(Exception):
    pass


def _write_json(path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_gen_toy(args) -> int:
    if args.n_mols < 1:
        raise ConfigError("--n-mols must be at least 1")
    mols = generate_toy_dataset(args.n_mols, np.random.default_rng(args.seed), jitter=args.jitter)
    vocab = toy_vocabulary()
    save_molecules(mols, args.out, vocab)
    if args.ring_library:
        keys = sorted({k for m in mols for k in extract_ring_systems(m, vocab)})
        atomic_write_text(args.ring_library, "".join(k + "\n" for k in keys))
    return EXIT_OK


def _loss_csv(history: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, LOSS_COLUMNS, lineterminator="\n")
    w.writeheader()
    for rec in history:
        w.writerow({k: (rec[k] if k == "step" else repr(float(rec[k]))) for k in LOSS_COLUMNS})
    return buf.getvalue()


def cmd_train(args) -> int:
    cfg = RunConfig.load(args.config)
    vocab = cfg.vocabulary()
    dataset = load_molecules(args.data, vocab)
    if not dataset:
        raise DataError("training dataset is empty")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", cfg.to_json())

    def checkpoint(state):
        save_checkpoint(state, out / "last.ckpt")
        atomic_write_text(out / "loss.csv", _loss_csv(state.history))

    try:
        state = train(dataset, cfg.flow_variant(), cfg.train_config(), vocab, on_checkpoint=checkpoint)
    except TrainingDiverged as exc:
        print(f"error: {exc}; last good checkpoint at step {exc.state.step}", file=sys.stderr)
        return EXIT_NUMERIC
    save_checkpoint(state, out / "model.ckpt")
    atomic_write_text(out / "loss.csv", _loss_csv(state.history))
    return EXIT_OK


def cmd_sample(args) -> int:
    state = load_checkpoint(args.checkpoint)
    if args.variant and args.variant != state.variant.tag:
        raise CheckpointError(f"checkpoint holds a {state.variant.tag} model, not {args.variant}")
    rng = np.random.default_rng(args.seed)
    record = args.record_trajectories is not None
    mols, trajs = sample_molecules(state.model, state.variant, args.n_mols, args.n_steps, state.atom_counts, rng, record=record)
    save_molecules(mols, args.out, state.vocab)
    if record:
        tdir = Path(args.record_trajectories)
        tdir.mkdir(parents=True, exist_ok=True)
        width = max(1, len(str(len(trajs) - 1)))
        for i, traj in enumerate(trajs):
            atomic_write_text(tdir / f"traj_{i:0{width}d}.jsonl", trajectory_to_jsonl(traj))
        _write_json(tdir / "meta.json", {"variant": state.variant.tag, "n_steps": args.n_steps, "seed": args.seed, "n_mols": len(trajs)})
    return EXIT_OK


def cmd_eval(args) -> int:
    vocab = default_vocabulary()
    mols = load_molecules(args.mols, vocab)
    if not mols:
        raise DataError("no molecules to evaluate")
    alerts = None
    if args.alerts or args.default_alerts:
        alerts = load_patterns(args.alerts or data_path("alerts.txt"))
    rings = load_ring_library(args.rings) if args.rings else None
    ref = load_molecules(args.ref, vocab) if args.ref else None
    report = evaluate_batch(mols, vocab, alerts, rings, repeats=args.repeats, reference=ref)
    text = json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n"
    if args.out:
        atomic_write_text(args.out, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def load_trajectory_dir(path):
    tdir = Path(path)
    meta_path = tdir / "meta.json"
    files = sorted(tdir.glob("traj_*.jsonl")) if tdir.is_dir() else []
    if not files or not meta_path.exists():
        raise DataError(f"no recorded trajectories in {tdir}")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    return meta, [trajectory_from_jsonl(f.read_text(encoding="utf-8"), meta["variant"]) for f in files]


def analyze_trajectories(trajs) -> tuple[dict, dict]:
    tables, summary = {}, {}
    for m in ("a", "c", "e"):
        recs = [assignment_times(tr, m) for tr in trajs]
        if sum(r.t_state.size for r in recs) == 0:
            continue
        tables[m] = assignment_cdf(recs)
        ts = np.concatenate([r.t_state for r in recs])
        tp = np.concatenate([r.t_pred for r in recs])
        summary[m] = {
            "median_t_state": float(np.median(ts)),
            "median_t_pred": float(np.median(tp)),
            "median_lag": median_lag(recs),
            "n": int(ts.size),
        }
    return tables, summary


def cmd_analyze(args) -> int:
    meta, trajs = load_trajectory_dir(args.traj_dir)
    tables, summary = analyze_trajectories(trajs)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for m, table in tables.items():
        atomic_write_text(out / f"assignment_cdf_{m}.csv", cdf_to_csv(table))
    _write_json(out / "summary.json", {"variant": meta["variant"], "n_trajectories": len(trajs), "modalities": summary})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dfmol", description="Flow-matching molecule generation toolkit.", allow_abbrev=False)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-toy", help="write the toy template dataset", allow_abbrev=False)
    g.add_argument("--out", required=True)
    g.add_argument("--n-mols", type=int, default=400)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--jitter", type=float, default=0.05)
    g.add_argument("--ring-library", help="also write the dataset's ring-system keys here")
    g.set_defaults(func=cmd_gen_toy)

    t = sub.add_parser("train", help="train a denoiser", allow_abbrev=False)
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out-dir", required=True)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="sample molecules from a checkpoint", allow_abbrev=False)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--n-mols", type=int, default=100)
    s.add_argument("--n-steps", type=int, default=100)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--variant", help="fail unless the checkpoint holds this variant")
    s.add_argument("--record-trajectories", metavar="DIR")
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("eval", help="evaluate a molecule file", allow_abbrev=False)
    e.add_argument("--mols", required=True)
    e.add_argument("--alerts", help="structural alert pattern file")
    e.add_argument("--default-alerts", action="store_true", help="use the bundled alert patterns")
    e.add_argument("--rings", help="ring-system library, one key per line")
    e.add_argument("--ref", help="reference molecules for the energy divergence")
    e.add_argument("--repeats", type=int, default=1)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("analyze", help="assignment-time CDFs from recorded trajectories", allow_abbrev=False)
    a.add_argument("--traj-dir", required=True)
    a.add_argument("--out-dir", required=True)
    a.set_defaults(func=cmd_analyze)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FlowError, GradientError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, MoleculeFormatError, PatternSyntaxError, CheckpointError, OSError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
