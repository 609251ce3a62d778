"""Command-line entry point: ``oiltta <subcommand> [--config C] [--set key=value ...]``.

Experiments are defined by a YAML config (a file path or a bundled preset
name); flags only pick the subcommand, the config and dotted overrides.
Outputs go under ``$OILTTA_OUTPUT_ROOT`` (default: the working directory).
"""
from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional

import numpy as np

from . import gradcheck as gc
from .core_math import NumericError
from .experiment import (
    PRESET_DIR,
    ConfigError,
    adapt_config,
    build_schedule,
    build_source_spec,
    jsonable,
    load_config,
    run_with_baseline,
    train_source,
    write_records,
)
from .model import ContractError, ModelParams, load_checkpoint, save_checkpoint
from .streams import dump_dataset, gen_source, stream

log = logging.getLogger("oiltta")

OUTPUT_ROOT_ENV = "OILTTA_OUTPUT_ROOT"

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3


# -- output helpers ---------------------------------------------------------

def output_dir(cfg: dict, override: Optional[str] = None) -> Path:
    out = Path(override or cfg["output_dir"])
    if not out.is_absolute():
        out = Path(os.environ.get(OUTPUT_ROOT_ENV, ".")) / out
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(jsonable(obj), indent=2, sort_keys=True) + "\n")


def write_csv(path: Path, header: list, rows: list, cfg: dict) -> None:
    """CSV with the resolved config as a leading ``# config:`` comment line."""
    buf = io.StringIO()
    buf.write("# config: " + json.dumps(jsonable(cfg), sort_keys=True) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    path.write_text(buf.getvalue())


def read_csv(path) -> list[dict]:
    lines = [ln for ln in Path(path).read_text().splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def _checkpoint_path(args, out: Path) -> Path:
    return Path(args.checkpoint) if args.checkpoint else out / "source.ckpt"


def _load_source(args, out: Path, cfg: dict) -> ModelParams:
    path = _checkpoint_path(args, out)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} not found (run train-source first or pass --checkpoint)")
    theta, L = load_checkpoint(path)
    if theta.d != cfg["source"]["d"] or L != cfg["source"]["L"]:
        raise ContractError(f"checkpoint has d={theta.d}, L={L}; config wants d={cfg['source']['d']}, "
                            f"L={cfg['source']['L']}")
    return theta


# -- subcommands ------------------------------------------------------------

def cmd_train_source(cfg: dict, args) -> int:
    out = output_dir(cfg, args.out)
    res = train_source(cfg)
    ckpt = _checkpoint_path(args, out)
    save_checkpoint(ckpt, res.theta, cfg["source"]["L"])
    write_json(ckpt.with_suffix(".json"), {"config": cfg, "seed": cfg["train"]["init_seed"]})
    write_csv(out / "training_curve.csv", ["epoch", "loss", "heldout_em"], res.curve, cfg)
    write_json(out / "train_summary.json", {"heldout_em": res.heldout_em, "epochs": cfg["train"]["epochs"],
                                            "checkpoint": ckpt.name, "config": cfg})
    print(f"source model: held-out EM {res.heldout_em:.2f} -> {ckpt}")
    return EXIT_OK


def _segment_rows(summary) -> list:
    return [[s["segment"], s["name"], s["steps"], s["em"], s.get("baseline_em"), s.get("em_gain"),
             s["f1"], s.get("baseline_f1"), s.get("f1_gain")] for s in summary.segments]


SEGMENT_HEADER = ["segment", "name", "steps", "em", "baseline_em", "em_gain", "f1", "baseline_f1", "f1_gain"]


def _write_run(out: Path, cfg: dict, summary, run, csv_name: str) -> None:
    header = {"config": cfg, "seed": summary.seed, "fingerprint": run.fingerprint}
    write_records(out / "records.jsonl", run.records, run.golds, header)
    write_json(out / "summary.json", {**summary.to_dict(), "experiment": cfg, "fingerprint": run.fingerprint})
    write_csv(out / csv_name, SEGMENT_HEADER, _segment_rows(summary), cfg)
    L = cfg["source"]["L"]
    save_checkpoint(out / "learner.ckpt", run.state.learner, L)
    if run.state.expert is not None:
        save_checkpoint(out / "expert.ckpt", run.state.expert, L)


def cmd_run(cfg: dict, args) -> int:
    out = output_dir(cfg, args.out)
    theta = _load_source(args, out, cfg)
    summary, run, _ = run_with_baseline(theta, cfg)
    _write_run(out, cfg, summary, run, "segments.csv")
    print(f"EM {summary.em:.2f} (baseline {summary.baseline_em:.2f}, gain {summary.em_gain:+.2f}); "
          f"F1 {summary.f1:.2f}; aborted steps {summary.aborted_steps}")
    if summary.regret is not None:
        print(f"regret {summary.regret:.6f} (best fixed snapshot {summary.regret_argmin})")
    return EXIT_FAIL if summary.aborted_steps else EXIT_OK


def cmd_continual(cfg: dict, args) -> int:
    if len(cfg["schedule"]) < 2:
        log.warning("continual schedule has a single segment; this is the same as `run`")
    out = output_dir(cfg, args.out)
    theta = _load_source(args, out, cfg)
    L = cfg["source"]["L"]
    ckdir = out / "checkpoints"
    ckdir.mkdir(exist_ok=True)
    written = []

    def on_end(segment, state):
        for role, th in (("learner", state.learner), ("expert", state.expert)):
            if th is None:
                continue
            path = ckdir / f"segment{segment}_{role}.ckpt"
            save_checkpoint(path, th, L)
            written.append((path, th.flatten().copy()))

    summary, run, _ = run_with_baseline(theta, cfg, on_segment_end=on_end)
    _write_run(out, cfg, summary, run, "continual.csv")

    mismatched = [p.name for p, flat in written if load_checkpoint(p)[0].flatten().tobytes() != flat.tobytes()]
    for row in _segment_rows(summary):
        print(f"segment {row[0]} {row[1]:<16} EM {row[3]:6.2f}  baseline {row[4]:6.2f}  gain {row[5]:+6.2f}")
    print(f"boundary checkpoints: {len(written)} written, {len(mismatched)} failed to reload bit-exact")
    print(f"non-finite (aborted) steps: {summary.aborted_steps}")
    return EXIT_FAIL if (mismatched or summary.aborted_steps) else EXIT_OK


def sweep_cells(cfg: dict) -> list[dict]:
    """Grid cells; alpha only varies for OIL since the other methods ignore it."""
    sw = cfg["sweep"]
    cells = []
    for method in sw["methods"]:
        alphas = sw["alpha"] if method == "oil" else [None]
        for alpha, lr, K in itertools.product(alphas, sw["lr"], sw["K"]):
            change = dict((sw.get("adapt") or {}).get(method, {}))
            change.update(method=method, lr=float(lr), K=int(K))
            if alpha is not None:
                change["alpha"] = float(alpha)
            cells.append(change)
    return cells


def _run_cell(payload):
    cfg, flat, d, h, change, baselines = payload
    theta = ModelParams.unflatten(np.asarray(flat), d, h)
    gains, f1_gains, aborted = [], [], 0
    try:
        for seed in cfg["seeds"]:
            summary, _, _ = run_with_baseline(theta, cfg, seed=seed, baseline=baselines.get(seed), **change)
            gains.append(summary.em_gain)
            f1_gains.append(summary.f1_gain)
            aborted += summary.aborted_steps
    except (ArithmeticError, ValueError) as exc:
        return {"cell": change, "error": f"{type(exc).__name__}: {exc}"}
    return {"cell": change, "em_gains": gains, "f1_gains": f1_gains, "aborted": aborted, "error": None}


def cmd_sweep(cfg: dict, args) -> int:
    sw = cfg["sweep"]
    if not (sw["lr"] and sw["K"] and sw["methods"]):
        raise ConfigError("sweep grid is empty")
    out = output_dir(cfg, args.out)
    theta = _load_source(args, out, cfg)
    # lr=0 runs do not depend on method, K or alpha, so one baseline per seed serves every cell
    baselines = {}
    for seed in cfg["seeds"]:
        baselines[seed] = run_with_baseline(theta, cfg, seed=seed, lr=0.0)[2]
    flat = theta.flatten()
    payloads = [(cfg, flat, theta.d, theta.h, c, baselines) for c in sweep_cells(cfg)]
    workers = int(sw.get("workers", 1))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_cell, payloads))
    else:
        results = [_run_cell(p) for p in payloads]

    celldir = out / "cells"
    celldir.mkdir(exist_ok=True)
    rows, failed = [], 0
    for i, r in enumerate(results):
        write_json(celldir / f"cell{i:03d}.json", {**r, "config": cfg})
        c = r["cell"]
        if r["error"]:
            failed += 1
            rows.append([c["method"], c.get("alpha", ""), c["lr"], c["K"], "", "", "", r["error"]])
            continue
        rows.append([c["method"], c.get("alpha", ""), c["lr"], c["K"], float(np.mean(r["em_gains"])),
                     float(np.mean(r["f1_gains"])), r["aborted"], ""])
    write_csv(out / "sweep_cells.csv",
              ["method", "alpha", "lr", "K", "mean_em_gain", "mean_f1_gain", "aborted_steps", "error"], rows, cfg)

    # gain matrix: one block of lr rows x K columns per (method, alpha)
    Ks = [int(k) for k in sw["K"]]
    matrix, worst = [], {}
    for key, group in itertools.groupby(rows, key=lambda r: (r[0], r[1])):
        by = {(r[2], r[3]): r[4] for r in group}
        vals = [v for v in by.values() if v != ""]
        worst[key] = min(vals) if vals else None
        for lr in sw["lr"]:
            matrix.append([key[0], key[1], float(lr)] + [by.get((float(lr), k), "") for k in Ks])
    write_csv(out / "gain_matrix.csv", ["method", "alpha", "lr"] + [f"K={k}" for k in Ks], matrix, cfg)
    write_json(out / "sweep_summary.json", {
        "worst_cell_em_gain": [{"method": m, "alpha": a, "gain": g} for (m, a), g in worst.items()],
        "failed_cells": failed, "cells": len(rows), "config": cfg,
    })
    for (m, a), g in worst.items():
        tag = m if a == "" else f"{m} alpha={a}"
        print(f"{tag:<16} worst-cell mean EM gain {g if g is None else round(g, 2)}")
    print(f"{len(rows)} cells, {failed} failed")
    return EXIT_FAIL if failed else EXIT_OK


def cmd_gradcheck(cfg: dict, args, checks: Optional[dict] = None) -> int:
    g = cfg["gradcheck"]
    results = gc.run_gradchecks(draws=int(g["draws"]), d=int(g["d"]), h=int(g["h"]), L=int(g["L"]),
                                batch=int(g["batch"]), seed=int(g["seed"]), tol=float(g["tol"]),
                                step=float(g["step"]), checks=checks)
    for r in results:
        print(f"{r.name:<24} draws {r.draws:3d}  max rel err {r.max_rel_error:.3e}  "
              f"{'PASS' if r.passed else 'FAIL'}")
    if args.out:
        out = output_dir(cfg, args.out)
        write_csv(out / "gradcheck.csv", ["loss", "draws", "max_rel_error", "tolerance", "passed"],
                  [[r.name, r.draws, r.max_rel_error, r.tolerance, r.passed] for r in results], cfg)
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAIL


def cmd_gen(cfg: dict, args) -> int:
    out = output_dir(cfg, args.out)
    spec = build_source_spec(cfg)
    n = args.n if args.n is not None else cfg["train"]["n_heldout"]
    dump_dataset(out / "source.oildata", gen_source(spec, n, stream_id=2), spec, spec.seed, config=jsonable(cfg))
    schedule = build_schedule(cfg)
    bs = adapt_config(cfg).batch_size
    per_seg: dict = {}
    for batch in stream(schedule, bs, cfg["seed"]):
        per_seg.setdefault(batch.segment, []).extend(batch.instances)
    for seg, (shift, _) in enumerate(schedule.segments):
        path = out / f"segment{seg}_{shift.label()}.oildata"
        dump_dataset(path, per_seg.get(seg, []), spec, cfg["seed"], shift=shift, config=jsonable(cfg))
    print(f"wrote {n} source instances and {len(schedule.segments)} segment files to {out}")
    return EXIT_OK


COMMANDS = {
    "train-source": (cmd_train_source, "train the source model on clean synthetic data"),
    "run": (cmd_run, "adapt over the configured stream and log per-step records"),
    "sweep": (cmd_sweep, "lr x K x alpha grid of EM gains over the lr=0 baseline"),
    "continual": (cmd_continual, "uninterrupted adaptation over a multi-segment schedule"),
    "gradcheck": (cmd_gradcheck, "finite-difference check of every loss gradient"),
    "gen": (cmd_gen, "dump source and shifted datasets"),
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="oiltta", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    presets = ", ".join(sorted(p.stem for p in PRESET_DIR.glob("*.yaml")))
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", "-c", help=f"YAML file or preset name ({presets})")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted override, e.g. adapt.lr=0.1 (repeatable)")
        p.add_argument("--out", help="output directory (relative paths resolve under $%s)" % OUTPUT_ROOT_ENV)
        if name not in ("gradcheck", "gen"):
            p.add_argument("--checkpoint", help="source checkpoint (default: <out>/source.ckpt)")
        if name == "gen":
            p.add_argument("--n", type=int, help="number of clean source instances (default: train.n_heldout)")
    return ap


def main(argv: Optional[list] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    func = COMMANDS[args.command][0]
    try:
        cfg = load_config(args.config, args.overrides)
        return func(cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, PermissionError, IsADirectoryError) as exc:
        print(f"file error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ContractError, NumericError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
