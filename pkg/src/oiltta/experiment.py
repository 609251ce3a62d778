"""Experiment orchestration: source training, adaptation runs, sweeps, continual schedules.

Configs are plain nested dicts (loaded from YAML by the CLI). ``load_config``
fills defaults and validates, so every entry point sees the same shape.
"""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from .core_math import NumericError, make_rng
from .metrics import RunSummary, summarize
from .model import (
    ModelParams,
    forward,
    predict_span,
    sgd_step,
    supervised_loss_grad,
)
from .streams import (
    Schedule,
    ShiftSpec,
    SourceSpec,
    default_source_spec,
    gen_source,
    stream,
)
from .tta import AdaptConfig, StepRecord, adapt_step, init_adaptation, regret
from . import metrics

log = logging.getLogger(__name__)

PRESET_DIR = Path(__file__).parent / "presets"

DEFAULTS: dict = {
    "seed": 0,
    "seeds": [0, 1, 2, 3, 4],
    "output_dir": "runs/default",
    "source": {
        "d": 16, "L": 16, "h_model": 32, "sigma": 0.5, "separation": 2.0, "marker": 1.5,
        "span_min": 1, "span_max": 3, "seed": 0,
    },
    "train": {
        "epochs": 30, "lr": 0.5, "batch_size": 32, "n_train": 2000, "n_heldout": 1000,
        "init_seed": 0, "init_scale": 1.0,
    },
    "adapt": {
        "method": "oil", "lr": 0.5, "batch_size": 16, "K": 3, "alpha": 0.99,
        "gamma": "inf", "beta": 1.0, "causal": True, "causal_space": "prob",
        "causal_grad": "detached", "optimizer": "sgd", "max_grad_norm": 1.0,
        "snapshots": False, "snapshot_cap": 64,
    },
    "schedule": [
        {"kind": "corruption", "name": "corruption", "steps": 400, "eta": 0.1, "bias": 5.0, "bias_seed": 4},
    ],
    "sweep": {
        "lr": [2.5, 0.5, 0.25, 0.05],
        "K": [1, 3, 5],
        "alpha": [0.99, 1.0],
        "methods": ["pl", "oil"],
        "adapt": {},
        "workers": 1,
    },
    "gradcheck": {"draws": 20, "d": 8, "h": 8, "L": 6, "batch": 4, "tol": 1e-4, "step": 1e-6, "seed": 0},
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def parse_override(text: str) -> dict:
    """``adapt.lr=0.01`` -> {"adapt": {"lr": 0.01}} (value parsed as YAML)."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key.path=value")
    key, raw = text.split("=", 1)
    value = yaml.safe_load(raw)
    out: dict = {}
    cur = out
    parts = key.strip().split(".")
    for p in parts[:-1]:
        cur = cur.setdefault(p, {})
    cur[parts[-1]] = value
    return out


def apply_override(cfg: dict, text: str) -> dict:
    """Set one dotted path in a copy of ``cfg``; integer parts index into lists (``schedule.0.eta=0.2``)."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key.path=value")
    key, raw = text.split("=", 1)
    parts = key.strip().split(".")
    if any(p.isdigit() for p in parts):
        out = copy.deepcopy(cfg)
        cur = out
        try:
            for p in parts[:-1]:
                cur = cur[int(p)] if isinstance(cur, list) else cur.setdefault(p, {})
            last = parts[-1]
            cur[int(last) if isinstance(cur, list) else last] = yaml.safe_load(raw)
        except (IndexError, ValueError, TypeError, AttributeError) as exc:
            raise ConfigError(f"override {text!r} does not match the config layout") from exc
        return out
    return _merge(cfg, parse_override(text))


def _gamma(v) -> float:
    if isinstance(v, str):
        if v.strip().lower() in ("inf", "infinity", "+inf", ".inf"):
            return math.inf
        return float(v)
    return float(v)


def load_config(source=None, overrides: Optional[list] = None) -> dict:
    """Merge defaults <- preset/file/dict <- overrides, then validate."""
    cfg = copy.deepcopy(DEFAULTS)
    if source is not None:
        if isinstance(source, dict):
            user = source
        else:
            path = Path(source)
            if not path.exists() and (PRESET_DIR / f"{source}.yaml").exists():
                path = PRESET_DIR / f"{source}.yaml"
            user = yaml.safe_load(path.read_text()) or {}
            if not isinstance(user, dict):
                raise ConfigError(f"{path} does not hold a mapping")
        cfg = _merge(cfg, user)
    for o in overrides or []:
        cfg = apply_override(cfg, o) if isinstance(o, str) else _merge(cfg, o)
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    try:
        adapt_config(cfg).validate()
        build_source_spec(cfg)
        build_schedule(cfg)
    except (TypeError, ValueError, KeyError, AttributeError) as exc:
        raise ConfigError(f"invalid config: {exc}") from exc
    t = cfg["train"]
    if t["epochs"] < 0 or t["batch_size"] < 1 or t["n_train"] < 1:
        raise ConfigError("train.epochs must be >= 0, batch_size and n_train >= 1")


def adapt_config(cfg: dict, **changes) -> AdaptConfig:
    a = dict(cfg["adapt"])
    a.update(changes)
    a["gamma"] = _gamma(a["gamma"])
    a.setdefault("seed", cfg["seed"])
    a["seed"] = changes.get("seed", cfg["seed"])
    return AdaptConfig(**a)


def build_source_spec(cfg: dict) -> SourceSpec:
    s = cfg["source"]
    return default_source_spec(
        d=s["d"], L=s["L"], h_model=s["h_model"], seed=s["seed"], separation=s["separation"],
        marker=s["marker"], sigma=s["sigma"], span_min=s["span_min"], span_max=s["span_max"],
    )


def domain_target(source: SourceSpec, seed: int, mix: float = 0.5, **overrides) -> SourceSpec:
    """Source spec with the answer mean and markers pulled toward new random directions."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 0xD0])))

    def moved(v):
        n = np.linalg.norm(v)
        if n == 0:
            return v
        r = rng.normal(size=v.shape)
        r *= n / np.linalg.norm(r)
        w = (1.0 - mix) * v + mix * r
        return w * (n / np.linalg.norm(w))

    spec = replace(source, mu_ans=moved(source.mu_ans), start_marker=moved(source.start_marker),
                   end_marker=moved(source.end_marker))
    return replace(spec, **overrides) if overrides else spec


def build_shift(source: SourceSpec, seg: dict) -> ShiftSpec:
    kind = seg.get("kind", "corruption")
    name = seg.get("name", "")
    if kind == "corruption":
        return ShiftSpec("corruption", eta=float(seg.get("eta", 0.0)), rho=float(seg.get("rho", 0.0)),
                         bias=float(seg.get("bias", 0.0)), bias_seed=int(seg.get("bias_seed", 0)), name=name)
    if kind == "rotation":
        return ShiftSpec("rotation", rotation_seed=int(seg.get("rotation_seed", 0)),
                         angle=float(seg.get("angle", 0.5)), name=name)
    if kind == "domain":
        over = {k: seg[k] for k in ("sigma", "span_min", "span_max") if k in seg}
        target = domain_target(source, int(seg.get("domain_seed", 0)), float(seg.get("mix", 0.5)), **over)
        return ShiftSpec("domain", target=target, name=name)
    raise ConfigError(f"unknown shift kind {kind!r}")


def build_schedule(cfg: dict) -> Schedule:
    source = build_source_spec(cfg)
    segs = [(build_shift(source, s), int(s["steps"])) for s in cfg["schedule"]]
    return Schedule(source, segs)


def segment_names(schedule: Schedule) -> list[str]:
    return [f"{i}:{s.label()}" for i, (s, _) in enumerate(schedule.segments)]


def stream_fingerprint(schedule: Schedule, batch_size: int, seed: int) -> str:
    blob = json.dumps({"schedule": schedule.to_dict(), "batch_size": batch_size, "seed": seed}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


# -- source training --------------------------------------------------------

@dataclass
class TrainResult:
    theta: ModelParams
    curve: list  # [(epoch, mean_loss, heldout_em)]
    heldout_em: float


def evaluate_em(theta: ModelParams, instances) -> float:
    hits = [metrics.em(predict_span(forward(theta, x)), x.gold_span) for x in instances]
    return 100.0 * float(np.mean(hits))


def train_source(cfg: dict) -> TrainResult:
    """Minibatch SGD on clean source data; held-out EM reported every epoch."""
    spec = build_source_spec(cfg)
    t = cfg["train"]
    theta = ModelParams.init(spec.d, spec.h_model, make_rng(t["init_seed"]), scale=t["init_scale"])
    train = gen_source(spec, t["n_train"], stream_id=1)
    heldout = gen_source(spec, t["n_heldout"], stream_id=2)
    rng = make_rng(t["init_seed"] + 1)
    curve = []
    for epoch in range(t["epochs"]):
        order = rng.permutation(len(train))
        losses = []
        for i in range(0, len(order), t["batch_size"]):
            batch = [train[j] for j in order[i:i + t["batch_size"]]]
            loss, grad = supervised_loss_grad(theta, batch)
            if not math.isfinite(loss):
                raise NumericError(f"non-finite training loss in epoch {epoch}")
            theta = sgd_step(theta, grad, t["lr"])
            losses.append(loss)
        curve.append((epoch + 1, float(np.mean(losses)), evaluate_em(theta, heldout)))
        log.info("epoch %d loss %.4f heldout EM %.2f", *curve[-1])
    em = curve[-1][2] if curve else evaluate_em(theta, heldout)
    return TrainResult(theta, curve, em)


# -- adaptation runs --------------------------------------------------------

@dataclass
class RunResult:
    records: list
    golds: list
    state: object
    fingerprint: str
    boundary_checkpoints: list  # [(segment, learner, expert)] after each segment's last step


def run_stream(theta: ModelParams, acfg: AdaptConfig, schedule: Schedule, seed: int,
               on_segment_end=None) -> RunResult:
    """Drive the engine over the full schedule without interruption."""
    state = init_adaptation(theta, acfg)
    records, golds, bounds = [], [], []
    ends = set(np.cumsum([n for _, n in schedule.segments]).tolist())
    for batch in stream(schedule, acfg.batch_size, seed):
        rec = adapt_step(state, batch)
        records.append(rec)
        golds.append(batch.gold)
        if batch.t in ends:
            bounds.append((batch.segment, state.learner.copy(),
                           None if state.expert is None else state.expert.copy()))
            if on_segment_end is not None:
                on_segment_end(batch.segment, state)
    return RunResult(records, golds, state, stream_fingerprint(schedule, acfg.batch_size, seed), bounds)


def run_with_baseline(theta: ModelParams, cfg: dict, seed: Optional[int] = None,
                      baseline: Optional[RunResult] = None, on_segment_end=None,
                      **adapt_changes) -> tuple[RunSummary, RunResult, RunResult]:
    """Adapted run plus the lr=0 run on the identical stream, summarized together."""
    seed = cfg["seed"] if seed is None else seed
    schedule = build_schedule(cfg)
    acfg = adapt_config(cfg, seed=seed, **adapt_changes).validate()
    run = run_stream(theta, acfg, schedule, seed, on_segment_end)
    if baseline is None or baseline.fingerprint != run.fingerprint:
        baseline = run_stream(theta, replace(acfg, lr=0.0, snapshots=False), schedule, seed)
    summary = summarize(run.records, run.golds, baseline.records, segment_names(schedule),
                        config=acfg.to_dict(), seed=seed)
    if acfg.snapshots and run.state.snapshots is not None and not run.state.snapshots.overflowed:
        r, idx = regret(run.state.snapshots, acfg)
        summary.regret, summary.regret_argmin = r, idx
    return summary, run, baseline


def jsonable(obj):
    """Plain-JSON form of configs and summaries (infinite floats become strings)."""
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if math.isfinite(f) else ("inf" if f > 0 else "-inf" if f < 0 else "nan")
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def write_records(path, records: list[StepRecord], golds, header: Optional[dict] = None) -> None:
    """One JSON object per step; the first line carries ``header`` when given.

    Wall-clock times are left out so reruns produce identical files.
    """
    with open(path, "w") as fh:
        if header is not None:
            fh.write(json.dumps({"header": jsonable(header)}, sort_keys=True) + "\n")
        for r, g in zip(records, golds):
            d = r.to_dict()
            d.pop("wall_time", None)
            d["gold"] = [list(x) for x in g]
            fh.write(json.dumps(jsonable(d), sort_keys=True) + "\n")
