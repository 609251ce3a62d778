"""Exact match, span F1 and run summaries computed from pre-update predictions."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .model import ContractError


def em(pred, gold) -> int:
    return int(pred[0] == gold[0] and pred[1] == gold[1])


def span_f1(pred, gold) -> float:
    """Token-overlap F1 on position index sets; a pred with start > end is empty."""
    ps, pe = pred
    gs, ge = gold
    if pe < ps:
        return 0.0
    overlap = max(0, min(pe, ge) - max(ps, gs) + 1)
    if overlap == 0:
        return 0.0
    precision = overlap / (pe - ps + 1)
    recall = overlap / (ge - gs + 1)
    return 2 * precision * recall / (precision + recall)


def relative_gain(adapted: float, baseline: float,
                  fingerprint: Optional[str] = None, baseline_fingerprint: Optional[str] = None) -> float:
    """Absolute-points gain of an adapted run over the no-adaptation run on the same stream."""
    if fingerprint is not None and baseline_fingerprint is not None and fingerprint != baseline_fingerprint:
        raise ContractError("adapted and baseline runs were evaluated on different streams")
    return adapted - baseline


def step_scores(record, gold) -> tuple[float, float]:
    """Mean EM and F1 (in points, 0-100) of one step's predictions."""
    if len(record.predictions) != len(gold):
        raise ContractError("prediction and gold counts differ")
    e = [em(p, g) for p, g in zip(record.predictions, gold)]
    f = [span_f1(p, g) for p, g in zip(record.predictions, gold)]
    return 100.0 * float(np.mean(e)), 100.0 * float(np.mean(f))


@dataclass
class RunSummary:
    em: float
    f1: float
    steps: int
    segments: list = field(default_factory=list)
    baseline_em: Optional[float] = None
    baseline_f1: Optional[float] = None
    em_gain: Optional[float] = None
    f1_gain: Optional[float] = None
    cumulative_loss: float = 0.0
    mean_pass_rate: float = 1.0
    aborted_steps: int = 0
    regret: Optional[float] = None
    regret_argmin: Optional[int] = None
    config: Optional[dict] = None
    seed: Optional[int] = None

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _aggregate(records, golds):
    em_sum = f1_sum = 0.0
    n = 0
    for r, g in zip(records, golds):
        for p, gg in zip(r.predictions, g):
            em_sum += em(p, gg)
            f1_sum += span_f1(p, gg)
            n += 1
    return (100.0 * em_sum / n, 100.0 * f1_sum / n, n) if n else (0.0, 0.0, 0)


def summarize(records: Sequence, golds: Sequence, baseline: Optional[Sequence] = None,
              segment_names: Optional[Sequence[str]] = None,
              config: Optional[dict] = None, seed: Optional[int] = None) -> RunSummary:
    """Overall and per-segment EM/F1 (instance-weighted), gains over the baseline, loss totals.

    ``golds[i]`` holds the gold spans of step ``i``; ``baseline`` is the lr=0 run
    over the identical stream.
    """
    if len(records) != len(golds):
        raise ContractError(f"{len(records)} records but {len(golds)} gold batches")
    if baseline is not None and len(baseline) != len(records):
        raise ContractError(f"{len(records)} records but {len(baseline)} baseline records")
    if baseline is not None:
        for r, b in zip(records, baseline):
            if r.t != b.t or r.segment != b.segment:
                raise ContractError(f"records misaligned at step {r.t}")

    seg_ids = sorted({r.segment for r in records})
    segments = []
    for s in seg_ids:
        idx = [i for i, r in enumerate(records) if r.segment == s]
        e, f, n = _aggregate([records[i] for i in idx], [golds[i] for i in idx])
        seg = {"segment": s, "name": segment_names[s] if segment_names else str(s),
               "steps": len(idx), "instances": n, "em": e, "f1": f}
        if baseline is not None:
            be, bf, _ = _aggregate([baseline[i] for i in idx], [golds[i] for i in idx])
            seg.update(baseline_em=be, baseline_f1=bf,
                       em_gain=relative_gain(e, be), f1_gain=relative_gain(f, bf))
        segments.append(seg)

    e, f, _ = _aggregate(records, golds)
    ok = [r for r in records if not r.aborted]
    summary = RunSummary(
        em=e, f1=f, steps=len(records), segments=segments,
        cumulative_loss=float(sum(r.online_loss for r in ok)),
        mean_pass_rate=float(np.mean([r.pass_rate for r in ok])) if ok else 0.0,
        aborted_steps=len(records) - len(ok),
        config=config, seed=seed,
    )
    if baseline is not None:
        be, bf, _ = _aggregate(baseline, golds)
        summary.baseline_em, summary.baseline_f1 = be, bf
        summary.em_gain, summary.f1_gain = relative_gain(e, be), relative_gain(f, bf)
    return summary
