"""Online adaptation engine: Tent, PL and OIL over a memory bank of recent batches.

The step protocol is predict first, then update: predictions on the incoming
batch are taken from the current learner (and expert, for OIL) before the batch
is pushed into the bank and every banked batch gets one gradient step.
"""
from __future__ import annotations

import math
import time
from collections import deque
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core_math import PROB_FLOOR, NumericError, make_rng, softmax
from .model import (
    Adam,
    ContractError,
    Instance,
    ModelParams,
    SpanDist,
    batch_backprop,
    batch_scores,
    ema_blend,
    rows_ce,
    rows_ce_grad,
    scores,
    sgd_step,
    stack_tokens,
)
from .streams import StreamBatch

METHODS = ("tent", "pl", "oil")


class ConfigError(ValueError):
    pass


class RegretUnavailable(RuntimeError):
    pass


@dataclass
class AdaptConfig:
    method: str = "oil"
    lr: float = 1e-3
    batch_size: int = 16
    K: int = 3
    alpha: float = 0.99
    gamma: float = math.inf
    beta: float = 1.0
    seed: int = 0
    causal: bool = True
    causal_space: str = "prob"
    causal_grad: str = "detached"
    optimizer: str = "sgd"
    max_grad_norm: Optional[float] = None
    snapshots: bool = False
    snapshot_cap: int = 64

    def validate(self) -> "AdaptConfig":
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if not (self.lr >= 0 and math.isfinite(self.lr)):
            raise ConfigError(f"lr must be a finite non-negative number, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.K < 1:
            raise ConfigError("memory size K must be >= 1")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not (self.gamma >= 0):
            raise ConfigError(f"gamma must be >= 0 or inf, got {self.gamma}")
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError(f"beta must lie in [0, 1], got {self.beta}")
        if self.causal_space not in ("prob", "logit"):
            raise ConfigError(f"causal_space must be 'prob' or 'logit', got {self.causal_space!r}")
        if self.causal_grad not in ("detached", "full"):
            raise ConfigError(f"causal_grad must be 'detached' or 'full', got {self.causal_grad!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.max_grad_norm is not None and not self.max_grad_norm > 0:
            raise ConfigError("max_grad_norm must be positive or None")
        if self.snapshot_cap < 1:
            raise ConfigError("snapshot_cap must be >= 1")
        return self

    def inactive(self) -> list[str]:
        """Hyperparameters that have no effect for the configured method."""
        return [] if self.method == "oil" else ["alpha", "gamma", "beta", "causal", "causal_space", "causal_grad"]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["inactive"] = self.inactive()
        return d


@dataclass
class LossOut:
    loss: float
    grad: np.ndarray
    head_losses: np.ndarray  # (2,) mean start / end term
    mask: Optional[np.ndarray] = None  # (n, 2) bool, OIL only


# -- online losses ----------------------------------------------------------
#
# Every loss averages the start-head and end-head terms and then averages over
# instances. Gradients are wrt the flat learner parameters; pseudo-labels,
# expert outputs and filter masks are constants.

def _forward(theta: ModelParams, batch: Sequence[Instance]):
    X = stack_tokens(batch)
    A, S, E = batch_scores(theta, X)
    return X, A, (S, E), (softmax(S), softmax(E))


def _row_entropy(P: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    logp = np.log(np.where(P > 0, P, 1.0))
    H = -np.sum(P * logp, axis=1)
    return H, -P * (logp + H[:, None])


def tent_loss_grad(theta: ModelParams, batch: Sequence[Instance]) -> LossOut:
    """Entropy of the model's own start/end distributions."""
    X, A, _, (Ps, Pe) = _forward(theta, batch)
    Hs, Gs = _row_entropy(Ps)
    He, Ge = _row_entropy(Pe)
    n = len(batch)
    heads = np.array([Hs.mean(), He.mean()])
    return LossOut(0.5 * float(Hs.sum() + He.sum()) / n, batch_backprop(theta, X, A, Gs, Ge) / (2 * n), heads)


def pl_loss_grad(theta: ModelParams, batch: Sequence[Instance], labels=None) -> LossOut:
    """Cross-entropy against the model's own argmax.

    ``labels`` (n, 2) freezes the pseudo-labels, as needed for gradient checks.
    """
    X, A, _, (Ps, Pe) = _forward(theta, batch)
    if labels is None:
        ys, ye = Ps.argmax(axis=1), Pe.argmax(axis=1)
    else:
        labels = np.asarray(labels)
        ys, ye = labels[:, 0], labels[:, 1]
    cs, ce = rows_ce(Ps, ys), rows_ce(Pe, ye)
    n = len(batch)
    grad = batch_backprop(theta, X, A, rows_ce_grad(Ps, ys), rows_ce_grad(Pe, ye)) / (2 * n)
    return LossOut(0.5 * float(cs.sum() + ce.sum()) / n, grad, np.array([cs.mean(), ce.mean()]))


@dataclass
class ExpertView:
    """Expert outputs on a batch, held constant while the learner updates."""
    p: tuple  # (P_start, P_end), each (n, L)
    z: tuple  # raw scores, same shapes
    labels: np.ndarray  # (n, 2) argmax pseudo-labels


def expert_targets(theta_expert: ModelParams, batch: Sequence[Instance]) -> ExpertView:
    _, _, (S, E), (Ps, Pe) = _forward(theta_expert, batch)
    return ExpertView((Ps, Pe), (S, E), np.stack([Ps.argmax(axis=1), Pe.argmax(axis=1)], axis=1))


def filter_mask(theta: ModelParams, batch: Sequence[Instance], labels, gamma: float,
                _fwd=None) -> np.ndarray:
    """(n, 2) indicator CE(p, y_hat) < gamma, per instance and head."""
    _, _, _, (Ps, Pe) = _fwd or _forward(theta, batch)
    labels = np.asarray(labels)
    return np.stack([rows_ce(Ps, labels[:, 0]) < gamma, rows_ce(Pe, labels[:, 1]) < gamma], axis=1)


def _causal_prob(P: np.ndarray, bias: np.ndarray, y: np.ndarray, full: bool):
    """-log q[y] with q = p + (p - p_hat); rows where q[y] is under the floor get zero gradient.

    ``bias`` is the discrepancy p - p_hat. With ``full`` the gradient also runs
    through the p inside it (dq/dp = 2); otherwise it is a constant (dq/dp = 1).
    """
    idx = np.arange(len(y))
    py = P[idx, y]
    r = py + bias[idx, y]
    ok = r >= PROB_FLOOR
    scale = np.where(ok, (2.0 if full else 1.0) * py / np.where(ok, r, 1.0), 0.0)
    G = P.copy()
    G[idx, y] -= 1.0
    return -np.log(np.where(ok, r, PROB_FLOOR)), G * scale[:, None]


def _causal_logit(Z: np.ndarray, bias: np.ndarray, y: np.ndarray, full: bool):
    """Cross-entropy of softmax(z + (z - z_hat)) at y, differentiated through z."""
    Q = softmax(Z + bias)
    return rows_ce(Q, y), (2.0 if full else 1.0) * rows_ce_grad(Q, y)


def causal_bias(theta: ModelParams, batch: Sequence[Instance], expert: ExpertView, space: str,
                _fwd=None) -> tuple:
    """Per-head learner-minus-expert discrepancy, in probability or score space."""
    _, _, Z, P = _fwd or _forward(theta, batch)
    if space == "logit":
        return Z[0] - expert.z[0], Z[1] - expert.z[1]
    return P[0] - expert.p[0], P[1] - expert.p[1]


def oil_terms(theta: ModelParams, batch: Sequence[Instance], expert: ExpertView,
              mask: np.ndarray, causal: bool, causal_space: str = "prob",
              causal_grad: str = "detached", bias=None, _fwd=None) -> LossOut:
    """OIL loss with the expert outputs (hence pseudo-labels) and the filter mask fixed.

    ``bias`` freezes the causal discrepancy term; by default it is recomputed
    from ``theta``, which is what a gradient check of the "full" variant needs.
    """
    fwd = _fwd or _forward(theta, batch)
    X, A, Z, P = fwd
    mask = np.asarray(mask, dtype=bool)
    full = causal_grad == "full"
    if causal and bias is None:
        bias = causal_bias(theta, batch, expert, causal_space, fwd)
    vals, grads = [], []
    for k in range(2):
        y = expert.labels[:, k]
        if causal and causal_space == "logit":
            v, G = _causal_logit(Z[k], bias[k], y, full)
        elif causal:
            v, G = _causal_prob(P[k], bias[k], y, full)
        else:
            v, G = rows_ce(P[k], y), rows_ce_grad(P[k], y)
        vals.append(np.where(mask[:, k], v, 0.0))
        grads.append(G * mask[:, k, None])
    counts = mask.sum(axis=0)
    sums = np.array([vals[0].sum(), vals[1].sum()])
    heads = np.divide(sums, counts, out=np.zeros(2), where=counts > 0)
    total = int(counts.sum())
    if total == 0:
        return LossOut(0.0, np.zeros(theta.size), heads, mask)
    grad = batch_backprop(theta, X, A, grads[0], grads[1]) / total
    return LossOut(float(sums.sum()) / total, grad, heads, mask)


def oil_loss_grad(theta_learner: ModelParams, theta_expert: ModelParams,
                  batch: Sequence[Instance], gamma: float, causal: bool = True,
                  causal_space: str = "prob", causal_grad: str = "detached") -> LossOut:
    """Imitation loss against expert pseudo-labels, filtered by gamma, with optional causal correction.

    The loss is the mean over the (instance, head) terms that pass the filter;
    it is 0 with a zero gradient when nothing passes.
    """
    expert = expert_targets(theta_expert, batch)
    fwd = _forward(theta_learner, batch)
    mask = filter_mask(theta_learner, batch, expert.labels, gamma, fwd)
    return oil_terms(theta_learner, batch, expert, mask, causal, causal_space, causal_grad, _fwd=fwd)


def tde_scores(p: np.ndarray, p_hat: np.ndarray, beta: float) -> np.ndarray:
    if beta == 1.0:
        return p.copy()
    return p + (1.0 - beta) * (p - p_hat)


def tde_predict(theta_learner: ModelParams, theta_expert: Optional[ModelParams],
                inst: Instance, beta: float) -> tuple[tuple[int, int], SpanDist]:
    """Prediction by largest total direct effect; reduces to argmax p when beta is 1 or no expert."""
    if not 0.0 <= beta <= 1.0:
        raise ConfigError(f"beta must lie in [0, 1], got {beta}")
    _, s, e = scores(theta_learner, inst)
    ps, pe = softmax(s), softmax(e)
    if theta_expert is None or beta == 1.0:
        q = SpanDist(ps, pe)
    else:
        _, s_hat, e_hat = scores(theta_expert, inst)
        hs, he = softmax(s_hat), softmax(e_hat)
        q = SpanDist(tde_scores(ps, hs, beta), tde_scores(pe, he, beta))
    return (int(np.argmax(q.p_start)), int(np.argmax(q.p_end))), q


def batch_predict(theta_learner: ModelParams, theta_expert: Optional[ModelParams],
                  batch: Sequence[Instance], beta: float) -> list[tuple[int, int]]:
    """tde_predict over a whole batch at once."""
    _, _, _, (Ps, Pe) = _forward(theta_learner, batch)
    if theta_expert is not None and beta != 1.0:
        _, _, _, (Hs, He) = _forward(theta_expert, batch)
        Ps, Pe = tde_scores(Ps, Hs, beta), tde_scores(Pe, He, beta)
    return list(zip(Ps.argmax(axis=1).tolist(), Pe.argmax(axis=1).tolist()))


def online_loss(cfg: AdaptConfig, theta: ModelParams, batch: Sequence[Instance],
                theta_expert: Optional[ModelParams] = None) -> LossOut:
    if cfg.method == "tent":
        return tent_loss_grad(theta, batch)
    if cfg.method == "pl":
        return pl_loss_grad(theta, batch)
    if theta_expert is None:
        raise ContractError("OIL needs an expert")
    return oil_loss_grad(theta, theta_expert, batch, cfg.gamma, cfg.causal, cfg.causal_space, cfg.causal_grad)


# -- engine -----------------------------------------------------------------

class MemoryBank:
    """FIFO of the last K batches, iterated oldest to newest."""

    def __init__(self, K: int):
        if K < 1:
            raise ConfigError("memory size K must be >= 1")
        self.K = K
        self._q: deque = deque(maxlen=K)

    def push(self, batch) -> None:
        self._q.append(batch)

    def __iter__(self):
        return iter(list(self._q))

    def __len__(self) -> int:
        return len(self._q)


@dataclass
class StepRecord:
    t: int
    segment: int
    predictions: list
    online_loss: float
    head_losses: list
    pass_rate: float
    expert_distance: float
    n_updates: int
    wall_time: float
    aborted: bool = False
    error: Optional[str] = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["predictions"] = [list(p) for p in self.predictions]
        return d


@dataclass
class SnapshotLog:
    cap: int = 64
    learners: list = field(default_factory=list)
    experts: list = field(default_factory=list)
    batches: list = field(default_factory=list)
    overflowed: bool = False

    def add(self, learner: ModelParams, expert: Optional[ModelParams], batch) -> None:
        if len(self.learners) >= self.cap:
            self.overflowed = True
            return
        self.learners.append(learner.copy())
        self.experts.append(None if expert is None else expert.copy())
        self.batches.append(list(batch))


@dataclass
class AdaptState:
    cfg: AdaptConfig
    learner: ModelParams
    expert: Optional[ModelParams]
    bank: MemoryBank
    rng: np.random.Generator
    t: int = 0
    snapshots: Optional[SnapshotLog] = None
    adam: Optional[Adam] = None


def init_adaptation(theta_source: ModelParams, cfg: AdaptConfig) -> AdaptState:
    """Learner and (for OIL) expert both start as independent copies of the source model."""
    cfg.validate()
    return AdaptState(
        cfg=cfg,
        learner=theta_source.copy(),
        expert=theta_source.copy() if cfg.method == "oil" else None,
        bank=MemoryBank(cfg.K),
        rng=make_rng(cfg.seed),
        snapshots=SnapshotLog(cap=cfg.snapshot_cap) if cfg.snapshots else None,
        adam=Adam(theta_source.size) if cfg.optimizer == "adam" else None,
    )


def _update(state: AdaptState, grad: np.ndarray) -> ModelParams:
    clip = state.cfg.max_grad_norm
    if clip is not None:
        norm = float(np.linalg.norm(grad))
        if norm > clip:
            grad = grad * (clip / norm)
    if state.adam is not None:
        return state.adam.step(state.learner, grad, state.cfg.lr)
    return sgd_step(state.learner, grad, state.cfg.lr)


def adapt_step(state: AdaptState, batch: StreamBatch) -> StepRecord:
    """One time step: predict on the batch, bank it, then one update per banked batch."""
    cfg = state.cfg
    t0 = time.perf_counter()
    state.t += 1
    x = batch.unlabeled()

    expert_before = state.expert
    preds = batch_predict(state.learner, state.expert if cfg.method == "oil" else None, x, cfg.beta)

    state.bank.push(x)
    saved = (state.learner, state.expert, None if state.adam is None else
             (state.adam.m.copy(), state.adam.v.copy(), state.adam.t))
    passed = total = 0
    n_updates = 0
    try:
        first = online_loss(cfg, state.learner, x, state.expert)
        for xk in state.bank:
            out = first if n_updates == 0 and len(state.bank) == 1 else \
                online_loss(cfg, state.learner, xk, state.expert)
            if not (math.isfinite(out.loss) and np.all(np.isfinite(out.grad))):
                raise NumericError(f"non-finite online loss at step {state.t}")
            if out.mask is not None:
                passed += int(out.mask.sum())
                total += out.mask.size
            state.learner = _update(state, out.grad)
            if cfg.method == "oil":
                state.expert = ema_blend(state.expert, state.learner, cfg.alpha)
            n_updates += 1
    except (NumericError, FloatingPointError) as exc:
        state.learner, state.expert = saved[0], saved[1]
        if state.adam is not None:
            state.adam.m, state.adam.v, state.adam.t = saved[2]
        return StepRecord(state.t, batch.segment, preds, math.nan, [math.nan, math.nan],
                          math.nan, math.nan, 0, time.perf_counter() - t0, True, str(exc))

    if state.snapshots is not None:
        state.snapshots.add(state.learner, expert_before, x)
    dist = 0.0
    if state.expert is not None:
        dist = float(np.max(np.abs(state.expert.flatten() - state.learner.flatten())))
    return StepRecord(
        t=state.t,
        segment=batch.segment,
        predictions=preds,
        online_loss=first.loss,
        head_losses=[float(v) for v in first.head_losses],
        pass_rate=passed / total if total else 1.0,
        expert_distance=dist,
        n_updates=n_updates,
        wall_time=time.perf_counter() - t0,
    )


def regret(log: Optional[SnapshotLog], cfg: AdaptConfig) -> tuple[float, int]:
    """Cumulative online loss of the realized learners minus the best single snapshot's.

    Returns the regret and the index of the minimizing snapshot.
    """
    if log is None or not log.learners:
        raise RegretUnavailable("snapshots were not retained for this run")
    if log.overflowed:
        raise RegretUnavailable(f"run exceeded the snapshot cap of {log.cap}")
    T = len(log.learners)
    realized = 0.0
    totals = [0.0] * T
    for t in range(T):
        for s in range(T):
            v = online_loss(cfg, log.learners[s], log.batches[t], log.experts[t]).loss
            totals[s] += v
            if s == t:
                realized += v
    best = min(range(T), key=lambda s: totals[s])
    return realized - totals[best], best
