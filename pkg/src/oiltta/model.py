"""Per-position span scorer shared by the source model, learner and expert.

Each token embedding goes through one tanh hidden layer; two linear heads turn
the hidden vector into a start score and an end score. Softmax over positions
gives the start and end distributions.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core_math import (
    PROB_FLOOR,
    DimensionError,
    DomainError,
    NumericError,
    softmax,
)

CHECKPOINT_MAGIC = b"OILCKPT"
CHECKPOINT_VERSION = 1


class ContractError(ValueError):
    pass


@dataclass
class ModelParams:
    W1: np.ndarray  # (h, d)
    b1: np.ndarray  # (h,)
    w_start: np.ndarray  # (h,)
    w_end: np.ndarray  # (h,)
    b_start: float
    b_end: float

    @property
    def d(self) -> int:
        return self.W1.shape[1]

    @property
    def h(self) -> int:
        return self.W1.shape[0]

    @property
    def size(self) -> int:
        return self.h * self.d + 3 * self.h + 2

    def flatten(self) -> np.ndarray:
        return np.concatenate([
            self.W1.ravel(), self.b1, self.w_start, self.w_end,
            [self.b_start, self.b_end],
        ]).astype(np.float64)

    @classmethod
    def unflatten(cls, theta, d: int, h: int) -> "ModelParams":
        theta = np.asarray(theta, dtype=np.float64)
        if theta.size != h * d + 3 * h + 2:
            raise DimensionError(f"flat vector of size {theta.size} does not fit d={d}, h={h}")
        o = h * d
        return cls(
            W1=theta[:o].reshape(h, d).copy(),
            b1=theta[o:o + h].copy(),
            w_start=theta[o + h:o + 2 * h].copy(),
            w_end=theta[o + 2 * h:o + 3 * h].copy(),
            b_start=float(theta[o + 3 * h]),
            b_end=float(theta[o + 3 * h + 1]),
        )

    def with_flat(self, theta) -> "ModelParams":
        return ModelParams.unflatten(theta, self.d, self.h)

    def copy(self) -> "ModelParams":
        return self.with_flat(self.flatten())

    @classmethod
    def zeros(cls, d: int, h: int) -> "ModelParams":
        return cls.unflatten(np.zeros(h * d + 3 * h + 2), d, h)

    @classmethod
    def init(cls, d: int, h: int, rng: np.random.Generator, scale: float = 1.0) -> "ModelParams":
        """Xavier-style random init for the hidden layer, small heads."""
        return cls(
            W1=rng.normal(0.0, scale / np.sqrt(d), size=(h, d)),
            b1=np.zeros(h),
            w_start=rng.normal(0.0, scale / np.sqrt(h), size=h),
            w_end=rng.normal(0.0, scale / np.sqrt(h), size=h),
            b_start=0.0,
            b_end=0.0,
        )


@dataclass
class Instance:
    tokens: np.ndarray  # (L, d)
    gold_span: Optional[tuple[int, int]] = None

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.float64)
        if self.tokens.ndim != 2 or 0 in self.tokens.shape:
            raise DimensionError(f"tokens must be a nonempty (L, d) matrix, got {self.tokens.shape}")
        if self.gold_span is not None:
            s, e = int(self.gold_span[0]), int(self.gold_span[1])
            if not 0 <= s <= e < self.tokens.shape[0]:
                raise ContractError(f"invalid gold span {self.gold_span} for L={self.tokens.shape[0]}")
            self.gold_span = (s, e)

    @property
    def L(self) -> int:
        return self.tokens.shape[0]

    def without_label(self) -> "Instance":
        return Instance(self.tokens)


@dataclass
class SpanDist:
    p_start: np.ndarray
    p_end: np.ndarray


def _hidden(theta: ModelParams, tokens: np.ndarray) -> np.ndarray:
    if tokens.shape[1] != theta.d:
        raise DimensionError(f"token dim {tokens.shape[1]} != model dim {theta.d}")
    return np.tanh(tokens @ theta.W1.T + theta.b1)


def scores(theta: ModelParams, inst: Instance) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Hidden activations and raw start/end scores for every position."""
    a = _hidden(theta, inst.tokens)
    return a, a @ theta.w_start + theta.b_start, a @ theta.w_end + theta.b_end


def forward(theta: ModelParams, inst: Instance) -> SpanDist:
    _, s, e = scores(theta, inst)
    return SpanDist(softmax(s), softmax(e))


def predict_span(dist: SpanDist) -> tuple[int, int]:
    # np.argmax returns the first maximal index, which is the tie rule we want
    return int(np.argmax(dist.p_start)), int(np.argmax(dist.p_end))


def stack_tokens(batch: Sequence[Instance]) -> np.ndarray:
    """(B, L, d) array of a batch; all instances must share L and d."""
    if not batch:
        raise ContractError("empty batch")
    shapes = {inst.tokens.shape for inst in batch}
    if len(shapes) != 1:
        raise DimensionError(f"batch mixes token shapes {sorted(shapes)}")
    return np.stack([inst.tokens for inst in batch])


def batch_scores(theta: ModelParams, X: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Hidden activations (B, L, h) and start/end scores (B, L) for a stacked batch."""
    if X.shape[-1] != theta.d:
        raise DimensionError(f"token dim {X.shape[-1]} != model dim {theta.d}")
    A = np.tanh(X @ theta.W1.T + theta.b1)
    return A, A @ theta.w_start + theta.b_start, A @ theta.w_end + theta.b_end


def batch_backprop(theta: ModelParams, X: np.ndarray, A: np.ndarray,
                   Gs: np.ndarray, Ge: np.ndarray) -> np.ndarray:
    """Flat gradient summed over the batch, given dLoss/dscores of shape (B, L)."""
    d_ws = np.einsum("bl,blh->h", Gs, A)
    d_we = np.einsum("bl,blh->h", Ge, A)
    dZ = (Gs[..., None] * theta.w_start + Ge[..., None] * theta.w_end) * (1.0 - A * A)
    dW1 = np.einsum("blh,bld->hd", dZ, X)
    db1 = dZ.sum(axis=(0, 1))
    return np.concatenate([dW1.ravel(), db1, d_ws, d_we, [Gs.sum(), Ge.sum()]])


def rows_ce(P: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-row -log max(P[i, y_i], eps)."""
    return -np.log(np.maximum(P[np.arange(len(y)), y], PROB_FLOOR))


def rows_ce_grad(P: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-row d CE / d logits; rows whose target probability sits under the floor get zero."""
    G = P.copy()
    idx = np.arange(len(y))
    G[idx, y] -= 1.0
    G[P[idx, y] < PROB_FLOOR] = 0.0
    return G


def supervised_loss_grad(theta: ModelParams, batch: Sequence[Instance]) -> tuple[float, np.ndarray]:
    """Mean over instances of the averaged start/end cross-entropy against gold spans."""
    X = stack_tokens(batch)
    if any(inst.gold_span is None for inst in batch):
        raise ContractError("supervised loss needs gold spans")
    ys = np.array([inst.gold_span[0] for inst in batch])
    ye = np.array([inst.gold_span[1] for inst in batch])
    A, S, E = batch_scores(theta, X)
    Ps, Pe = softmax(S), softmax(E)
    n = len(batch)
    loss = 0.5 * float(np.sum(rows_ce(Ps, ys) + rows_ce(Pe, ye))) / n
    grad = batch_backprop(theta, X, A, rows_ce_grad(Ps, ys), rows_ce_grad(Pe, ye)) / (2 * n)
    return loss, grad


def ema_blend(theta_e: ModelParams, theta_learner: ModelParams, alpha: float) -> ModelParams:
    """alpha * expert + (1 - alpha) * learner, elementwise."""
    if not 0.0 <= alpha <= 1.0:
        raise DomainError(f"alpha must lie in [0, 1], got {alpha}")
    if alpha == 1.0:
        return theta_e.copy()
    if alpha == 0.0:
        return theta_learner.copy()
    te, tl = theta_e.flatten(), theta_learner.flatten()
    if te.shape != tl.shape:
        raise DimensionError("expert and learner shapes differ")
    return theta_e.with_flat(alpha * te + (1.0 - alpha) * tl)


def sgd_step(theta: ModelParams, grad: np.ndarray, lr: float) -> ModelParams:
    if lr < 0:
        raise DomainError(f"learning rate must be non-negative, got {lr}")
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != (theta.size,):
        raise DimensionError(f"gradient shape {grad.shape} != ({theta.size},)")
    if not np.all(np.isfinite(grad)):
        raise NumericError("non-finite gradient; step aborted")
    return theta.with_flat(theta.flatten() - lr * grad)


class Adam:
    """Adam over the flat parameter vector; optional alternative to plain SGD."""

    def __init__(self, size: int, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.b1, self.b2, self.eps = b1, b2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, theta: ModelParams, grad: np.ndarray, lr: float) -> ModelParams:
        if not np.all(np.isfinite(grad)):
            raise NumericError("non-finite gradient; step aborted")
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        mh = self.m / (1 - self.b1 ** self.t)
        vh = self.v / (1 - self.b2 ** self.t)
        return theta.with_flat(theta.flatten() - lr * mh / (np.sqrt(vh) + self.eps))


# checkpoint: magic, version byte, then little-endian u32 d, h, L, then float64 theta
def save_checkpoint(path, theta: ModelParams, L: int) -> None:
    header = CHECKPOINT_MAGIC + struct.pack("<B3I", CHECKPOINT_VERSION, theta.d, theta.h, L)
    Path(path).write_bytes(header + theta.flatten().astype("<f8").tobytes())


def load_checkpoint(path) -> tuple[ModelParams, int]:
    raw = Path(path).read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise ContractError(f"{path} is not a checkpoint file")
    off = len(CHECKPOINT_MAGIC)
    version, d, h, L = struct.unpack_from("<B3I", raw, off)
    if version != CHECKPOINT_VERSION:
        raise ContractError(f"unsupported checkpoint version {version}")
    theta = np.frombuffer(raw, dtype="<f8", offset=off + struct.calcsize("<B3I"))
    return ModelParams.unflatten(theta.astype(np.float64), d, h), L
