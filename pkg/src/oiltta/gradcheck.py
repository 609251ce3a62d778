"""Finite-difference validation of every analytic loss gradient.

Each check draws a random (learner, expert, batch), freezes whatever the loss
treats as a constant (pseudo-labels, filter mask, expert outputs, causal
discrepancy) and compares the analytic gradient with central differences.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .core_math import finite_diff_grad, make_rng, rel_error
from .model import Instance, ModelParams, supervised_loss_grad
from . import tta

# (loss(theta_flat) -> float, analytic gradient at theta) for one random draw
Check = Callable[[ModelParams, ModelParams, list], tuple[Callable, np.ndarray]]


def _supervised(th, te, batch):
    return (lambda v: supervised_loss_grad(th.with_flat(v), batch)[0]), supervised_loss_grad(th, batch)[1]


def _tent(th, te, batch):
    x = [b.without_label() for b in batch]
    return (lambda v: tta.tent_loss_grad(th.with_flat(v), x).loss), tta.tent_loss_grad(th, x).grad


def _pl(th, te, batch):
    x = [b.without_label() for b in batch]
    labels = tta.expert_targets(th, x).labels
    return (lambda v: tta.pl_loss_grad(th.with_flat(v), x, labels).loss), tta.pl_loss_grad(th, x).grad


def _oil(causal: bool, space: str = "prob", grad_mode: str = "detached") -> Check:
    def check(th, te, batch):
        x = [b.without_label() for b in batch]
        out = tta.oil_loss_grad(th, te, x, np.inf, causal, space, grad_mode)
        expert = tta.expert_targets(te, x)
        frozen = tta.causal_bias(th, x, expert, space) if causal and grad_mode == "detached" else None

        def f(v):
            return tta.oil_terms(th.with_flat(v), x, expert, out.mask, causal, space, grad_mode, frozen).loss

        return f, out.grad
    return check


CHECKS: dict[str, Check] = {
    "supervised": _supervised,
    "tent": _tent,
    "pl": _pl,
    "oil": _oil(False),
    "oil_causal": _oil(True, "prob", "detached"),
    "oil_causal_full": _oil(True, "prob", "full"),
    "oil_causal_logit": _oil(True, "logit", "detached"),
    "oil_causal_logit_full": _oil(True, "logit", "full"),
}


@dataclass
class CheckResult:
    name: str
    draws: int
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def random_draw(rng: np.random.Generator, d: int, h: int, L: int, batch: int):
    learner = ModelParams.init(d, h, rng, scale=2.0)
    learner = learner.with_flat(learner.flatten() + 0.3 * rng.normal(size=learner.size))
    expert = learner.with_flat(learner.flatten() + 0.5 * rng.normal(size=learner.size))
    insts = []
    for _ in range(batch):
        s = int(rng.integers(0, L))
        e = int(rng.integers(s, L))
        insts.append(Instance(rng.normal(size=(L, d)), (s, e)))
    return learner, expert, insts


def run_gradchecks(draws: int = 20, d: int = 8, h: int = 8, L: int = 6, batch: int = 4,
                   seed: int = 0, tol: float = 1e-4, step: float = 1e-6,
                   checks: Optional[dict] = None) -> list[CheckResult]:
    """Max relative error over ``draws`` random draws for every registered loss."""
    results = []
    for name, check in (checks or CHECKS).items():
        rng = make_rng(seed)
        worst = 0.0
        for _ in range(draws):
            learner, expert, insts = random_draw(rng, d, h, L, batch)
            f, analytic = check(learner, expert, insts)
            numeric = finite_diff_grad(f, learner.flatten(), step)
            worst = max(worst, rel_error(analytic, numeric))
        results.append(CheckResult(name, draws, worst, tol))
    return results
