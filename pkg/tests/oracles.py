"""Slow scalar-loop reference implementations used as independent oracles."""
import math

import numpy as np


def scalar_softmax(z):
    m = max(z)
    e = [math.exp(v - m) for v in z]
    s = sum(e)
    return [v / s for v in e]


def scalar_forward(theta, tokens):
    """Per-position scores written out with explicit loops."""
    W1, b1 = theta.W1, theta.b1
    h, d = W1.shape
    s_scores, e_scores = [], []
    for tok in tokens:
        a = [math.tanh(sum(W1[j, k] * tok[k] for k in range(d)) + b1[j]) for j in range(h)]
        s_scores.append(sum(theta.w_start[j] * a[j] for j in range(h)) + float(theta.b_start))
        e_scores.append(sum(theta.w_end[j] * a[j] for j in range(h)) + float(theta.b_end))
    return scalar_softmax(s_scores), scalar_softmax(e_scores)


def scalar_entropy(p):
    return -sum(v * math.log(v) for v in p if v > 0)


def scalar_ce(p, y, floor=1e-12):
    return -math.log(max(p[y], floor))


def argmax_first(v):
    best = 0
    for i, x in enumerate(v):
        if x > v[best]:
            best = i
    return best


def tent_loss(theta, batch):
    tot = 0.0
    for inst in batch:
        ps, pe = scalar_forward(theta, inst.tokens)
        tot += 0.5 * (scalar_entropy(ps) + scalar_entropy(pe))
    return tot / len(batch)


def pl_loss(theta, batch):
    tot = 0.0
    for inst in batch:
        ps, pe = scalar_forward(theta, inst.tokens)
        tot += 0.5 * (scalar_ce(ps, argmax_first(ps)) + scalar_ce(pe, argmax_first(pe)))
    return tot / len(batch)


def oil_loss(theta_l, theta_e, batch, gamma, causal):
    """Mean over passing (instance, head) terms; combined vector 2p - p_hat when causal."""
    terms = []
    for inst in batch:
        learner = scalar_forward(theta_l, inst.tokens)
        expert = scalar_forward(theta_e, inst.tokens)
        for p, ph in zip(learner, expert):
            y = argmax_first(ph)
            if not scalar_ce(p, y) < gamma:
                continue
            q = [2 * a - b for a, b in zip(p, ph)] if causal else p
            terms.append(scalar_ce(q, y))
    return sum(terms) / len(terms) if terms else 0.0


def span_f1(pred, gold):
    ps, pe = pred
    gs, ge = gold
    pred_set = set(range(ps, pe + 1))
    gold_set = set(range(gs, ge + 1))
    common = len(pred_set & gold_set)
    if common == 0:
        return 0.0
    prec = common / len(pred_set)
    rec = common / len(gold_set)
    return 2 * prec * rec / (prec + rec)


def nearest_centroid_span(tokens, mu_ans, mu_bg):
    inside = [i for i, t in enumerate(tokens)
              if np.linalg.norm(t - mu_ans) < np.linalg.norm(t - mu_bg)]
    if not inside:
        return (0, -1)
    return (min(inside), max(inside))
