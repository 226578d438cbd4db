"""Naive double-precision reference implementations, written with plain loops."""

import math


def logsumexp_rows(rows):
    d = len(rows[0])
    return [math.log(sum(math.exp(r[k]) for r in rows)) for k in range(d)]


def mean_attention(A, positions):
    heads, _, l = len(A), len(A[0]), len(A[0][0])
    return [[sum(A[h][p][j] for p in positions) / len(positions) for j in range(l)]
            for h in range(heads)]


def localized_context(H, A_s, A_o):
    l, d = len(H), len(H[0])
    q = [sum(A_s[h][j] * A_o[h][j] for h in range(len(A_s))) for j in range(l)]
    total = sum(q)
    q = [x / total for x in q] if total > 0 else [1.0 / l] * l
    return [sum(H[j][k] * q[j] for j in range(l)) for k in range(d)]


def matvec(W, x):
    return [sum(W[i][j] * x[j] for j in range(len(x))) for i in range(len(W))]


def pair_probability(h_s, h_o, c, W_s, W_c, W_o, W, b):
    ctx = matvec(W_c, c)
    z_s = [math.tanh(a + g) for a, g in zip(matvec(W_s, h_s), ctx)]
    z_o = [math.tanh(a + g) for a, g in zip(matvec(W_o, h_o), ctx)]
    logit = sum(z_s[i] * W[i][j] * z_o[j] for i in range(len(z_s)) for j in range(len(z_o))) + b
    return 1.0 / (1.0 + math.exp(-logit))


def bce(probs, is_na, eps=1e-7):
    total = 0.0
    for p, y in zip(probs, is_na):
        p = min(max(p, eps), 1 - eps)
        total -= math.log(p) if y else math.log(1 - p)
    return total


def prf(pred, gold):
    correct = 0
    for x in pred:
        for y in gold:
            if x == y:
                correct += 1
    p = correct / len(pred) if pred else 0.0
    r = correct / len(gold) if gold else 0.0
    return p, r, (2 * p * r / (p + r) if p + r else 0.0), correct
