"""Reference implementations the package is checked against.

Each oracle is written independently of the code under test: plain loops,
64-bit arithmetic and no shared helpers.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import integrate


def central_difference(f, arrays, h=1e-5):
    """d f / d a for every array in ``arrays`` (float64), perturbing in place."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a, dtype=np.float64)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = a[idx]
            a[idx] = old + h
            fp = f()
            a[idx] = old - h
            fm = f()
            a[idx] = old
            g[idx] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def rel_error(got, want) -> float:
    got = np.asarray(got, dtype=np.float64).ravel()
    want = np.asarray(want, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(got), np.linalg.norm(want))
    if scale < 1e-12:
        return 0.0
    return float(np.linalg.norm(got - want) / scale)


def conv2d_loops(x, w, b=None):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    out = np.zeros((n, o, h - kh + 1, wd - kw + 1))
    for i in range(n):
        for j in range(o):
            for r in range(h - kh + 1):
                for s in range(wd - kw + 1):
                    acc = 0.0
                    for ch in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                acc += x[i, ch, r + u, s + v] * w[j, ch, u, v]
                    out[i, j, r, s] = acc + (b[j] if b is not None else 0.0)
    return out


def maxpool_loops(x, window, stride):
    n, c, h, w = x.shape
    ho, wo = (h - window) // stride + 1, (w - window) // stride + 1
    out = np.zeros((n, c, ho, wo))
    arg = np.zeros((n, c, ho, wo, 2), dtype=int)
    for i in range(n):
        for j in range(c):
            for r in range(ho):
                for s in range(wo):
                    best, pos = -math.inf, None
                    for u in range(window):
                        for v in range(window):
                            val = x[i, j, r * stride + u, s * stride + v]
                            if val > best:
                                best, pos = val, (r * stride + u, s * stride + v)
                    out[i, j, r, s] = best
                    arg[i, j, r, s] = pos
    return out, arg


def entropy_loop(p) -> float:
    total = 0.0
    for v in p:
        v = float(v)
        total -= v * math.log(v + 1e-12)
    return total


def mutual_information_loop(rows) -> float:
    t = len(rows)
    c = len(rows[0])
    mean = [sum(float(rows[i][j]) for i in range(t)) / t for j in range(c)]
    return entropy_loop(mean) - sum(entropy_loop(r) for r in rows) / t


def rates_loop(benign, adversarial, theta):
    tp = sum(1 for u in adversarial if u > theta)
    fp = sum(1 for u in benign if u > theta)
    return tp / len(adversarial), fp / len(benign)


def best_tpr_scan(benign, adversarial, alpha):
    """Max TPR over every observed value as threshold with FPR <= alpha."""
    best = None
    for theta in list(benign) + list(adversarial):
        tpr, fpr = rates_loop(benign, adversarial, theta)
        if fpr <= alpha and (best is None or tpr > best):
            best = tpr
    return best


def pairwise_auc(benign, adversarial) -> float:
    wins = 0.0
    for a in adversarial:
        for b in benign:
            if a > b:
                wins += 1.0
            elif a == b:
                wins += 0.5
    return wins / (len(benign) * len(adversarial))


def streaming_stats(stack):
    """Welford mean and population std over the first axis, 64-bit."""
    mean = np.zeros(stack.shape[1:])
    m2 = np.zeros(stack.shape[1:])
    for n, s in enumerate(stack, start=1):
        s = s.astype(np.float64)
        delta = s - mean
        mean += delta / n
        m2 += delta * (s - mean)
    return mean, np.sqrt(m2 / len(stack))


def sir_loops(topk_map, centers, radius) -> float:
    h, w = topk_map.shape
    found = 0
    for r, c in centers:
        hit = False
        for i in range(h):
            for j in range(w):
                if topk_map[i, j] != 0 and abs(i - r) <= radius and abs(j - c) <= radius:
                    hit = True
        found += hit
    return found / len(centers)


def gaussian_kl_quadrature(mu_q, sigma_q, mu_p, sigma_p) -> float:
    def integrand(w):
        lq = -0.5 * ((w - mu_q) / sigma_q) ** 2 - math.log(sigma_q * math.sqrt(2 * math.pi))
        lp = -0.5 * ((w - mu_p) / sigma_p) ** 2 - math.log(sigma_p * math.sqrt(2 * math.pi))
        return math.exp(lq) * (lq - lp)

    lo, hi = mu_q - 12 * sigma_q, mu_q + 12 * sigma_q
    val, _ = integrate.quad(integrand, lo, hi, limit=200, epsabs=1e-12, epsrel=1e-10)
    return val


def guided_fc_saliency(x, w1, b1, w2, b2, target):
    """Guided gradient of logit ``target`` for x -> relu(x W1 + b1) W2 + b2, by hand."""
    pre = x @ w1 + b1
    up = w2[:, target].astype(np.float64)
    g_pre = up * (pre > 0) * (up > 0)
    return w1 @ g_pre
