"""Slow, direct reference implementations used to check the library.

Each oracle takes the most literal route available and shares no code with
the package under test.
"""
import itertools
from collections import deque

import numpy as np


def flood_fill_components(mask, connectivity):
    """BFS labelling; labels 1.. in order of first voxel in C-order scan."""
    limit = {6: 1, 18: 2, 26: 3}[connectivity]
    nbrs = [d for d in itertools.product((-1, 0, 1), repeat=3) if 0 < sum(map(abs, d)) <= limit]
    labels = np.zeros(mask.shape, dtype=np.int64)
    nxt = 0
    for start in zip(*np.nonzero(mask)):
        if labels[start]:
            continue
        nxt += 1
        labels[start] = nxt
        queue = deque([start])
        while queue:
            p = queue.popleft()
            for d in nbrs:
                q = tuple(p[k] + d[k] for k in range(3))
                if all(0 <= q[k] < mask.shape[k] for k in range(3)) and mask[q] and not labels[q]:
                    labels[q] = nxt
                    queue.append(q)
    return labels


def hausdorff_bruteforce(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    best_ab = max(min(float(np.sqrt(((p - q) ** 2).sum())) for q in b) for p in a)
    best_ba = max(min(float(np.sqrt(((p - q) ** 2).sum())) for q in a) for p in b)
    return max(best_ab, best_ba)


def auc_pairwise(scores, labels):
    """P(score_pos > score_neg) + 0.5 P(tie) over all positive/negative pairs."""
    pos = [s for s, l in zip(scores, labels) if l]
    neg = [s for s, l in zip(scores, labels) if not l]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


def icc_anova(a, b):
    """One-way random ICC(1,1) from explicit between/within sums of squares."""
    rows = [(float(x), float(y)) for x, y in zip(a, b)]
    n, k = len(rows), 2
    grand = sum(x + y for x, y in rows) / (n * k)
    ssb = sum(k * ((x + y) / k - grand) ** 2 for x, y in rows)
    ssw = sum((x - (x + y) / k) ** 2 + (y - (x + y) / k) ** 2 for x, y in rows)
    msb = ssb / (n - 1)
    msw = ssw / (n * (k - 1))
    return (msb - msw) / (msb + (k - 1) * msw)


def max_matching_bruteforce(dist, max_dist):
    """Maximum one-to-one matching cardinality by exhaustive search."""
    n_p, n_g = dist.shape
    ok = dist <= max_dist
    best = 0

    def rec(i, used, count):
        nonlocal best
        if count + (n_p - i) <= best:
            return
        if i == n_p:
            best = max(best, count)
            return
        for j in range(n_g):
            if ok[i, j] and j not in used:
                rec(i + 1, used | {j}, count + 1)
        rec(i + 1, used, count)

    rec(0, frozenset(), 0)
    return best


def dft2(x):
    """Direct O(N^4) 2D DFT."""
    h, w = x.shape
    out = np.zeros((h, w), dtype=complex)
    yy, xx = np.mgrid[0:h, 0:w]
    for u in range(h):
        for v in range(w):
            out[u, v] = (x * np.exp(-2j * np.pi * (u * yy / h + v * xx / w))).sum()
    return out


def idft2(X):
    h, w = X.shape
    return np.conj(dft2(np.conj(X))) / (h * w)


def swi_slice_direct(mag, phase, k, power=4):
    """SWI of one slice using the direct DFT and a centered k x k low-pass window."""
    h, w = mag.shape
    z = mag * np.exp(1j * phase)
    Z = dft2(z)
    keep = np.zeros((h, w))
    for u in range(h):
        for v in range(w):
            fu = u if u < h - u else u - h  # signed frequency
            fv = v if v < w - v else v - w
            if u == h // 2 and h % 2 == 0:
                fu = -h // 2
            if v == w // 2 and w % 2 == 0:
                fv = -w // 2
            ku, kv = min(k, h), min(k, w)
            if -(ku // 2) <= fu <= ku - ku // 2 - 1 and -(kv // 2) <= fv <= kv - kv // 2 - 1:
                keep[u, v] = 1.0
    low = idft2(Z * keep)
    hp = np.angle(z * np.conj(low))
    mask = np.where(hp < 0, (np.pi + hp) / np.pi, 1.0)
    return mag * np.clip(mask, 0, 1) ** power


def numeric_gradient(f, x, h=1e-5):
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def max_relative_grad_error(model, batch, labels, weights, loss_and_grad, loss_only, h=1e-5):
    """Worst relative error of reverse-mode gradients against central differences."""
    _, grads = loss_and_grad(model, batch, labels, weights, train=True)
    worst, where = 0.0, None
    for name, p in model.parameters.items():
        fd = numeric_gradient(lambda: loss_only(model, batch, labels, weights, train=True), p, h)
        g = grads[name]
        denom = np.maximum(np.maximum(np.abs(g), np.abs(fd)), 1e-12)
        err = np.abs(g - fd) / denom
        if err.max() > worst:
            worst, where = float(err.max()), name
    return worst, where
