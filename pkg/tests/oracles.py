"""Independent reference implementations used to check the package.

Everything here is deliberately naive: central finite differences, full
scans, brute-force enumeration. Slow but obviously correct, so the real
implementations can be tested against them.
"""

from __future__ import annotations

import math

import numpy as np


def finite_diff_grad(fun, x: np.ndarray, indices=None, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function at x (float64).

    Returns a dense gradient with zeros at unchecked indices; `indices`
    selects which coordinates to probe (all of them when None).
    """
    x = np.asarray(x, dtype=np.float64)
    if indices is None:
        indices = range(x.size)
    g = np.zeros(x.size)
    for i in indices:
        xp = x.copy()
        xp[i] += step
        xm = x.copy()
        xm[i] -= step
        g[i] = (fun(xp) - fun(xm)) / (2.0 * step)
    return g


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Scale-aware distance: ||a - b|| / max(||a||, ||b||, 1e-8)."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / denom)


def knn_full_scan(keys: np.ndarray, query: np.ndarray, k: int) -> list[int]:
    """Exact k nearest rows by squared distance; ties break on row index."""
    keys = np.asarray(keys, dtype=np.float64)
    query = np.asarray(query, dtype=np.float64)
    d2 = [float(np.dot(row - query, row - query)) for row in keys]
    order = sorted(range(len(keys)), key=lambda i: (d2[i], i))
    return order[: min(k, len(keys))]


def agem_reference(g: np.ndarray, g_ref: np.ndarray) -> np.ndarray:
    """Project g onto the half-space of non-negative inner product with g_ref."""
    g = np.asarray(g, dtype=np.float64)
    g_ref = np.asarray(g_ref, dtype=np.float64)
    dot = float(np.dot(g, g_ref))
    if dot >= 0.0:
        return g.copy()
    denom = float(np.dot(g_ref, g_ref))
    if denom == 0.0:
        return g.copy()
    return g - (dot / denom) * g_ref


def span_select_bruteforce(p_start: np.ndarray, p_end: np.ndarray) -> tuple[int, int, float]:
    """Enumerate every valid (s, e) pair; first maximum wins (s, then e)."""
    m = len(p_start)
    best = (0, 0, -1.0)
    for s in range(m):
        for e in range(s, m):
            prob = float(p_start[s]) * float(p_end[e])
            if prob > best[2]:
                best = (s, e, prob)
    return best


def replay_events(old_count: int, new_count: int, interval: int) -> int:
    """How many replay thresholds a counter crossed moving old -> new."""
    return new_count // interval - old_count // interval


def span_f1_reference(pred_tokens: list[str], gold_tokens: list[str]) -> float:
    """Token-bag F1 between two token lists."""
    if not pred_tokens and not gold_tokens:
        return 1.0
    if not pred_tokens or not gold_tokens:
        return 0.0
    from collections import Counter

    common = Counter(pred_tokens) & Counter(gold_tokens)
    overlap = sum(common.values())
    if overlap == 0:
        return 0.0
    precision = overlap / len(pred_tokens)
    recall = overlap / len(gold_tokens)
    return 2.0 * precision * recall / (precision + recall)


def adam_scalar_steps(x0: float, grads: list[float], lr: float,
                      beta1: float = 0.9, beta2: float = 0.999,
                      eps: float = 1e-8) -> float:
    """Textbook scalar Adam, in plain Python floats."""
    m = v = 0.0
    x = x0
    for t, g in enumerate(grads, start=1):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        x -= lr * m_hat / (math.sqrt(v_hat) + eps)
    return x
