"""Independent reference computations used only by the tests.

Nothing here imports the package's differentiation or model code; each
helper is a second, deliberately plain implementation.
"""

from __future__ import annotations

import math
from typing import Callable, Dict, List, Sequence

import numpy as np


def triple_loop_matmul(a, b):
    m, k = len(a), len(a[0])
    n = len(b[0])
    out = [[0.0] * n for _ in range(m)]
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i][t] * b[t][j]
            out[i][j] = s
    return np.array(out)


def logsumexp_xent(logits: np.ndarray, labels: Sequence[int]) -> float:
    """Mean cross-entropy through math.fsum, one row at a time."""
    total = []
    for row, y in zip(logits, labels):
        mx = max(row)
        lse = mx + math.log(math.fsum(math.exp(v - mx) for v in row))
        total.append(lse - row[y])
    return math.fsum(total) / len(total)


def central_difference(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    g = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2 * h)
    return g


def mlp_forward(layers: List[Dict[str, np.ndarray]], x: np.ndarray) -> np.ndarray:
    """Dense layers with ReLU between them, written without the package."""
    h = x
    for i, layer in enumerate(layers):
        h = h @ layer["w"] + layer["b"]
        if i < len(layers) - 1:
            h = np.maximum(h, 0.0)
    return h


def target_forward(w: Dict[str, np.ndarray], x: np.ndarray, n_layers: int) -> np.ndarray:
    layers = [{"w": w[f"dense{i}.weight"], "b": w[f"dense{i}.bias"]} for i in range(n_layers)]
    return mlp_forward(layers, x)


def xent_numpy(logits: np.ndarray, labels: np.ndarray) -> float:
    z = logits - logits.max(axis=1, keepdims=True)
    lp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-lp[np.arange(len(labels)), labels].mean())


def rank_spearman(x: Sequence[float], y: Sequence[float]) -> float:
    """Spearman via scipy, the second implementation for the harness."""
    from scipy.stats import spearmanr

    return float(spearmanr(x, y).statistic)


def multiset(values: np.ndarray) -> Dict[float, int]:
    out: Dict[float, int] = {}
    for v in np.asarray(values).ravel().tolist():
        out[v] = out.get(v, 0) + 1
    return out
