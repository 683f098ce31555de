"""Independent reference computations the tests compare against.

Values come from loops, sorting, enumeration or finite differences; the
package is only used to evaluate the callables handed in.
"""

from __future__ import annotations

import itertools
import math

import numpy as np

from weightlora.tensor import Tensor, backward


def naive_matmul(a, b):
    m, p = len(a), len(a[0])
    q = len(b[0])
    out = [[0.0] * q for _ in range(m)]
    for i in range(m):
        for j in range(q):
            s = 0.0
            for t in range(p):
                s += a[i][t] * b[t][j]
            out[i][j] = s
    return np.array(out)


def central_difference(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Gradient of the scalar function ``f`` at ``x`` by central differences."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        up = f(x)
        x[i] = old - h
        down = f(x)
        x[i] = old
        grad[i] = (up - down) / (2 * h)
    return grad


def gradcheck(build, inputs) -> float:
    """Worst relative error between autodiff and central differences over all inputs."""
    leaves = [Tensor(x.copy(), requires_grad=True) for x in inputs]
    backward(build(*leaves))
    worst = 0.0
    for i, x in enumerate(inputs):
        def f(xi, i=i):
            args = [Tensor(xi if j == i else inputs[j]) for j in range(len(inputs))]
            return build(*args).item()

        worst = max(worst, relative_error(leaves[i].grad, central_difference(f, x)))
    return worst


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Max-norm error relative to the larger operand, floored at 1."""
    a, b = np.asarray(a), np.asarray(b)
    scale = max(1.0, float(np.abs(a).max(initial=0.0)), float(np.abs(b).max(initial=0.0)))
    return float(np.abs(a - b).max(initial=0.0)) / scale


def scalar_cross_entropy(logits, label: int) -> float:
    """``-log softmax(logits)[label]`` via a shifted log-sum-exp, one scalar at a time."""
    m = max(logits)
    lse = m + math.log(sum(math.exp(z - m) for z in logits))
    return lse - logits[label]


def topk_by_sort(v, K: int) -> np.ndarray:
    """Top-K by magnitude using Python's sort on (-|v_i|, i)."""
    order = sorted(range(len(v)), key=lambda i: (-abs(v[i]), i))
    out = np.zeros(len(v))
    for i in order[:K]:
        out[i] = v[i]
    return out


def best_sparse_projection(v, K: int) -> float:
    """Smallest squared distance from ``v`` to any vector with at most ``K`` nonzeros."""
    v = np.asarray(v, dtype=np.float64)
    best = math.inf
    for size in range(K + 1):
        for support in itertools.combinations(range(len(v)), size):
            kept = np.zeros_like(v)
            kept[list(support)] = v[list(support)]
            best = min(best, float(np.sum((v - kept) ** 2)))
    return best


def frobenius_loops(G, D) -> float:
    s = 0.0
    for i in range(len(G)):
        for j in range(len(G[0])):
            s += float(G[i][j]) * float(D[i][j])
    return s


def dense_lora(W, A, B, alpha, r, x, omega=1.0):
    """``W x + omega (alpha/r) (A B) x`` with the product materialized first."""
    return W @ x + omega * (alpha / r) * (naive_matmul(A, B) @ x)
