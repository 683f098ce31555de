"""Random gradient-check instances, one builder per autodiff primitive."""

import numpy as np

from weightlora import tensor as T
from weightlora.tensor import Tensor


def _away_from_zero(rng, shape):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < 0.05, 0.5, x)


def primitive_case(name: str, rng: np.random.Generator):
    """A scalar-valued graph around primitive ``name`` and random inputs for it."""
    m, n, p = (int(v) for v in rng.integers(1, 5, size=3))
    C = rng.standard_normal
    W = {}
    labels = rng.integers(0, m + 1, size=n)

    def proj(out):
        if "C" not in W:
            W["C"] = Tensor(C(out.shape))
        return T.tsum(T.mul(out, W["C"]))

    table = {
        "add": (lambda a, b: proj(T.add(a, b)), [C((m, n)), C((m, 1))]),
        "sub": (lambda a, b: proj(T.sub(a, b)), [C((m, n)), C((1, n))]),
        "mul": (lambda a, b: proj(T.mul(a, b)), [C((m, n)), C((m, n))]),
        "div": (lambda a, b: proj(T.div(a, b)), [C((m, n)), 1.5 + rng.random((m, n))]),
        "scale": (lambda a: proj(T.scale(a, -2.5)), [C((m, n))]),
        "power": (lambda a: proj(T.power(a, 1.5)), [0.5 + rng.random((m, n))]),
        "matmul": (lambda a, b: proj(T.matmul(a, b)), [C((m, p)), C((p, n))]),
        "transpose": (lambda a: proj(T.transpose(a)), [C((m, n))]),
        "reshape": (lambda a: proj(T.reshape(a, (n * m,))), [C((m, n))]),
        "getitem": (lambda a: proj(T.getitem(a, (slice(None), [0, 0, n - 1]))), [C((m, n))]),
        "concat": (lambda a, b: proj(T.concat([a, b], axis=1)), [C((m, n)), C((m, p))]),
        "sum": (lambda a: proj(T.tsum(a, axis=0, keepdims=True)), [C((m, n))]),
        "mean": (lambda a: proj(T.mean(a, axis=1)), [C((m, n))]),
        "relu": (lambda a: proj(T.relu(a)), [_away_from_zero(rng, (m, n))]),
        "tanh": (lambda a: proj(T.tanh(a)), [C((m, n))]),
        "exp": (lambda a: proj(T.exp(a)), [C((m, n))]),
        "log": (lambda a: proj(T.log(a)), [0.5 + rng.random((m, n))]),
        "softmax": (lambda a: proj(T.softmax(a, axis=0)), [C((m + 1, n))]),
        "log_softmax": (lambda a: proj(T.log_softmax(a, axis=0)), [C((m + 1, n))]),
        "cross_entropy": (lambda a: T.cross_entropy(a, labels), [C((m + 1, n))]),
        "mse": (lambda a, b: T.mse(a, b), [C((m, n)), C((m, n))]),
    }
    return table[name]


PRIMITIVES = ["add", "sub", "mul", "div", "scale", "power", "matmul", "transpose", "reshape",
              "getitem", "concat", "sum", "mean", "relu", "tanh", "exp", "log", "softmax",
              "log_softmax", "cross_entropy", "mse"]
