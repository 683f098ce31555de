"""Adam and the linear warm-up/decay learning-rate schedule."""

from __future__ import annotations

import numpy as np

from .errors import ContractError
from .tensor import Tensor


def linear_warmup_lr(step: int, warmup_steps: int, base_lr: float, total_steps: int) -> float:
    """Linear ramp from 0 to ``base_lr`` over ``warmup_steps``, then linear decay to 0."""
    if step < 0:
        raise ContractError(f"step must be >= 0, got {step}")
    if warmup_steps > total_steps:
        raise ContractError(f"warmup_steps={warmup_steps} exceeds total_steps={total_steps}")
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    if total_steps == warmup_steps:
        return base_lr
    return base_lr * max(0.0, (total_steps - step) / (total_steps - warmup_steps))


class Adam:
    """Adam with per-parameter moments keyed by tensor identity."""

    def __init__(self, betas=(0.9, 0.999), eps: float = 1e-8):
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.state: dict[int, tuple[Tensor, np.ndarray, np.ndarray]] = {}

    def step(self, params, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p in params:
            if p.grad is None:
                continue
            entry = self.state.get(id(p))
            if entry is None:
                entry = (p, np.zeros_like(p.data), np.zeros_like(p.data))
                self.state[id(p)] = entry
            _, m, v = entry
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def discard(self, params) -> None:
        for p in params:
            self.state.pop(id(p), None)

    def moments(self, p: Tensor):
        entry = self.state.get(id(p))
        return None if entry is None else (entry[1], entry[2])

    def adopt(self, old: Tensor, new: Tensor, axis: int) -> None:
        """Move ``old``'s moments to ``new``, zero-padding the grown ``axis``."""
        entry = self.state.pop(id(old), None)
        if entry is None:
            return
        _, m, v = entry
        pad = [(0, 0)] * m.ndim
        pad[axis] = (0, new.shape[axis] - m.shape[axis])
        self.state[id(new)] = (new, np.pad(m, pad), np.pad(v, pad))

    def __len__(self) -> int:
        return len(self.state)
