"""Sparse gate vector over adapters: hard-thresholded gradient steps and freezing."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .adapters import gate_open
from .errors import ContractError, DegeneracyError, StateError
from .tensor import Tensor


def hard_threshold_topk(v, K: int) -> np.ndarray:
    """Keep the ``K`` entries of largest magnitude and zero the rest.

    Ties in magnitude go to the lower index. Works on arrays or tensors and
    always returns a new numpy array.
    """
    v = np.asarray(v.data if isinstance(v, Tensor) else v)
    n = v.shape[0]
    if v.ndim != 1:
        raise ContractError(f"expected a vector, got shape {v.shape}")
    if not 1 <= K <= n:
        raise ContractError(f"K must satisfy 1 <= K <= n={n}, got {K}")
    # stable sort on -|v| keeps lower indices first among equal magnitudes
    keep = np.argsort(-np.abs(v), kind="stable")[:K]
    out = np.zeros_like(v)
    out[keep] = v[keep]
    return out


def l0(v) -> int:
    return int(np.count_nonzero(np.asarray(v.data if isinstance(v, Tensor) else v)))


@dataclass
class GateVector:
    """Trainable gates ``omega`` with an l0 budget ``K``."""

    omega: Tensor
    K: int
    gate_mode: str = "nonzero"
    frozen: bool = False
    active_set: tuple[int, ...] | None = None

    @classmethod
    def ones(cls, n: int, K: int, gate_mode: str = "nonzero", dtype=None) -> GateVector:
        if not 1 <= K <= n:
            raise ContractError(f"K must satisfy 1 <= K <= n={n}, got {K}")
        return cls(Tensor(np.ones(n), requires_grad=True, dtype=dtype), K, gate_mode=gate_mode)

    @property
    def n(self) -> int:
        return self.omega.shape[0]

    @property
    def values(self) -> np.ndarray:
        return self.omega.data

    def support(self) -> tuple[int, ...]:
        return tuple(int(i) for i in np.flatnonzero(self.omega.data))

    def is_open(self, i: int) -> bool:
        """Whether slot ``i`` contributes to the forward pass."""
        if not self.frozen:
            return True
        return gate_open(float(self.omega.data[i]), self.gate_mode)

    def project(self) -> None:
        self.omega.data[:] = hard_threshold_topk(self.omega.data, self.K)


def gate_step(gates: GateVector, grad_omega, lr: float, *, project: bool = True) -> GateVector:
    """One projected gradient step ``omega <- TopK(omega - lr * grad)``.

    With ``project=False`` the plain gradient step is taken and the
    projection is left to the caller (the "project at T" schedule).
    """
    if gates.frozen:
        raise StateError("gates are frozen; no further selection steps are allowed")
    g = np.asarray(grad_omega.data if isinstance(grad_omega, Tensor) else grad_omega)
    if g.shape != gates.omega.shape:
        raise ContractError(f"gradient shape {g.shape} does not match gates {gates.omega.shape}")
    stepped = gates.omega.data - lr * g
    gates.omega.data[:] = hard_threshold_topk(stepped, gates.K) if project else stepped
    return gates


def gate_step_on_support(gates: GateVector, grad_omega, lr: float) -> GateVector:
    """Gradient step restricted to the frozen support (joint fine-tune mode).

    The zero pattern is kept fixed; an entry that would land exactly on zero
    is left where it was.
    """
    if not gates.frozen:
        raise StateError("support-restricted steps apply only after freezing")
    g = np.asarray(grad_omega.data if isinstance(grad_omega, Tensor) else grad_omega)
    idx = np.asarray(gates.active_set, dtype=np.int64)
    if idx.size:
        new = gates.omega.data[idx] - lr * g[idx]
        new = np.where(new == 0.0, gates.omega.data[idx], new)
        gates.omega.data[idx] = new
    return gates


def freeze_and_disconnect(gates: GateVector, adapters) -> tuple[int, ...]:
    """Fix the gates and switch off every adapter whose gate is closed.

    ``adapters`` is indexed like the gates. Returns the active set. An empty
    selection raises :class:`DegeneracyError` after the state change, so the
    caller can still inspect the gates.
    """
    if gates.frozen:
        raise StateError("gates are already frozen")
    if len(adapters) != gates.n:
        raise ContractError(f"{len(adapters)} adapters for {gates.n} gates")
    gates.frozen = True
    gates.omega.requires_grad = False
    gates.omega.grad = None
    active = tuple(i for i in range(gates.n) if gates.is_open(i))
    gates.active_set = active
    for i, adapter in enumerate(adapters):
        if i not in active:
            adapter.active = False
            adapter.A.requires_grad = False
            adapter.B.requires_grad = False
            adapter.A.grad = adapter.B.grad = None
    if not active:
        raise DegeneracyError("all gates are zero at freeze time; no adapter survives")
    return active


def random_select_rlora(n: int, K: int, seed=None) -> tuple[int, ...]:
    """Uniformly random ``K``-subset of ``range(n)``, sorted."""
    if not 1 <= K <= n:
        raise ContractError(f"K must satisfy 1 <= K <= n={n}, got {K}")
    rng = np.random.default_rng(seed)
    return tuple(sorted(int(i) for i in rng.choice(n, size=K, replace=False)))


def rlora_gates(n: int, K: int, seed=None, dtype=None) -> GateVector:
    """Gates fixed to 1 on a random ``K``-subset and 0 elsewhere, frozen at once."""
    chosen = random_select_rlora(n, K, seed)
    omega = np.zeros(n)
    omega[list(chosen)] = 1.0
    return GateVector(Tensor(omega, dtype=dtype), K, frozen=True, active_set=chosen)
