"""Importance probe, trainable-parameter accounting and an analytic memory model."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import tensor as T
from .adapters import adapter_param_count
from .catalog import ShapeCatalog
from .errors import ContractError
from .models import ToyModel, attach_adapters
from .tasks import SyntheticTask
from .trainer import TrainSchedule, run_baseline


# -- parameter accounting --------------------------------------------------------------
def format_percent(frac: Fraction) -> str:
    """Percent in the style of published parameter tables.

    Two decimals from 0.1% upward, one significant figure below that
    (0.2404% -> "0.24%", 0.0668% -> "0.07%", 0.00668% -> "0.007%").
    """
    value = float(frac * 100)
    if value == 0:
        return "0%"
    if value == 100:
        return "100%"
    if value >= 0.1:
        return f"{value:.2f}%"
    digits = -math.floor(math.log10(value))
    rounded = round(value, digits)
    if rounded >= 10.0 ** (1 - digits):
        digits -= 1
        rounded = round(value, digits)
    return f"{rounded:.{digits}f}%"


@dataclass
class TrainableCount:
    count: int
    total_params: int | None = None

    @property
    def fraction(self) -> Fraction | None:
        return None if not self.total_params else Fraction(self.count, self.total_params)

    @property
    def percent(self) -> str | None:
        return None if self.fraction is None else format_percent(self.fraction)

    @property
    def exact_percent(self) -> float | None:
        return None if self.fraction is None else float(self.fraction * 100)

    @property
    def rounding_flag(self) -> bool:
        """True when the displayed percent is more than 1% (relative) off the exact value."""
        if self.fraction is None or self.count == 0:
            return False
        shown = float(self.percent.rstrip("%"))
        return abs(shown - self.exact_percent) > 0.01 * self.exact_percent

    def as_dict(self) -> dict:
        out = {"count": self.count}
        if self.fraction is not None:
            out.update(total_params=self.total_params, percent=self.percent,
                       exact_percent=self.exact_percent,
                       fraction=f"{self.fraction.numerator}/{self.fraction.denominator}",
                       rounding_flag=self.rounding_flag)
        return out

    def __str__(self) -> str:
        return f"{self.count}" if self.percent is None else f"{self.count} ({self.percent})"


def count_trainable(model, catalog_entry: ShapeCatalog | None = None) -> TrainableCount:
    """Sum ``r (d + k)`` over active adapters of a model or an iterable of adapters."""
    if isinstance(model, ToyModel):
        adapters = model.adapters.values()
    else:
        adapters = model
    count = sum(adapter_param_count(a) for a in adapters)
    return TrainableCount(count, catalog_entry.total_params if catalog_entry else None)


def count_catalog(catalog: ShapeCatalog, r: int, active=None, group: str | None = None
                  ) -> TrainableCount:
    """Adapter parameters for rank-``r`` adapters on a catalog's slots.

    ``active`` is None (all slots), an int ``K`` (the first ``K`` slots), or an
    explicit collection of slot ids.
    """
    slots = catalog.slots(group)
    if r < 1:
        raise ContractError("rank must be >= 1")
    if active is None:
        chosen = slots
    elif isinstance(active, (int, np.integer)):
        if not 0 <= active <= len(slots):
            raise ContractError(f"K must lie in [0, {len(slots)}], got {active}")
        chosen = slots[:int(active)]
    else:
        ids = set(int(i) for i in active)
        if not ids <= {s.slot_id for s in slots}:
            raise ContractError(f"unknown slot ids {sorted(ids - {s.slot_id for s in slots})}")
        chosen = [s for s in slots if s.slot_id in ids]
    return TrainableCount(sum(r * (s.d + s.k) for s in chosen), catalog.total_params)


# -- importance probe ------------------------------------------------------------------------
@dataclass
class ImportanceProfile:
    slots: list[int]
    names: list[str]
    scores: np.ndarray  # mean over seeds of |<grad_W f, delta W>|
    per_seed: np.ndarray  # (seeds, slots)
    config: dict = field(default_factory=dict)

    def top(self, K: int) -> list[int]:
        order = np.argsort(-self.scores, kind="stable")[:K]
        return sorted(self.slots[i] for i in order)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["slot_id", "layer", "projection_type", "score"])
        for slot, name, score in zip(self.slots, self.names, self.scores):
            layer, _, proj = name.partition(".")
            w.writerow([slot, layer, proj or "dense", repr(float(score))])
        return buf.getvalue()


def frobenius_inner(G: np.ndarray, D: np.ndarray) -> float:
    return float(np.sum(G * D))


def base_weight_gradient(task: SyntheticTask, slot: int, model: ToyModel | None = None,
                         split: str = "train") -> np.ndarray:
    """Full-dataset gradient of the mean loss w.r.t. the frozen weight at ``slot``."""
    model = model if model is not None else task.student()
    W = model.bases[slot].W
    was = W.requires_grad
    W.requires_grad, W.grad = True, None
    try:
        x, y = (task.x_train, task.y_train) if split == "train" else (task.x_val, task.y_val)
        T.backward(task.loss(model.forward(x), y))
        return W.grad.copy()
    finally:
        W.requires_grad, W.grad = was, None


def importance_probe(task: SyntheticTask, slots=None, epochs: int = 10, seeds=(0, 1, 2, 3, 4), *,
                     rank: int = 2, lr: float = 2e-3, batch_size: int = 64, alpha: float = 32.0,
                     dropout_p: float = 0.05, warmup_steps: int = 20) -> ImportanceProfile:
    """Score each slot by how strongly a lone, briefly trained adapter aligns with the loss gradient.

    For every slot and seed: attach one adapter to a fresh copy of the
    frozen student, train it for ``epochs`` passes over the training set,
    then take ``|<dL/dW_slot, delta W_slot>|`` with the gradient evaluated
    at the untouched base weights over the full training set (mean loss).
    """
    probe_model = task.student()
    slots = list(range(probe_model.n_slots)) if slots is None else [int(s) for s in slots]
    if not slots:
        raise ContractError("importance_probe needs at least one slot")
    if epochs < 0:
        raise ContractError("epochs must be >= 0")
    seeds = list(seeds)
    grads = {s: base_weight_gradient(task, s, probe_model) for s in slots}
    steps = epochs * math.ceil(task.n_train / batch_size)
    per_seed = np.zeros((len(seeds), len(slots)))
    for a, seed in enumerate(seeds):
        for b, slot in enumerate(slots):
            model = task.student()
            attach_adapters(model, [slot], rank, alpha=alpha, dropout_p=dropout_p,
                            seed=[seed, 0xADA, slot])
            if steps > 0:
                sched = TrainSchedule(K=1, T=0, total_steps=steps, batch_size=batch_size, lr=lr,
                                      warmup_steps=min(warmup_steps, steps), seed=seed)
                run_baseline(model, task, sched, "lora")
            per_seed[a, b] = abs(frobenius_inner(grads[slot], model.adapters[slot].delta()))
    return ImportanceProfile(slots, [probe_model.slot_names[s] for s in slots],
                             per_seed.mean(axis=0), per_seed,
                             dict(epochs=epochs, seeds=seeds, rank=rank, lr=lr,
                                  batch_size=batch_size, loss_reduction="mean",
                                  gradient_at="base weights, full training set"))


# -- memory model --------------------------------------------------------------------------
@dataclass
class MemoryModel:
    """Analytic training-memory estimate; not a measurement.

    Each active adapter costs its parameters and gradients plus Adam's two
    moment buffers, and stores the adapter input and the rank-``r``
    intermediate for every token in the batch.
    """

    bytes_per_param: int = 4
    optimizer_multiplier: int = 2
    tokens_per_batch: int = 32 * 128
    bytes_per_activation: int = 4
    base_bytes: int = 0

    def adapter_bytes(self, d: int, k: int, r: int) -> int:
        return r * (d + k) * self.bytes_per_param * (1 + self.optimizer_multiplier)

    def activation_bytes(self, d: int, k: int, r: int) -> int:
        return self.tokens_per_batch * (k + r) * self.bytes_per_activation


def estimate_memory(shapes, n_active: int, r: int, memory_model: MemoryModel | None = None) -> int:
    """Bytes needed with ``n_active`` rank-``r`` adapters.

    ``shapes`` is a ``(d, k)`` pair (every slot alike), a list of slot shapes
    (the first ``n_active`` are used) or a :class:`ShapeCatalog`.
    """
    mm = memory_model or MemoryModel()
    if n_active < 0:
        raise ContractError("n_active must be >= 0")
    if isinstance(shapes, ShapeCatalog):
        shapes = [(s.d, s.k) for s in shapes.slots()]
    if isinstance(shapes, tuple) and len(shapes) == 2 and all(isinstance(v, int) for v in shapes):
        dims = [shapes] * n_active
    else:
        shapes = [(s.d, s.k) if hasattr(s, "d") else tuple(s) for s in shapes]
        if n_active > len(shapes):
            raise ContractError(f"only {len(shapes)} slots available, asked for {n_active}")
        dims = shapes[:n_active]
    total = mm.base_bytes
    for d, k in dims:
        total += mm.adapter_bytes(d, k, r) + mm.activation_bytes(d, k, r)
    return total


def memory_curve(shapes, r: int, n_max: int, memory_model: MemoryModel | None = None):
    return [(n, estimate_memory(shapes, n, r, memory_model)) for n in range(n_max + 1)]


def max_active_within(budget_bytes: int, shapes, r: int, n_max: int,
                      memory_model: MemoryModel | None = None) -> int:
    """Largest adapter count whose estimate fits ``budget_bytes``."""
    best = -1
    for n, b in memory_curve(shapes, r, n_max, memory_model):
        if b <= budget_bytes:
            best = n
    return best


def memory_curve_csv(curve) -> str:
    return "n_active,bytes\n" + "".join(f"{n},{b}\n" for n, b in curve)
