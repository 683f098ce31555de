"""Synthetic fine-tuning tasks with a planted sparse set of layers that need tuning.

A task fixes a frozen *student* base model and a *teacher* that equals the
base except for low-rank perturbations on the planted slots. Targets are
produced by the teacher, so only the planted slots strictly need adapters.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ContractError
from .models import ToyModel, build_model
from .tensor import Tensor

# tanh stack gain: large enough that every planted layer measurably moves the output
MLP_GAIN = 1.5
TASK_SPEC = re.compile(r"^planted:n(\d+)k(\d+)(?:r(\d+))?(c\d+)?$")


@dataclass
class SyntheticTask:
    kind: str  # "regression" | "classification"
    seed: int
    model_spec: dict
    planted_slots: tuple[int, ...]
    rank_star: int
    deltas: dict[int, np.ndarray] = field(repr=False)
    x_train: np.ndarray = field(repr=False)
    y_train: np.ndarray = field(repr=False)
    x_val: np.ndarray = field(repr=False)
    y_val: np.ndarray = field(repr=False)

    @property
    def n_train(self) -> int:
        return self.y_train.shape[-1] if self.kind == "regression" else self.y_train.shape[0]

    @property
    def n_val(self) -> int:
        return self.y_val.shape[-1] if self.kind == "regression" else self.y_val.shape[0]

    @property
    def n_slots(self) -> int:
        return self.student().n_slots

    def student(self, dtype=None) -> ToyModel:
        """A fresh copy of the frozen base network (no adapters)."""
        return build_model(self.model_spec, dtype=dtype)

    def teacher(self) -> ToyModel:
        model = self.student()
        for s, delta in self.deltas.items():
            model.bases[s].W.data += delta
        return model

    def _select(self, x: np.ndarray, y: np.ndarray, idx) -> tuple[np.ndarray, np.ndarray]:
        if self.model_spec.get("arch") == "transformer":
            return x[idx], y[idx]
        return x[:, idx], (y[:, idx] if self.kind == "regression" else y[idx])

    def batch(self, idx, split: str = "train"):
        if split == "train":
            return self._select(self.x_train, self.y_train, idx)
        return self._select(self.x_val, self.y_val, idx)

    def loss(self, output: Tensor, y) -> Tensor:
        if self.kind == "regression":
            return T.mse(output, Tensor(y, dtype=output.data.dtype.type))
        return T.cross_entropy(output, y)

    def evaluate(self, model: ToyModel, split: str = "val") -> float:
        x, y = (self.x_val, self.y_val) if split == "val" else (self.x_train, self.y_train)
        return self.loss(model.forward(x), y).item()

    def baseline_loss(self, split: str = "val") -> float:
        """Loss of the untouched base network."""
        return self.evaluate(self.student(), split)

    def to_columns(self, path) -> None:
        """Write a plain CSV: split, input columns, target columns; ``#`` lines are metadata."""
        lines = [f"# kind={self.kind} seed={self.seed} rank_star={self.rank_star} "
                 f"planted_slots={';'.join(map(str, self.planted_slots))}"]
        arch_t = self.model_spec.get("arch") == "transformer"
        rows = []
        for split, x, y in (("train", self.x_train, self.y_train), ("val", self.x_val, self.y_val)):
            xs = x if arch_t else x.T
            ys = y.reshape(-1, 1) if (self.kind == "classification") else y.T
            for xi, yi in zip(xs, ys):
                rows.append(",".join([split] + [repr(float(v)) if not arch_t else str(int(v))
                                                 for v in xi] + [repr(float(v)) if
                                                                 self.kind == "regression"
                                                                 else str(int(v)) for v in yi]))
        nx = (self.x_train.shape[1] if arch_t else self.x_train.shape[0])
        ny = 1 if self.kind == "classification" else self.y_train.shape[0]
        header = ["split"] + [f"x{i}" for i in range(nx)] + [f"y{i}" for i in range(ny)]
        Path(path).write_text("\n".join(lines + [",".join(header)] + rows) + "\n")


def _low_rank(rng: np.random.Generator, d: int, k: int, rank: int, magnitude: float) -> np.ndarray:
    U, _ = np.linalg.qr(rng.standard_normal((d, rank)))
    V, _ = np.linalg.qr(rng.standard_normal((k, rank)))
    return magnitude * U @ V.T


def make_planted_task(n_layers: int = 6, planted=2, rank_star: int = 2, seed: int = 0, *,
                      kind: str = "regression", arch: str = "mlp", width: int = 16,
                      n_train: int = 512, n_val: int = 256, magnitude: float = 2.0,
                      noise: float = 0.0, n_classes: int = 4, model_kwargs: dict | None = None
                      ) -> SyntheticTask:
    """Build a teacher/student pair whose difference lives on ``planted`` slots.

    ``planted`` is either an explicit collection of slot indices or a count,
    in which case the slots are drawn from ``seed``. Each planted slot gets a
    perturbation ``magnitude * U V^T`` with orthonormal ``U, V`` of rank
    ``rank_star``.
    """
    if kind not in ("regression", "classification"):
        raise ContractError(f"unknown task kind {kind!r}")
    if rank_star < 1:
        raise ContractError("rank_star must be >= 1")
    rng = np.random.default_rng([seed, 0xA11])
    if arch == "mlp":
        spec = dict(arch="mlp", n_layers=n_layers, width=width, seed=seed, gain=MLP_GAIN,
                    out_dim=n_classes if kind == "classification" else width)
    elif arch == "transformer":
        spec = dict(arch="transformer", seed=seed,
                    n_classes=n_classes if kind == "classification" else 1)
        if kind == "regression":
            raise ContractError("transformer tasks are classification only")
    else:
        raise ContractError(f"unknown architecture {arch!r}")
    spec.update(model_kwargs or {})
    base = build_model(spec)

    if isinstance(planted, (int, np.integer)):
        count = int(planted)
        if not 1 <= count <= base.n_slots:
            raise ContractError(f"planted count must be in [1, {base.n_slots}], got {count}")
        planted = rng.choice(base.n_slots, size=count, replace=False)
    slots = tuple(sorted(int(s) for s in planted))
    if not slots:
        raise ContractError("the planted slot set must not be empty")
    if len(set(slots)) != len(slots) or min(slots) < 0 or max(slots) >= base.n_slots:
        raise ContractError(f"planted slots {slots} must be distinct slots of a "
                            f"{base.n_slots}-slot model")

    deltas = {}
    for s in slots:
        d, k = base.slot_dims(s)
        if rank_star > min(d, k):
            raise ContractError(f"rank_star={rank_star} exceeds min(d, k) at slot {s}")
        deltas[s] = _low_rank(rng, d, k, rank_star, magnitude)

    task = SyntheticTask(kind, seed, spec, slots, rank_star, deltas,
                         *(np.empty(0),) * 4)
    teacher = task.teacher()
    n = n_train + n_val
    if arch == "mlp":
        x = rng.standard_normal((base.bases[0].k, n))
    else:
        x = rng.integers(0, spec.get("vocab", 16), size=(n, spec.get("seq_len", 8)))
    out = teacher.forward(x).data
    if kind == "regression":
        y = out + noise * rng.standard_normal(out.shape)
    else:
        y = out.argmax(axis=0)
    if arch == "mlp":
        task.x_train, task.x_val = x[:, :n_train], x[:, n_train:]
    else:
        task.x_train, task.x_val = x[:n_train], x[n_train:]
    if kind == "regression":
        task.y_train, task.y_val = y[:, :n_train], y[:, n_train:]
    else:
        task.y_train, task.y_val = y[:n_train], y[n_train:]
    return task


def parse_task_spec(spec: str, seed: int = 0, **overrides) -> SyntheticTask:
    """Parse ``planted:n<layers>k<planted>[r<rank>][c<classes>]`` into a task.

    Without the ``c`` suffix the task is regression; ``c4`` makes it a
    4-class classification task.
    """
    m = TASK_SPEC.match(spec.strip())
    if not m:
        raise ContractError(f"malformed task spec {spec!r}; expected planted:n<int>k<int>[r<int>][c<int>]")
    n_layers, k_planted = int(m.group(1)), int(m.group(2))
    rank_star = int(m.group(3)) if m.group(3) else 2
    kwargs = dict(overrides)
    if m.group(4):
        kwargs.update(kind="classification", n_classes=int(m.group(4)[1:]))
    if k_planted < 1 or k_planted > n_layers:
        raise ContractError(f"planted count must be in [1, {n_layers}], got {k_planted}")
    return make_planted_task(n_layers, k_planted, rank_star, seed, **kwargs)
