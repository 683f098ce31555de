"""Training loops for WeightLoRA, WeightLoRA+ and the LoRA / RLoRA / full baselines.

Phase 1 (steps ``1..T``): every iteration takes one Adam step on all adapter
factors. The same backward pass also yields the gate gradient, which is
averaged over ``omega_every`` steps and then spent on one projected gate
step. At step ``T`` the gates are frozen and closed adapters are
disconnected. Phase 2 (``T+1..total``) trains
the survivors only, optionally after growing their rank so the total adapter
budget stays the same.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .adapters import expand_rank_gaussian, expand_rank_qr, expansion_residual
from .errors import ContractError, DegeneracyError, StateError
from .models import ToyModel, attach_adapters
from .optim import Adam, linear_warmup_lr
from .sparsifier import (freeze_and_disconnect, gate_step, gate_step_on_support, l0,
                         rlora_gates)
from .tasks import SyntheticTask

METHODS = ("lora", "wlora", "wlora+", "rlora", "full")
METRIC_COLUMNS = ("step", "phase", "loss", "lr", "batch_size", "omega_l0", "omega_support",
                  "omega_updates", "trainable_params", "adapters_with_grad", "val_loss")


@dataclass
class TrainSchedule:
    K: int = 2
    T: int = 100
    total_steps: int = 500
    batch_size: int = 32
    post_T_batch_size: int | None = None
    expansion: str = "none"  # none | gaussian | qr
    r_new: int | None = None  # None: floor(n * r / K)
    lr: float = 1e-2
    lr_omega: float | None = None  # None: same as lr
    warmup_steps: int = 0
    seed: int = 0
    grad_accum: int = 1
    projection: str = "every"  # every | at_T
    omega_every: int | None = None  # adapter steps per gate step; None: T
    gate_after_freeze: str = "fixed"  # fixed | train
    rescale: str = "rank"  # rank: alpha/r_new after expansion; keep: alpha/r
    qr_fallback: str = "gaussian"  # gaussian | abort
    eval_every: int = 0

    def __post_init__(self):
        if self.post_T_batch_size is None:
            self.post_T_batch_size = self.batch_size
        if self.lr_omega is None:
            self.lr_omega = self.lr
        if self.omega_every is None:
            self.omega_every = max(self.T, 1)

    def validate(self, n: int | None = None) -> None:
        if self.K < 1:
            raise ContractError("k must be ≥ 1")
        if n is not None and self.K > n:
            raise ContractError(f"k must be <= number of adapters ({n}), got {self.K}")
        if self.T < 0 or self.T >= self.total_steps:
            raise ContractError(f"t must satisfy 0 <= t < total_steps={self.total_steps}, got {self.T}")
        if self.batch_size < 1 or self.post_T_batch_size < self.batch_size:
            raise ContractError("post_T_batch_size must be >= batch_size >= 1")
        if self.expansion not in ("none", "gaussian", "qr"):
            raise ContractError(f"expansion must be none, gaussian or qr, got {self.expansion!r}")
        if self.projection not in ("every", "at_T"):
            raise ContractError(f"projection must be 'every' or 'at_T', got {self.projection!r}")
        if self.gate_after_freeze not in ("fixed", "train"):
            raise ContractError("gate_after_freeze must be 'fixed' or 'train'")
        if self.rescale not in ("rank", "keep"):
            raise ContractError("rescale must be 'rank' or 'keep'")
        if self.qr_fallback not in ("gaussian", "abort"):
            raise ContractError("qr_fallback must be 'gaussian' or 'abort'")
        if self.warmup_steps < 0 or self.warmup_steps > self.total_steps:
            raise ContractError("warmup_steps must lie in [0, total_steps]")
        if self.grad_accum < 1 or self.omega_every < 1:
            raise ContractError("grad_accum and omega_every must be >= 1")
        if self.lr <= 0 or self.lr_omega < 0:
            raise ContractError("lr must be > 0 and lr_omega >= 0")


def expanded_rank(n: int, r: int, K: int, cap: int | None = None) -> int:
    """Uniform rank that keeps ``K`` survivors within the budget of ``n`` rank-``r`` adapters."""
    r_new = (n * r) // K
    return min(r_new, cap) if cap is not None else r_new


@dataclass
class RunReport:
    method: str
    schedule: dict
    rows: list[dict] = field(default_factory=list)
    omega_final: list[float] | None = None
    active_set: list[int] | None = None
    active_slots: list[int] | None = None
    params_before_T: int = 0
    params_after_T: int = 0
    r_new: int | None = None
    expansion_scheme: str | None = None
    expansion_residuals: dict[int, float] = field(default_factory=dict)
    final_train_loss: float = float("nan")
    final_val_loss: float = float("nan")
    baseline_val_loss: float = float("nan")
    notes: list[str] = field(default_factory=list)

    @property
    def losses(self) -> np.ndarray:
        return np.array([r["loss"] for r in self.rows])

    def metrics_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=METRIC_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in self.rows:
            writer.writerow({k: _fmt(row.get(k)) for k in METRIC_COLUMNS})
        return buf.getvalue()

    def summary(self) -> dict:
        out = {k: v for k, v in asdict(self).items() if k != "rows"}
        out["expansion_residuals"] = {str(k): v for k, v in self.expansion_residuals.items()}
        out["max_expansion_residual"] = (max(self.expansion_residuals.values())
                                         if self.expansion_residuals else None)
        out["steps"] = len(self.rows)
        return out

    def summary_json(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True, default=_json_default)


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


# -- model preparation ----------------------------------------------------------------
def prepare_model(task: SyntheticTask, method: str, rank: int = 2, *, slots=None, K: int = 1,
                  alpha: float = 32.0, dropout_p: float = 0.05, init_std: float | None = None,
                  gate_mode: str = "nonzero", seed: int = 0, dtype=None) -> ToyModel:
    """Fresh student with adapters attached the way ``method`` expects."""
    if method not in METHODS:
        raise ContractError(f"method must be one of {', '.join(METHODS)}, got {method!r}")
    model = task.student(dtype=dtype)
    slots = list(range(model.n_slots)) if slots is None else list(slots)
    if method == "full":
        model.set_full_finetune(True)
        return model
    gated = method in ("wlora", "wlora+", "rlora")
    attach_adapters(model, slots, rank, gated=gated, K=K, alpha=alpha, dropout_p=dropout_p,
                    init_std=init_std, gate_mode=gate_mode, seed=[seed, 0xADA])
    return model


def _adapter_grad_count(model: ToyModel) -> int:
    return sum(1 for a in model.adapters.values() if a.A.grad is not None)


def _support_mask(model: ToyModel) -> str:
    if model.gates is None:
        return ""
    return "".join("1" if w != 0.0 else "0" for w in model.gates.values)


class _Loop:
    """Shared step machinery for every method."""

    def __init__(self, model: ToyModel, task: SyntheticTask, schedule: TrainSchedule, method: str):
        self.model, self.task, self.s, self.method = model, task, schedule, method
        self.batch_rng = np.random.default_rng([schedule.seed, 1])
        self.dropout_rng = np.random.default_rng([schedule.seed, 2])
        self.gate_rng = np.random.default_rng([schedule.seed, 3])
        self.adam = Adam(betas=(0.9, 0.999))
        self.report = RunReport(method, asdict(schedule))
        self.omega_acc: np.ndarray | None = None
        self.omega_count = 0
        self.omega_updates = 0

    def params(self):
        if self.model.full_finetune:
            return self.model.base_weights()
        return self.model.adapter_params(active_only=True)

    def draw(self, batch_size: int):
        idx = self.batch_rng.choice(self.task.n_train, size=min(batch_size, self.task.n_train),
                                    replace=False)
        return self.task.batch(idx)

    def adapter_step(self, batches, lr_t: float) -> float:
        params = self.params()
        T.zero_grad(params)
        gates = self.model.gates
        if gates is not None:
            gates.omega.grad = None
        total = 0.0
        for x, y in batches:
            out = self.model.forward(x, train=True, rng=self.dropout_rng)
            loss = self.task.loss(out, y)
            scaled = T.scale(loss, 1.0 / len(batches)) if len(batches) > 1 else loss
            T.backward(scaled)
            total += loss.item() / len(batches)
        self.adam.step(params, lr_t)
        if gates is not None and gates.omega.grad is not None:
            g = gates.omega.grad
            self.omega_acc = g.copy() if self.omega_acc is None else self.omega_acc + g
            self.omega_count += 1
        return total

    def take_omega_grad(self) -> np.ndarray:
        """Mean gate gradient accumulated since the last gate step."""
        g = self.omega_acc / self.omega_count
        self.omega_acc, self.omega_count = None, 0
        return g

    def log_row(self, step: int, phase: int, loss: float, lr_t: float, bs: int, n_grad: int):
        row = dict(step=step, phase=phase, loss=loss, lr=lr_t, batch_size=bs,
                   omega_l0=l0(self.model.gates.values) if self.model.gates is not None else None,
                   omega_support=_support_mask(self.model) or None,
                   omega_updates=self.omega_updates if self.model.gates is not None else None,
                   trainable_params=self.model.trainable_count(), adapters_with_grad=n_grad,
                   val_loss=None)
        if self.s.eval_every and step % self.s.eval_every == 0:
            row["val_loss"] = self.task.evaluate(self.model)
        self.report.rows.append(row)

    def finish(self) -> RunReport:
        r = self.report
        gates = self.model.gates
        if gates is not None:
            r.omega_final = [float(w) for w in gates.values]
            if gates.active_set is not None:
                r.active_set = list(gates.active_set)
                r.active_slots = [self.model.gate_slots[i] for i in gates.active_set]
        r.final_train_loss = self.task.evaluate(self.model, "train")
        r.final_val_loss = self.task.evaluate(self.model, "val")
        r.baseline_val_loss = self.task.baseline_loss("val")
        if not r.params_after_T:
            r.params_after_T = self.model.trainable_count()
        return r


def _run(model: ToyModel, task: SyntheticTask, s: TrainSchedule, method: str) -> RunReport:
    gated = method in ("wlora", "wlora+")
    n = model.gates.n if model.gates is not None else len(model.adapters)
    s.validate(n if (gated or method == "rlora") else None)
    if gated and (model.gates is None or model.gates.frozen):
        raise StateError("WeightLoRA needs unfrozen gated adapters attached")
    if gated:
        model.gates.K = s.K
    loop = _Loop(model, task, s, method)
    rep = loop.report
    rep.params_before_T = model.trainable_count()
    for step in range(1, s.total_steps + 1):
        phase = 1 if step <= s.T else 2
        bs = s.batch_size if phase == 1 else s.post_T_batch_size
        lr_t = linear_warmup_lr(step, s.warmup_steps, s.lr, s.total_steps)
        batches = [loop.draw(bs) for _ in range(s.grad_accum)]
        loss = loop.adapter_step(batches, lr_t)
        n_grad = _adapter_grad_count(model)
        gates = model.gates
        if gated and not gates.frozen and (step % s.omega_every == 0 or step == s.T):
            gate_step(gates, loop.take_omega_grad(), s.lr_omega,
                      project=s.projection == "every")
            loop.omega_updates += 1
        elif gated and gates.frozen and s.gate_after_freeze == "train" and loop.omega_count:
            gate_step_on_support(gates, loop.take_omega_grad(), s.lr_omega)
            loop.omega_updates += 1
        if gated and step == s.T:
            _freeze(loop, method)
        loop.log_row(step, phase, loss, lr_t, bs, n_grad)
    return loop.finish()


def _freeze(loop: _Loop, method: str) -> None:
    model, s, rep = loop.model, loop.s, loop.report
    gates = model.gates
    if s.projection == "at_T":
        gates.project()
    adapters = model.ordered_adapters()
    try:
        freeze_and_disconnect(gates, adapters)
    except DegeneracyError as exc:
        rep.notes.append(str(exc))
        raise
    loop.adam.discard([p for a in adapters if not a.active for p in a.params()])
    loop.omega_acc, loop.omega_count = None, 0
    if s.gate_after_freeze == "train":
        gates.omega.requires_grad = True
    if method == "wlora+" and s.expansion != "none":
        _expand(loop)
    rep.params_after_T = model.trainable_count()


def _expand(loop: _Loop) -> None:
    model, s, rep = loop.model, loop.s, loop.report
    gates = model.gates
    survivors = [model.gate_slots[i] for i in gates.active_set]
    ranks = {model.adapters[sl].rank for sl in model.gate_slots}
    if len(ranks) != 1:
        raise ContractError("uniform rank reallocation needs equal adapter ranks")
    r = ranks.pop()
    cap = min(min(model.adapters[sl].d, model.adapters[sl].k) for sl in survivors)
    r_new = s.r_new if s.r_new is not None else expanded_rank(gates.n, r, len(survivors), cap)
    rep.r_new, rep.expansion_scheme = r_new, s.expansion
    if r_new <= r:
        rep.notes.append(f"r_new={r_new} does not exceed r={r}; adapters kept at rank {r}")
        rep.r_new = r
        return
    for slot in survivors:
        old = model.adapters[slot]
        seed = [s.seed, 0xE4, slot]
        scheme = s.expansion
        try:
            new = (expand_rank_qr(old, r_new, seed, rescale=s.rescale) if scheme == "qr"
                   else expand_rank_gaussian(old, r_new, seed, rescale=s.rescale))
        except DegeneracyError:
            if s.qr_fallback == "abort":
                raise
            rep.notes.append(f"slot {slot}: QR degenerate, fell back to gaussian expansion")
            scheme = "gaussian"
            new = expand_rank_gaussian(old, r_new, seed, rescale=s.rescale)
        rep.expansion_residuals[slot] = expansion_residual(old, new)
        if scheme == "gaussian":
            loop.adam.adopt(old.A, new.A, axis=1)
            loop.adam.adopt(old.B, new.B, axis=0)
        else:
            # Q replaces A: old moments describe a different parameterization
            loop.adam.discard(old.params())
        model.adapters[slot] = new


def run_weightlora(model: ToyModel, task: SyntheticTask, schedule: TrainSchedule) -> RunReport:
    """Gated training with l0-projected gates, freezing and disconnecting at step ``T``."""
    return _run(model, task, schedule, "wlora")


def run_weightlora_plus(model: ToyModel, task: SyntheticTask,
                        schedule: TrainSchedule) -> RunReport:
    """WeightLoRA followed by rank expansion of the surviving adapters at step ``T``."""
    if schedule.expansion == "none":
        raise ContractError("WeightLoRA+ needs expansion='gaussian' or 'qr'")
    return _run(model, task, schedule, "wlora+")


def run_baseline(model: ToyModel, task: SyntheticTask, schedule: TrainSchedule,
                 variant: str) -> RunReport:
    """Plain LoRA, randomly disconnected RLoRA, or full fine-tuning.

    All variants follow the same step/batch schedule as WeightLoRA so that
    runs with the same seed see the same minibatches.
    """
    if variant == "lora":
        if model.gates is not None:
            raise StateError("plain LoRA expects ungated adapters")
        return _run(model, task, schedule, "lora")
    if variant == "rlora":
        n = len(model.adapters)
        schedule.validate(n)
        slots = model.gate_slots or model.attached_slots()
        gates = rlora_gates(n, schedule.K, seed=[schedule.seed, 0x51],
                            dtype=model.bases[0].W.data.dtype.type)
        model.gates, model.gate_slots = gates, list(slots)
        model._gate_index = {sl: j for j, sl in enumerate(slots)}
        for j, sl in enumerate(slots):
            if j not in gates.active_set:
                a = model.adapters[sl]
                a.active = False
                a.A.requires_grad = a.B.requires_grad = False
        report = _run(model, task, schedule, "rlora")
        report.params_before_T = report.params_after_T
        return report
    if variant == "full":
        if not model.full_finetune:
            model.set_full_finetune(True)
        return _run(model, task, schedule, "full")
    raise ContractError(f"unknown baseline variant {variant!r}")


def run_method(task: SyntheticTask, method: str, schedule: TrainSchedule, rank: int = 2, *,
               slots=None, alpha: float = 32.0, dropout_p: float = 0.05,
               init_std: float | None = None, gate_mode: str = "nonzero", dtype=None
               ) -> tuple[RunReport, ToyModel]:
    """Build the student for ``method``, train it, and return report and model."""
    model = prepare_model(task, method, rank, slots=slots, K=schedule.K, alpha=alpha,
                          dropout_p=dropout_p, init_std=init_std, gate_mode=gate_mode,
                          seed=schedule.seed, dtype=dtype)
    if method == "wlora":
        report = run_weightlora(model, task, schedule)
    elif method == "wlora+":
        report = run_weightlora_plus(model, task, schedule)
    else:
        report = run_baseline(model, task, schedule, method)
    return report, model
