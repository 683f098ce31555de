"""Run configuration shared by the CLI commands: JSON in, JSON out, unknown keys rejected."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, ValidationError

from .errors import ContractError
from .trainer import TrainSchedule

# keys that do not change what a run computes
_NON_IDENTITY = ("seeds", "outdir", "workers")


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    method: Literal["lora", "wlora", "wlora+", "rlora", "full"] = "wlora"
    task: str = "planted:n6k2"
    k: int = 2
    t: int = 400
    total_steps: int = 600
    rank: int = 2
    batch_size: int = 64
    post_t_batch_size: int | None = None
    expansion: Literal["none", "gaussian", "qr"] = "none"
    r_new: int | None = None
    lr: float = 2e-3
    lr_omega: float | None = 0.05
    warmup_steps: int = 20
    grad_accum: int = 1
    omega_every: int | None = None
    projection: Literal["every", "at_T"] = "every"
    gate_after_freeze: Literal["fixed", "train"] = "fixed"
    gate_mode: Literal["nonzero", "positive"] = "nonzero"
    rescale: Literal["rank", "keep"] = "rank"
    qr_fallback: Literal["gaussian", "abort"] = "gaussian"
    alpha: float = 32.0
    dropout_p: float = 0.05
    eval_every: int = 0
    dtype: Literal["float64", "float32"] = "float64"
    seeds: list[int] = [0]
    workers: int = 1
    outdir: str | None = None

    def schedule(self, seed: int) -> TrainSchedule:
        s = TrainSchedule(K=self.k, T=self.t, total_steps=self.total_steps,
                          batch_size=self.batch_size, post_T_batch_size=self.post_t_batch_size,
                          expansion=self.expansion, r_new=self.r_new, lr=self.lr,
                          lr_omega=self.lr_omega, warmup_steps=self.warmup_steps, seed=seed,
                          grad_accum=self.grad_accum, projection=self.projection,
                          omega_every=self.omega_every, gate_after_freeze=self.gate_after_freeze,
                          rescale=self.rescale, qr_fallback=self.qr_fallback,
                          eval_every=self.eval_every)
        s.validate()
        return s

    def check(self) -> None:
        """Cheap validation of everything that does not need the model built."""
        if self.rank < 1:
            raise ContractError("rank must be ≥ 1")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ContractError("dropout_p must lie in [0, 1)")
        if self.workers < 1:
            raise ContractError("workers must be ≥ 1")
        if not self.seeds:
            raise ContractError("seeds must not be empty")
        self.schedule(self.seeds[0])

    def identity(self) -> dict:
        return self.model_dump(exclude=set(_NON_IDENTITY))

    def run_id(self, seed: int) -> str:
        blob = json.dumps({"config": self.identity(), "seed": seed}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def to_json(self) -> str:
        return self.model_dump_json(indent=2)

    @classmethod
    def from_json(cls, text: str) -> RunConfig:
        return cls.model_validate_json(text)


def describe_validation_error(exc: ValidationError) -> str:
    """First pydantic error as ``key: message`` on one line."""
    err = exc.errors()[0]
    key = ".".join(str(p) for p in err["loc"]) or "config"
    if err["type"] == "extra_forbidden":
        return f"unknown key {key!r}"
    return f"{key}: {err['msg']}"


def load_config(path=None, **overrides) -> RunConfig:
    """File values first, then every override that is not None."""
    data = json.loads(Path(path).read_text()) if path else {}
    if not isinstance(data, dict):
        raise ContractError("config file must hold a JSON object")
    data.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ContractError(describe_validation_error(exc)) from None
