"""Command-line entry point: train, probe, count, ablate, expand-check.

Exit codes: 0 success, 1 a check failed, 2 invalid configuration or
arguments, 3 degenerate run. Errors go to stderr as one ``error: ...`` line.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime, timezone
from pathlib import Path

import click
import numpy as np
from scipy.stats import binomtest

from .adapters import (QR_RANK_TOL, AdapterState, expand_rank_gaussian, expand_rank_qr,
                       householder_qr, save_adapters)
from .catalog import get_catalog
from .config import RunConfig, load_config
from .diagnostics import (MemoryModel, count_catalog, importance_probe, memory_curve,
                          memory_curve_csv)
from .errors import ContractError, DegeneracyError, DimensionError, StateError
from .tasks import parse_task_spec
from .tensor import Tensor
from .trainer import run_method

OUTDIR_ENV = "WEIGHTLORA_OUTDIR"
EXIT_CHECK_FAILED, EXIT_INVALID, EXIT_DEGENERATE = 1, 2, 3


class CLIFailure(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _outdir(value: str | None) -> Path:
    return Path(value or os.environ.get(OUTDIR_ENV) or "runs")


def _stamp() -> str:
    return f"# created: {datetime.now(timezone.utc).isoformat(timespec='seconds')}\n"


def _write(path: Path, text: str, stamped: bool = False) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text((_stamp() if stamped else "") + text)


def _emit(as_json: bool, payload, human: str) -> None:
    click.echo(json.dumps(payload, sort_keys=True, default=str) if as_json else human)


def _seed_list(seed: int | None, seeds: str | None) -> list[int] | None:
    if seeds:
        try:
            if "-" in seeds and "," not in seeds:
                lo, hi = (int(v) for v in seeds.split("-"))
                return list(range(lo, hi + 1))
            return [int(v) for v in seeds.split(",") if v.strip()]
        except ValueError:
            raise ContractError(f"seeds: cannot parse {seeds!r}; use 0,1,2 or 0-19") from None
    return [seed] if seed is not None else None


def _load_task(spec: str, seed: int):
    return parse_task_spec(spec, seed)


# -- train ---------------------------------------------------------------------------
def train_one(config_json: str, seed: int) -> dict:
    """Run one seed and write its report directory; safe to call in a worker process."""
    cfg = RunConfig.from_json(config_json)
    task = _load_task(cfg.task, seed)
    schedule = cfg.schedule(seed)
    report, model = run_method(task, cfg.method, schedule, cfg.rank, alpha=cfg.alpha,
                               dropout_p=cfg.dropout_p, gate_mode=cfg.gate_mode,
                               dtype=np.float32 if cfg.dtype == "float32" else None)
    run_dir = _outdir(cfg.outdir) / cfg.run_id(seed)
    _write(run_dir / "metrics.csv", report.metrics_csv(), stamped=True)
    summary = report.summary()
    summary.update(seed=seed, run_id=cfg.run_id(seed), config=cfg.identity(),
                   planted_slots=list(task.planted_slots))
    _write(run_dir / "summary.json", json.dumps(summary, indent=2, sort_keys=True, default=str))
    if model.adapters:
        gates = model.gates
        save_adapters(run_dir / "adapters.json", model.ordered_adapters(),
                      omega=None if gates is None else gates.values,
                      active_set=None if gates is None else gates.active_set)
    return dict(seed=seed, run_dir=str(run_dir), final_val_loss=report.final_val_loss,
                active_slots=report.active_slots, params_after_T=report.params_after_T,
                max_expansion_residual=summary["max_expansion_residual"])


def _fan_out(fn, config_json: str, seeds: list[int], workers: int) -> list:
    if workers <= 1 or len(seeds) <= 1:
        return [fn(config_json, s) for s in seeds]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, [config_json] * len(seeds), seeds))


_TRAIN_FLAGS = [
    ("--method", str, "lora | wlora | wlora+ | rlora | full"),
    ("--task", str, "task spec, e.g. planted:n6k2"),
    ("--k", int, "adapters to keep"),
    ("--t", int, "gate-selection steps"),
    ("--total-steps", int, None),
    ("--rank", int, None),
    ("--batch-size", int, None),
    ("--post-t-batch-size", int, "batch size after step t"),
    ("--expansion", str, "none | gaussian | qr"),
    ("--r-new", int, "rank after expansion (default floor(n r / k))"),
    ("--lr", float, None),
    ("--lr-omega", float, "gate learning rate"),
    ("--warmup-steps", int, None),
    ("--grad-accum", int, None),
    ("--omega-every", int, "adapter steps per gate step (default t)"),
    ("--projection", str, "every | at_T"),
    ("--gate-after-freeze", str, "fixed | train"),
    ("--gate-mode", str, "nonzero | positive"),
    ("--rescale", str, "rank | keep"),
    ("--qr-fallback", str, "gaussian | abort"),
    ("--alpha", float, None),
    ("--dropout-p", float, None),
    ("--eval-every", int, None),
    ("--dtype", str, "float64 | float32"),
]


def _train_options(fn):
    for flag, kind, help_ in reversed(_TRAIN_FLAGS):
        fn = click.option(flag, type=kind, default=None, help=help_)(fn)
    return fn


def _common(fn):
    fn = click.option("--json", "as_json", is_flag=True, help="machine-readable output")(fn)
    fn = click.option("--outdir", default=None, help=f"output root (default ${OUTDIR_ENV} or ./runs)")(fn)
    fn = click.option("--workers", type=int, default=None, help="worker processes for --seeds")(fn)
    fn = click.option("--seeds", default=None, help="seed list: 0,1,2 or 0-19")(fn)
    fn = click.option("--seed", type=int, default=None)(fn)
    fn = click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
                      help="JSON config file; flags override its values")(fn)
    return fn


def _config(config_path, seed, seeds, workers, outdir, **flags) -> RunConfig:
    overrides = {k: v for k, v in flags.items() if v is not None}
    cfg = load_config(config_path, seeds=_seed_list(seed, seeds), workers=workers,
                      outdir=outdir, **overrides)
    cfg.check()
    return cfg


@click.group()
def cli():
    """Gated low-rank adapters with l0-constrained selection, at desk scale."""


@cli.command()
@_train_options
@_common
def train(config_path, seed, seeds, workers, outdir, as_json, **flags):
    """Train one method on a synthetic task and write metrics, summary and adapters."""
    cfg = _config(config_path, seed, seeds, workers, outdir, **flags)
    results = _fan_out(train_one, cfg.to_json(), cfg.seeds, cfg.workers)
    lines = [f"seed={r['seed']} val_loss={r['final_val_loss']:.6g} "
             f"active={r['active_slots']} params_after_t={r['params_after_T']} -> {r['run_dir']}"
             for r in results]
    _emit(as_json, results, "\n".join(lines))


# -- probe ---------------------------------------------------------------------------
@cli.command()
@click.option("--task", default="planted:n6k2")
@click.option("--epochs", type=int, default=10)
@click.option("--probe-seeds", type=int, default=5, help="seeds averaged per slot")
@click.option("--rank", type=int, default=2)
@click.option("--k", type=int, default=None, help="slots to star (default: planted count)")
@click.option("--seed", type=int, default=0, help="task seed")
@click.option("--outdir", default=None)
@click.option("--json", "as_json", is_flag=True)
def probe(task, epochs, probe_seeds, rank, k, seed, outdir, as_json):
    """Score every slot with single-adapter importance probes."""
    if probe_seeds < 1:
        raise ContractError("probe-seeds must be ≥ 1")
    if rank < 1:
        raise ContractError("rank must be ≥ 1")
    t = _load_task(task, seed)
    prof = importance_probe(t, epochs=epochs, seeds=range(probe_seeds), rank=rank)
    k = len(t.planted_slots) if k is None else k
    if not 1 <= k <= len(prof.slots):
        raise ContractError(f"k must lie in [1, {len(prof.slots)}]")
    ident = json.dumps(dict(task=task, epochs=epochs, probe_seeds=probe_seeds, rank=rank, k=k,
                            seed=seed), sort_keys=True)
    run_dir = _outdir(outdir) / ("probe-" + _hash(ident))
    _write(run_dir / "profile.csv", prof.to_csv(), stamped=True)
    starred = prof.top(k) if np.any(prof.scores > 0) else []
    summary = dict(task=task, seed=seed, starred_slots=starred,
                   planted_slots=list(t.planted_slots), scores=prof.scores.tolist(),
                   config=prof.config | {"seeds": list(prof.config["seeds"])})
    _write(run_dir / "summary.json", json.dumps(summary, indent=2, sort_keys=True))
    human = "\n".join(f"{'*' if s in starred else ' '} {n:<16} {v:.6g}"
                      for s, n, v in zip(prof.slots, prof.names, prof.scores))
    _emit(as_json, summary | {"run_dir": str(run_dir)}, human + f"\n-> {run_dir}")


def _hash(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()[:16]


# -- count ---------------------------------------------------------------------------
@cli.command()
@click.option("--catalog", "catalog_name", default="deberta-v3-base")
@click.option("--rank", type=int, default=8)
@click.option("--k", type=int, default=None, help="active adapters (default: all slots)")
@click.option("--group", default=None, help="slot group, e.g. self_attention or all_attention")
@click.option("--memory-curve", "curve_path", type=click.Path(dir_okay=False), default=None,
              help="also write the analytic memory curve CSV here")
@click.option("--json", "as_json", is_flag=True)
def count(catalog_name, rank, k, group, curve_path, as_json):
    """Exact trainable adapter parameters for a catalog model."""
    cat = get_catalog(catalog_name)
    result = count_catalog(cat, rank, k, group)
    payload = result.as_dict() | dict(catalog=catalog_name, rank=rank,
                                      group=group or cat.default_group,
                                      inferred_group=cat.inferred[group or cat.default_group],
                                      active=k if k is not None else len(cat.slots(group)))
    if curve_path:
        curve = memory_curve(cat.slots(group), rank, len(cat.slots(group)), MemoryModel())
        _write(Path(curve_path), memory_curve_csv(curve))
    _emit(as_json, payload, str(result))


# -- ablate --------------------------------------------------------------------------
def ablate_one(config_json: str, seed: int) -> dict:
    cfg = RunConfig.from_json(config_json)
    task = _load_task(cfg.task, seed)
    out = dict(seed=seed, planted=list(task.planted_slots))
    for method in ("wlora", "rlora"):
        report, _ = run_method(task, method, cfg.schedule(seed), cfg.rank, alpha=cfg.alpha,
                               dropout_p=cfg.dropout_p, gate_mode=cfg.gate_mode)
        out[f"{method}_loss"] = report.final_val_loss
        out[f"{method}_active"] = report.active_slots
    return out


def sign_test(wins: int, n: int) -> float:
    """One-sided p-value of at least ``wins`` successes in ``n`` fair coin flips."""
    return float(binomtest(wins, n, 0.5, alternative="greater").pvalue) if n else 1.0


@cli.command()
@_train_options
@_common
def ablate(config_path, seed, seeds, workers, outdir, as_json, **flags):
    """Paired WeightLoRA vs random-selection runs with a sign test."""
    flags.pop("method", None)
    if seeds is None and seed is None:
        seeds = "0-19"
    cfg = _config(config_path, seed, seeds, workers, outdir, method="wlora", **flags)
    rows = _fan_out(ablate_one, cfg.to_json(), cfg.seeds, cfg.workers)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["seed", "wlora_loss", "rlora_loss", "difference", "wlora_active", "rlora_active",
                "planted"])
    for r in rows:
        w.writerow([r["seed"], repr(r["wlora_loss"]), repr(r["rlora_loss"]),
                    repr(r["rlora_loss"] - r["wlora_loss"]),
                    " ".join(map(str, r["wlora_active"])), " ".join(map(str, r["rlora_active"])),
                    " ".join(map(str, r["planted"]))])
    wins = sum(r["wlora_loss"] <= r["rlora_loss"] for r in rows)
    summary = dict(n=len(rows), wlora_wins=wins, p_value=sign_test(wins, len(rows)),
                   wlora_mean=float(np.mean([r["wlora_loss"] for r in rows])),
                   rlora_mean=float(np.mean([r["rlora_loss"] for r in rows])),
                   selection_hits=sum(sorted(r["wlora_active"]) == r["planted"] for r in rows),
                   config=cfg.identity())
    run_dir = _outdir(cfg.outdir) / ("ablate-" + _hash(json.dumps(summary["config"], sort_keys=True)
                                                       + str(cfg.seeds)))
    _write(run_dir / "comparison.csv", buf.getvalue(), stamped=True)
    _write(run_dir / "summary.json", json.dumps(summary, indent=2, sort_keys=True))
    human = (f"wlora <= rlora in {wins}/{len(rows)} seeds, sign test p={summary['p_value']:.3g}; "
             f"mean loss wlora={summary['wlora_mean']:.6g} rlora={summary['rlora_mean']:.6g} "
             f"-> {run_dir}")
    _emit(as_json, summary | {"run_dir": str(run_dir)}, human)


# -- expand-check --------------------------------------------------------------------
@cli.command("expand-check")
@click.option("--n", "count_", type=int, default=100, help="random adapters per scheme")
@click.option("--d", type=int, default=16)
@click.option("--k", type=int, default=12)
@click.option("--r", type=int, default=2)
@click.option("--r-new", type=int, default=6)
@click.option("--seed", type=int, default=0)
@click.option("--tol", type=float, default=1e-10)
@click.option("--json", "as_json", is_flag=True)
def expand_check(count_, d, k, r, r_new, seed, tol, as_json):
    """Verify that both rank-expansion schemes leave the adapter product unchanged."""
    if count_ < 1:
        raise ContractError("n must be ≥ 1")
    rng = np.random.default_rng(seed)
    worst = {"gaussian": 0.0, "qr": 0.0, "qr_orthogonality": 0.0}
    for i in range(count_):
        A = rng.standard_normal((d, r))
        B = rng.standard_normal((r, k))
        a = AdapterState(i, Tensor(A, requires_grad=True), Tensor(B, requires_grad=True))
        g = expand_rank_gaussian(a, r_new, seed=[seed, i])
        q = expand_rank_qr(a, r_new, seed=[seed, i])
        worst["gaussian"] = max(worst["gaussian"], _relative_residual(a, g))
        worst["qr"] = max(worst["qr"], _relative_residual(a, q))
        Q, _ = householder_qr(A)
        worst["qr_orthogonality"] = max(worst["qr_orthogonality"],
                                        float(np.abs(Q.T @ q.A.data[:, r:]).max()))
    ok = all(v <= tol for v in worst.values())
    payload = dict(n=count_, d=d, k=k, r=r, r_new=r_new, tol=tol, passed=ok,
                   rank_tolerance=QR_RANK_TOL, **{f"max_{k_}": v for k_, v in worst.items()})
    human = "\n".join(f"{k_:<18} {v:.3e}" for k_, v in worst.items()) + \
        f"\n{'PASS' if ok else 'FAIL'} (tol {tol:g})"
    _emit(as_json, payload, human)
    if not ok:
        raise CLIFailure("expansion residual above tolerance", EXIT_CHECK_FAILED)


def _relative_residual(before: AdapterState, after: AdapterState) -> float:
    old = before.A.data @ before.B.data
    new = after.A.data @ after.B.data
    return float(np.linalg.norm(new - old) / np.linalg.norm(old))


# -- entry point ---------------------------------------------------------------------
def main(argv=None) -> int:
    try:
        cli.main(args=argv, prog_name="weightlora", standalone_mode=False)
        return 0
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.Abort:
        _fail("aborted")
        return 1
    except click.ClickException as exc:
        _fail(exc.format_message())
        return EXIT_INVALID if isinstance(exc, click.UsageError) else exc.exit_code
    except CLIFailure as exc:
        _fail(str(exc))
        return exc.code
    except (ContractError, DimensionError) as exc:
        _fail(str(exc))
        return EXIT_INVALID
    except (DegeneracyError, StateError) as exc:
        _fail(f"degenerate run: {exc}")
        return EXIT_DEGENERATE


def _fail(message: str) -> None:
    click.echo("error: " + " ".join(str(message).split()), err=True)


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
