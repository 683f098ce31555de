"""The pinned desk-scale configuration for planted-task experiments.

Calibrated once by a seed sweep (see the decisions ledger); tests must not
tune it per run.
"""

from weightlora.tasks import make_planted_task
from weightlora.trainer import TrainSchedule

N_LAYERS, PLANTED, RANK_STAR, RANK = 6, 2, 2, 2
SEEDS = range(20)


def desk_task(seed: int, **kwargs):
    return make_planted_task(N_LAYERS, PLANTED, RANK_STAR, seed, **kwargs)


def desk_schedule(seed: int, **overrides) -> TrainSchedule:
    cfg = dict(K=PLANTED, T=400, total_steps=600, batch_size=64, lr=2e-3, lr_omega=0.05,
               warmup_steps=20, seed=seed)
    cfg.update(overrides)
    return TrainSchedule(**cfg)
