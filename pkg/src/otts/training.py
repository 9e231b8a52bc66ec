"""Self-supervised training of the task encoder.

Each 2-shot task is split into a positive pair of 1-shot tasks; the
online encoder embeds one half, the target encoder the other, and the
mixed transport distance between the two task graphs (both orderings,
summed) is the loss.  Adam updates the online parameters, the target
parameters trail by an exponential moving average, and the target set
is what gets deployed for task selection.

Runs are bit-reproducible: a single seeded generator drives epoch
shuffling and pair splitting in a fixed order, and all reductions are
sequential.
"""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .encoder import (
    AdamState,
    EncoderParams,
    adam_step,
    ema_update,
    grad_ot_loss,
    init_encoder,
    save_checkpoint,
)
from .graphs import Task, split_task
from .solvers import SolverConfig

__all__ = [
    "TrainConfig",
    "EpochRecord",
    "TrainLog",
    "StepResult",
    "ssl_step",
    "train",
    "DEFAULT_TRAIN_SOLVER",
]

logger = logging.getLogger(__name__)

# Looser solver settings for the inner training loop: gradient quality
# only needs to support descent, and the per-task solve count is huge.
# Verification-grade tolerances stay in SolverConfig's defaults.
DEFAULT_TRAIN_SOLVER = SolverConfig(
    epsilon=0.05,
    max_iter=300,
    tol=1e-4,
    gw_outer_iter=6,
    gw_epsilon=0.05,
    gw_epsilon_start=0.1,
)


@dataclass(frozen=True)
class TrainConfig:
    """Settings for a self-supervised training run."""

    batch_size: int = 64
    epochs: int = 50
    wd_weight: float = 0.8
    tau: float = 0.99
    learning_rate: float = 1e-3
    seed: int = 0
    encoder_dims: tuple[int, ...] = (16, 32, 8)
    solver: SolverConfig = DEFAULT_TRAIN_SOLVER
    checkpoint_path: str | None = None
    log_path: str | None = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not 0.0 < self.wd_weight < 1.0:
            raise ValueError(f"wd_weight must be in (0, 1), got {self.wd_weight}")
        if not 0.0 < self.tau < 1.0:
            raise ValueError(f"tau must be in (0, 1), got {self.tau}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    std_loss: float
    seconds: float
    param_version: int


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)

    def append_jsonl(self, path: str, record: EpochRecord) -> None:
        with open(path, "a") as fh:
            fh.write(
                json.dumps(
                    {
                        "epoch": record.epoch,
                        "mean_loss": record.mean_loss,
                        "std_loss": record.std_loss,
                        "seconds": record.seconds,
                        "param_version": record.param_version,
                    }
                )
                + "\n"
            )


@dataclass
class StepResult:
    online: EncoderParams
    target: EncoderParams
    mean_loss: float
    task_losses: list[float]
    adam_state: AdamState


def ssl_step(
    batch: list[Task],
    online: EncoderParams,
    target: EncoderParams,
    cfg: TrainConfig,
    adam_state: AdamState | None = None,
    rng: np.random.Generator | None = None,
) -> StepResult:
    """One optimisation step on a batch of 2-shot tasks.

    Splits every task into its positive pair, averages the symmetric
    transport-loss gradient over the batch, applies Adam to the online
    parameters, then moves the target parameters toward the updated
    online set by the EMA rule.  The target branch never receives
    gradient.
    """
    if not batch:
        raise ValueError("batch must be non-empty")
    for task in batch:
        if task.k_shot != 2:
            raise ValueError(
                f"task {task.task_id} has k_shot={task.k_shot}, training "
                "requires 2-shot tasks"
            )
    if adam_state is None:
        adam_state = AdamState.zeros(online)
    if rng is None:
        rng = np.random.default_rng(cfg.seed)

    total = [(np.zeros_like(w), np.zeros_like(b)) for w, b in online.layers]
    task_losses = []
    for task in batch:
        half_a, half_b = split_task(task, seed=int(rng.integers(0, 2**63 - 1)))
        result = grad_ot_loss(
            online, target, half_a, half_b, cfg.wd_weight, cfg.solver
        )
        task_losses.append(result.loss)
        total = [
            (tw + gw, tb + gb)
            for (tw, tb), (gw, gb) in zip(total, result.grads)
        ]
    scale = 1.0 / len(batch)
    mean_grads = [(tw * scale, tb * scale) for tw, tb in total]
    new_online, new_state = adam_step(
        online, mean_grads, adam_state, cfg.learning_rate
    )
    new_target = ema_update(target, new_online, cfg.tau)
    return StepResult(
        online=new_online,
        target=new_target,
        mean_loss=float(np.mean(task_losses)),
        task_losses=task_losses,
        adam_state=new_state,
    )


def _atomic_checkpoint(params: EncoderParams, path: str) -> None:
    tmp = path + ".tmp"
    save_checkpoint(params, tmp)
    os.replace(tmp, path)


def train(corpus: list[Task], cfg: TrainConfig) -> tuple[EncoderParams, TrainLog]:
    """Run the full self-supervised loop and return the target encoder.

    Shuffles the corpus each epoch with the seeded generator, steps
    through batches, checkpoints the target parameters after every
    epoch (atomic rename), and appends one JSONL record per epoch when
    a log path is configured.  The returned parameters are the target
    set, which is the deployed extractor.
    """
    if not corpus:
        raise ValueError("training corpus must be non-empty")
    online = init_encoder(cfg.encoder_dims, seed=cfg.seed)
    target = online.copy()
    adam_state = AdamState.zeros(online)
    rng = np.random.default_rng(cfg.seed)
    log = TrainLog()

    if cfg.epochs == 0 and cfg.checkpoint_path:
        _atomic_checkpoint(target, cfg.checkpoint_path)

    for epoch in range(cfg.epochs):
        started = time.perf_counter()
        order = rng.permutation(len(corpus))
        epoch_losses: list[float] = []
        for start in range(0, len(corpus), cfg.batch_size):
            batch = [corpus[i] for i in order[start : start + cfg.batch_size]]
            step = ssl_step(batch, online, target, cfg, adam_state, rng)
            online, target, adam_state = step.online, step.target, step.adam_state
            epoch_losses.extend(step.task_losses)
        record = EpochRecord(
            epoch=epoch,
            mean_loss=float(np.mean(epoch_losses)),
            std_loss=float(np.std(epoch_losses)),
            seconds=time.perf_counter() - started,
            param_version=target.param_version,
        )
        log.records.append(record)
        logger.info(
            "epoch %d: mean loss %.6f (std %.6f) in %.1fs",
            epoch,
            record.mean_loss,
            record.std_loss,
            record.seconds,
        )
        if cfg.checkpoint_path:
            _atomic_checkpoint(target, cfg.checkpoint_path)
        if cfg.log_path:
            log.append_jsonl(cfg.log_path, record)
    return target, log
