"""Mini-batch SGD over the regularized triplet objective."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import encoder
from .data import AugmentConfig, LabeledDataset, augment_connectivity
from .losses import LossBreakdown, LossConfig, original_neighbors, total_loss
from .mining import STRATEGIES, mine

logger = logging.getLogger(__name__)

SCHEDULES = ("constant", "decay")
AUTO_STRATEGY = "auto"  # random for the first epoch, semi-hard afterwards
LOG_COLUMNS = ("epoch", "triplet", "diversity", "uniformity", "local", "global", "total",
               "objective", "grad_norm", "seconds")


class TrainingDiverged(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 64
    learning_rate: float = 0.1
    schedule: str = "decay"
    decay: float = 0.01
    seed: int = 0
    strategy: str = AUTO_STRATEGY
    augment: bool = False
    augment_probability: float = 0.5
    track_objective: bool = True
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 2:
            raise ValueError("batch size must be >= 2")
        if not self.learning_rate > 0:
            raise ValueError("learning rate must be positive")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}")
        if self.decay < 0:
            raise ValueError("decay must be non-negative")
        if self.strategy != AUTO_STRATEGY and self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be {AUTO_STRATEGY!r} or one of {STRATEGIES}")
        if not 0.0 <= self.augment_probability <= 1.0:
            raise ValueError("augmentation probability must lie in [0, 1]")

    def strategy_for(self, epoch: int) -> str:
        if self.strategy != AUTO_STRATEGY:
            return self.strategy
        return "random" if epoch == 0 else "semi-hard"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        loss = data.pop("loss", None)
        cfg = cls(**data)
        if loss is not None:
            cfg = replace(cfg, loss=loss if isinstance(loss, LossConfig) else LossConfig.from_dict(loss))
        return cfg


def lr_schedule(cfg: TrainConfig, t: int) -> float:
    """Step size at step ``t``.

    The decay mode ``eta0 / (1 + gamma t)`` has a divergent sum and a
    convergent sum of squares; the constant mode satisfies only the first.
    """
    if t < 0:
        raise ValueError("step index must be >= 0")
    if cfg.schedule == "constant":
        return cfg.learning_rate
    return cfg.learning_rate / (1.0 + cfg.decay * t)


@dataclass
class EpochRecord:
    """Telemetry for one epoch.

    ``losses`` averages the mini-batch objectives seen during the epoch.
    ``objective`` is the full-dataset objective at the end of the epoch,
    with mining and pair subsampling seeded identically every epoch, so
    it changes only when the parameters do.
    """

    epoch: int
    losses: LossBreakdown
    grad_norm: float
    seconds: float
    batches: int
    triplets: int
    objective: LossBreakdown | None = None


@dataclass
class TrainLog:
    epochs: list[EpochRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.epochs)

    def series(self, name: str, objective: bool = False) -> np.ndarray:
        """One loss term (``triplet``, ``total``, ...) or ``grad_norm`` per epoch.

        With ``objective=True`` the epoch-end full-dataset values are used.
        """
        if name == "grad_norm":
            return np.array([r.grad_norm for r in self.epochs])
        if objective:
            if any(r.objective is None for r in self.epochs):
                raise ValueError("objective tracking was disabled for this run")
            return np.array([r.objective.as_row()[name] for r in self.epochs])
        return np.array([r.losses.as_row()[name] for r in self.epochs])

    def rows(self) -> list[dict]:
        out = []
        for r in self.epochs:
            row = {"epoch": r.epoch, **r.losses.as_row(), "grad_norm": r.grad_norm,
                   "seconds": r.seconds}
            row["objective"] = r.objective.total if r.objective is not None else float("nan")
            out.append(row)
        return out

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(LOG_COLUMNS)
            for row in self.rows():
                writer.writerow([row["epoch"]] + [format(row[c], ".17g") for c in LOG_COLUMNS[1:]])


def _batch_neighbors(global_nb: list[np.ndarray], batch: np.ndarray, n: int) -> list[np.ndarray]:
    """Restrict original-space neighbor lists to the batch, in batch-local indices."""
    local = np.full(n, -1, dtype=np.int64)
    local[batch] = np.arange(batch.size)
    out = []
    for i in batch:
        mapped = local[global_nb[i]]
        out.append(mapped[mapped >= 0])
    return out


def _augment_batch(x: np.ndarray, ds: LabeledDataset, cfg: TrainConfig, rng) -> np.ndarray:
    side = ds.sample_shape[0]
    aug_cfg = AugmentConfig(probability=cfg.augment_probability)
    out = x.copy()
    for row in range(x.shape[0]):
        if rng.random() < aug_cfg.probability:
            mat = augment_connectivity(x[row].reshape(side, side), aug_cfg, rng=rng)
            out[row] = mat.ravel()
    return out


def _objective(params: encoder.EncoderParams, x, y, nb, cfg: TrainConfig, strategy: str
               ) -> LossBreakdown:
    z = encoder.embed(params, x)
    if params.head is not None:
        z, _ = encoder.head_forward(params, z)
    batch = mine(strategy, z, y, cfg.loss.margin, cfg.seed, count=y.size)
    losses, _ = total_loss(z, batch.triplets, nb, cfg.loss, seed=cfg.seed)
    return losses


def _step(params: encoder.EncoderParams, xb, yb, nb, cfg: TrainConfig, strategy: str,
          mine_seed: int, loss_seed: int):
    trace = encoder.forward(params, xb)
    z = trace.z
    proj_pre = None
    target = z
    if params.head is not None:
        target, proj_pre = encoder.head_forward(params, z)
    batch = mine(strategy, target, yb, cfg.loss.margin, mine_seed, count=yb.size)
    batch.validate(yb)
    losses, grad = total_loss(target, batch.triplets, nb, cfg.loss, seed=loss_seed)
    head_grads = None
    if params.head is not None:
        head_grads, grad = encoder.head_backward(params, z, proj_pre, grad)
    grads = encoder.backward(params, trace, grad)
    if head_grads is not None:
        grads.head = head_grads
    return losses, grads, len(batch)


def train(dataset: LabeledDataset, params: encoder.EncoderParams, cfg: TrainConfig = TrainConfig(),
          progress=None) -> tuple[encoder.EncoderParams, TrainLog]:
    """Fit ``params`` on ``dataset`` with plain SGD and return the trained copy and its log.

    Batches, mining, augmentation and the locality subsample are all drawn
    from generators seeded by ``cfg.seed``.  The original-space neighbor
    lists are computed once before the first epoch.  ``progress`` is called
    with each finished ``EpochRecord``.
    """
    if dataset.n_classes < 2:
        raise ValueError("training needs at least two classes")
    if dataset.x.shape[1] != params.input_dim:
        raise ValueError(f"dataset has D={dataset.x.shape[1]}, encoder expects {params.input_dim}")
    log = TrainLog()
    if cfg.epochs == 0:
        return params, log
    augment = cfg.augment and dataset.provenance == "connectivity"
    if cfg.augment and not augment:
        logger.warning("augmentation only applies to connectivity datasets; ignoring it")
    n = dataset.n_samples
    x, y = dataset.x, dataset.labels
    needs_nb = cfg.loss.lambda_local > 0 or cfg.loss.lambda_global > 0
    global_nb = original_neighbors(x, cfg.loss.k) if needs_nb else None
    rng = np.random.default_rng(cfg.seed)
    params = params.copy()
    step = 0
    for epoch in range(cfg.epochs):
        start = time.perf_counter()
        strategy = cfg.strategy_for(epoch)
        order = rng.permutation(n)
        sums = np.zeros(6)
        grad_norms = []
        n_batches = n_triplets = 0
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            mine_seed, loss_seed = (int(s) for s in rng.integers(2**31, size=2))
            yb = y[idx]
            if np.unique(yb).size < 2:
                logger.debug("epoch %d: skipping single-class batch of %d", epoch, idx.size)
                continue
            xb = _augment_batch(x[idx], dataset, cfg, rng) if augment else x[idx]
            nb = _batch_neighbors(global_nb, idx, n) if needs_nb else None
            losses, grads, m = _step(params, xb, yb, nb, cfg, strategy, mine_seed, loss_seed)
            if not np.isfinite(losses.total):
                raise TrainingDiverged(
                    f"total loss became {losses.total} at epoch {epoch}, step {step} "
                    f"(lr={lr_schedule(cfg, step):.3g}); try a smaller learning rate")
            eta = lr_schedule(cfg, step)
            for p, g in zip(params.arrays(), grads.arrays()):
                p -= eta * g
            sums += (losses.triplet, losses.diversity, losses.uniformity, losses.local,
                     losses.global_, losses.total)
            grad_norms.append(grads.norm())
            n_batches += 1
            n_triplets += m
            step += 1
        if n_batches == 0:
            raise ValueError("no batch contained two classes; increase the batch size")
        mean = sums / n_batches
        objective = (_objective(params, x, y, global_nb, cfg, strategy)
                     if cfg.track_objective else None)
        if objective is not None and not np.isfinite(objective.total):
            raise TrainingDiverged(f"full-dataset objective became {objective.total} "
                                   f"after epoch {epoch}")
        record = EpochRecord(epoch, LossBreakdown(*(float(v) for v in mean)),
                             float(np.mean(grad_norms)), time.perf_counter() - start,
                             n_batches, n_triplets, objective)
        log.epochs.append(record)
        logger.info("epoch %d  total %.4f  triplet %.4f  |g| %.3g", epoch, record.losses.total,
                    record.losses.triplet, record.grad_norm)
        if progress is not None:
            progress(record)
    return params, log
