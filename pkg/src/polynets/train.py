"""SGD with momentum, learning-rate schedules, the training loop and evaluation."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Mapping, Optional, Tuple, Union

import numpy as np

from . import autograd as ag
from .data import Dataset, augment
from .regularization import label_smooth

logger = logging.getLogger(__name__)

METRICS_HEADER = ("epoch", "train_loss", "train_acc", "test_acc", "lr", "wall_seconds")
SEED_COMPONENTS = ("init", "shuffle", "augment", "dropblock", "data")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class MultiStep:
    milestones: Tuple[int, ...] = (40, 60, 80, 100)
    factor: float = 0.1

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ValueError("milestones must be strictly increasing")


@dataclass(frozen=True)
class Exponential:
    gamma: float = 0.92


@dataclass
class TrainConfig:
    lr0: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 128
    epochs: int = 120
    schedule: Union[MultiStep, Exponential] = field(default_factory=MultiStep)
    label_smooth_eps: float = 0.0
    seed: int = 0
    augment_pad: int = 0
    grad_clip: float = 0.0

    def __post_init__(self):
        if not self.lr0 > 0:
            raise ValueError("lr0 must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be positive and epochs non-negative")


@dataclass
class MetricsRow:
    epoch: int
    train_loss: float
    train_acc: float
    test_acc: float
    lr: float
    wall_seconds: float


def component_seeds(master: int) -> Dict[str, int]:
    """Independent per-component seeds derived from one master seed."""
    return {name: int(np.random.SeedSequence(master, spawn_key=(i,)).generate_state(1)[0])
            for i, name in enumerate(SEED_COMPONENTS)}


def lr_at(schedule, epoch: int, lr0: float = 0.1) -> float:
    if isinstance(schedule, MultiStep):
        passed = sum(1 for m in schedule.milestones if m <= epoch)
        return lr0 * schedule.factor ** passed
    return lr0 * schedule.gamma ** epoch


def sgd_step(params: Mapping[str, ag.Parameter], velocity: Dict[str, np.ndarray], lr: float,
             momentum: float, weight_decay: float) -> None:
    """In-place update: g = grad + wd * p; v = momentum * v + g; p -= lr * v."""
    for name, p in params.items():
        if p.grad is None:
            raise RuntimeError(f"parameter {name!r} has no gradient; run backward first")
        g = p.grad + weight_decay * p.data
        v = velocity.get(name)
        v = g if v is None else momentum * v + g
        velocity[name] = v
        p.data = (p.data - lr * v).astype(p.dtype, copy=False)


def clip_grad_norm(params: Mapping[str, ag.Parameter], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2))
                          for p in params.values() if p.grad is not None))
    if total > max_norm > 0:
        scale = max_norm / total
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


def evaluate(network, dataset: Dataset, batch_size: int = 500) -> Tuple[float, float]:
    """Inference-mode (loss, accuracy); touches neither parameters nor running statistics."""
    total_loss, correct = 0.0, 0
    n = len(dataset)
    with ag.no_grad():
        for start in range(0, n, batch_size):
            x = dataset.images[start:start + batch_size]
            y = dataset.labels[start:start + batch_size]
            logits = network(x, training=False)
            onehot = np.eye(logits.shape[1])[y]
            total_loss += ag.softmax_cross_entropy(logits, onehot).item() * len(y)
            correct += int(np.sum(logits.data.argmax(axis=1) == y))
    return total_loss / n, correct / n


def fit(network, dataset: Dataset, config: TrainConfig, test: Optional[Dataset] = None,
        eval_every: int = 1) -> List[MetricsRow]:
    """Train ``network`` on ``dataset`` and return one metrics row per epoch.

    ``test_acc`` is NaN for epochs where the test split is not evaluated.
    """
    seeds = component_seeds(config.seed)
    shuffle_rng = np.random.default_rng(seeds["shuffle"])
    augment_rng = np.random.default_rng(seeds["augment"])
    drop_rng = np.random.default_rng(seeds["dropblock"])
    params = network.parameters()
    velocity: Dict[str, np.ndarray] = {}
    k = dataset.class_count
    images = dataset.images
    rows: List[MetricsRow] = []
    last_finite = float("nan")
    start_time = time.perf_counter()
    for epoch in range(config.epochs):
        lr = lr_at(config.schedule, epoch, config.lr0)
        order = shuffle_rng.permutation(len(dataset))
        loss_sum, correct = 0.0, 0
        for b, start in enumerate(range(0, len(order), config.batch_size)):
            index = order[start:start + config.batch_size]
            x = images[index]
            if config.augment_pad and x.ndim == 4:
                x = augment(x, config.augment_pad, augment_rng)
            y = dataset.labels[index]
            ag.zero_grad(params.values())
            try:
                # overflow surfaces as NumericError below, so numpy's own warning is redundant
                with np.errstate(over="ignore", invalid="ignore"):
                    logits = network(x, training=True, rng=drop_rng)
                    loss = ag.softmax_cross_entropy(logits, label_smooth(y, k, config.label_smooth_eps))
            except ag.NumericError as exc:
                raise TrainingDiverged(f"non-finite values at epoch {epoch}, batch {b} ({exc}); "
                                       f"last finite loss {last_finite}") from exc
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(f"loss {value} at epoch {epoch}, batch {b}; last finite loss {last_finite}")
            last_finite = value
            ag.backward(loss)
            if config.grad_clip > 0:
                clip_grad_norm(params, config.grad_clip)
            sgd_step(params, velocity, lr, config.momentum, config.weight_decay)
            loss_sum += value * len(index)
            correct += int(np.sum(logits.data.argmax(axis=1) == y))
        bad = [name for name, p in params.items() if not np.all(np.isfinite(p.data))]
        if bad:
            raise TrainingDiverged(f"non-finite parameters {bad[:3]} after epoch {epoch}; "
                                   f"last finite loss {last_finite}")
        test_acc = float("nan")
        if test is not None and ((epoch + 1) % eval_every == 0 or epoch == config.epochs - 1):
            test_acc = evaluate(network, test)[1]
        row = MetricsRow(epoch, loss_sum / len(dataset), correct / len(dataset), test_acc, lr,
                         time.perf_counter() - start_time)
        logger.info("epoch %d loss %.4f train_acc %.4f test_acc %.4f lr %.5g", row.epoch, row.train_loss,
                    row.train_acc, row.test_acc, row.lr)
        rows.append(row)
    return rows


def write_metrics_csv(path, rows: List[MetricsRow]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_HEADER)
        for row in rows:
            d = asdict(row)
            writer.writerow([d["epoch"]] + [repr(float(d[k])) for k in METRICS_HEADER[1:]])


def read_metrics_csv(path) -> List[MetricsRow]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != METRICS_HEADER:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        return [MetricsRow(int(r["epoch"]), *(float(r[k]) for k in METRICS_HEADER[1:])) for r in reader]


def save_checkpoint(path, network) -> None:
    """Write the parameter registry (and running buffers, prefixed ``buffer:``) as .npz."""
    with open(path, "wb") as fh:
        np.savez(fh, **network.state_dict())


def load_checkpoint(path, network) -> None:
    with np.load(path) as archive:
        network.load_state_dict({k: archive[k] for k in archive.files})
