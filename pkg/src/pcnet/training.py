"""SGD with momentum, cosine learning-rate schedule and the pairwise training loop."""

from __future__ import annotations

import csv
import functools
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from pcnet import ops, seeding
from pcnet.attention import eca_apply
from pcnet.config import TrainConfig
from pcnet.data import AugmentationPolicy, Dataset, augment
from pcnet.model import (PCNet, classification_loss, cross_entropy, ranking_loss, represent,
                         total_loss)
from pcnet.pairing import BatchSpec, sample_batch, select_pairs
from pcnet.tensor import Tape, Tensor, UsageError, default_dtype, no_grad
from pcnet.tensor import DimensionError

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ("epoch", "lr", "L_c", "L_r", "L", "train_acc", "test_OA")
HEADS_FOR = {"self": ("self",), "mutual": ("mut",), "self+mutual": ("self", "mut")}


class NumericalError(RuntimeError):
    """A loss became NaN or infinite."""


def sgd_step(params, grads, velocity, lr: float, momentum: float, weight_decay: float) -> None:
    """In-place momentum SGD with coupled L2 weight decay.

    ``v <- momentum * v + (grad + weight_decay * p)``; ``p <- p - lr * v``.
    Accepts parallel sequences of numpy arrays.
    """
    for p, g, v in zip(params, grads, velocity):
        if not (p.shape == g.shape == v.shape):
            raise DimensionError(f"sgd_step: shapes {p.shape}, {g.shape}, {v.shape} disagree")
        d = g + p.dtype.type(weight_decay) * p
        v *= v.dtype.type(momentum)
        v += d
        p -= p.dtype.type(lr) * v


def cosine_lr(t: int, T: int, lr0: float, lr_min: float = 0.0) -> float:
    """``lr_min + (lr0 - lr_min) * (1 + cos(pi t / T)) / 2`` for epoch ``t``."""
    if T < 1:
        raise UsageError(f"total epochs must be >= 1, got {T}")
    if not 0 <= t <= T:
        raise UsageError(f"epoch index {t} outside [0, {T}]")
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * t / T))


@dataclass
class TrainState:
    config: TrainConfig
    model: PCNet
    velocity: dict[str, np.ndarray]
    rngs: dict[str, np.random.Generator]
    epoch: int = 0
    history: list[dict] = field(default_factory=list)
    class_names: list[str] = field(default_factory=list)
    data_mean: np.ndarray | None = None
    data_std: np.ndarray | None = None

    def trainable(self) -> dict:
        params = self.model.parameters()
        if self.config.freeze_mutual:
            params = {k: v for k, v in params.items() if not k.startswith("mutual.")}
        return params


def init_state(config: TrainConfig, num_classes: int, class_names=None) -> TrainState:
    config.validate()
    dtype = np.float64 if config.precision == "float64" else np.float32
    model = PCNet(num_classes, channels=config.channels, input_size=config.input_size, eca_k=config.eca_k,
                  mutual_attention=config.mutual_attention, rng=seeding.stream(config.seed, "init"), dtype=dtype,
                  attention_init=config.attention_init)
    velocity = {k: np.zeros_like(v.data) for k, v in model.parameters().items()}
    rngs = {name: seeding.stream(config.seed, name) for name in ("sampler", "augment", "select")}
    return TrainState(config, model, velocity, rngs, class_names=list(class_names or []))


def batch_spec(config: TrainConfig, num_classes: int) -> BatchSpec:
    P = config.P
    if P > num_classes:
        _warn_clamp(P, num_classes)
        P = num_classes
    return BatchSpec(P, config.K, config.seed)


@functools.lru_cache(maxsize=None)
def _warn_clamp(P: int, num_classes: int) -> None:
    logger.warning("P=%d exceeds the %d available classes; using P=%d", P, num_classes, num_classes)


def _augment_batch(images: np.ndarray, config: TrainConfig, rng) -> np.ndarray:
    policy = AugmentationPolicy(config.rotate_max_deg, config.hflip, config.vflip, config.rotate_mode)
    return np.stack([augment(im, policy, rng) for im in images])


def batch_losses(state: TrainState, images: np.ndarray, labels: np.ndarray):
    """Forward one batch on the active tape. Returns (LossBundle, correct, total)."""
    cfg = state.config
    m = state.model
    x = Tensor._wrap(images.astype(m.classifier.W.dtype, copy=False))
    f = m.backbone(x)
    if cfg.architecture == "single":
        g = eca_apply(m.eca, f) if cfg.self_attention else f
        q = m.classifier.scores(ops.global_average_pool(g))
        L_c = ops.mean(cross_entropy(q, labels))
        L_r = Tensor(0.0, dtype=L_c.dtype)
        bundle = total_loss(L_c, L_r, 0.0, cfg.epsilon)
        correct = int(np.sum(np.argmax(q.data, axis=1) == labels))
        return bundle, correct, len(labels)

    F_gap = ops.global_average_pool(f)
    assignment = select_pairs(F_gap.data.copy(), labels, cfg.metric, cfg.strategy, state.rngs["select"])
    first, second = assignment.pairs(cfg.pair_mode)
    F_self = ops.global_average_pool(eca_apply(m.eca, f)) if cfg.self_attention else F_gap
    f1, f2 = ops.take_rows(f, first), ops.take_rows(f, second)
    reps = represent(m.classifier, m.eca, m.mutual, f1, f2,
                     F1_self=ops.take_rows(F_self, first), F2_self=ops.take_rows(F_self, second))
    c1, c2 = labels[first], labels[second]
    L_c = ops.mean(classification_loss(reps, c1, c2, HEADS_FOR[cfg.representation]))
    use_rank = cfg.objective == "Lc+Lr"
    if use_rank:
        L_r = ops.mean(ranking_loss(reps, c1, c2, cfg.epsilon))
    else:
        with no_grad():
            L_r = ops.mean(ranking_loss(reps, c1, c2, cfg.epsilon))
    bundle = total_loss(L_c, L_r, cfg.lam if use_rank else 0.0, cfg.epsilon)
    correct = int(np.sum(np.argmax(reps.q[(1, "self")].data, axis=1) == c1)
                  + np.sum(np.argmax(reps.q[(2, "self")].data, axis=1) == c2))
    return bundle, correct, 2 * len(first)


def train_epoch(state: TrainState, train: Dataset) -> dict:
    """One pass of ``ceil(len(train) / (P*K))`` sampled batches at the epoch's cosine rate."""
    cfg = state.config
    spec = batch_spec(cfg, train.num_classes)
    lr = cosine_lr(state.epoch, cfg.epochs, cfg.lr0, cfg.lr_min)
    n_batches = max(1, math.ceil(len(train) / spec.size))
    params = state.trainable()
    names = list(params)
    sums = {"L_c": 0.0, "L_r": 0.0, "L": 0.0}
    correct = total = 0
    dtype = "float64" if cfg.precision == "float64" else "float32"
    with default_dtype(dtype):
        for b in range(n_batches):
            idx = sample_batch(train.labels, spec, state.rngs["sampler"])
            images = train.images[idx]
            if cfg.augment:
                images = _augment_batch(images, cfg, state.rngs["augment"])
            labels = train.labels[idx]
            for t in state.model.parameters().values():
                t.grad = None
            with Tape() as tape:
                bundle, c, n = batch_losses(state, images, labels)
            L = float(bundle.L.item())
            if not np.isfinite(L):
                raise NumericalError(
                    f"non-finite loss {L} at epoch {state.epoch} batch {b} (seed {cfg.seed})")
            tape.backward(bundle.L)
            sgd_step([params[k].data for k in names],
                     [params[k].grad if params[k].grad is not None else np.zeros_like(params[k].data) for k in names],
                     [state.velocity[k] for k in names], lr, cfg.momentum, cfg.weight_decay)
            sums["L_c"] += float(bundle.L_c.item())
            sums["L_r"] += float(bundle.L_r.item())
            sums["L"] += L
            correct += c
            total += n
    state.epoch += 1
    return {"epoch": state.epoch, "lr": lr, **{k: v / n_batches for k, v in sums.items()},
            "train_acc": correct / max(total, 1)}


def fit(state: TrainState, train: Dataset, test: Dataset | None = None, metrics_path=None,
        checkpoint_path=None, on_epoch: Callable[[TrainState, dict], None] | None = None,
        stop_after: int | None = None) -> list[dict]:
    """Train until ``config.epochs`` (or ``stop_after``) epochs are complete.

    Appends one metrics row per epoch to ``metrics_path`` and rewrites the
    checkpoint after every ``checkpoint_every`` epochs.
    """
    from pcnet.checkpoint import save_checkpoint
    from pcnet.evaluation import evaluate

    cfg = state.config
    end = cfg.epochs if stop_after is None else min(cfg.epochs, stop_after)
    if metrics_path is not None and state.epoch == 0:
        with open(metrics_path, "w", newline="") as fh:
            csv.writer(fh).writerow(METRIC_COLUMNS)
    while state.epoch < end:
        row = train_epoch(state, train)
        row["test_OA"] = evaluate(state.model, test, eval_eca=cfg.eval_eca,
                                  batch_size=cfg.eval_batch).overall_accuracy if test is not None else float("nan")
        state.history.append(row)
        logger.info("epoch %d lr=%.5f L_c=%.4f L_r=%.4f L=%.4f train_acc=%.4f test_OA=%.4f",
                    row["epoch"], row["lr"], row["L_c"], row["L_r"], row["L"], row["train_acc"], row["test_OA"])
        if metrics_path is not None:
            with open(metrics_path, "a", newline="") as fh:
                csv.writer(fh).writerow([row["epoch"]] + [repr(float(row[k])) for k in METRIC_COLUMNS[1:]])
        if checkpoint_path is not None and (state.epoch % cfg.checkpoint_every == 0 or state.epoch == end):
            save_checkpoint(state, checkpoint_path)
        if on_epoch is not None:
            on_epoch(state, row)
    return state.history


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def metrics_path_for(run_dir) -> Path:
    return Path(run_dir) / "metrics.csv"
