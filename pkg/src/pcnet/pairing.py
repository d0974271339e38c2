"""P x K batch sampling and most-similar intra/inter-class partner selection."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np

from pcnet.ops import ConfigurationError
from pcnet.tensor import DimensionError

logger = logging.getLogger(__name__)

METRICS = ("euclidean", "cosine", "random")
STRATEGIES = ("SS", "SD", "SRandom", "RandomRandom")
# strategy -> (inter rule, intra rule); "S" nearest, "D" farthest, "R" uniform
_RULES = {"SS": ("S", "S"), "SD": ("S", "D"), "SRandom": ("S", "R"), "RandomRandom": ("R", "R")}


class PairingError(ValueError):
    """A batch cannot support the requested pair selection."""


@dataclass(frozen=True)
class BatchSpec:
    P: int = 30
    K: int = 6
    seed: int = 0

    def __post_init__(self):
        if self.P < 2 or self.K < 2:
            raise ConfigurationError(f"batch needs P >= 2 and K >= 2, got P={self.P}, K={self.K}")

    @property
    def size(self) -> int:
        return self.P * self.K


@dataclass
class PairAssignment:
    """Per-anchor partners; index ``i`` of every array refers to batch position ``i``."""

    intra: np.ndarray
    inter: np.ndarray
    intra_dist: np.ndarray
    inter_dist: np.ndarray

    def __len__(self) -> int:
        return len(self.intra)

    def pairs(self, mode: str = "both") -> tuple[np.ndarray, np.ndarray]:
        """(first, second) batch positions of the training pairs, ordered by anchor.

        ``both`` yields (anchor, intra) then (anchor, inter) for every anchor;
        ``inter`` yields only the inter-class pair.
        """
        anchors = np.arange(len(self.intra))
        if mode == "inter":
            return anchors, self.inter.copy()
        if mode != "both":
            raise ConfigurationError(f"pair mode must be 'both' or 'inter', got {mode!r}")
        first = np.repeat(anchors, 2)
        second = np.stack([self.intra, self.inter], axis=1).reshape(-1)
        return first, second


def sample_batch(labels, spec: BatchSpec, rng: np.random.Generator) -> np.ndarray:
    """Dataset indices of ``P`` random classes with ``K`` random images each.

    Items are grouped by class in the drawn class order. Classes with fewer
    than ``K`` images are sampled with replacement.
    """
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if len(classes) < spec.P:
        raise ConfigurationError(f"dataset has {len(classes)} classes but the batch needs P={spec.P}")
    chosen = rng.choice(classes, size=spec.P, replace=False)
    out = []
    for c in chosen:
        members = np.flatnonzero(labels == c)
        replace = len(members) < spec.K
        if replace:
            logger.warning("class %s has %d images < K=%d; sampling with replacement", c, len(members), spec.K)
        out.append(rng.choice(members, size=spec.K, replace=replace))
    return np.concatenate(out)


def euclidean_distance(u, v) -> float:
    u, v = np.asarray(u, dtype=np.float64), np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise DimensionError(f"euclidean_distance: length mismatch {u.shape} vs {v.shape}")
    return float(np.sqrt(np.sum((u - v) ** 2)))


def cosine_distance(u, v) -> float:
    u, v = np.asarray(u, dtype=np.float64), np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise DimensionError(f"cosine_distance: length mismatch {u.shape} vs {v.shape}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ValueError("cosine_distance is undefined for a zero vector")
    return float(1.0 - np.dot(u, v) / (nu * nv))


def distance_matrix(features, metric: str, rng: np.random.Generator | None = None) -> np.ndarray:
    F = np.asarray(features, dtype=np.float64)
    if metric == "euclidean":
        return np.sqrt(np.sum((F[:, None, :] - F[None, :, :]) ** 2, axis=-1))
    if metric == "cosine":
        norms = np.linalg.norm(F, axis=1)
        if np.any(norms == 0):
            raise ValueError(f"cosine metric undefined: zero feature vector at batch position {int(np.argmin(norms))}")
        return 1.0 - (F @ F.T) / (norms[:, None] * norms[None, :])
    if metric == "random":
        if rng is None:
            raise ConfigurationError("random metric needs an rng")
        return rng.random((len(F), len(F)))
    raise ConfigurationError(f"unknown metric {metric!r}; expected one of {METRICS}")


def check_batch_labels(labels) -> None:
    labels = np.asarray(labels)
    values, counts = np.unique(labels, return_counts=True)
    if len(values) < 2:
        raise PairingError("pair selection needs at least two distinct labels in the batch")
    lonely = values[counts < 2]
    if len(lonely):
        raise PairingError(f"label {lonely[0].item()!r} occurs once in the batch; no intra-class partner exists")


def select_pairs(features, labels, metric: str = "euclidean", strategy: str = "SS",
                 rng: np.random.Generator | None = None) -> PairAssignment:
    """Pick one intra-class and one inter-class partner per anchor.

    Features are plain arrays (selection is outside any gradient tape). Ties
    go to the lowest batch position. Random rules draw one integer per anchor
    in anchor order, intra before inter.
    """
    if strategy not in _RULES:
        raise ConfigurationError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    labels = np.asarray(labels)
    F = np.asarray(features, dtype=np.float64)
    if F.ndim != 2 or len(F) != len(labels):
        raise DimensionError(f"select_pairs: features {F.shape} vs {len(labels)} labels")
    check_batch_labels(labels)
    inter_rule, intra_rule = _RULES[strategy]
    if (inter_rule == "R" or intra_rule == "R") and rng is None:
        raise ConfigurationError(f"strategy {strategy} needs an rng")
    D = distance_matrix(F, metric, rng)
    B = len(F)
    same = labels[:, None] == labels[None, :]
    intra_ok = same & ~np.eye(B, dtype=bool)
    inter_ok = ~same

    def pick(ok, rule):
        if rule == "S":
            return np.argmin(np.where(ok, D, np.inf), axis=1)
        if rule == "D":
            return np.argmax(np.where(ok, D, -np.inf), axis=1)
        return None

    intra = pick(intra_ok, intra_rule)
    inter = pick(inter_ok, inter_rule)
    if intra is None or inter is None:
        intra = np.empty(B, dtype=np.intp) if intra is None else intra
        inter_draw = inter is None
        inter = np.empty(B, dtype=np.intp) if inter is None else inter
        for i in range(B):
            if intra_rule == "R":
                cand = np.flatnonzero(intra_ok[i])
                intra[i] = cand[rng.integers(len(cand))]
            if inter_draw:
                cand = np.flatnonzero(inter_ok[i])
                inter[i] = cand[rng.integers(len(cand))]
    rows = np.arange(B)
    return PairAssignment(intra.astype(np.intp), inter.astype(np.intp), D[rows, intra], D[rows, inter])


def write_pairs_csv(assignment: PairAssignment, path, ids=None) -> None:
    """Dump ``anchor_id, intra_id, intra_dist, inter_id, inter_dist`` rows."""
    ids = np.arange(len(assignment)) if ids is None else np.asarray(ids)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["anchor_id", "intra_id", "intra_dist", "inter_id", "inter_dist"])
        for i in range(len(assignment)):
            w.writerow([int(ids[i]), int(ids[assignment.intra[i]]), repr(float(assignment.intra_dist[i])),
                        int(ids[assignment.inter[i]]), repr(float(assignment.inter_dist[i]))])
