"""Micro-backbone, shared classifier, pairwise forward pass and losses."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from pcnet import ops
from pcnet.attention import EcaModule, MutualHead, eca_apply, mutual_cue, mutual_representations
from pcnet.ops import ConfigurationError
from pcnet.tensor import DimensionError, Tensor, parameter

HEADS = ("self", "mut")


class Backbone:
    """Residual stages of ``relu(conv s2) -> relu(h + conv(h))``.

    Each stage halves the spatial extent. Convolutions carry no bias.
    """

    def __init__(self, channels=(16, 32, 64), in_channels: int = 3, input_size: int = 64,
                 rng: np.random.Generator | None = None, dtype=None):
        if not channels:
            raise ConfigurationError("backbone needs at least one stage")
        self.channels = tuple(int(c) for c in channels)
        self.in_channels = in_channels
        self.input_size = input_size
        if self.output_size < 1:
            raise ConfigurationError(
                f"input size {input_size} collapses below 1x1 after {len(channels)} stride-2 stages")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stages: list[tuple[Tensor, Tensor]] = []
        cin = in_channels
        for cout in self.channels:
            down = rng.normal(0.0, math.sqrt(2.0 / (cin * 9)), size=(cout, cin, 3, 3))
            res = rng.normal(0.0, 0.5 * math.sqrt(2.0 / (cout * 9)), size=(cout, cout, 3, 3))
            self.stages.append((parameter(down, dtype=dtype), parameter(res, dtype=dtype)))
            cin = cout

    @property
    def out_channels(self) -> int:
        return self.channels[-1]

    @property
    def output_size(self) -> int:
        s = self.input_size
        for _ in self.channels:
            s = (s + 2 - 3) // 2 + 1
        return s

    def __call__(self, images: Tensor) -> Tensor:
        if images.ndim != 4 or images.shape[1] != self.in_channels:
            raise DimensionError(f"backbone expects [B,{self.in_channels},H,W], got {images.shape}")
        if images.shape[2:] != (self.input_size, self.input_size):
            raise DimensionError(
                f"backbone configured for {self.input_size}x{self.input_size} input, got {images.shape[2:]}")
        x = images
        for down, res in self.stages:
            h = ops.relu(ops.conv2d(x, down, stride=2, pad=1))
            x = ops.relu(ops.add(h, ops.conv2d(h, res, stride=1, pad=1)))
        return x

    def parameters(self) -> dict[str, Tensor]:
        params = {}
        for i, (down, res) in enumerate(self.stages):
            params[f"stage{i}.down"] = down
            params[f"stage{i}.res"] = res
        return params


class Classifier:
    """The single FC layer shared by the inference path and all four heads."""

    def __init__(self, in_features: int, num_classes: int, rng: np.random.Generator | None = None, dtype=None):
        bound = 1.0 / math.sqrt(in_features)
        w = rng.uniform(-bound, bound, size=(num_classes, in_features)) if rng is not None else np.zeros(
            (num_classes, in_features))
        self.W = parameter(w, dtype=dtype)
        self.b = parameter(np.zeros(num_classes), dtype=dtype)

    @property
    def num_classes(self) -> int:
        return self.W.shape[0]

    def scores(self, F: Tensor) -> Tensor:
        return ops.softmax(ops.affine(F, self.W, self.b))

    def parameters(self) -> dict[str, Tensor]:
        return {"W": self.W, "b": self.b}


@dataclass
class RepresentationSet:
    """Pooled representations and class scores of a batch of image pairs (one row per pair)."""

    F1_self: Tensor
    F2_self: Tensor
    F1_mut: Tensor
    F2_mut: Tensor
    q: dict  # (n, head) -> Tensor[B, N], n in {1, 2}, head in {"self", "mut"}
    a_mut: Tensor | None = None

    def scores(self, n: int, head: str) -> Tensor:
        return self.q[(n, head)]


@dataclass
class LossBundle:
    L_c: Tensor
    L_r: Tensor
    L: Tensor
    lam: float
    epsilon: float = 0.0


class PCNet:
    """Container for every learnable component: backbone, classifier, ECA and mutual head."""

    def __init__(self, num_classes: int, channels=(16, 32, 64), input_size: int = 64, eca_k: int = 5,
                 mutual_attention: str = "eca", rng: np.random.Generator | None = None, dtype=None,
                 attention_init: str = "zero"):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.backbone = Backbone(channels, input_size=input_size, rng=rng, dtype=dtype)
        C = self.backbone.out_channels
        self.classifier = Classifier(C, num_classes, rng=rng, dtype=dtype)
        self.eca = EcaModule(C, eca_k, rng=rng, dtype=dtype, init=attention_init)
        self.mutual = MutualHead(C, eca_k, attention=mutual_attention, rng=rng, dtype=dtype, init=attention_init)

    @property
    def num_classes(self) -> int:
        return self.classifier.num_classes

    def parameters(self) -> dict[str, Tensor]:
        params = {}
        for prefix, part in (("backbone", self.backbone), ("classifier", self.classifier),
                             ("eca", self.eca), ("mutual", self.mutual)):
            for name, t in part.parameters().items():
                params[f"{prefix}.{name}"] = t
        return params

    def zero_grad(self) -> None:
        for t in self.parameters().values():
            t.zero_grad()


def single_branch_forward(bk: Backbone, cl: Classifier, images: Tensor, eca: EcaModule | None = None) -> Tensor:
    """Plain CNN scores ``softmax(W GAP(f) + b)``; ``eca`` adds attention for ablations only."""
    if images.ndim == 3:
        images = Tensor._wrap(images.data[None])
    f = bk(images)
    if eca is not None:
        f = eca_apply(eca, f)
    return cl.scores(ops.global_average_pool(f))


def represent(cl: Classifier, eca: EcaModule, mh: MutualHead, f1: Tensor, f2: Tensor,
              F1_self: Tensor | None = None, F2_self: Tensor | None = None) -> RepresentationSet:
    """Four representations and scores for feature-map pairs ``f1[i], f2[i]``.

    Precomputed self-representations may be passed in when the caller already
    pooled the attended maps.
    """
    if F1_self is None:
        F1_self = ops.global_average_pool(eca_apply(eca, f1))
    if F2_self is None:
        F2_self = ops.global_average_pool(eca_apply(eca, f2))
    a_mut = mutual_cue(mh, f1, f2)
    F1_mut, F2_mut = mutual_representations(a_mut, ops.global_average_pool(f1), ops.global_average_pool(f2))
    q = {
        (1, "self"): cl.scores(F1_self),
        (2, "self"): cl.scores(F2_self),
        (1, "mut"): cl.scores(F1_mut),
        (2, "mut"): cl.scores(F2_mut),
    }
    return RepresentationSet(F1_self, F2_self, F1_mut, F2_mut, q, a_mut)


def pair_forward(bk: Backbone, cl: Classifier, eca: EcaModule, mh: MutualHead,
                 img1: Tensor, img2: Tensor) -> RepresentationSet:
    if img1.ndim == 3:
        img1, img2 = Tensor._wrap(img1.data[None]), Tensor._wrap(img2.data[None])
    return represent(cl, eca, mh, bk(img1), bk(img2))


def cross_entropy(q: Tensor, y) -> Tensor:
    """``-log(q[y])`` with ``q`` clamped below at 1e-12, one value per row.

    A 1D score vector yields a scalar.
    """
    if q.ndim == 1:
        return ops.reshape(_ce_rows(ops.reshape(q, (1, q.shape[0])), np.atleast_1d(y)), ())
    return _ce_rows(q, np.asarray(y))


def _ce_rows(q: Tensor, y: np.ndarray) -> Tensor:
    return ops.scale(ops.log(ops.pick(q, y)), -1.0)


def _as_labels(c, batch: int) -> np.ndarray:
    c = np.atleast_1d(np.asarray(c, dtype=np.intp))
    return np.broadcast_to(c, (batch,)) if c.shape == (1,) else c


def classification_loss(reps: RepresentationSet, c1, c2, heads=HEADS) -> Tensor:
    """Sum of cross-entropies over both images and the requested heads, one value per pair.

    Average the result over pairs for optimisation; its raw total is the
    un-normalised sum.
    """
    if not heads:
        raise ConfigurationError("classification_loss needs at least one head")
    B = reps.q[(1, "self")].shape[0]
    labels = {1: _as_labels(c1, B), 2: _as_labels(c2, B)}
    total = None
    for n in (1, 2):
        for head in heads:
            term = cross_entropy(reps.q[(n, head)], labels[n])
            total = term if total is None else ops.add(total, term)
    return total


def ranking_loss(reps: RepresentationSet, c1, c2, epsilon: float) -> Tensor:
    """Hinge ``sum_n max(0, q_mut[c_n] - q_self[c_n] + epsilon)``, one value per pair."""
    if epsilon < 0:
        raise ConfigurationError(f"ranking margin must be >= 0, got {epsilon}")
    B = reps.q[(1, "self")].shape[0]
    labels = {1: _as_labels(c1, B), 2: _as_labels(c2, B)}
    total = None
    for n in (1, 2):
        gap = ops.sub(ops.pick(reps.q[(n, "mut")], labels[n]), ops.pick(reps.q[(n, "self")], labels[n]))
        term = ops.relu(ops.add_scalar(gap, epsilon))
        total = term if total is None else ops.add(total, term)
    return total


def total_loss(lc, lr, lam: float, epsilon: float = 0.0) -> LossBundle:
    """``L = L_c + lam * L_r`` for scalar loss terms."""
    if lam < 0:
        raise ConfigurationError(f"lambda must be >= 0, got {lam}")
    if not isinstance(lc, Tensor):
        lc = Tensor(lc)
    if not isinstance(lr, Tensor):
        lr = Tensor(lr, dtype=lc.dtype)
    return LossBundle(lc, lr, ops.add(lc, ops.scale(lr, lam)), lam, epsilon)


def count_parameters(*modules) -> int:
    return int(sum(t.size for m in modules for t in m.parameters().values()))
