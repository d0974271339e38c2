"""Central finite-difference checks for every differentiable operation.

Each registry entry builds a random instance (inputs that require grad plus a
function producing a tensor). The output is projected onto a fixed random
direction so that one backward pass yields the full input gradient, which is
then compared with central differences at 64-bit precision.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from pcnet import ops
from pcnet.attention import EcaModule, MutualHead, eca_apply, mutual_cue
from pcnet.model import (Backbone, Classifier, classification_loss, cross_entropy, pair_forward,
                         ranking_loss, single_branch_forward, total_loss)
from pcnet.tensor import Tape, Tensor, default_dtype, parameter

STEP = 1e-5
PRIMITIVE_TOL = 1e-5
COMPOSITE_TOL = 1e-4
# keep random inputs this far from relu/hinge kinks so central differences never straddle one
KINK_GAP = 1e-3


@dataclass
class Instance:
    inputs: list[Tensor]
    fn: Callable[[], Tensor]


@dataclass
class CheckResult:
    name: str
    instances: int
    max_rel_error: float
    tolerance: float
    seconds: float

    @property
    def ok(self) -> bool:
        return self.max_rel_error < self.tolerance


def _p(rng, *shape, low=-1.0, high=1.0) -> Tensor:
    return parameter(rng.uniform(low, high, size=shape), dtype=np.float64)


def _away_from_zero(rng, *shape) -> Tensor:
    x = rng.uniform(KINK_GAP * 10, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)
    return parameter(x, dtype=np.float64)


def _positive(rng, *shape) -> Tensor:
    return parameter(rng.uniform(0.1, 2.0, size=shape), dtype=np.float64)


def _conv(rng, stride, pad):
    x, k = _p(rng, 2, 2, 5, 5), _p(rng, 3, 2, 3, 3)
    return Instance([x, k], lambda: ops.conv2d(x, k, stride=stride, pad=pad))


def _unary(op, make):
    def build(rng):
        x = make(rng)
        return Instance([x], lambda: op(x))
    return build


def _binary(op, shape=(3, 4)):
    def build(rng):
        a, b = _p(rng, *shape), _p(rng, *shape)
        return Instance([a, b], lambda: op(a, b))
    return build


def _take_rows(rng):
    x = _p(rng, 4, 3)
    idx = rng.integers(0, 4, size=6)
    return Instance([x], lambda: ops.take_rows(x, idx))


def _pick(rng):
    q = _p(rng, 5, 4)
    idx = rng.integers(0, 4, size=5)
    return Instance([q], lambda: ops.pick(q, idx))


def _eca(rng):
    m = EcaModule(6, 5, dtype=np.float64)
    m.kernel.data[:] = rng.uniform(-1, 1, size=5)
    f = _p(rng, 2, 6, 3, 3)
    return Instance([f, m.kernel], lambda: eca_apply(m, f))


def _mutual(attention):
    def build(rng):
        h = MutualHead(3, 3, attention=attention, rng=rng, dtype=np.float64, init="uniform")
        f1, f2 = _p(rng, 2, 3, 3, 3), _p(rng, 2, 3, 3, 3)
        params = [f1, f2] + list(h.parameters().values())
        return Instance(params, lambda: mutual_cue(h, f1, f2))
    return build


def _single_branch(rng):
    bk = Backbone((2, 3), in_channels=3, input_size=8, rng=rng, dtype=np.float64)
    cl = Classifier(3, 3, rng=rng, dtype=np.float64)
    x = Tensor(rng.normal(size=(2, 3, 8, 8)), dtype=np.float64)
    params = list(bk.parameters().values()) + list(cl.parameters().values())
    return Instance(params, lambda: single_branch_forward(bk, cl, x))


def _cross_entropy(rng):
    z = _p(rng, 4, 5, low=-2, high=2)
    y = rng.integers(0, 5, size=4)
    return Instance([z], lambda: cross_entropy(ops.softmax(z), y))


PRIMITIVES: dict[str, Callable] = {
    "conv2d": lambda rng: _conv(rng, 1, 0),
    "conv2d_stride2_pad1": lambda rng: _conv(rng, 2, 1),
    "conv1d_channels": lambda rng: (lambda v, k: Instance([v, k], lambda: ops.conv1d_channels(v, k)))(
        _p(rng, 3, 7), _p(rng, 5)),
    "global_average_pool": _unary(ops.global_average_pool, lambda rng: _p(rng, 2, 3, 4, 4)),
    "affine": lambda rng: (lambda x, W, b: Instance([x, W, b], lambda: ops.affine(x, W, b)))(
        _p(rng, 3, 4), _p(rng, 5, 4), _p(rng, 5)),
    "softmax": _unary(ops.softmax, lambda rng: _p(rng, 3, 5, low=-3, high=3)),
    "sigmoid": _unary(ops.sigmoid, lambda rng: _p(rng, 3, 5, low=-4, high=4)),
    "relu": _unary(ops.relu, lambda rng: _away_from_zero(rng, 3, 5)),
    "concat_channels": _binary(ops.concat_channels, (2, 3, 2, 2)),
    "add": _binary(ops.add),
    "sub": _binary(ops.sub),
    "mul": _binary(ops.mul),
    "scale": _unary(lambda x: ops.scale(x, -1.7), lambda rng: _p(rng, 3, 4)),
    "add_scalar": _unary(lambda x: ops.add_scalar(x, 0.3), lambda rng: _p(rng, 3, 4)),
    "channel_scale": lambda rng: (lambda f, a: Instance([f, a], lambda: ops.channel_scale(f, a)))(
        _p(rng, 2, 3, 3, 3), _p(rng, 2, 3)),
    "take_rows": _take_rows,
    "pick": _pick,
    "log": _unary(ops.log, lambda rng: _positive(rng, 3, 4)),
    "sum": _unary(ops.sum, lambda rng: _p(rng, 3, 4)),
    "mean": _unary(ops.mean, lambda rng: _p(rng, 3, 4)),
    "sum_rows": _unary(ops.sum_rows, lambda rng: _p(rng, 3, 4)),
    "reshape": _unary(lambda x: ops.reshape(x, (4, 3)), lambda rng: _p(rng, 3, 4)),
    "eca_apply": _eca,
    "mutual_cue": _mutual("eca"),
    "mutual_cue_fc": _mutual("fc"),
    "single_branch_forward": _single_branch,
    "cross_entropy": _cross_entropy,
}


def tiny_pair_instance(rng, lam: float = 1.0, epsilon: float = 0.05) -> Instance:
    """Full pair forward plus both losses on C=4, N=3, 8x8 inputs."""
    bk = Backbone((2, 3, 4), in_channels=3, input_size=8, rng=rng, dtype=np.float64)
    cl = Classifier(4, 3, rng=rng, dtype=np.float64)
    eca = EcaModule(4, 3, rng=rng, dtype=np.float64, init="uniform")
    mh = MutualHead(4, 3, rng=rng, dtype=np.float64, init="uniform")
    img1 = Tensor(rng.normal(size=(2, 3, 8, 8)), dtype=np.float64)
    img2 = Tensor(rng.normal(size=(2, 3, 8, 8)), dtype=np.float64)
    c1, c2 = rng.integers(0, 3, size=2), rng.integers(0, 3, size=2)
    params = []
    for part in (bk, cl, eca, mh):
        params.extend(part.parameters().values())

    def fn():
        reps = pair_forward(bk, cl, eca, mh, img1, img2)
        lc = ops.mean(classification_loss(reps, c1, c2))
        lr = ops.mean(ranking_loss(reps, c1, c2, epsilon))
        return total_loss(lc, lr, lam, epsilon).L

    return Instance(params, fn)


def _projected(inst: Instance, direction: np.ndarray | None):
    out = inst.fn()
    if direction is None:
        return out, ops.sum(out)
    return out, ops.sum(ops.mul(out, Tensor(direction, dtype=np.float64)))


def check_instance(inst: Instance, rng, step: float = STEP) -> float:
    """Norm-relative error ``|g - g_fd| / max(|g|, |g_fd|)`` over all inputs of one instance."""
    with default_dtype("float64"):
        for t in inst.inputs:
            t.grad = None
        probe = inst.fn()
        direction = rng.normal(size=probe.shape) if probe.size > 1 else None
        with Tape() as tape:
            _, loss = _projected(inst, direction)
        tape.backward(loss)
        analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in inst.inputs]
        numeric = []
        for t in inst.inputs:
            g = np.zeros_like(t.data)
            flat, gflat = t.data.reshape(-1), g.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                up = _projected(inst, direction)[1].item()
                flat[i] = orig - step
                down = _projected(inst, direction)[1].item()
                flat[i] = orig
                gflat[i] = (up - down) / (2 * step)
            numeric.append(g)
    a = np.concatenate([g.reshape(-1) for g in analytic])
    n = np.concatenate([g.reshape(-1) for g in numeric])
    denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / denom)


def run(instances: int = 20, seed: int = 0, names=None, composite: bool = True) -> list[CheckResult]:
    results = []
    registry = {k: v for k, v in PRIMITIVES.items() if names is None or k in names}
    for name, build in registry.items():
        rng = np.random.default_rng([seed, len(results)])
        start = time.perf_counter()
        worst = max(check_instance(build(rng), rng) for _ in range(instances))
        results.append(CheckResult(name, instances, worst, PRIMITIVE_TOL, time.perf_counter() - start))
    if composite:
        rng = np.random.default_rng([seed, 9999])
        start = time.perf_counter()
        worst = max(check_instance(tiny_pair_instance(rng), rng) for _ in range(instances))
        results.append(CheckResult("pair_forward+losses", instances, worst, COMPOSITE_TOL,
                                   time.perf_counter() - start))
    return results


def format_table(results: list[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'operation':<{width}}  instances  max_rel_error  tolerance  status"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {r.instances:>9}  {r.max_rel_error:>13.3e}  {r.tolerance:>9.0e}  "
                     f"{'ok' if r.ok else 'FAIL'}")
    return "\n".join(lines)
