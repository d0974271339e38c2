"""Efficient channel attention and the pairwise comparison-cue head."""

from __future__ import annotations

import math

import numpy as np

from pcnet import ops
from pcnet.ops import ConfigurationError
from pcnet.tensor import DimensionError, Tensor, parameter


INITS = ("zero", "uniform")


def _check_init(init: str) -> None:
    if init not in INITS:
        raise ConfigurationError(f"attention init must be one of {INITS}, got {init!r}")


class EcaModule:
    """GAP -> k-tap channel convolution -> sigmoid -> channel-wise rescale.

    ``init="zero"`` starts from the neutral gate ``a = 0.5`` on every channel;
    ``init="uniform"`` draws the kernel from ``U(-1/sqrt(k), 1/sqrt(k))``.
    """

    def __init__(self, channels: int, k: int = 5, rng: np.random.Generator | None = None, dtype=None,
                 init: str = "zero"):
        if k % 2 == 0 or k < 1:
            raise ConfigurationError(f"ECA kernel size must be odd, got {k}")
        _check_init(init)
        self.channels = channels
        self.k = k
        bound = 1.0 / math.sqrt(k)
        if init == "uniform" and rng is not None:
            kernel = rng.uniform(-bound, bound, size=k)
        else:
            kernel = np.zeros(k)
        self.kernel = parameter(kernel, dtype=dtype)

    def weights(self, f: Tensor) -> Tensor:
        """Per-image channel weights ``a`` in (0, 1), shape ``[B, C]``."""
        if f.ndim != 4 or f.shape[1] != self.channels:
            raise DimensionError(f"ECA configured for {self.channels} channels, got input {f.shape}")
        return ops.sigmoid(ops.conv1d_channels(ops.global_average_pool(f), self.kernel))

    def parameters(self) -> dict[str, Tensor]:
        return {"kernel": self.kernel}


def eca_apply(m: EcaModule, f: Tensor) -> Tensor:
    return ops.channel_scale(f, m.weights(f))


class MutualHead:
    """Maps a feature pair to the comparison cue ``a_mut`` in (0, 1)^C.

    ``attention="eca"`` runs ECA over the 2C-channel concatenation before the
    reducing FC layer; ``attention="fc"`` feeds the raw concatenation to it.
    """

    def __init__(self, channels: int, k: int = 5, attention: str = "eca",
                 rng: np.random.Generator | None = None, dtype=None, init: str = "zero"):
        if attention not in ("eca", "fc"):
            raise ConfigurationError(f"mutual attention must be 'eca' or 'fc', got {attention!r}")
        _check_init(init)
        self.channels = channels
        self.attention = attention
        self.eca2c = EcaModule(2 * channels, k, rng=rng, dtype=dtype, init=init)
        bound = 1.0 / math.sqrt(2 * channels)
        if init == "uniform" and rng is not None:
            w = rng.uniform(-bound, bound, size=(channels, 2 * channels))
        else:
            w = np.zeros((channels, 2 * channels))
        self.reduce_W = parameter(w, dtype=dtype)
        self.reduce_b = parameter(np.zeros(channels), dtype=dtype)

    def concat_features(self, f1: Tensor, f2: Tensor) -> Tensor:
        """The connected feature map ``f_cat`` of shape ``[B, 2C, H, W]``."""
        if f1.shape != f2.shape:
            raise DimensionError(f"mutual_cue: pair shapes differ {f1.shape} vs {f2.shape}")
        cat = ops.concat_channels(f1, f2)
        return eca_apply(self.eca2c, cat) if self.attention == "eca" else cat

    def parameters(self) -> dict[str, Tensor]:
        params = {"reduce_W": self.reduce_W, "reduce_b": self.reduce_b}
        if self.attention == "eca":
            params["eca2c.kernel"] = self.eca2c.kernel
        return params


def mutual_cue(h: MutualHead, f1: Tensor, f2: Tensor) -> Tensor:
    f_cat = h.concat_features(f1, f2)
    return ops.sigmoid(ops.affine(ops.global_average_pool(f_cat), h.reduce_W, h.reduce_b))


def mutual_representations(a_mut: Tensor, F1: Tensor, F2: Tensor) -> tuple[Tensor, Tensor]:
    """Apply the shared cue to both pooled features."""
    return ops.mul(F1, a_mut), ops.mul(F2, a_mut)
