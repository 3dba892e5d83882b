"""Deterministic numeric substrate: grids, seeded PRNG, gradient checking.

All training math runs in 64-bit floats on plain numpy arrays.  Image-like
data ("grids") are C-contiguous float64 arrays of shape (H, W, C).  Random
numbers come from a fixed, documented PCG32 generator so that runs are
bit-reproducible across platforms; sub-streams are derived by hashing
(seed, label) and are therefore independent of call order.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DeterminismError, DimensionError

RNG_ALGORITHM_ID = "pcg32-xsh-rr-v1"

_PCG_MULT = 6364136223846793005
_MASK64 = (1 << 64) - 1


def as_grid(data, channels=None):
    """Validate and return an (H, W, C) float64 C-contiguous grid.

    Raises DimensionError if the array is not 3-d, has a channel mismatch,
    or contains non-finite values.
    """
    arr = np.ascontiguousarray(data, dtype=np.float64)
    if arr.ndim != 3:
        raise DimensionError(f"grid must be 3-d (H, W, C), got shape {arr.shape}")
    if channels is not None and arr.shape[2] != channels:
        raise DimensionError(
            f"grid expected {channels} channels, got {arr.shape[2]}"
        )
    if not np.all(np.isfinite(arr)):
        raise DimensionError("grid contains non-finite values")
    return arr


def check_finite(arr, what="array"):
    if not np.all(np.isfinite(arr)):
        raise DimensionError(f"{what} contains non-finite values")
    return arr


class Rng:
    """PCG32 (XSH-RR variant) with order-independent stream splitting.

    The generator state is a 64-bit LCG; output is a 32-bit xorshift-rotate
    of the old state.  ``split(label)`` derives a child generator whose seed
    and stream come from BLAKE2b(seed, label), so the set of sub-streams a
    run uses does not depend on the order in which they are requested.
    """

    __slots__ = ("seed", "state", "inc")

    def __init__(self, seed, stream=0):
        self.seed = int(seed) & _MASK64
        self.inc = ((int(stream) << 1) | 1) & _MASK64
        self.state = 0
        self.next_u32()
        self.state = (self.state + self.seed) & _MASK64
        self.next_u32()

    def next_u32(self):
        old = self.state
        self.state = (old * _PCG_MULT + self.inc) & _MASK64
        xorshifted = (((old >> 18) ^ old) >> 27) & 0xFFFFFFFF
        rot = old >> 59
        return ((xorshifted >> rot) | (xorshifted << ((-rot) & 31))) & 0xFFFFFFFF

    def split(self, label):
        """Child generator keyed by (seed, label); independent of call order."""
        h = hashlib.blake2b(digest_size=16)
        h.update(self.seed.to_bytes(8, "little"))
        h.update(str(label).encode("utf-8"))
        digest = h.digest()
        child_seed = int.from_bytes(digest[:8], "little")
        child_stream = int.from_bytes(digest[8:], "little") >> 1
        return Rng(child_seed, stream=child_stream)

    def uniform(self):
        """Uniform double in [0, 1)."""
        return self.next_u32() * 2.0**-32

    def uniforms(self, n):
        out = np.empty(n, dtype=np.float64)
        nxt = self.next_u32
        for i in range(n):
            out[i] = nxt() * 2.0**-32
        return out

    def normals(self, n):
        """n standard normals via Box-Muller on the PCG32 stream."""
        pairs = (n + 1) // 2
        u = np.empty(2 * pairs, dtype=np.float64)
        nxt = self.next_u32
        for i in range(2 * pairs):
            # shift into (0, 1] so log() is safe
            u[i] = (nxt() + 1.0) * 2.0**-32
        r = np.sqrt(-2.0 * np.log(u[:pairs]))
        theta = 2.0 * np.pi * u[pairs:]
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])
        return z[:n]

    def randint(self, bound):
        """Unbiased integer in [0, bound) via rejection sampling."""
        if bound <= 0:
            raise DimensionError("randint bound must be positive")
        threshold = (1 << 32) % bound
        while True:
            r = self.next_u32()
            if r >= threshold:
                return r % bound

    def shuffle(self, items):
        """Fisher-Yates shuffle of a list, in place."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(i + 1)
            items[i], items[j] = items[j], items[i]
        return items

    def choice_without_replacement(self, n, k):
        """k distinct indices from range(n), order deterministic."""
        if k >= n:
            return list(range(n))
        idx = list(range(n))
        self.shuffle(idx)
        return sorted(idx[:k])

    def state_tuple(self):
        return (self.state, self.inc, self.seed)

    @classmethod
    def from_state(cls, state, inc, seed):
        rng = cls.__new__(cls)
        rng.state = int(state) & _MASK64
        rng.inc = int(inc) & _MASK64
        rng.seed = int(seed) & _MASK64
        return rng


@dataclass
class GradSlot:
    """A scalar loss value plus gradients keyed by parameter-block name."""

    value: float
    grads: dict = field(default_factory=dict)

    def check(self, shapes=None):
        if not math.isfinite(self.value):
            raise DimensionError("loss value is not finite")
        for name, g in self.grads.items():
            check_finite(g, f"gradient '{name}'")
            if shapes is not None and name in shapes and g.shape != shapes[name]:
                raise DimensionError(
                    f"gradient '{name}' shape {g.shape} != block shape {shapes[name]}"
                )
        return self


def euclidean(a, b):
    """L2 distance between two equal-length vectors."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"length mismatch: {a.shape} vs {b.shape}")
    return float(np.sqrt(np.sum((a - b) ** 2)))


def softmax(logits, axis=-1):
    """Numerically stable softmax (max-subtracted) along ``axis``."""
    z = np.asarray(logits, dtype=np.float64)
    if z.size == 0:
        raise DimensionError("softmax of empty input")
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(logits, axis=-1):
    z = np.asarray(logits, dtype=np.float64)
    if z.size == 0:
        raise DimensionError("log_softmax of empty input")
    z = z - np.max(z, axis=axis, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


def relative_error(analytic, fd):
    """Symmetric relative error with a floor to avoid blowup at zero."""
    return abs(analytic - fd) / max(1e-12, abs(analytic) + abs(fd))


def finite_diff_check(loss, params, epsilon=1e-6):
    """Max relative error between analytic and central-difference gradients.

    ``loss`` maps a dict of parameter blocks to a GradSlot whose grads cover
    every block in ``params``.  Each coordinate of each block is perturbed by
    +/- epsilon; the central difference is compared against the analytic
    gradient with a symmetric relative-error formula.

    Raises DeterminismError if two evaluations at the same point disagree.
    """
    if not (1e-8 <= epsilon <= 1e-4):
        raise DimensionError(f"epsilon {epsilon} outside [1e-8, 1e-4]")
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    first = loss(base)
    second = loss(base)
    if first.value != second.value:
        raise DeterminismError(
            f"loss is not deterministic: {first.value!r} != {second.value!r}"
        )
    max_err = 0.0
    for name, block in base.items():
        analytic = np.asarray(first.grads[name], dtype=np.float64)
        if analytic.shape != block.shape:
            raise DimensionError(
                f"gradient '{name}' shape {analytic.shape} != {block.shape}"
            )
        flat = block.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            plus = loss(base).value
            flat[i] = orig - epsilon
            minus = loss(base).value
            flat[i] = orig
            fd = (plus - minus) / (2.0 * epsilon)
            err = relative_error(analytic.reshape(-1)[i], fd)
            if err > max_err:
                max_err = err
    return max_err
