"""Float32 tensor helpers and deterministic reduction primitives.

Activation math in this package runs in 32-bit floats. Every reduction that
feeds a softmax denominator goes through the same fixed pairwise tree over
ascending index, so identical inputs always produce bit-identical sums no
matter how the surrounding work is scheduled.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ShapeError

__all__ = [
    "tensor",
    "stable_softmax",
    "block_sum_reduce",
    "block_sum_reduce_rows",
    "dot",
]


def tensor(data, shape=None) -> np.ndarray:
    """Build a C-contiguous float32 array, optionally reshaped to ``shape``.

    Raises ShapeError when ``shape`` does not match the element count or has
    a dimension smaller than one.
    """
    arr = np.ascontiguousarray(data, dtype=np.float32)
    if shape is not None:
        dims = tuple(int(s) for s in shape)
        if any(s < 1 for s in dims):
            raise ShapeError(f"all dimensions must be >= 1, got {dims}")
        if math.prod(dims) != arr.size:
            raise ShapeError(
                f"shape {dims} needs {math.prod(dims)} elements, data has {arr.size}"
            )
        arr = arr.reshape(dims)
    elif 0 in arr.shape:
        raise ShapeError(f"empty dimension in data of shape {arr.shape}")
    return arr


def block_sum_reduce(partials) -> np.float32:
    """Sum float32 values with a fixed sequential pairwise tree.

    Each round adds adjacent pairs (an odd tail element is carried to the
    next round unchanged), so the result depends only on the input order.
    Repeated calls on the same data are bit-identical.
    """
    buf = np.array(partials, dtype=np.float32).ravel()
    if buf.size == 0:
        raise ValueError("cannot reduce an empty array")
    n = buf.size
    while n > 1:
        half = n // 2
        folded = buf[0 : 2 * half : 2] + buf[1 : 2 * half : 2]
        if n % 2:
            buf[half] = buf[n - 1]
            n = half + 1
        else:
            n = half
        buf[:half] = folded
    return np.float32(buf[0])


def block_sum_reduce_rows(partials) -> np.ndarray:
    """Per-row pairwise-tree sums of a 2D float32 array.

    Runs the exact reduction of block_sum_reduce on every row at once;
    row i of the result is bit-identical to block_sum_reduce(partials[i]).
    """
    buf = np.array(partials, dtype=np.float32)
    if buf.ndim != 2 or buf.shape[1] == 0:
        raise ValueError("expected a 2D array with at least one column")
    n = buf.shape[1]
    while n > 1:
        half = n // 2
        folded = buf[:, 0 : 2 * half : 2] + buf[:, 1 : 2 * half : 2]
        if n % 2:
            buf[:, half] = buf[:, n - 1]
            n = half + 1
        else:
            n = half
        buf[:, :half] = folded
    return buf[:, 0].copy()


def stable_softmax(scores) -> np.ndarray:
    """Max-subtracted softmax over a flat vector of scores.

    Subtracting the running maximum keeps exp() in [0, 1] so large scores
    cannot overflow, and leaves the result invariant under a constant shift
    of the input. The denominator uses block_sum_reduce, making the output
    deterministic. Ties in the input stay ties in the output, so a greedy
    argmax downstream still picks the lowest index.
    """
    s = np.asarray(scores, dtype=np.float32).ravel()
    if s.size == 0:
        raise ValueError("softmax needs at least one score")
    if not np.all(np.isfinite(s)):
        raise ValueError("softmax scores must be finite")
    e = np.exp(s - s.max(), dtype=np.float32)
    return e / block_sum_reduce(e)


def dot(a, b) -> np.float32:
    """Inner product of two equal-length vectors.

    Accumulates through the same fixed pairwise tree as block_sum_reduce so
    the result is independent of any BLAS build or thread count.
    """
    av = np.asarray(a, dtype=np.float32).ravel()
    bv = np.asarray(b, dtype=np.float32).ravel()
    if av.size != bv.size:
        raise ShapeError(f"length mismatch: {av.size} vs {bv.size}")
    if av.size == 0:
        raise ValueError("dot of empty vectors is undefined")
    return block_sum_reduce(av * bv)
