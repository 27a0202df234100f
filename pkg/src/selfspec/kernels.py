"""Dense kernels shared by the target model, the draft adapter, and training.

Greedy losslessness is checked at zero tolerance, so every kernel here is
*batch-shape stable*: the bits of an output row depend only on that row's
inputs, never on how many rows were computed in the same call.  Concretely:

- matrix products go through ``np.einsum`` on C-contiguous operands (BLAS
  GEMM changes accumulation order with the batch shape; einsum does not),
- reductions (softmax, rmsnorm) run along the last axis, which numpy
  evaluates independently per row,
- cached causal attention loops over query rows, so a batched call replays
  the exact instruction sequence of one-token-at-a-time calls.

This makes a batched verification forward bit-identical to incremental
decoding over the same prefix, which is what the acceptance suite relies on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CacheError, CapacityError, ConfigError, ShapeError


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with a fixed, shape-independent accumulation order."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.ndim}-D and {b.ndim}-D")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    if not a.flags["C_CONTIGUOUS"]:
        a = np.ascontiguousarray(a)
    if not b.flags["C_CONTIGUOUS"]:
        b = np.ascontiguousarray(b)
    return np.einsum("ij,jk->ik", a, b)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax (max-subtracted) along ``axis``."""
    x = np.asarray(x)
    if x.size == 0:
        raise ShapeError("softmax of an empty array")
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def argmax_token(logits: np.ndarray) -> int:
    """Index of the maximum logit; ties break to the lowest index."""
    logits = np.asarray(logits)
    if logits.ndim != 1 or logits.size == 0:
        raise ShapeError("argmax_token expects a non-empty 1-D vector")
    return int(np.argmax(logits))


def rmsnorm(x: np.ndarray, scale: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """RMS normalization: ``scale * x / sqrt(mean(x**2) + eps)`` per row."""
    x = np.asarray(x)
    scale = np.asarray(scale)
    if x.shape[-1] != scale.shape[-1] or scale.ndim != 1:
        raise ShapeError(f"rmsnorm scale {scale.shape} does not match input {x.shape}")
    d = x.dtype.type(x.shape[-1])
    if x.ndim == 1:
        ms = np.einsum("i,i->", x, x) / d
    else:
        ms = (np.einsum("...ij,...ij->...i", x, x) / d)[..., None]
    return scale * (x / np.sqrt(ms + x.dtype.type(eps)))


def silu(x: np.ndarray) -> np.ndarray:
    """x * sigmoid(x) via tanh, overflow-free for large |x|."""
    half = x.dtype.type(0.5)
    return x * (half * np.tanh(half * x) + half)


class RopeTable:
    """Precomputed rotary-embedding angles for positions ``0..max_len-1``.

    Pairs are adjacent lanes ``(2i, 2i+1)`` rotated by
    ``position * theta**(-2i/head_dim)``.  Angles are evaluated in float64
    once and cast, so every forward path sees identical rotation constants.
    Adjacent pairs map exactly onto complex lanes, so the rotation is one
    elementwise complex multiply (deterministic per element).
    """

    def __init__(self, head_dim: int, theta: float, max_len: int, dtype=np.float32):
        if head_dim % 2 != 0:
            raise ConfigError(f"rope requires an even head_dim, got {head_dim}")
        self.head_dim = head_dim
        self.theta = float(theta)
        self.max_len = max_len
        pair = np.arange(head_dim // 2, dtype=np.float64)
        inv_freq = self.theta ** (-2.0 * pair / head_dim)
        angles = np.arange(max_len, dtype=np.float64)[:, None] * inv_freq[None, :]
        self.cos = np.cos(angles).astype(dtype)
        self.sin = np.sin(angles).astype(dtype)
        cdtype = np.complex128 if np.dtype(dtype) == np.float64 else np.complex64
        self._cis = (self.cos + 1j * self.sin).astype(cdtype)
        self._cis_conj = np.conj(self._cis)
        self._real = np.dtype(dtype)

    def _rotate(self, x: np.ndarray, position: int, table: np.ndarray) -> np.ndarray:
        if x.shape[-1] != self.head_dim:
            raise ShapeError(f"rope head_dim mismatch: {x.shape[-1]} != {self.head_dim}")
        if not 0 <= position < self.max_len:
            raise CapacityError(f"rope position {position} outside 0..{self.max_len - 1}")
        if not x.flags["C_CONTIGUOUS"]:
            x = np.ascontiguousarray(x)
        rotated = x.view(table.dtype) * table[position]
        return rotated.view(self._real)

    def apply(self, x: np.ndarray, position: int) -> np.ndarray:
        """Rotate per-head vectors ``x`` of shape (..., head_dim) at one position."""
        return self._rotate(x, position, self._cis)

    def apply_inverse(self, x: np.ndarray, position: int) -> np.ndarray:
        """Inverse rotation (transpose of the orthogonal pair rotations)."""
        return self._rotate(x, position, self._cis_conj)

    def apply_block(self, x: np.ndarray, start: int) -> np.ndarray:
        """Rotate rows of ``x`` (T, heads, head_dim) at positions ``start..start+T-1``.

        Elementwise-identical to applying ``apply`` row by row.
        """
        t = x.shape[0]
        if x.shape[-1] != self.head_dim:
            raise ShapeError(f"rope head_dim mismatch: {x.shape[-1]} != {self.head_dim}")
        if not (0 <= start and start + t <= self.max_len):
            raise CapacityError(
                f"rope positions {start}..{start + t - 1} outside 0..{self.max_len - 1}"
            )
        if not x.flags["C_CONTIGUOUS"]:
            x = np.ascontiguousarray(x)
        rotated = x.view(self._cis.dtype) * self._cis[start : start + t, None, :]
        return rotated.view(self._real)


def rope(x: np.ndarray, position: int, theta: float) -> np.ndarray:
    """One-off rotary embedding of per-head vectors at ``position``."""
    table = RopeTable(x.shape[-1], theta, position + 1, dtype=x.dtype)
    return table.apply(x, position)


@dataclass
class AttentionParams:
    """Square projection weights of one multi-head attention block."""

    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    n_heads: int
    head_dim: int

    def __post_init__(self) -> None:
        d = self.n_heads * self.head_dim
        for name in ("wq", "wk", "wv", "wo"):
            w = getattr(self, name)
            if w.shape != (d, d):
                raise ShapeError(f"attention weight {name} must be {d}x{d}, got {w.shape}")


class LayerKVCache:
    """Per-layer key/value store with O(1) append and truncate.

    Buffers are preallocated at ``capacity`` rows; ``length`` marks how many
    positions are filled.  Truncation only moves the length marker, which is
    exactly the rollback semantics verification needs.
    """

    def __init__(self, capacity: int, n_heads: int, head_dim: int, dtype=np.float32):
        self.capacity = capacity
        self.k = np.empty((capacity, n_heads, head_dim), dtype=dtype)
        self.v = np.empty((capacity, n_heads, head_dim), dtype=dtype)
        self.length = 0

    def append(self, k_row: np.ndarray, v_row: np.ndarray) -> None:
        if self.length >= self.capacity:
            raise CapacityError(f"KV cache full at {self.capacity} positions")
        self.k[self.length] = k_row
        self.v[self.length] = v_row
        self.length += 1

    def extend(self, k_rows: np.ndarray, v_rows: np.ndarray) -> None:
        t = k_rows.shape[0]
        if self.length + t > self.capacity:
            raise CapacityError(f"KV cache full at {self.capacity} positions")
        self.k[self.length : self.length + t] = k_rows
        self.v[self.length : self.length + t] = v_rows
        self.length += t

    def truncate(self, to_length: int) -> None:
        if not 0 <= to_length <= self.length:
            raise CacheError(f"cannot truncate cache of length {self.length} to {to_length}")
        self.length = to_length


def causal_attention(
    params: AttentionParams,
    x: np.ndarray,
    cache: LayerKVCache,
    start_pos: int,
    rope_table: RopeTable,
) -> np.ndarray:
    """Cache-appending causal multi-head attention.

    ``x`` holds already-normalized inputs for positions
    ``start_pos..start_pos+T-1``; the call appends T K/V rows and returns the
    attention output (before any residual).  Row ``t`` attends to positions
    ``0..start_pos+t``.  The per-row loop keeps batched calls bit-identical
    to incremental ones.
    """
    if x.ndim != 2:
        raise ShapeError(f"attention input must be 2-D, got shape {x.shape}")
    if cache.length != start_pos:
        raise CacheError(f"cache length {cache.length} != start position {start_pos}")
    n_rows, d = x.shape
    h, hd = params.n_heads, params.head_dim
    if d != h * hd:
        raise ShapeError(f"attention input width {d} != n_heads*head_dim {h * hd}")

    # x is freshly normalized (contiguous) and the weights are contiguous, so
    # the einsum contraction below is the wrapped matmul minus its checks.
    q = rope_table.apply_block(np.einsum("ij,jk->ik", x, params.wq).reshape(n_rows, h, hd), start_pos)
    k = rope_table.apply_block(np.einsum("ij,jk->ik", x, params.wk).reshape(n_rows, h, hd), start_pos)
    v = np.einsum("ij,jk->ik", x, params.wv).reshape(n_rows, h, hd)
    cache.extend(k, v)
    keys = cache.k[: cache.length]
    values = cache.v[: cache.length]

    # The score rectangle batches per-element dot products; each query row's
    # softmax and context reduce over exactly its own prefix so that the
    # result matches one-token-at-a-time calls bit for bit.
    scores = np.einsum("thd,phd->thp", q, keys) * x.dtype.type(1.0 / np.sqrt(hd))
    ctx = np.empty((n_rows, d), dtype=x.dtype)
    for t in range(n_rows):
        visible = scores[t, :, : start_pos + t + 1]
        visible -= visible.max(axis=-1, keepdims=True)
        np.exp(visible, out=visible)
        visible /= visible.sum(axis=-1, keepdims=True)
        ctx[t] = np.einsum("hp,phd->hd", visible, values[: start_pos + t + 1]).reshape(d)
    return np.einsum("ij,jk->ik", ctx, params.wo)


def gated_ffn(
    x: np.ndarray, gate: np.ndarray, up: np.ndarray, down: np.ndarray
) -> np.ndarray:
    """SwiGLU feed-forward: ``down(silu(x @ gate) * (x @ up))``."""
    hidden = silu(np.einsum("ij,jk->ik", x, gate)) * np.einsum("ij,jk->ik", x, up)
    return np.einsum("ij,jk->ik", hidden, down)
