"""Attention primitives shared by the vanilla, MART and Transformer-XL stacks.

Masks are boolean arrays, ``True`` = attendable. Scores at masked positions get
``MASK_FILL`` added before the softmax instead of ``-inf`` so float32 never sees
``inf - inf``. Batched inputs carry a leading batch axis: ``(B, T, d)`` with
masks ``(B, T_q, T_k)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

MASK_FILL = -1e9


class MaskError(ValueError):
    pass


@dataclass
class MultiHeadParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    heads: int
    bq: Optional[Tensor] = None
    bk: Optional[Tensor] = None
    bv: Optional[Tensor] = None
    bo: Optional[Tensor] = None

    def __post_init__(self):
        d = self.wq.shape[0]
        if d % self.heads:
            raise ShapeError(f"hidden size {d} is not divisible by {self.heads} heads")

    @property
    def d(self) -> int:
        return self.wq.shape[0]


@dataclass
class RelativeAttentionParams:
    """Relative-position terms: a fixed offset table, its projection, and u/v biases.

    ``table[center + k]`` embeds the offset ``k = query_pos - key_pos``.
    """

    table: Tensor
    w_r: Tensor
    u: Tensor
    v: Tensor
    center: int

    @property
    def window(self) -> int:
        return self.table.shape[0]


def _linear(x: Tensor, w: Tensor, b: Optional[Tensor]) -> Tensor:
    return T.linear(x, w, b)


def _mask_bias(mask: np.ndarray, dtype) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=-1).all():
        raise MaskError("attention mask has a query row with no attendable key")
    return np.where(mask, 0.0, MASK_FILL).astype(dtype)


def scaled_dot_product_attention(q: Tensor, k: Tensor, v: Tensor, mask=None) -> Tensor:
    """softmax(q k^T / sqrt(d_k) + mask) v over the last two axes."""
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention shapes q={q.shape} k={k.shape} v={v.shape}")
    dk = q.shape[-1]
    scores = T.scale(T.matmul(q, T.transpose(k, _swap_last(k.ndim))), 1.0 / np.sqrt(dk))
    if mask is not None:
        scores = T.add_const(scores, _mask_bias(_expand_mask(mask, scores.ndim), scores.data.dtype))
    return T.matmul(T.softmax(scores), v)


def _swap_last(ndim: int) -> tuple[int, ...]:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


def _expand_mask(mask: np.ndarray, ndim: int) -> np.ndarray:
    # (B, Tq, Tk) -> (B, 1, Tq, Tk) when scores carry a head axis
    mask = np.asarray(mask, dtype=bool)
    if ndim == 4 and mask.ndim == 3:
        return mask[:, None]
    return mask


def _split_heads(x: Tensor, h: int) -> Tensor:
    *lead, t, d = x.shape
    y = T.reshape(x, (*lead, t, h, d // h))
    nd = y.ndim
    # (..., T, h, dk) -> (..., h, T, dk)
    axes = list(range(nd - 3)) + [nd - 2, nd - 3, nd - 1]
    return T.transpose(y, axes)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, t, dk = x.shape
    nd = x.ndim
    axes = list(range(nd - 3)) + [nd - 2, nd - 3, nd - 1]
    return T.reshape(T.transpose(x, axes), (*lead, t, h * dk))


def multi_head_attention(p: MultiHeadParams, q_in: Tensor, k_in: Tensor, v_in: Tensor, mask=None) -> Tensor:
    d = p.d
    for name, x in (("query", q_in), ("key", k_in), ("value", v_in)):
        if x.shape[-1] != d:
            raise ShapeError(f"{name} width {x.shape[-1]} != hidden size {d}")
    if k_in.shape[-2] != v_in.shape[-2]:
        raise ShapeError(f"key length {k_in.shape[-2]} != value length {v_in.shape[-2]}")
    q = _split_heads(_linear(q_in, p.wq, p.bq), p.heads)
    k = _split_heads(_linear(k_in, p.wk, p.bk), p.heads)
    v = _split_heads(_linear(v_in, p.wv, p.bv), p.heads)
    ctx = scaled_dot_product_attention(q, k, v, mask)
    return _linear(_merge_heads(ctx), p.wo, p.bo)


def build_unified_mask(t_video: int, t_text: int) -> np.ndarray:
    """Video rows see all video and no text; text row i sees all video and text <= i."""
    if t_video < 1 or t_text < 1:
        raise ValueError(f"unified mask needs positive lengths, got {t_video}, {t_text}")
    n = t_video + t_text
    mask = np.zeros((n, n), dtype=bool)
    mask[:, :t_video] = True
    mask[t_video:, t_video:] = np.tril(np.ones((t_text, t_text), dtype=bool))
    return mask


def causal_mask(t: int) -> np.ndarray:
    return np.tril(np.ones((t, t), dtype=bool))


def sinusoidal_positional_encoding(length: int, d: int, positions=None) -> np.ndarray:
    if d % 2:
        raise ValueError(f"positional encoding needs an even width, got {d}")
    pos = np.arange(length, dtype=np.float64) if positions is None else np.asarray(positions, dtype=np.float64)
    freq = 1.0 / (10000.0 ** (np.arange(0, d, 2, dtype=np.float64) / d))
    ang = pos[:, None] * freq[None, :]
    pe = np.empty((len(pos), d), dtype=np.float64)
    pe[:, 0::2] = np.sin(ang)
    pe[:, 1::2] = np.cos(ang)
    return pe


def relative_offsets(t_q: int, t_cache: int) -> np.ndarray:
    """``offset[i, j] = (t_cache + i) - j`` for queries in the current window and
    keys over ``[cache; current]``."""
    return (t_cache + np.arange(t_q))[:, None] - np.arange(t_cache + t_q)[None, :]


def relative_multi_head_attention(p: MultiHeadParams, rel: RelativeAttentionParams, q_in: Tensor,
                                  kv_in: Tensor, mask=None, offsets=None) -> Tensor:
    """Transformer-XL attention: score = (q+u).k + (q+v).(R[offset] W_r), scaled by 1/sqrt(d_k).

    ``kv_in`` is the ``[cache; current]`` concatenation; ``q_in`` is the current window.
    ``offsets`` (``(T_q, T_k)`` or per-example ``(B, T_q, T_k)``) defaults to the
    contiguous layout of :func:`relative_offsets`; batches with padding pass their own.
    """
    t_q, t_k = q_in.shape[-2], kv_in.shape[-2]
    t_cache = t_k - t_q
    if t_cache < 0:
        raise ShapeError(f"key/value window {t_k} shorter than query window {t_q}")
    offsets = relative_offsets(t_q, t_cache) if offsets is None else np.asarray(offsets)
    if offsets.shape[-2:] != (t_q, t_k):
        raise ShapeError(f"offsets {offsets.shape} do not match window ({t_q}, {t_k})")
    lo, hi = offsets.min(), offsets.max()
    if lo + rel.center < 0 or hi + rel.center >= rel.window:
        raise ShapeError(f"relative window {rel.window} cannot cover offsets [{lo}, {hi}]")
    h = p.heads
    dk = p.d // h
    q = _linear(q_in, p.wq, p.bq)
    k = _split_heads(_linear(kv_in, p.wk, p.bk), h)
    v = _split_heads(_linear(kv_in, p.wv, p.bv), h)
    qu = _split_heads(T.add(q, rel.u), h)
    qv = _split_heads(T.add(q, rel.v), h)
    # only the rows of the table the offsets actually touch
    rows = slice(lo + rel.center, hi + rel.center + 1)
    r = T.linear(T.index(rel.table, rows), rel.w_r)  # (K, d)
    r = _split_heads(r, h)  # (h, K, dk)
    content = T.matmul(qu, T.transpose(k, _swap_last(k.ndim)))
    r_t = T.transpose(r, (0, 2, 1))  # (h, dk, K)
    if qv.ndim == 4:
        r_t = T.broadcast_leading(r_t, (qv.shape[0],))
    idx = offsets - lo
    if idx.ndim == 3:
        idx = idx[:, None]  # broadcast over heads
    position = T.take_last(T.matmul(qv, r_t), idx)
    scores = T.scale(T.add(content, position), 1.0 / np.sqrt(dk))
    if mask is not None:
        scores = T.add_const(scores, _mask_bias(_expand_mask(mask, scores.ndim), scores.data.dtype))
    ctx = T.matmul(T.softmax(scores), v)
    return _linear(_merge_heads(ctx), p.wo, p.bo)
