"""Attention primitives: masks, positional tables, self- and mixture attention."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any

import numpy as np

from . import numkit as nk
from .numkit import ShapeError

MASK_SENTINEL = -1e9


@dataclass(frozen=True)
class MaskSpec:
    n_vision: int
    n_language: int
    kind: str  # "causal-concat" | "part-causal"
    values: np.ndarray
    sentinel: float = MASK_SENTINEL

    @property
    def visible(self) -> np.ndarray:
        return self.values == 0.0


def build_part_causal_mask(n_vision: int, n_language: int, sentinel: float = MASK_SENTINEL) -> MaskSpec:
    """M x (N+M) additive mask: every language query sees all vision keys
    and the language keys at or before its own position."""
    if n_language < 1:
        raise ValueError("part-causal mask needs at least one language token")
    if n_vision < 0:
        raise ValueError("n_vision must be non-negative")
    i = np.arange(n_language)[:, None]
    j = np.arange(n_language)[None, :]
    lang = np.where(j <= i, 0.0, sentinel)
    vis = np.zeros((n_language, n_vision))
    return MaskSpec(n_vision, n_language, "part-causal", np.concatenate([vis, lang], axis=1), sentinel)


def build_causal_mask(total_len: int, n_vision: int = 0, sentinel: float = MASK_SENTINEL) -> MaskSpec:
    if total_len < 1:
        raise ValueError("causal mask needs a positive length")
    p = np.arange(total_len)[:, None]
    q = np.arange(total_len)[None, :]
    values = np.where(q <= p, 0.0, sentinel)
    return MaskSpec(n_vision, total_len - n_vision, "causal-concat", values, sentinel)


# --- positional embeddings ----------------------------------------------------

@dataclass(frozen=True)
class PETable:
    """Positional information for one run of positions.

    ``kind="additive"``: ``entries`` is (len, d) and is added to Q and K.
    ``kind="rotary"``: ``entries`` stacks (cos, sin), each (len, d_head), and
    rotates Q and K per head.
    """

    kind: str
    entries: np.ndarray
    positions: np.ndarray

    def __len__(self):
        return len(self.positions)


def sinusoidal_pe(positions, dim: int) -> PETable:
    """Interleaved sin/cos table: even columns sin, odd columns cos."""
    if dim % 2:
        raise ValueError(f"sinusoidal embedding needs an even dim, got {dim}")
    pos = np.asarray(positions, dtype=np.float64)
    freqs = 1.0 / 10000.0 ** (np.arange(0, dim, 2, dtype=np.float64) / dim)
    angles = pos[:, None] * freqs[None, :]
    table = np.empty((len(pos), dim))
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles)
    return PETable("additive", table, np.asarray(positions))


def rotary_pe(positions, head_dim: int, base: float = 10000.0) -> PETable:
    if head_dim % 2:
        raise ValueError(f"rotary embedding needs an even head dim, got {head_dim}")
    pos = np.asarray(positions, dtype=np.float64)
    inv = 1.0 / base ** (np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    ang = np.repeat(pos[:, None] * inv[None, :], 2, axis=1)
    return PETable("rotary", np.stack([np.cos(ang), np.sin(ang)]), np.asarray(positions))


def _rotate_pairs_matrix(head_dim: int) -> np.ndarray:
    # x @ R maps (x0, x1, ...) -> (-x1, x0, ...)
    r = np.zeros((head_dim, head_dim))
    for k in range(0, head_dim, 2):
        r[k + 1, k] = -1.0
        r[k, k + 1] = 1.0
    return r


def make_pe(scheme: str, positions, d_model: int, n_heads: int) -> PETable | None:
    if scheme == "none":
        return None
    if scheme == "sinusoidal":
        return sinusoidal_pe(positions, d_model)
    if scheme == "rotary":
        return rotary_pe(positions, d_model // n_heads)
    raise ValueError(f"unknown positional scheme {scheme!r}")


# --- attention core ------------------------------------------------------------

def _check_width(w, rows: int, what: str):
    if nk._shape(w)[0] != rows:
        raise ShapeError(f"{what}: weight {nk._shape(w)} does not accept width {rows}")


def _attend(q, k, v, mask_values: np.ndarray, n_heads: int, pe: PETable | None, pe_rows: int):
    """Multi-head ``Softmax(Q K^T / sqrt(d_head) + mask) V``.

    ``pe`` applies to the query rows and to the last ``pe_rows`` key rows.
    Keys before those rows are left untouched.
    """
    d = nk._shape(q)[-1]
    if d % n_heads:
        raise ShapeError(f"{n_heads} heads do not divide d_model={d}")
    d_head = d // n_heads
    dtype = np.result_type(nk.value_of(q))
    if pe is not None:
        pe = PETable(pe.kind, pe.entries.astype(dtype, copy=False), pe.positions)
    if pe is not None and pe.kind == "additive":
        q = nk.add(q, pe.entries)
        k = _add_to_tail(k, pe.entries, pe_rows)
    qh, kh, vh = (nk.split_heads(t, n_heads) for t in (q, k, v))
    if pe is not None and pe.kind == "rotary":
        qh = _rotate(qh, pe)
        kh = _rotate_tail(kh, pe, pe_rows)
    scores = nk.scale(nk.matmul(qh, nk.transpose(kh)), 1.0 / math.sqrt(d_head))
    weights = nk.softmax_rows(nk.add(scores, mask_values.astype(dtype, copy=False)))
    return nk.merge_heads(nk.matmul(weights, vh))


def _add_to_tail(k, table, rows):
    n = nk._shape(k)[-2]
    if rows == n:
        return nk.add(k, table)
    return nk.concat_rows([nk.take_rows(k, 0, n - rows), nk.add(nk.take_rows(k, n - rows), table)])


def _rotate(x, pe: PETable):
    cos, sin = pe.entries
    rot = _rotate_pairs_matrix(cos.shape[-1]).astype(cos.dtype)
    return nk.add(nk.mul(x, cos), nk.mul(nk.matmul(x, rot), sin))


def _rotate_tail(x, pe, rows):
    n = nk._shape(x)[-2]
    if rows == n:
        return _rotate(x, pe)
    return nk.concat_rows([nk.take_rows(x, 0, n - rows), _rotate(nk.take_rows(x, n - rows), pe)])


def self_attention(x, wq, wk, wv, wo, mask: MaskSpec, n_heads: int = 1, pe: PETable | None = None):
    """Masked multi-head self-attention over the rows of ``x``.

    ``wo`` may be ``None`` to skip the output projection. ``pe`` must cover
    every row of ``x``.
    """
    rows, d = nk._shape(x)[-2:]
    if mask.values.shape != (rows, rows):
        raise ShapeError(f"mask {mask.values.shape} does not match {rows} rows")
    for w, name in ((wq, "w_q"), (wk, "w_k"), (wv, "w_v")):
        _check_width(w, d, name)
    out = _attend(nk.matmul(x, wq), nk.matmul(x, wk), nk.matmul(x, wv), mask.values, n_heads, pe, rows)
    return out if wo is None else nk.matmul(out, wo)


@dataclass
class LayerWeights:
    """One decoder layer's parameters. Entries are arrays or tape variables."""

    w_q: Any
    w_k: Any
    w_v: Any
    w_o: Any
    w_ffn1: Any
    w_ffn2: Any
    w_vk: Any = None
    w_vv: Any = None
    connector: tuple | None = None
    norm_attn: Any = None
    norm_ffn: Any = None


def mixture_attention(x_v, x_l, weights: LayerWeights, mask: MaskSpec, n_heads: int = 1, pe: PETable | None = None):
    """Language-only queries over keys/values drawn from both modalities.

    Vision keys/values come from ``w_vk``/``w_vv`` when present, otherwise
    from the language ``w_k``/``w_v`` (the shared-projection variants). The
    positional table touches Q_l and K_l only. Output has the rows of ``x_l``.
    """
    n, m = nk._shape(x_v)[-2], nk._shape(x_l)[-2]
    if mask.n_vision != n or mask.n_language != m or mask.values.shape != (m, n + m):
        raise ShapeError(
            f"mask for (N={mask.n_vision}, M={mask.n_language}) used with N={n}, M={m}"
        )
    wvk = weights.w_vk if weights.w_vk is not None else weights.w_k
    wvv = weights.w_vv if weights.w_vv is not None else weights.w_v
    _check_width(wvk, nk._shape(x_v)[-1], "vision key projection")
    _check_width(weights.w_q, nk._shape(x_l)[-1], "w_q")
    k_v = nk.matmul(x_v, wvk)
    v_v = nk.matmul(x_v, wvv)
    q_l = nk.matmul(x_l, weights.w_q)
    k_l = nk.matmul(x_l, weights.w_k)
    v_l = nk.matmul(x_l, weights.w_v)
    k_vl = nk.concat_rows([k_v, k_l])
    v_vl = nk.concat_rows([v_v, v_l])
    out = _attend(q_l, k_vl, v_vl, mask.values, n_heads, pe, m)
    return out if weights.w_o is None else nk.matmul(out, weights.w_o)
