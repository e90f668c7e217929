"""Windowed multi-head self-attention with cross-stream score guidance.

The feature map is cut into non-overlapping MxM token windows (optionally
cyclically shifted by M/2 with the standard cross-boundary mask) and each
window attends over itself with a learned relative positional bias. For the
paired optical/SAR layer, the SAR stream's pre-softmax score map refines the
optical one through a gated residual before the optical stream attends.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .engine import (ConfigError, Node, ShapeError, add, concat, gather_rows,
                     gelu, layer_norm, matmul, mul, reshape, roll, softmax,
                     sub, transpose)

MASK_NEG = -1e4  # -inf surrogate that survives float32 softmax


# ---------------------------------------------------------------------------
# window geometry


def _shift_mask(h: int, w: int, m: int, shift: int) -> np.ndarray:
    """Additive attention mask [nW, M^2, M^2] for a cyclic shift."""
    region = np.zeros((h, w), dtype=np.int64)
    cnt = 0
    spans = (slice(0, -m), slice(-m, -shift), slice(-shift, None))
    for hs in spans:
        for ws in spans:
            region[hs, ws] = cnt
            cnt += 1
    win = (region.reshape(h // m, m, w // m, m)
           .transpose(0, 2, 1, 3)
           .reshape(-1, m * m))
    diff = win[:, :, None] - win[:, None, :]
    return np.where(diff == 0, 0.0, MASK_NEG)


@dataclass(frozen=True)
class WindowGrid:
    """Partition geometry for an HxW map into MxM windows, shift in {0, M/2}."""

    m: int
    h: int
    w: int
    shift: int = 0

    def __post_init__(self):
        if self.h % self.m or self.w % self.m:
            raise ShapeError(f"feature size {self.h}x{self.w} not divisible by "
                             f"window {self.m}")
        if self.shift not in (0, self.m // 2):
            raise ConfigError(f"shift must be 0 or M/2, got {self.shift}")

    @property
    def n_windows(self) -> int:
        return (self.h // self.m) * (self.w // self.m)

    def mask(self, dtype=np.float32) -> np.ndarray | None:
        if self.shift == 0:
            return None
        return _shift_mask(self.h, self.w, self.m, self.shift).astype(dtype)


def window_partition(x: Node, grid: WindowGrid) -> Node:
    """[B,C,H,W] -> [B*nW, M^2, C], row-major windows and tokens."""
    b, c, h, w = x.shape
    if (h, w) != (grid.h, grid.w):
        raise ShapeError(f"input {h}x{w} does not match grid {grid.h}x{grid.w}")
    m = grid.m
    if grid.shift:
        x = roll(x, (-grid.shift, -grid.shift), axes=(2, 3))
    x = transpose(x, (0, 2, 3, 1))                      # B,H,W,C
    x = reshape(x, (b, h // m, m, w // m, m, c))
    x = transpose(x, (0, 1, 3, 2, 4, 5))                # B,nh,nw,M,M,C
    return reshape(x, (b * grid.n_windows, m * m, c))


def window_merge(tokens: Node, grid: WindowGrid, batch: int) -> Node:
    """Exact inverse of :func:`window_partition` (including un-shift)."""
    m = grid.m
    expect = (batch * grid.n_windows, m * m)
    if tokens.shape[:2] != expect:
        raise ShapeError(f"token shape {list(tokens.shape)} inconsistent with "
                         f"grid ({expect[0]} windows x {expect[1]} tokens)")
    c = tokens.shape[2]
    x = reshape(tokens, (batch, grid.h // m, grid.w // m, m, m, c))
    x = transpose(x, (0, 1, 3, 2, 4, 5))                # B,nh,M,nw,M,C
    x = reshape(x, (batch, grid.h, grid.w, c))
    x = transpose(x, (0, 3, 1, 2))                      # B,C,H,W
    if grid.shift:
        x = roll(x, (grid.shift, grid.shift), axes=(2, 3))
    return x


# ---------------------------------------------------------------------------
# relative positional bias


def relative_position_index(m: int) -> np.ndarray:
    """[M^2, M^2] lookup into the (2M-1)^2 relative-offset table."""
    coords = np.stack(np.meshgrid(np.arange(m), np.arange(m), indexing="ij"))
    flat = coords.reshape(2, -1)
    rel = flat[:, :, None] - flat[:, None, :]           # 2, M^2, M^2
    rel = rel.transpose(1, 2, 0) + (m - 1)
    return rel[..., 0] * (2 * m - 1) + rel[..., 1]


@dataclass
class RelPosBias:
    """Learnable per-head bias over relative token offsets inside a window."""

    table: Node                     # [(2M-1)^2, heads]
    index: np.ndarray               # [M^2, M^2]

    def matrix(self) -> Node:
        m2 = self.index.shape[0]
        heads = self.table.shape[1]
        flat = gather_rows(self.table, self.index.reshape(-1))
        bias = reshape(flat, (m2, m2, heads))
        return transpose(bias, (2, 0, 1))               # heads, M^2, M^2


# ---------------------------------------------------------------------------
# fused attention ops (memory-lean: softmax recomputed in backward)


def masked_attend(scores: Node, v: Node, mask: np.ndarray | None) -> Node:
    """Softmax(scores + mask) @ v.

    scores: [B*nW, heads, M^2, M^2], v: [B*nW, heads, M^2, d],
    mask: [nW, M^2, M^2] additive, broadcast over batch and heads.
    """
    sv, vv = scores.value, v.value
    if sv.shape[:3] != vv.shape[:3]:
        raise ShapeError(f"attend operands disagree: {list(sv.shape)} vs {list(vv.shape)}")
    bnw, heads, m2, _ = sv.shape

    def probs():
        z = sv
        if mask is not None:
            nw = mask.shape[0]
            z = z.reshape(bnw // nw, nw, heads, m2, m2) + mask[None, :, None]
            z = z.reshape(bnw, heads, m2, m2)
        z = z - z.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)

    p = probs()
    out = p @ vv

    def bw(g):
        p2 = probs()
        dp = g @ np.swapaxes(vv, -1, -2)
        s = (dp * p2).sum(axis=-1, keepdims=True)
        dscores = p2 * (dp - s)
        dv = np.swapaxes(p2, -1, -2) @ g
        return dscores, dv

    return Node(out, (scores, v), bw)


def attention_probs(scores: Node, mask: np.ndarray | None) -> Node:
    """Softmax(scores + mask); exposed for inspection, not used in training."""
    z = scores
    if mask is not None:
        bnw, heads, m2, _ = scores.shape
        nw = mask.shape[0]
        z = reshape(scores, (bnw // nw, nw, heads, m2, m2))
        z = add(z, Node(mask[None, :, None].astype(scores.dtype)))
        z = reshape(z, (bnw, heads, m2, m2))
    return softmax(z, axis=-1)


@dataclass
class AttentionMaps:
    """Pre-softmax score maps of the paired streams ([nW, heads, M^2, M^2])."""

    m_opt: Node
    m_sar: Node

    def m_res(self) -> Node:
        return sub(self.m_sar, self.m_opt)


def attention_refine(maps: AttentionMaps, gate_w: Node, gate_b: Node,
                     gate_axis: str = "heads") -> Node:
    """Gated transfer of SAR score structure into the optical score map.

    The residual (m_sar - m_opt) passes through a 1x1 head-mixing layer and a
    softmax over ``gate_axis`` ("heads" or "keys"); the resulting (0,1) gate
    scales the residual before it is added back onto m_opt. With a single
    head the heads-axis softmax saturates at 1, so the result is exactly
    m_sar; with m_sar == m_opt the result is exactly m_opt.
    """
    mo, ms = maps.m_opt, maps.m_sar
    if mo.shape != ms.shape:
        raise ShapeError(f"score maps disagree: {list(mo.shape)} vs {list(ms.shape)}")
    if gate_axis not in ("heads", "keys"):
        raise ConfigError(f"gate_axis must be 'heads' or 'keys', got {gate_axis!r}")
    axis = 1 if gate_axis == "heads" else 3
    wv, bv = gate_w.value, gate_b.value
    heads = mo.shape[1]
    if wv.shape != (heads, heads) or bv.shape != (heads,):
        raise ShapeError(f"gate params {list(wv.shape)}/{list(bv.shape)} vs heads {heads}")

    def gate_of(r):
        pre = np.einsum("hg,ngij->nhij", wv, r) + bv[None, :, None, None]
        pre = pre - pre.max(axis=axis, keepdims=True)
        e = np.exp(pre)
        return e / e.sum(axis=axis, keepdims=True)

    r = ms.value - mo.value
    p = gate_of(r)
    out = mo.value + r * p

    def bw(g):
        r2 = ms.value - mo.value
        p2 = gate_of(r2)
        dp = g * r2
        s = (dp * p2).sum(axis=axis, keepdims=True)
        dpre = p2 * (dp - s)
        dgw = np.einsum("nhij,ngij->hg", dpre, r2)
        dgb = dpre.sum(axis=(0, 2, 3))
        dr = g * p2 + np.einsum("hg,nhij->ngij", wv, dpre)
        return g - dr, dr, dgw, dgb

    return Node(out, (mo, ms, gate_w, gate_b), bw)


# ---------------------------------------------------------------------------
# attention layers


@dataclass
class AttentionParams:
    """Per-stream projections of one windowed attention layer."""

    wq: Node
    bq: Node
    wk: Node
    bk: Node
    wv: Node
    bv: Node
    wo: Node
    bo: Node
    heads: int


def _linear(x: Node, w: Node, b: Node) -> Node:
    return add(matmul(x, w), b)


def _split_heads(t: Node, heads: int) -> Node:
    nw, m2, c = t.shape
    t = reshape(t, (nw, m2, heads, c // heads))
    return transpose(t, (0, 2, 1, 3))                   # nW, heads, M^2, d


def _merge_heads(t: Node) -> Node:
    nw, heads, m2, d = t.shape
    t = transpose(t, (0, 2, 1, 3))
    return reshape(t, (nw, m2, heads * d))


def attention_scores(x: Node, p: AttentionParams, bias: RelPosBias) -> tuple[Node, Node]:
    """Return (pre-softmax scores [nW,heads,M^2,M^2], value heads [nW,heads,M^2,d])."""
    c = x.shape[-1]
    if c % p.heads:
        raise ConfigError(f"channels {c} not divisible by heads {p.heads}")
    d = c // p.heads
    q = _split_heads(_linear(x, p.wq, p.bq), p.heads)
    k = _split_heads(_linear(x, p.wk, p.bk), p.heads)
    v = _split_heads(_linear(x, p.wv, p.bv), p.heads)
    scores = matmul(q, transpose(k, (0, 1, 3, 2)))
    scores = mul(scores, Node(np.asarray(1.0 / math.sqrt(d), dtype=x.dtype)))
    scores = add(scores, reshape(bias.matrix(), (1, p.heads,) + tuple(bias.index.shape)))
    return scores, v


def window_attention(x: Node, p: AttentionParams, bias: RelPosBias,
                     mask: np.ndarray | None = None) -> tuple[Node, Node]:
    """Single-stream windowed attention.

    Returns the attended, output-projected tokens and the pre-softmax score
    map (the latter is what a paired stream may refine); the mask only
    enters at softmax time.
    """
    scores, v = attention_scores(x, p, bias)
    y = masked_attend(scores, v, mask)
    y = _linear(_merge_heads(y), p.wo, p.bo)
    return y, scores


# ---------------------------------------------------------------------------
# transformer layer (paired and single-stream)


@dataclass
class StlParams:
    """One stream of a windowed transformer layer (pre-norm, GELU MLP)."""

    ln1_g: Node
    ln1_b: Node
    attn: AttentionParams
    ln2_g: Node
    ln2_b: Node
    mlp_w1: Node
    mlp_b1: Node
    mlp_w2: Node
    mlp_b2: Node


@dataclass
class StlPairParams:
    opt: StlParams
    sar: StlParams
    bias: RelPosBias            # shared by both streams
    gate_w: Node | None         # absent when score guidance is disabled
    gate_b: Node | None
    gate_axis: str = "heads"


def _to_tokens(x: Node) -> Node:
    b, c, h, w = x.shape
    return reshape(transpose(x, (0, 2, 3, 1)), (b, h * w, c))


def _to_map(t: Node, h: int, w: int) -> Node:
    b, _, c = t.shape
    return transpose(reshape(t, (b, h, w, c)), (0, 3, 1, 2))


def _mlp(t: Node, p: StlParams) -> Node:
    h = gelu(_linear(t, p.mlp_w1, p.mlp_b1))
    return _linear(h, p.mlp_w2, p.mlp_b2)


def stl_pair_forward(x_opt: Node, x_sar: Node, p: StlPairParams,
                     grid: WindowGrid, refine: bool = True) -> tuple[Node, Node]:
    """Paired windowed transformer layer over [B,C,H,W] feature maps.

    Both streams run the standard pre-norm layer; the optical stream attends
    with its SAR-refined score map while the SAR stream only ever sees its
    own scores.
    """
    if x_opt.shape != x_sar.shape:
        raise ShapeError(f"stream shapes disagree: {list(x_opt.shape)} vs {list(x_sar.shape)}")
    b, c, h, w = x_opt.shape
    mask = grid.mask(dtype=x_opt.dtype)

    t_opt, t_sar = _to_tokens(x_opt), _to_tokens(x_sar)

    n_opt = layer_norm(t_opt, p.opt.ln1_g, p.opt.ln1_b)
    n_sar = layer_norm(t_sar, p.sar.ln1_g, p.sar.ln1_b)
    w_opt = window_partition(_to_map(n_opt, h, w), grid)
    w_sar = window_partition(_to_map(n_sar, h, w), grid)

    s_opt, v_opt = attention_scores(w_opt, p.opt.attn, p.bias)
    s_sar, v_sar = attention_scores(w_sar, p.sar.attn, p.bias)
    if refine:
        if p.gate_w is None:
            raise ConfigError("refinement requested but gate parameters absent")
        s_opt = attention_refine(AttentionMaps(s_opt, s_sar), p.gate_w, p.gate_b,
                                 p.gate_axis)

    def finish(scores, v, tokens, stream):
        y = masked_attend(scores, v, mask)
        y = _linear(_merge_heads(y), stream.attn.wo, stream.attn.bo)
        y = _to_tokens(window_merge(y, grid, b))
        tokens = add(tokens, y)
        branch = _mlp(layer_norm(tokens, stream.ln2_g, stream.ln2_b), stream)
        return add(tokens, branch)

    t_opt = finish(s_opt, v_opt, t_opt, p.opt)
    t_sar = finish(s_sar, v_sar, t_sar, p.sar)
    return _to_map(t_opt, h, w), _to_map(t_sar, h, w)


def stl_forward(x: Node, p: StlParams, bias: RelPosBias, grid: WindowGrid) -> Node:
    """Single-stream windowed transformer layer over a [B,C,H,W] map."""
    b, c, h, w = x.shape
    mask = grid.mask(dtype=x.dtype)
    t = _to_tokens(x)
    n = layer_norm(t, p.ln1_g, p.ln1_b)
    wtok = window_partition(_to_map(n, h, w), grid)
    y, _ = window_attention(wtok, p.attn, bias, mask)
    t = add(t, _to_tokens(window_merge(y, grid, b)))
    t = add(t, _mlp(layer_norm(t, p.ln2_g, p.ln2_b), p))
    return _to_map(t, h, w)
