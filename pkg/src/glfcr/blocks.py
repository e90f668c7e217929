"""Two-stream fusion blocks: dense context interaction and local compensation.

The context block grows features through densely connected 3x3 convolutions,
runs a paired windowed transformer layer after each stage (SAR scores guide
the optical stream), and fuses stage outputs back to width C with a local
residual. The compensation block cleans the SAR feature with per-position
dynamic filters, then exchanges gated residuals between the streams.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import RelPosBias, StlPairParams, StlParams, WindowGrid, stl_pair_forward
from .engine import (ContractError, Node, ShapeError, add, concat, conv2d,
                     mul, relu, reshape, softmax, sub, transpose)


# ---------------------------------------------------------------------------
# dynamic filtering


@dataclass
class DfgParams:
    """Filter-generation net: 3x3 head (2C->C), two residual blocks, 1x1 tail."""

    head_w: Node
    head_b: Node
    res1_w1: Node
    res1_b1: Node
    res1_w2: Node
    res1_b2: Node
    res2_w1: Node
    res2_b1: Node
    res2_w2: Node
    res2_b2: Node
    tail_w: Node
    tail_b: Node
    k: int


def _resblock(x: Node, w1: Node, b1: Node, w2: Node, b2: Node) -> Node:
    y = conv2d(relu(conv2d(x, w1, b1, pad=1)), w2, b2, pad=1)
    return add(x, y)


def dfg_generate(f_opt: Node, f_sar: Node, p: DfgParams) -> Node:
    """Per-position, per-channel k x k filter bank [B,H,W,C,k,k]."""
    if f_opt.shape != f_sar.shape:
        raise ShapeError(f"stream shapes disagree: {list(f_opt.shape)} vs {list(f_sar.shape)}")
    b, c, h, w = f_opt.shape
    k = p.k
    x = concat([f_opt, f_sar], axis=1)
    x = relu(conv2d(x, p.head_w, p.head_b, pad=1))
    x = _resblock(x, p.res1_w1, p.res1_b1, p.res1_w2, p.res1_b2)
    x = _resblock(x, p.res2_w1, p.res2_b1, p.res2_w2, p.res2_b2)
    x = conv2d(x, p.tail_w, p.tail_b, pad=0)            # B, C*k*k, H, W
    x = reshape(x, (b, c, k, k, h, w))
    return transpose(x, (0, 4, 5, 1, 2, 3))


def dynamic_filter_apply(f_sar: Node, filters: Node) -> Node:
    """Apply one k x k filter per position and channel, zero-padded.

    f_sar: [B,C,H,W]; filters: [B,H,W,C,k,k] with k odd. Output (h,w,c) is
    the weighted sum of the k x k input patch centered at (h,w) in channel c.
    Filters are raw linear weights: the identity filter reproduces the input.
    """
    xv, fv = f_sar.value, filters.value
    if xv.ndim != 4 or fv.ndim != 6:
        raise ShapeError(f"expected 4-D input and 6-D filters, got "
                         f"{list(xv.shape)} / {list(fv.shape)}")
    b, c, h, w = xv.shape
    k = fv.shape[-1]
    if fv.shape != (b, h, w, c, k, k):
        raise ShapeError(f"filters {list(fv.shape)} inconsistent with input "
                         f"{list(xv.shape)} (expected [{b},{h},{w},{c},{k},{k}])")
    if k % 2 == 0:
        raise ContractError(f"filter size must be odd, got {k}")
    pad = k // 2
    xp = np.pad(xv, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.zeros_like(xv)
    for u in range(k):
        for v in range(k):
            out += fv[:, :, :, :, u, v].transpose(0, 3, 1, 2) * xp[:, :, u:u + h, v:v + w]

    def bw(g):
        df = np.empty_like(fv)
        dxp = np.zeros_like(xp)
        for u in range(k):
            for v in range(k):
                xs = xp[:, :, u:u + h, v:v + w]
                df[:, :, :, :, u, v] = (g * xs).transpose(0, 2, 3, 1)
                dxp[:, :, u:u + h, v:v + w] += g * fv[:, :, :, :, u, v].transpose(0, 3, 1, 2)
        return dxp[:, :, pad:pad + h, pad:pad + w], df

    return Node(out, (f_sar, filters), bw)


# ---------------------------------------------------------------------------
# local feature compensation


@dataclass
class SlfcParams:
    dfg: DfgParams | None           # None when dynamic filtering is ablated
    gate_s2o_w: Node
    gate_s2o_b: Node
    gate_o2s_w: Node
    gate_o2s_b: Node


def _channel_gate(x: Node, w: Node, b: Node) -> Node:
    """1x1 conv followed by channel softmax; values in (0,1), sum 1 per pixel."""
    return softmax(conv2d(x, w, b, pad=0), axis=1)


def slfc_forward(f_opt: Node, f_sar: Node, p: SlfcParams,
                 residual_on_filtered: bool = False) -> tuple[Node, Node]:
    """Dual gated propagation between the streams.

    The SAR feature is dynamically filtered, its residual against the optical
    feature is gated into the optical stream, and the updated optical
    feature's residual flows back onto the raw (pre-filter) SAR feature;
    ``residual_on_filtered`` rebases that second update on the filtered map.
    """
    if f_opt.shape != f_sar.shape:
        raise ShapeError(f"stream shapes disagree: {list(f_opt.shape)} vs {list(f_sar.shape)}")
    if p.dfg is not None:
        f_hat = dynamic_filter_apply(f_sar, dfg_generate(f_opt, f_sar, p.dfg))
    else:
        f_hat = f_sar
    r_so = sub(f_hat, f_opt)
    opt = add(f_opt, mul(r_so, _channel_gate(r_so, p.gate_s2o_w, p.gate_s2o_b)))
    r_os = sub(opt, f_hat)
    sar_base = f_hat if residual_on_filtered else f_sar
    sar = add(sar_base, mul(r_os, _channel_gate(r_os, p.gate_o2s_w, p.gate_o2s_b)))
    return opt, sar


# ---------------------------------------------------------------------------
# dense context interaction


@dataclass
class SgciParams:
    """Dense stages (conv per stream per stage), paired STLs, 1x1 fusion convs."""

    conv_opt_w: list[Node]
    conv_opt_b: list[Node]
    conv_sar_w: list[Node] | None
    conv_sar_b: list[Node] | None
    stl: list[StlPairParams] | None       # one per stage; None when STLs ablated
    fuse_opt_w: Node
    fuse_opt_b: Node
    fuse_sar_w: Node | None
    fuse_sar_b: Node | None


@dataclass
class SgciSingleParams:
    """Single-stream variant of the dense block (no SAR branch)."""

    conv_w: list[Node]
    conv_b: list[Node]
    stl: list[tuple[StlParams, RelPosBias]] | None
    fuse_w: Node
    fuse_b: Node


def _stage_grids(h: int, w: int, m: int, n_stages: int,
                 shift_enabled: bool) -> list[WindowGrid]:
    grids = []
    for j in range(n_stages):
        shift = m // 2 if (shift_enabled and j % 2 == 1) else 0
        if h <= m and w <= m:
            shift = 0  # single window per axis: shifting only relabels tokens
        grids.append(WindowGrid(m, h, w, shift))
    return grids


def sgci_forward(f_opt: Node, f_sar: Node, p: SgciParams, m: int,
                 shift_enabled: bool = True, use_stl: bool = True,
                 refine: bool = True) -> tuple[Node, Node]:
    """Dense two-stream context block; output dims equal input dims."""
    if f_opt.shape != f_sar.shape:
        raise ShapeError(f"stream shapes disagree: {list(f_opt.shape)} vs {list(f_sar.shape)}")
    b, c, h, w = f_opt.shape
    n = len(p.conv_opt_w)
    grids = _stage_grids(h, w, m, n, shift_enabled)
    feats_opt, feats_sar = [f_opt], [f_sar]
    stage_opt, stage_sar = [], []
    for j in range(n):
        x_opt = feats_opt[0] if j == 0 else concat(feats_opt, axis=1)
        x_sar = feats_sar[0] if j == 0 else concat(feats_sar, axis=1)
        y_opt = relu(conv2d(x_opt, p.conv_opt_w[j], p.conv_opt_b[j], pad=1))
        y_sar = relu(conv2d(x_sar, p.conv_sar_w[j], p.conv_sar_b[j], pad=1))
        if use_stl:
            y_opt, y_sar = stl_pair_forward(y_opt, y_sar, p.stl[j], grids[j],
                                            refine=refine)
        feats_opt.append(y_opt)
        feats_sar.append(y_sar)
        stage_opt.append(y_opt)
        stage_sar.append(y_sar)
    g_opt = conv2d(concat(stage_opt, axis=1) if n > 1 else stage_opt[0],
                   p.fuse_opt_w, p.fuse_opt_b, pad=0)
    g_sar = conv2d(concat(stage_sar, axis=1) if n > 1 else stage_sar[0],
                   p.fuse_sar_w, p.fuse_sar_b, pad=0)
    return add(g_opt, f_opt), add(g_sar, f_sar)


def sgci_single_forward(f: Node, p: SgciSingleParams, m: int,
                        shift_enabled: bool = True, use_stl: bool = True) -> Node:
    """Single-stream dense context block (SAR-free and stacked-input variants)."""
    from .attention import stl_forward

    b, c, h, w = f.shape
    n = len(p.conv_w)
    grids = _stage_grids(h, w, m, n, shift_enabled)
    feats = [f]
    stages = []
    for j in range(n):
        x = feats[0] if j == 0 else concat(feats, axis=1)
        y = relu(conv2d(x, p.conv_w[j], p.conv_b[j], pad=1))
        if use_stl:
            stl, bias = p.stl[j]
            y = stl_forward(y, stl, bias, grids[j])
        feats.append(y)
        stages.append(y)
    g = conv2d(concat(stages, axis=1) if n > 1 else stages[0], p.fuse_w, p.fuse_b, pad=0)
    return add(g, f)
