"""Shared parameter factories for the test suite (float64 by default)."""

import numpy as np

from glfcr.attention import (AttentionParams, RelPosBias, StlPairParams,
                             StlParams, relative_position_index)
from glfcr.blocks import DfgParams, SgciParams, SlfcParams
from glfcr.engine import leaf


def rng_leaf(rng, *shape, scale=0.5, grad=False):
    return leaf(rng.uniform(-scale, scale, shape), requires_grad=grad)


def make_attn(rng, c, heads, grad=False):
    return AttentionParams(
        rng_leaf(rng, c, c, grad=grad), rng_leaf(rng, c, grad=grad),
        rng_leaf(rng, c, c, grad=grad), rng_leaf(rng, c, grad=grad),
        rng_leaf(rng, c, c, grad=grad), rng_leaf(rng, c, grad=grad),
        rng_leaf(rng, c, c, grad=grad), rng_leaf(rng, c, grad=grad), heads)


def make_bias(rng, m, heads, grad=False, zero=False):
    shape = ((2 * m - 1) ** 2, heads)
    table = leaf(np.zeros(shape) if zero else rng.normal(0, 0.02, shape),
                 requires_grad=grad)
    return RelPosBias(table, relative_position_index(m))


def make_stl(rng, c, heads, grad=False):
    hidden = 2 * c
    return StlParams(
        leaf(np.ones(c), requires_grad=grad), leaf(np.zeros(c), requires_grad=grad),
        make_attn(rng, c, heads, grad=grad),
        leaf(np.ones(c), requires_grad=grad), leaf(np.zeros(c), requires_grad=grad),
        rng_leaf(rng, c, hidden, grad=grad), rng_leaf(rng, hidden, grad=grad),
        rng_leaf(rng, hidden, c, grad=grad), rng_leaf(rng, c, grad=grad))


def make_pair(rng, c, heads, m, shared=False, grad=False):
    opt = make_stl(rng, c, heads, grad=grad)
    sar = opt if shared else make_stl(rng, c, heads, grad=grad)
    bias = make_bias(rng, m, heads, grad=grad)
    gw = rng_leaf(rng, heads, heads, grad=grad)
    gb = rng_leaf(rng, heads, grad=grad)
    return StlPairParams(opt, sar, bias, gw, gb)


def make_dfg(rng, c, k, scale=0.3, grad=False):
    def cw(cout, cin, kk):
        return rng_leaf(rng, cout, cin, kk, kk, scale=scale, grad=grad)

    def cb(cout):
        return rng_leaf(rng, cout, scale=scale, grad=grad)

    return DfgParams(cw(c, 2 * c, 3), cb(c),
                     cw(c, c, 3), cb(c), cw(c, c, 3), cb(c),
                     cw(c, c, 3), cb(c), cw(c, c, 3), cb(c),
                     cw(c * k * k, c, 1), cb(c * k * k), k)


def make_slfc(rng, c, k, with_dfg=True, scale=0.3, grad=False):
    dfg = make_dfg(rng, c, k, scale=scale, grad=grad) if with_dfg else None
    return SlfcParams(dfg,
                      rng_leaf(rng, c, c, 1, 1, scale=scale, grad=grad),
                      rng_leaf(rng, c, scale=scale, grad=grad),
                      rng_leaf(rng, c, c, 1, 1, scale=scale, grad=grad),
                      rng_leaf(rng, c, scale=scale, grad=grad))


def make_sgci(rng, c, heads, m, n_dense, scale=0.3, grad=False, with_stl=True,
              shared_streams=False):
    cw_o, cb_o, cw_s, cb_s, stls = [], [], [], [], ([] if with_stl else None)
    for j in range(n_dense):
        w = rng_leaf(rng, c, (j + 1) * c, 3, 3, scale=scale, grad=grad)
        b = rng_leaf(rng, c, scale=scale, grad=grad)
        cw_o.append(w)
        cb_o.append(b)
        if shared_streams:
            cw_s.append(w)
            cb_s.append(b)
        else:
            cw_s.append(rng_leaf(rng, c, (j + 1) * c, 3, 3, scale=scale, grad=grad))
            cb_s.append(rng_leaf(rng, c, scale=scale, grad=grad))
        if with_stl:
            stls.append(make_pair(rng, c, heads, m, shared=shared_streams, grad=grad))
    fo_w = rng_leaf(rng, c, n_dense * c, 1, 1, scale=scale, grad=grad)
    fo_b = rng_leaf(rng, c, scale=scale, grad=grad)
    if shared_streams:
        fs_w, fs_b = fo_w, fo_b
    else:
        fs_w = rng_leaf(rng, c, n_dense * c, 1, 1, scale=scale, grad=grad)
        fs_b = rng_leaf(rng, c, scale=scale, grad=grad)
    return SgciParams(cw_o, cb_o, cw_s, cb_s, stls, fo_w, fo_b, fs_w, fs_b)
