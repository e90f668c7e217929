"""Full cloud-removal network assembly and ablation variants.

Shallow per-stream 3x3 convolutions lift the cloudy optical image and the
SAR image to width C; a stack of D context-interaction + local-compensation
block pairs refines both streams; the reconstruction head aggregates every
intermediate optical feature and predicts a correction added to the cloudy
input (global residual), so a zero-initialized head is the identity map.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import gtns
from .attention import (AttentionParams, RelPosBias, StlPairParams, StlParams,
                        relative_position_index)
from .blocks import (DfgParams, SgciParams, SgciSingleParams, SlfcParams,
                     sgci_forward, sgci_single_forward, slfc_forward)
from .engine import (ConfigError, Node, ParamStore, ShapeError, add, concat,
                     conv2d, leaf, relu)

VARIANTS = ("full", "no_sar", "concat", "no_stl", "no_gf", "no_df")


@dataclass
class ModelConfig:
    channels: int = 16          # embed width C
    depth: int = 6              # block pairs D
    n_dense: int = 5            # dense stages per context block
    window: int = 8             # attention window side M
    heads: int = 8
    filter_size: int = 5        # dynamic filter side k
    mlp_ratio: int = 2
    shift_enabled: bool = True
    variant: str = "full"
    optical_bands: int = 13
    sar_bands: int = 2
    refine_gate_axis: str = "heads"
    slfc_residual_on_filtered: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.channels % self.heads:
            raise ConfigError(f"channels {self.channels} not divisible by heads {self.heads}")
        if self.filter_size % 2 == 0:
            raise ConfigError(f"filter_size must be odd, got {self.filter_size}")
        if self.shift_enabled and self.window % 2:
            raise ConfigError(f"window must be even with shifting enabled, got {self.window}")
        if min(self.channels, self.depth, self.n_dense, self.window, self.heads) < 1:
            raise ConfigError("all architecture sizes must be >= 1")

    # variant structure
    @property
    def two_stream(self) -> bool:
        return self.variant in ("full", "no_stl", "no_gf", "no_df")

    @property
    def uses_stl(self) -> bool:
        return self.variant != "no_stl"

    @property
    def uses_refine(self) -> bool:
        return self.variant in ("full", "no_df")

    @property
    def uses_dynamic_filter(self) -> bool:
        return self.variant in ("full", "no_stl", "no_gf")

    @property
    def input_bands(self) -> int:
        return self.optical_bands + (self.sar_bands if self.variant == "concat" else 0)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def desk_model_config(**overrides) -> ModelConfig:
    """Small configuration for CPU-scale experiments."""
    base = dict(channels=16, depth=2, n_dense=3, window=8, heads=4, filter_size=3)
    base.update(overrides)
    return ModelConfig(**base)


def paper_model_config(**overrides) -> ModelConfig:
    """Full-scale configuration (untested at scale on CPU)."""
    base = dict(channels=96, depth=6, n_dense=5, window=8, heads=8, filter_size=5)
    base.update(overrides)
    return ModelConfig(**base)


# ---------------------------------------------------------------------------
# construction


class GlfcrModel:
    def __init__(self, config: ModelConfig, store: ParamStore):
        self.config = config
        self.store = store
        self._build()

    @classmethod
    def build(cls, config: ModelConfig, seed: int = 0, dtype=np.float32) -> "GlfcrModel":
        return cls(config, ParamStore(seed=seed, dtype=dtype))

    # -- parameter creation -------------------------------------------------

    def _conv(self, name: str, cin: int, cout: int, k: int) -> tuple[Node, Node]:
        w = self.store.uniform(f"{name}.w", (cout, cin, k, k), fan_in=cin * k * k)
        b = self.store.zeros(f"{name}.b", (cout,))
        return w, b

    def _linear(self, name: str, cin: int, cout: int) -> tuple[Node, Node]:
        w = self.store.uniform(f"{name}.w", (cin, cout), fan_in=cin)
        b = self.store.zeros(f"{name}.b", (cout,))
        return w, b

    def _attention(self, name: str, c: int, heads: int) -> AttentionParams:
        wq, bq = self._linear(f"{name}.q", c, c)
        wk, bk = self._linear(f"{name}.k", c, c)
        wv, bv = self._linear(f"{name}.v", c, c)
        wo, bo = self._linear(f"{name}.out", c, c)
        return AttentionParams(wq, bq, wk, bk, wv, bv, wo, bo, heads)

    def _stl_stream(self, name: str, c: int, heads: int, mlp_ratio: int) -> StlParams:
        ln1_g = self.store.ones(f"{name}.ln1.g", (c,))
        ln1_b = self.store.zeros(f"{name}.ln1.b", (c,))
        attn = self._attention(f"{name}.attn", c, heads)
        ln2_g = self.store.ones(f"{name}.ln2.g", (c,))
        ln2_b = self.store.zeros(f"{name}.ln2.b", (c,))
        hidden = mlp_ratio * c
        w1, b1 = self._linear(f"{name}.mlp.fc1", c, hidden)
        w2, b2 = self._linear(f"{name}.mlp.fc2", hidden, c)
        return StlParams(ln1_g, ln1_b, attn, ln2_g, ln2_b, w1, b1, w2, b2)

    def _bias_table(self, name: str, m: int, heads: int) -> RelPosBias:
        table = self.store.trunc_normal(f"{name}.bias_table", ((2 * m - 1) ** 2, heads))
        return RelPosBias(table, relative_position_index(m))

    def _dfg(self, name: str, c: int, k: int) -> DfgParams:
        head_w, head_b = self._conv(f"{name}.head", 2 * c, c, 3)
        r1w1, r1b1 = self._conv(f"{name}.res1.c1", c, c, 3)
        r1w2, r1b2 = self._conv(f"{name}.res1.c2", c, c, 3)
        r2w1, r2b1 = self._conv(f"{name}.res2.c1", c, c, 3)
        r2w2, r2b2 = self._conv(f"{name}.res2.c2", c, c, 3)
        tail_w, tail_b = self._conv(f"{name}.tail", c, c * k * k, 1)
        return DfgParams(head_w, head_b, r1w1, r1b1, r1w2, r1b2,
                         r2w1, r2b1, r2w2, r2b2, tail_w, tail_b, k)

    def _build(self) -> None:
        cfg = self.config
        c, m = cfg.channels, cfg.window
        self.sfe_opt = self._conv("sfe.opt", cfg.input_bands, c, 3)
        self.sfe_sar = self._conv("sfe.sar", cfg.sar_bands, c, 3) if cfg.two_stream else None
        self.blocks: list[tuple] = []
        for i in range(cfg.depth):
            base = f"block{i}"
            if cfg.two_stream:
                cw_o, cb_o, cw_s, cb_s = [], [], [], []
                stls = [] if cfg.uses_stl else None
                for j in range(cfg.n_dense):
                    w, b = self._conv(f"{base}.dense{j}.opt", (j + 1) * c, c, 3)
                    cw_o.append(w)
                    cb_o.append(b)
                    w, b = self._conv(f"{base}.dense{j}.sar", (j + 1) * c, c, 3)
                    cw_s.append(w)
                    cb_s.append(b)
                    if cfg.uses_stl:
                        opt = self._stl_stream(f"{base}.stl{j}.opt", c, cfg.heads, cfg.mlp_ratio)
                        sar = self._stl_stream(f"{base}.stl{j}.sar", c, cfg.heads, cfg.mlp_ratio)
                        bias = self._bias_table(f"{base}.stl{j}", m, cfg.heads)
                        if cfg.uses_refine:
                            gw = self.store.uniform(f"{base}.stl{j}.gate.w",
                                                    (cfg.heads, cfg.heads), fan_in=cfg.heads)
                            gb = self.store.zeros(f"{base}.stl{j}.gate.b", (cfg.heads,))
                        else:
                            gw = gb = None
                        stls.append(StlPairParams(opt, sar, bias, gw, gb,
                                                  cfg.refine_gate_axis))
                fo_w, fo_b = self._conv(f"{base}.fuse.opt", cfg.n_dense * c, c, 1)
                fs_w, fs_b = self._conv(f"{base}.fuse.sar", cfg.n_dense * c, c, 1)
                sgci = SgciParams(cw_o, cb_o, cw_s, cb_s, stls, fo_w, fo_b, fs_w, fs_b)
                dfg = self._dfg(f"{base}.dfg", c, cfg.filter_size) \
                    if cfg.uses_dynamic_filter else None
                gso_w, gso_b = self._conv(f"{base}.gate_s2o", c, c, 1)
                gos_w, gos_b = self._conv(f"{base}.gate_o2s", c, c, 1)
                slfc = SlfcParams(dfg, gso_w, gso_b, gos_w, gos_b)
                self.blocks.append((sgci, slfc))
            else:
                cw, cb = [], []
                stls = [] if cfg.uses_stl else None
                for j in range(cfg.n_dense):
                    w, b = self._conv(f"{base}.dense{j}", (j + 1) * c, c, 3)
                    cw.append(w)
                    cb.append(b)
                    if cfg.uses_stl:
                        stl = self._stl_stream(f"{base}.stl{j}", c, cfg.heads, cfg.mlp_ratio)
                        bias = self._bias_table(f"{base}.stl{j}", m, cfg.heads)
                        stls.append((stl, bias))
                f_w, f_b = self._conv(f"{base}.fuse", cfg.n_dense * c, c, 1)
                self.blocks.append((SgciSingleParams(cw, cb, stls, f_w, f_b), None))
        self.head_proj = self._conv("head.proj", cfg.depth * c, c, 1)
        self.head_out = self._conv("head.out", c, cfg.optical_bands, 3)

    # -- forward pass --------------------------------------------------------

    def _as_input(self, x, channels: int, what: str) -> Node:
        node = x if isinstance(x, Node) else leaf(np.asarray(x, dtype=self.store.dtype))
        if node.value.ndim != 4 or node.value.shape[1] != channels:
            raise ShapeError(f"{what} must be [B,{channels},H,W], "
                             f"got {list(node.value.shape)}")
        return node

    def forward(self, cloudy, sar=None) -> Node:
        """Predict the cloud-free image; output dims equal optical input dims."""
        cfg = self.config
        i_node = self._as_input(cloudy, cfg.optical_bands, "optical input")
        _, _, h, w = i_node.value.shape
        if h % cfg.window or w % cfg.window:
            raise ShapeError(f"spatial size {h}x{w} not divisible by window {cfg.window}")
        needs_sar = cfg.two_stream or cfg.variant == "concat"
        if needs_sar and sar is None:
            raise ConfigError(f"variant {cfg.variant!r} requires a SAR input")
        if needs_sar:
            s_node = self._as_input(sar, cfg.sar_bands, "SAR input")
            if s_node.value.shape[2:] != i_node.value.shape[2:]:
                raise ShapeError("optical and SAR spatial sizes disagree")

        if cfg.variant == "concat":
            x = concat([i_node, s_node], axis=1)
            f = conv2d(x, *self.sfe_opt, pad=1)
        else:
            f = conv2d(i_node, *self.sfe_opt, pad=1)

        feats = []
        if cfg.two_stream:
            g = conv2d(s_node, *self.sfe_sar, pad=1)
            for sgci, slfc in self.blocks:
                f, g = sgci_forward(f, g, sgci, cfg.window,
                                    shift_enabled=cfg.shift_enabled,
                                    use_stl=cfg.uses_stl, refine=cfg.uses_refine)
                f, g = slfc_forward(f, g, slfc,
                                    residual_on_filtered=cfg.slfc_residual_on_filtered)
                feats.append(f)
        else:
            for sgci, _ in self.blocks:
                f = sgci_single_forward(f, sgci, cfg.window,
                                        shift_enabled=cfg.shift_enabled,
                                        use_stl=cfg.uses_stl)
                feats.append(f)

        agg = concat(feats, axis=1) if len(feats) > 1 else feats[0]
        y = relu(conv2d(agg, *self.head_proj, pad=0))
        y = conv2d(y, *self.head_out, pad=1)
        return add(i_node, y)

    def predict(self, cloudy: np.ndarray, sar: np.ndarray | None = None) -> np.ndarray:
        """Inference helper: forward then clamp to [0,1]."""
        squeeze = np.asarray(cloudy).ndim == 3
        if squeeze:
            cloudy = np.asarray(cloudy)[None]
            sar = None if sar is None else np.asarray(sar)[None]
        out = self.forward(cloudy, sar).value
        out = np.clip(out, 0.0, 1.0)
        return out[0] if squeeze else out

    def zero_head(self) -> None:
        """Zero the reconstruction head, making the network the identity map."""
        for node in (*self.head_proj, *self.head_out):
            node.value = np.zeros_like(node.value)


def sfe_forward(cloudy, sar, model: GlfcrModel) -> tuple[Node, Node | None]:
    """Shallow feature extraction: one 3x3 convolution per stream, no activation."""
    cfg = model.config
    i_node = model._as_input(cloudy, cfg.input_bands, "optical input")
    f = conv2d(i_node, *model.sfe_opt, pad=1)
    if model.sfe_sar is None:
        return f, None
    s_node = model._as_input(sar, cfg.sar_bands, "SAR input")
    return f, conv2d(s_node, *model.sfe_sar, pad=1)


def glfcr_forward(cloudy, sar, model: GlfcrModel) -> Node:
    return model.forward(cloudy, sar)


# ---------------------------------------------------------------------------
# parameter counting (closed form, independent of the builder)


def count_params(config: ModelConfig) -> int:
    """Exact trainable scalar count from the layer shapes.

    conv(cin, cout, k) contributes cin*cout*k^2 + cout; a linear layer is the
    k=1 case. Per dense stage and stream: one 3x3 conv (j*C -> C). Each
    transformer stream adds two layer norms (4C), four C x C projections with
    bias, and a 2-layer MLP with hidden width mlp_ratio*C. A stream pair
    shares one (2M-1)^2 x heads bias table, plus a heads x heads gate when
    score refinement is active. The compensation block has the filter
    generator (3x3 head 2C->C, two residual blocks, 1x1 tail C->C*k^2) and
    two 1x1 gates; the head is a 1x1 (D*C -> C) then a 3x3 (C -> bands).
    """
    cfg = config
    c, n, heads, m, k, d = (cfg.channels, cfg.n_dense, cfg.heads, cfg.window,
                            cfg.filter_size, cfg.depth)

    def conv(cin, cout, kk):
        return cin * cout * kk * kk + cout

    def linear(cin, cout):
        return cin * cout + cout

    dense_stream = sum(conv(j * c, c, 3) for j in range(1, n + 1))
    fuse_stream = conv(n * c, c, 1)
    hidden = cfg.mlp_ratio * c
    stl_stream = (2 * c + 4 * linear(c, c) + 2 * c
                  + linear(c, hidden) + linear(hidden, c))
    table = (2 * m - 1) ** 2 * heads
    gate = linear(heads, heads)
    dfg = (conv(2 * c, c, 3) + 4 * conv(c, c, 3) + conv(c, c * k * k, 1))
    slfc_gates = 2 * conv(c, c, 1)

    total = conv(cfg.input_bands, c, 3)
    if cfg.two_stream:
        total += conv(cfg.sar_bands, c, 3)
        per_block = 2 * (dense_stream + fuse_stream)
        if cfg.uses_stl:
            per_block += n * (2 * stl_stream + table)
            if cfg.uses_refine:
                per_block += n * gate
        per_block += slfc_gates
        if cfg.uses_dynamic_filter:
            per_block += dfg
    else:
        per_block = dense_stream + fuse_stream
        if cfg.uses_stl:
            per_block += n * (stl_stream + table)
    total += d * per_block
    total += conv(d * c, c, 1) + conv(c, cfg.optical_bands, 3)
    return total


def param_breakdown(model: GlfcrModel) -> list[tuple[str, tuple, int]]:
    return [(name, node.value.shape, node.value.size)
            for name, node in model.store.items()]


# ---------------------------------------------------------------------------
# checkpoints


CKPT_MAGIC = b"GCKP"
CKPT_VERSION = 1


def save_checkpoint(path, model: GlfcrModel,
                    extra_arrays: dict[str, np.ndarray] | None = None,
                    meta: dict | None = None) -> None:
    """One tensor record per named parameter plus a JSON config header."""
    path = Path(path)
    header = {
        "config": model.config.to_dict(),
        "dtype": str(np.dtype(model.store.dtype)),
        "seed": model.store.seed,
        "meta": meta or {},
    }
    entries: list[tuple[str, np.ndarray]] = [(k, v.value) for k, v in model.store.items()]
    for k, v in (extra_arrays or {}).items():
        entries.append((k, np.asarray(v)))
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fp:
        fp.write(CKPT_MAGIC)
        fp.write(struct.pack("<H", CKPT_VERSION))
        fp.write(struct.pack("<I", len(blob)))
        fp.write(blob)
        fp.write(struct.pack("<I", len(entries)))
        for name, arr in entries:
            raw = name.encode()
            fp.write(struct.pack("<H", len(raw)))
            fp.write(raw)
            gtns.write_record(fp, arr)


def load_checkpoint(path) -> tuple[GlfcrModel, dict[str, np.ndarray], dict]:
    """Rebuild the model from a checkpoint; returns (model, extra arrays, meta)."""
    path = Path(path)
    with open(path, "rb") as fp:
        if fp.read(4) != CKPT_MAGIC:
            raise gtns.FormatError(0, "not a checkpoint file")
        (version,) = struct.unpack("<H", fp.read(2))
        if version != CKPT_VERSION:
            raise gtns.FormatError(4, f"unsupported checkpoint version {version}")
        (blob_len,) = struct.unpack("<I", fp.read(4))
        header = json.loads(fp.read(blob_len).decode())
        (n_entries,) = struct.unpack("<I", fp.read(4))
        entries: dict[str, np.ndarray] = {}
        for _ in range(n_entries):
            (name_len,) = struct.unpack("<H", fp.read(2))
            name = fp.read(name_len).decode()
            entries[name] = gtns.read_record(fp)
    config = ModelConfig.from_dict(header["config"])
    model = GlfcrModel.build(config, seed=header.get("seed", 0),
                             dtype=np.dtype(header["dtype"]))
    param_names = set(model.store.names())
    params = {k: v for k, v in entries.items() if k in param_names}
    extras = {k: v for k, v in entries.items() if k not in param_names}
    model.store.load_state_dict(params)
    return model, extras, header.get("meta", {})
