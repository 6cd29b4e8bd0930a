"""Decoder stacks: the concatenation baseline and the three injection variants.

Parameters live in a flat ``dict[str, ndarray]`` keyed like
``layers.3.w_vk``; forwards take an optional ``params`` override so the same
code runs on tape variables during training and gradient checks.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np

from . import numkit as nk
from .attn import (
    LayerWeights,
    build_causal_mask,
    build_part_causal_mask,
    make_pe,
    mixture_attention,
    self_attention,
)
from .numkit import ShapeError

VARIANTS = ("vanilla", "himix-uniform", "himix-connector", "himix-dedicated")
PE_SCHEMES = ("sinusoidal", "rotary", "none")


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    d_model: int = 64
    d_vision: int = 32
    n_heads: int = 4
    n_kv_heads: int | None = None  # cost model only; runnable kernels use n_heads
    d_ffn: int | None = None  # defaults to 4 * d_model
    vocab: int = 16
    variant: str = "himix-dedicated"
    pe_scheme: str = "sinusoidal"
    activation: str = "gelu"
    seed: int = 0
    use_norm: bool = True
    use_residual: bool = True
    language_pos_offset: int = 0
    # architecture details only the cost model reads
    ffn_gated: bool = False
    tie_embeddings: bool = False
    name: str = ""

    def __post_init__(self):
        if self.d_ffn is None:
            object.__setattr__(self, "d_ffn", 4 * self.d_model)
        if self.n_kv_heads is None:
            object.__setattr__(self, "n_kv_heads", self.n_heads)
        if min(self.n_layers, self.d_model, self.d_vision, self.n_heads, self.vocab) < 1:
            raise ValueError("sizes must be positive")
        if self.d_model % self.n_heads:
            raise ValueError(f"n_heads={self.n_heads} does not divide d_model={self.d_model}")
        if self.n_heads % self.n_kv_heads:
            raise ValueError(f"n_kv_heads={self.n_kv_heads} does not divide n_heads={self.n_heads}")
        if self.d_ffn < self.d_model:
            raise ValueError("d_ffn must be at least d_model")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.pe_scheme not in PE_SCHEMES:
            raise ValueError(f"unknown pe_scheme {self.pe_scheme!r}")
        if self.activation not in nk.ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.pe_scheme == "sinusoidal" and self.d_model % 2:
            raise ValueError("sinusoidal PE needs an even d_model")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def kv_width(self) -> int:
        return self.n_kv_heads * self.d_head

    def replace(self, **kw) -> "ModelConfig":
        return dataclasses.replace(self, **kw)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls(**json.loads(text))


@dataclass
class Model:
    cfg: ModelConfig
    params: dict[str, np.ndarray]

    def layer(self, i: int, params: Mapping | None = None) -> LayerWeights:
        return layer_weights(self.cfg, params if params is not None else self.params, i)


def _has_shared_connector(variant: str) -> bool:
    return variant in ("vanilla", "himix-uniform")


def weight_shapes(cfg: ModelConfig) -> dict[str, tuple[int, int]]:
    """Every weight block the variant owns, in a stable order."""
    d, dv, f = cfg.d_model, cfg.d_vision, cfg.d_ffn
    shapes: dict[str, tuple[int, int]] = {"embed": (cfg.vocab, d)}
    if _has_shared_connector(cfg.variant):
        shapes["connector.w1"] = (dv, d)
        shapes["connector.w2"] = (d, d)
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        shapes |= {p + "w_q": (d, d), p + "w_k": (d, d), p + "w_v": (d, d), p + "w_o": (d, d)}
        if cfg.variant == "himix-dedicated":
            shapes[p + "w_vk"] = (dv, d)
            shapes[p + "w_vv"] = (dv, d)
        if cfg.variant == "himix-connector":
            shapes[p + "connector.w1"] = (dv, d)
            shapes[p + "connector.w2"] = (d, d)
        shapes[p + "w_ffn1"] = (d, f)
        shapes[p + "w_ffn2"] = (f, d)
        if cfg.use_norm:
            shapes[p + "norm_attn"] = (1, d)
            shapes[p + "norm_ffn"] = (1, d)
    if cfg.use_norm:
        shapes["norm_f"] = (1, d)
    shapes["head"] = (d, cfg.vocab)
    return shapes


def init_model(cfg: ModelConfig, std: float = 0.02) -> Model:
    """Seeded scaled-normal init; output projections get ``std / sqrt(2 l)``."""
    rng = np.random.default_rng(cfg.seed)
    out_std = std / math.sqrt(2 * cfg.n_layers)
    params = {}
    for name, shape in weight_shapes(cfg).items():
        if name.endswith(("norm_attn", "norm_ffn", "norm_f")):
            params[name] = np.ones(shape)
        elif name.endswith(("w_o", "w_ffn2")):
            params[name] = rng.normal(0.0, out_std, shape)
        else:
            params[name] = rng.normal(0.0, std, shape)
    return Model(cfg, params)


def layer_weights(cfg: ModelConfig, params: Mapping, i: int) -> LayerWeights:
    p = f"layers.{i}."
    connector = None
    if cfg.variant == "himix-connector":
        connector = (params[p + "connector.w1"], params[p + "connector.w2"])
    return LayerWeights(
        w_q=params[p + "w_q"],
        w_k=params[p + "w_k"],
        w_v=params[p + "w_v"],
        w_o=params[p + "w_o"],
        w_ffn1=params[p + "w_ffn1"],
        w_ffn2=params[p + "w_ffn2"],
        w_vk=params.get(p + "w_vk"),
        w_vv=params.get(p + "w_vv"),
        connector=connector,
        norm_attn=params.get(p + "norm_attn"),
        norm_ffn=params.get(p + "norm_ffn"),
    )


@dataclass
class LayerRecord:
    language_in: np.ndarray
    language_out: np.ndarray
    vision_in: np.ndarray | None = None
    vision_out: np.ndarray | None = None


@dataclass
class ForwardTrace:
    """Per-layer activations plus the final hidden rows.

    ``output`` keeps whatever type the forward ran on (array or tape
    variable); the layer records are always arrays.
    """

    variant: str
    layers: list[LayerRecord]
    output: Any
    language_input: np.ndarray
    vision_input: np.ndarray | None = None  # post-connector X_v' when the variant has one
    n_vision: int = 0

    @property
    def language_output(self):
        return self.output if self.variant != "vanilla" else nk.take_rows(self.output, self.n_vision)


# --- building blocks ------------------------------------------------------------

def connector_forward(x_v, w1, w2, activation: str = "gelu"):
    """Two-layer map from vision width to model width."""
    return nk.matmul(nk.ACTIVATIONS[activation](nk.matmul(x_v, w1)), w2)


def _norm(cfg: ModelConfig, x, gain):
    return nk.rms_norm(x, gain) if cfg.use_norm else x


def _residual(cfg: ModelConfig, x, delta):
    return nk.add(x, delta) if cfg.use_residual else delta


def _language_pe(cfg: ModelConfig, m: int, start: int):
    return make_pe(cfg.pe_scheme, np.arange(start, start + m), cfg.d_model, cfg.n_heads)


def _check_inputs(cfg: ModelConfig, x_v, x_l, d_vision: int | None = None):
    dv = cfg.d_vision if d_vision is None else d_vision
    if x_v is not None and nk._shape(x_v)[-1] != dv:
        raise ShapeError(f"vision features have {nk._shape(x_v)[-1]} cols, expected d_vision={dv}")
    if nk._shape(x_l)[-1] != cfg.d_model:
        raise ShapeError(f"language features have {nk._shape(x_l)[-1]} cols, expected d_model={cfg.d_model}")
    if nk._shape(x_l)[-2] < 1:
        raise ShapeError("need at least one language token")


def _ffn_block(cfg, lw: LayerWeights, h):
    return _residual(cfg, h, nk.ffn_forward(_norm(cfg, h, lw.norm_ffn), lw.w_ffn1, lw.w_ffn2, cfg.activation))


def _concat_stack(cfg: ModelConfig, params: Mapping, x_vp, x_l, freeze_vision: bool = False):
    """Causal self-attention decoder over ``[x_vp; x_l]``.

    With ``freeze_vision`` the attention input's vision rows are reset to
    ``x_vp`` at every layer, which is the multi-layer HiMix oracle.
    """
    n = nk._shape(x_vp)[-2]
    m = nk._shape(x_l)[-2]
    mask = build_causal_mask(n + m, n_vision=n)
    pe = make_pe(cfg.pe_scheme, np.arange(n + m), cfg.d_model, cfg.n_heads)
    h = nk.concat_rows([x_vp, x_l])
    records = []
    for i in range(cfg.n_layers):
        lw = layer_weights(cfg, params, i)
        h_in = h
        a_in = _norm(cfg, h, lw.norm_attn)
        if freeze_vision:
            a_in = nk.concat_rows([x_vp, nk.take_rows(a_in, n)])
        attn = self_attention(a_in, lw.w_q, lw.w_k, lw.w_v, lw.w_o, mask, cfg.n_heads, pe)
        h = _residual(cfg, h, attn)
        h = _ffn_block(cfg, lw, h)
        hv_in, hv = nk.value_of(h_in), nk.value_of(h)
        records.append(LayerRecord(hv_in[..., n:, :], hv[..., n:, :], hv_in[..., :n, :], hv[..., :n, :]))
    return h, records


# --- public forwards -------------------------------------------------------------

def vanilla_forward(model: Model, x_v, x_l, params: Mapping | None = None) -> ForwardTrace:
    """Connector, then concatenation, then ``n_layers`` pre-norm blocks."""
    cfg = model.cfg
    if cfg.variant != "vanilla":
        raise ValueError(f"vanilla_forward needs a vanilla model, got {cfg.variant}")
    params = model.params if params is None else params
    _check_inputs(cfg, x_v, x_l)
    x_vp = connector_forward(x_v, params["connector.w1"], params["connector.w2"], cfg.activation)
    out, records = _concat_stack(cfg, params, x_vp, x_l)
    return ForwardTrace("vanilla", records, out, nk.value_of(x_l), nk.value_of(x_vp), nk._shape(x_v)[-2])


def language_only_forward(model: Model, x_l, params: Mapping | None = None) -> ForwardTrace:
    """Plain causal decoder over the language rows using the model's language weights."""
    cfg = model.cfg
    params = model.params if params is None else params
    _check_inputs(cfg, None, x_l)
    m = nk._shape(x_l)[-2]
    mask = build_causal_mask(m)
    pe = _language_pe(cfg, m, cfg.language_pos_offset)
    y = x_l
    records = []
    for i in range(cfg.n_layers):
        lw = layer_weights(cfg, params, i)
        y_in = y
        attn = self_attention(_norm(cfg, y, lw.norm_attn), lw.w_q, lw.w_k, lw.w_v, lw.w_o, mask, cfg.n_heads, pe)
        y = _ffn_block(cfg, lw, _residual(cfg, y, attn))
        records.append(LayerRecord(nk.value_of(y_in), nk.value_of(y)))
    return ForwardTrace("language-only", records, y, nk.value_of(x_l))


def himix_forward(model: Model, x_v, x_l, params: Mapping | None = None) -> ForwardTrace:
    """Hierarchical vision injection: only the M language rows flow between layers.

    Every layer re-reads the same ``x_v``: through one shared connector
    (uniform), its own connector (connector), or its own d_v -> d K/V
    projections (dedicated).
    """
    cfg = model.cfg
    if cfg.variant == "vanilla":
        raise ValueError("himix_forward needs a himix-* model")
    params = model.params if params is None else params
    _check_inputs(cfg, x_v, x_l)
    n, m = nk._shape(x_v)[-2], nk._shape(x_l)[-2]
    mask = build_part_causal_mask(n, m)
    pe = _language_pe(cfg, m, cfg.language_pos_offset)
    shared = None
    if cfg.variant == "himix-uniform":
        shared = connector_forward(x_v, params["connector.w1"], params["connector.w2"], cfg.activation)
    y = x_l
    records = []
    for i in range(cfg.n_layers):
        lw = layer_weights(cfg, params, i)
        if cfg.variant == "himix-uniform":
            vis = shared
        elif cfg.variant == "himix-connector":
            vis = connector_forward(x_v, *lw.connector, cfg.activation)
        else:
            vis = x_v
        y_in = y
        attn = mixture_attention(vis, _norm(cfg, y, lw.norm_attn), lw, mask, cfg.n_heads, pe)
        y = _ffn_block(cfg, lw, _residual(cfg, y, attn))
        records.append(LayerRecord(nk.value_of(y_in), nk.value_of(y)))
    return ForwardTrace(cfg.variant, records, y, nk.value_of(x_l), nk.value_of(shared) if shared is not None else None, n)


def forward(model: Model, x_v, x_l, params: Mapping | None = None) -> ForwardTrace:
    if model.cfg.variant == "vanilla":
        return vanilla_forward(model, x_v, x_l, params)
    return himix_forward(model, x_v, x_l, params)


def tie_vision_projections(model: Model) -> Model:
    """Dedicated model whose vision K/V projections are the language ones.

    Needs ``d_vision == d_model``; the result is the setting in which the
    frozen-vision oracle must agree with :func:`himix_forward`.
    """
    cfg = model.cfg
    if cfg.variant != "himix-dedicated":
        raise ValueError("tying applies to himix-dedicated models")
    if cfg.d_vision != cfg.d_model:
        raise ValueError("tied vision projections need d_vision == d_model")
    params = dict(model.params)
    for i in range(cfg.n_layers):
        params[f"layers.{i}.w_vk"] = params[f"layers.{i}.w_k"]
        params[f"layers.{i}.w_vv"] = params[f"layers.{i}.w_v"]
    return Model(cfg, params)


def frozen_vision_oracle_forward(model: Model, x_v, x_l, params: Mapping | None = None) -> ForwardTrace:
    """Concatenated causal decoder whose vision rows are pinned to ``x_v``.

    Runs full self-attention and FFN over all N+M rows with the language
    weights for every row, but overwrites the vision rows of each layer's
    attention input with the projected vision sequence (here ``x_v`` itself,
    since tying uses an identity connector). Its last M rows reproduce
    :func:`himix_forward` on a tied model with positional encoding off.
    """
    cfg = model.cfg
    params = model.params if params is None else params
    _check_inputs(cfg, x_v, x_l, d_vision=cfg.d_model)
    out, records = _concat_stack(cfg, params, x_v, x_l, freeze_vision=True)
    return ForwardTrace("oracle", records, out, nk.value_of(x_l), nk.value_of(x_v), nk._shape(x_v)[-2])


def concat_stack_forward(model: Model, x_vp, x_l, params: Mapping | None = None) -> ForwardTrace:
    """Unfrozen counterpart of the oracle: plain concatenation from ``x_vp``."""
    cfg = model.cfg
    params = model.params if params is None else params
    out, records = _concat_stack(cfg, params, x_vp, x_l)
    return ForwardTrace("concat", records, out, nk.value_of(x_l), nk.value_of(x_vp), nk._shape(x_vp)[-2])


def algorithm_reference(x_v: np.ndarray, x_l: np.ndarray, layers: list[dict], pe: np.ndarray | None, activation: str = "gelu"):
    """Line-by-line transcription of the HiMix loop: single head, no norms, no residuals.

    ``layers`` holds dicts with w_q, w_k, w_v, w_vk, w_vv, w_ffn1, w_ffn2.
    """
    act = nk.ACTIVATIONS[activation]
    n, m = x_v.shape[0], x_l.shape[0]
    d = x_l.shape[1]
    mask = np.zeros((m, n + m))
    for i in range(m):
        for j in range(m):
            if j > i:
                mask[i, n + j] = -1e9
    y = x_l
    for w in layers:
        q_l, k_l, v_l = y @ w["w_q"], y @ w["w_k"], y @ w["w_v"]
        k_v, v_v = x_v @ w["w_vk"], x_v @ w["w_vv"]
        if pe is not None:
            q_l = q_l + pe
            k_l = k_l + pe
        k_vl = np.concatenate([k_v, k_l])
        v_vl = np.concatenate([v_v, v_l])
        s = (q_l @ k_vl.T) / math.sqrt(d)
        s_hat = s + mask
        e = np.exp(s_hat - s_hat.max(axis=1, keepdims=True))
        a = (e / e.sum(axis=1, keepdims=True)) @ v_vl
        y = act(a @ w["w_ffn1"]) @ w["w_ffn2"]
    return y


def lm_head(y, w_head):
    """Bias-free projection of hidden rows to vocabulary logits."""
    if nk._shape(y)[-1] != nk._shape(w_head)[0]:
        raise ShapeError(f"lm_head dimension mismatch: {nk._shape(y)} x {nk._shape(w_head)}")
    return nk.matmul(y, w_head)


def logits(model: Model, hidden, params: Mapping | None = None):
    params = model.params if params is None else params
    if model.cfg.use_norm:
        hidden = nk.rms_norm(hidden, params["norm_f"])
    return lm_head(hidden, params["head"])


def embed_tokens(model: Model, ids, params: Mapping | None = None):
    params = model.params if params is None else params
    return nk.embedding(params["embed"], ids)


def param_count(model: Model) -> int:
    return sum(int(v.size) for v in model.params.values())
