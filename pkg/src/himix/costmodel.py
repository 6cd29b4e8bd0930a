"""Analytical FLOPs and parameter accounting.

Convention: one multiply-accumulate is 2 FLOPs. Score matrices are priced
dense (no credit for causal sparsity). Pointwise work (softmax, norms,
activations, residual adds) is excluded unless ``count_pointwise`` is set.
"""
from __future__ import annotations

import csv
import io
import json
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable

import numpy as np

from .decoder import VARIANTS, ModelConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

N_VISION_DEFAULT = 728
REFERENCE_RATIOS = ((728, 32), (728, 64), (728, 200), (728, 728), (728, 1000))
REPORT_COLUMNS = ("model", "variant", "N", "M", "F_Attn", "F_FFN", "head", "total", "params")

# per-element costs used when pointwise work is counted
SOFTMAX_COST = 5
NORM_COST = 4
ACT_COST = 8
GATED_ACT_COST = 5


def flops_closed_form_vanilla(n: int, m: int, d: int) -> int:
    """Concatenated decoder per layer: (N+M)^2 d + 8 (N+M) d^2."""
    if d < 1:
        raise ValueError("d must be positive")
    t = n + m
    return t * t * d + 8 * t * d * d


def flops_closed_form_himix(n: int, m: int, d: int) -> int:
    """Mixture-attention decoder per layer: (N+M) M d + 8 M d^2."""
    if d < 1:
        raise ValueError("d must be positive")
    return (n + m) * m * d + 8 * m * d * d


@dataclass
class FlopsOptions:
    projections: bool = True  # language Q/K/V/O projections
    weighted_sum: bool = True  # softmax(S) @ V
    vision_proj: bool = True  # vision K/V projections and per-layer connectors
    head: bool = True
    shared_connector: bool = False  # the one connector of vanilla / himix-uniform
    count_pointwise: bool = False
    plain_ffn: bool = False  # force the idealised 2-matrix, 4d-wide FFN


@dataclass
class FlopsReport:
    model: str
    variant: str
    n: int
    m: int
    attn_flops: int
    ffn_flops: int
    head_flops: int
    total: int
    params: int
    breakdown: dict[str, int] = field(default_factory=dict)

    def row(self) -> dict:
        return {
            "model": self.model, "variant": self.variant, "N": self.n, "M": self.m,
            "F_Attn": self.attn_flops, "F_FFN": self.ffn_flops, "head": self.head_flops,
            "total": self.total, "params": self.params,
        }


def _connector_macs(cfg: ModelConfig, rows: int) -> int:
    return rows * (cfg.d_vision * cfg.d_model + cfg.d_model * cfg.d_model)


def flops_full_accounting(cfg: ModelConfig, n: int, m: int, variant: str | None = None,
                          options: FlopsOptions | None = None) -> FlopsReport:
    """Component-wise FLOPs of the language decoder for one (N, M) input."""
    variant = variant or cfg.variant
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    if n < 0 or m < 0:
        raise ValueError("sequence lengths must be non-negative")
    opt = options or FlopsOptions()
    d, kvw, L = cfg.d_model, cfg.kv_width, cfg.n_layers
    himix = variant != "vanilla"
    rows = m if himix else n + m
    keys = n + m

    macs: dict[str, int] = {}
    if opt.projections:
        macs["proj_qo"] = L * rows * 2 * d * d
        macs["proj_kv"] = L * rows * 2 * d * kvw
    macs["scores"] = L * rows * keys * d
    if opt.weighted_sum:
        macs["weighted_sum"] = L * rows * keys * d
    if himix and opt.vision_proj:
        width_in = cfg.d_vision if variant == "himix-dedicated" else d
        macs["vision_kv"] = L * n * width_in * 2 * kvw
        if variant == "himix-connector":
            macs["layer_connectors"] = L * _connector_macs(cfg, n)
    if opt.shared_connector and variant in ("vanilla", "himix-uniform"):
        macs["shared_connector"] = _connector_macs(cfg, n)
    if opt.plain_ffn:
        macs["ffn"] = L * rows * 2 * d * 4 * d
    else:
        macs["ffn"] = L * rows * (3 if cfg.ffn_gated else 2) * d * cfg.d_ffn
    if opt.head:
        macs["head"] = rows * d * cfg.vocab

    flops = {k: 2 * v for k, v in macs.items()}
    if opt.count_pointwise:
        d_ffn = 4 * d if opt.plain_ffn else cfg.d_ffn
        act = GATED_ACT_COST if cfg.ffn_gated and not opt.plain_ffn else ACT_COST
        flops["softmax"] = L * SOFTMAX_COST * rows * keys * cfg.n_heads
        flops["attn_norm_residual"] = L * (NORM_COST + 1) * rows * d
        flops["ffn_pointwise"] = L * (act * rows * d_ffn + (NORM_COST + 1) * rows * d)
        if opt.head:
            flops["final_norm"] = NORM_COST * rows * d

    ffn_keys = ("ffn", "ffn_pointwise")
    head_keys = ("head", "final_norm")
    attn = sum(v for k, v in flops.items() if k not in ffn_keys + head_keys)
    ffn = sum(flops.get(k, 0) for k in ffn_keys)
    head = sum(flops.get(k, 0) for k in head_keys)
    return FlopsReport(
        model=cfg.name or "custom", variant=variant, n=n, m=m,
        attn_flops=attn, ffn_flops=ffn, head_flops=head, total=attn + ffn + head,
        params=params_count(cfg, variant), breakdown=flops,
    )


def flops_token_pruning(cfg: ModelConfig, n: int, m: int, prune_layer: int, ratio: float) -> FlopsReport:
    """Price a concatenated decoder that drops ``ratio`` of the vision tokens
    after layer ``prune_layer``. Pricing only; no pruning forward exists."""
    if not 0 <= prune_layer <= cfg.n_layers:
        raise ValueError("prune_layer outside the stack")
    if not 0.0 <= ratio <= 1.0:
        raise ValueError("ratio must lie in [0, 1]")
    kept = n - int(round(n * ratio))
    early = cfg.replace(n_layers=max(prune_layer, 1))
    late = cfg.replace(n_layers=max(cfg.n_layers - prune_layer, 1))
    no_head = FlopsOptions(head=False)
    parts = []
    if prune_layer > 0:
        parts.append(flops_full_accounting(early, n, m, "vanilla", no_head))
    if prune_layer < cfg.n_layers:
        parts.append(flops_full_accounting(late, kept, m, "vanilla", no_head))
    final_rows = kept + m if prune_layer < cfg.n_layers else n + m
    head = 2 * final_rows * cfg.d_model * cfg.vocab
    attn = sum(p.attn_flops for p in parts)
    ffn = sum(p.ffn_flops for p in parts)
    return FlopsReport(cfg.name or "custom", f"pruned(K={prune_layer},R={ratio:g})", n, m,
                       attn, ffn, head, attn + ffn + head, params_count(cfg, "vanilla"))


def params_count(cfg: ModelConfig, variant: str | None = None, include_connector: bool = False) -> int:
    """Language-decoder parameters, plus any vision weights the variant adds.

    The single connector of vanilla / himix-uniform sits outside the decoder
    and is counted only with ``include_connector``; per-layer connectors and
    dedicated vision projections are always counted.
    """
    variant = variant or cfg.variant
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    d, f, kvw, L = cfg.d_model, cfg.d_ffn, cfg.kv_width, cfg.n_layers
    per_layer = 2 * d * d + 2 * d * kvw + (3 if cfg.ffn_gated else 2) * d * f
    norms = (2 * L + 1) * d if cfg.use_norm else 0
    total = cfg.vocab * d * (1 if cfg.tie_embeddings else 2) + L * per_layer + norms
    connector = cfg.d_vision * d + d * d
    if variant == "himix-dedicated":
        total += L * 2 * cfg.d_vision * kvw
    elif variant == "himix-connector":
        total += L * connector
    if include_connector and variant in ("vanilla", "himix-uniform"):
        total += connector
    return total


# --- registry -------------------------------------------------------------------

def _registry_text(path=None) -> str:
    if path is not None:
        return Path(path).read_text()
    return resources.files("himix").joinpath("data/registry.toml").read_text()


def load_registry(path=None, group: str | None = None) -> dict[str, ModelConfig]:
    """Named decoder configs; ``path`` overrides the bundled file."""
    data = tomllib.loads(_registry_text(path))
    out = {}
    for e in data.get("model", []):
        if group is not None and e.get("group", "main") != group:
            continue
        out[e["name"]] = ModelConfig(
            name=e.get("display", e["name"]),
            n_layers=e["layers"], d_model=e["d_model"], d_ffn=e["d_ffn"],
            n_heads=e["heads"], n_kv_heads=e["kv_heads"], vocab=e["vocab"],
            d_vision=e["d_vision"], tie_embeddings=e.get("tie_embeddings", False),
            ffn_gated=e.get("ffn_gated", True), variant="vanilla", pe_scheme="rotary",
            activation="silu",
        )
    return out


def grid(configs: Iterable[ModelConfig], ratios=REFERENCE_RATIOS,
         variants=("vanilla", "himix-dedicated"), options: FlopsOptions | None = None) -> list[FlopsReport]:
    return [
        flops_full_accounting(cfg, n, m, v, options)
        for cfg in configs for (n, m) in ratios for v in variants
    ]


def fit_exponent(xs, ys) -> float:
    """Slope of the least-squares line through (log x, log y)."""
    return float(np.polyfit(np.log(np.asarray(xs, float)), np.log(np.asarray(ys, float)), 1)[0])


# --- report I/O -----------------------------------------------------------------

def emit_report(reports: list[FlopsReport], fmt: str = "csv") -> str:
    if not reports:
        raise ValueError("no reports to emit")
    rows = [r.row() for r in reports]
    if fmt == "json":
        return json.dumps(rows, indent=2)
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
        return buf.getvalue()
    raise ValueError(f"unknown format {fmt!r}")


def parse_report(text: str, fmt: str = "csv") -> list[FlopsReport]:
    if fmt == "json":
        rows = json.loads(text)
    elif fmt == "csv":
        rows = list(csv.DictReader(io.StringIO(text)))
    else:
        raise ValueError(f"unknown format {fmt!r}")
    return [
        FlopsReport(r["model"], r["variant"], int(r["N"]), int(r["M"]), int(r["F_Attn"]),
                    int(r["F_FFN"]), int(r["head"]), int(r["total"]), int(r["params"]))
        for r in rows
    ]
