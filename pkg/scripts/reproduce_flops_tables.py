"""Regenerate the efficiency grid and component breakdown for the registry models.

    python scripts/reproduce_flops_tables.py [--out DIR]
"""
import argparse
from pathlib import Path

from himix.costmodel import REFERENCE_RATIOS, emit_report, flops_token_pruning, grid, load_registry

G = 1e9


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, help="write flops_grid.csv here as well")
    args = ap.parse_args()

    main_models = load_registry(group="main")
    reports = grid(main_models.values())
    by_key = {(r.model, r.n, r.m, r.variant): r for r in reports}

    print("decoder GFLOPs, vanilla / himix (ratio)")
    print(f"{'model':<16}" + "".join(f"{f'{n}:{m}':>22}" for n, m in REFERENCE_RATIOS))
    for cfg in main_models.values():
        cells = []
        for n, m in REFERENCE_RATIOS:
            v, h = by_key[cfg.name, n, m, "vanilla"].total, by_key[cfg.name, n, m, "himix-dedicated"].total
            cells.append(f"{v / G:7.0f} / {h / G:5.0f} ({100 * h / v:4.1f}%)")
        print(f"{cfg.name:<16}" + "".join(f"{c:>22}" for c in cells))

    print("\ncomponent GFLOPs at each ratio, F_Attn / F_FFN")
    for cfg in main_models.values():
        for variant in ("vanilla", "himix-dedicated"):
            cells = [by_key[cfg.name, n, m, variant] for n, m in REFERENCE_RATIOS]
            print(f"{cfg.name:<16}{variant:<17}" + "".join(f"{r.attn_flops / G:7.0f}/{r.ffn_flops / G:<6.0f}" for r in cells))

    llama = main_models["llama3.2-1b"]
    print("\ntoken pruning on Llama-3.2-1B at 728:64 (prune after layer K, drop fraction R)")
    for k, r in ((2, 0.9), (2, 0.75), (2, 0.5), (3, 0.9), (3, 0.75), (3, 0.5), (5, 0.9), (5, 0.5)):
        print(f"  K={k} R={r:<5} {flops_token_pruning(llama, 728, 64, k, r).total / G:7.0f} G")

    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "flops_grid.csv").write_text(emit_report(reports))


if __name__ == "__main__":
    main()
