"""Train vanilla and himix decoders on the patch task over a few seeds.

Reports held-out accuracy and the vision-zeroed ablation for each run.

    python scripts/train_patch_task.py --seeds 0 1 2 --variants himix-dedicated vanilla
"""
import argparse
import json
import time

from himix.cli import _task_model
from himix.trainer import evaluate, gen_task, train


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--variants", nargs="+", default=["himix-dedicated", "vanilla"])
    ap.add_argument("--samples", type=int, default=2000)
    ap.add_argument("--epochs", type=int, default=25)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--json", action="store_true", help="one JSON object per run instead of a table")
    args = ap.parse_args()

    for variant in args.variants:
        for seed in args.seeds:
            t0 = time.perf_counter()
            model = _task_model(variant, seed, 64, 2, 8, 4, 32)
            heldout = gen_task(seed + 7919, 8, 4, 500)
            rep = train(model, gen_task(seed, 8, 4, args.samples), args.epochs, args.lr, heldout=heldout)
            zeroed = evaluate(model, heldout, zero_vision=True)
            row = {"variant": variant, "seed": seed, "accuracy": rep.final_accuracy,
                   "vision_zeroed": zeroed, "final_loss": rep.losses[-1], "seconds": time.perf_counter() - t0}
            if args.json:
                print(json.dumps(row))
            else:
                print(f"{variant:<16} seed {seed}  acc {row['accuracy']:.3f}  zeroed {zeroed:.3f}  "
                      f"loss {row['final_loss']:.4f}  {row['seconds']:.0f}s")


if __name__ == "__main__":
    main()
