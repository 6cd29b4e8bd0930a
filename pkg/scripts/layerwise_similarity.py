"""Layer-wise cosine similarity of a vanilla decoder, before and after training.

Each layer's output rows are compared with the decoder's input rows, per
modality. This is a research probe; toy-scale numbers say nothing about
pretrained decoders.

    python scripts/layerwise_similarity.py --layers 4 --epochs 10
"""
import argparse

from himix.cli import _task_model
from himix.decoder import embed_tokens, forward
from himix.probe import cosine_profile
from himix.trainer import gen_task, train


def show(tag, model, task):
    trace = forward(model, task.patches[0], embed_tokens(model, task.tokens[0]))
    prof = cosine_profile(trace)
    print(tag)
    for i, (lang, vis) in enumerate(zip(prof.language, prof.vision), 1):
        print(f"  layer {i}: language {lang:+.3f}  vision {vis:+.3f}")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--layers", type=int, default=4)
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()

    model = _task_model("vanilla", args.seed, 64, args.layers, 8, 4, 32)
    probe_task = gen_task(args.seed + 1, 8, 4, 1)
    show("fresh", model, probe_task)
    train(model, gen_task(args.seed, 8, 4, 1000), epochs=args.epochs)
    model.params = {k: v.astype("float64") for k, v in model.params.items()}
    show("trained", model, probe_task)


if __name__ == "__main__":
    main()
