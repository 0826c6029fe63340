"""Overfit 32 planted-cue images and report train-split metrics.

    python scripts/tiny_overfit.py [--epochs 200] [--mask1] [--mask-ratio 0.75] [--out runs/tiny]
"""

import argparse
import json
import logging
import time

from maskct.synthetic import WEATHER5 as VOCAB, planted_dataset, tiny_config
from maskct.training import Samples, evaluate, train_loop


def run(epochs: int = 200, mask1: bool = False, mask_ratio: float = 0.75, out: str | None = None, seed: int = 0):
    images, truth = planted_dataset(32, len(VOCAB), 64, seed)
    train = Samples(images, truth)
    cfg = tiny_config(epochs, mask1, mask_ratio, seed)
    model, history = train_loop(train, train, cfg, VOCAB, out)
    report = evaluate(model, train, cfg, VOCAB)
    return model, history, report


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--mask1", action="store_true")
    p.add_argument("--mask-ratio", type=float, default=0.75)
    p.add_argument("--out")
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO)
    t0 = time.perf_counter()
    _, history, report = run(args.epochs, args.mask1, args.mask_ratio, args.out, args.seed)
    print(json.dumps({
        "seconds": round(time.perf_counter() - t0, 1),
        "initial_loss": history[0]["loss"],
        "final_loss": history[-1]["loss"],
        "final_lr": history[-1]["lr"],
        "train_OF1": report.OF1,
        "train_CF1": report.CF1,
        "train_OP": report.OP,
    }, indent=2))


if __name__ == "__main__":
    main()
