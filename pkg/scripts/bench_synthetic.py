"""Frame-stream benchmark on three synthetic subsets with a randomly initialised model.

    python scripts/bench_synthetic.py [--size 192] [--frames 100] [--batch-size 32] [--out bench.json]

Prints one row per subset plus the average, in both timing modes.
"""

import argparse
import json
import tempfile
from pathlib import Path

from maskct import cli
from maskct.config import ModelConfig, RunConfig
from maskct.data import DatasetManifest
from maskct.synthetic import WEATHER5, write_planted
from maskct.training import build_model, save_checkpoint

SUBSETS = ("Real-Time-I", "Real-Time-II", "Real-Time-III")


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--size", type=int, default=192)
    p.add_argument("--frames", type=int, default=100, help="frames per subset")
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--out")
    args = p.parse_args()

    with tempfile.TemporaryDirectory() as tmp:
        root = Path(tmp)
        cfg = RunConfig(model=ModelConfig(image_size=args.size, d_model=args.d_model, ffn_dim=4 * args.d_model))
        save_checkpoint(root / "model.safetensors", build_model(cfg, len(WEATHER5)), cfg, WEATHER5, 0)
        records = []
        for k, name in enumerate(SUBSETS):
            records += write_planted(root / name, args.frames, WEATHER5, args.size, seed=k, split="test",
                                     source=name).records
        DatasetManifest(WEATHER5, records).write(root / "frames.jsonl")

        results = {}
        for mode in ("model", "end-to-end"):
            rep = cli.cmd_bench(root / "model.safetensors", root / "frames.jsonl", mode, args.batch_size)
            results[mode] = rep
            print(f"\n{mode} FPS (batch {args.batch_size}, {args.size}x{args.size})")
            print(f"{'subset':<15}{'frames':>8}{'FPS':>10}{'CF1':>8}{'OF1':>8}")
            for row in rep["rows"]:
                of1 = "-" if row["OF1"] is None else f"{row['OF1']:.3f}"
                print(f"{row['subset']:<15}{row['frames']:>8}{row['fps']:>10.2f}{row['CF1']:>8.3f}{of1:>8}")
    if args.out:
        Path(args.out).write_text(json.dumps(results, indent=2) + "\n")


if __name__ == "__main__":
    main()
