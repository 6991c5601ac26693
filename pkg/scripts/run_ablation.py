"""Train the four ablation variants per seed and report cross-domain ACER.

    python scripts/run_ablation.py --seeds 0 1 2 --steps 500 --out runs/ablation
"""

import argparse
import json
import logging
from dataclasses import asdict
from pathlib import Path

from dcn.experiments import ABLATION, load_splits, non_increasing, run_variant
from dcn.train import TrainConfig, resolve_manifest


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    parser.add_argument("--steps", type=int, default=500)
    parser.add_argument("--variants", nargs="+", default=list(ABLATION), choices=list(ABLATION))
    parser.add_argument("--out", default="runs/ablation")
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    base = TrainConfig(output_dir=args.out)
    splits = load_splits(resolve_manifest(base))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    results_path = out / "results.jsonl"
    for seed in args.seeds:
        row = []
        for name in args.variants:
            res = run_variant(name, seed, args.steps, base, splits)
            with open(results_path, "a") as fh:
                fh.write(json.dumps(asdict(res)) + "\n")
            print(f"seed {seed} {name:9s} cross ACER {res.cross_acer:.4f}  intra ACER {res.intra_acer:.4f}  "
                  f"L {res.loss_initial:.3f} -> {res.loss_final:.3f}  ({res.seconds:.0f}s)", flush=True)
            row.append(res.cross_acer)
        print(f"seed {seed}: non-increasing = {non_increasing(row)}", flush=True)


if __name__ == "__main__":
    main()
