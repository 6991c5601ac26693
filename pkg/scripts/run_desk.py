"""Train on the desk-scale manifest and report both evaluation protocols.

    python scripts/run_desk.py --config configs/desk.toml [--set steps=200]
"""

import argparse
import json
import logging
import time
from pathlib import Path

from dcn.experiments import load_splits, window_mean
from dcn.metrics import append_report, model_scorer, run_protocol
from dcn.train import load_config, resolve_manifest, train


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--config", default="configs/desk.toml")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    config = load_config(args.config, args.set)
    manifest = resolve_manifest(config)
    start = time.perf_counter()
    splits = load_splits(manifest)
    model, records, ckpt = train(config, pool=splits["train"])
    scorer = model_scorer(model)
    reports = [run_protocol(scorer, manifest, p, splits)[0] for p in ("intra", "cross")]
    elapsed = time.perf_counter() - start

    out = Path(config.output_dir)
    for rep in reports:
        append_report(out / "reports.jsonl", rep)
    summary = {
        "seconds": round(elapsed, 1),
        "loss_first10": window_mean(records),
        "loss_last10": window_mean(records, last=True),
        "intra_acer": reports[0].acer,
        "cross_acer": reports[1].acer,
        "cross_hter": reports[1].hter,
        "checkpoint": str(ckpt),
    }
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
