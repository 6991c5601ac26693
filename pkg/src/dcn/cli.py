"""Command-line entry point: gen-data, train, eval, augment-preview, gradcheck.

Usage errors (bad flags, invalid config or manifest) exit with status 2;
failures while running exit with status 1.
"""

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .destruction import grid_overlay
from .errors import ConfigurationError, ValidationError
from .gradcheck import run_suite
from .metrics import append_report, model_scorer, oracle_scorer, run_protocol, write_scores_csv
from .model import load_checkpoint
from .relation import build_label_matrix, build_similarity_matrix
from .synth import LIVE, desk_manifest, dump_preview, generate_split, load_manifest, save_manifest
from .train import build_batch, load_config, resolve_manifest, step_rng, tomllib, train

class UsageError(Exception):
    """Raised for problems the user can fix by changing the invocation."""


def _manifest(path):
    try:
        return load_manifest(path) if path else desk_manifest()
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read manifest {path}: {exc}") from exc


def _config(args):
    try:
        return load_config(args.config, args.set)
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise UsageError(f"cannot read config {args.config}: {exc}") from exc


# ------------------------------------------------------------------ commands


def cmd_gen_data(args):
    manifest = _manifest(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_manifest(manifest, out / "manifest.json")
    for name in manifest.splits:
        samples = generate_split(manifest, name)
        np.savez_compressed(
            out / f"{name}.npz",
            images=np.stack([s.image for s in samples]),
            reflection=np.stack([s.reflection_gt for s in samples]),
            labels=np.array([s.label for s in samples]),
            domains=np.array([s.domain_id for s in samples]),
            attack_types=np.array([s.attack_type for s in samples]),
            sample_ids=np.array([s.sample_id for s in samples], dtype=np.int64),
        )
        for s in samples[:args.previews]:
            dump_preview(s.image, out / f"{name}_{s.sample_id}.ppm")
            dump_preview(s.reflection_gt, out / f"{name}_{s.sample_id}_reflection.pgm")
        print(f"{name}: {len(samples)} samples ({sum(s.label == LIVE for s in samples)} live)")
    return 0


def cmd_train(args):
    config = _config(args)
    if args.steps is not None:
        config = replace(config, steps=args.steps).validate()
    _, records, ckpt = train(config, resume=args.resume, quiet=args.quiet)
    if records:
        last = records[-1]
        print(f"step {last.step}: L={last.l_overall:.4f} L_sim={last.l_sim:.4f} "
              f"L_ref={last.l_reflection:.4f}")
    print(f"checkpoint: {ckpt}")
    return 0


def _eval_features(model, samples, batch_size=64):
    """Restored patch features (N x C_s x M x N) in eval mode."""
    images = np.stack([s.image for s in samples]).astype(model.dtype)
    out = []
    for i in range(0, len(images), batch_size):
        feats = model.features(images[i:i + batch_size], training=False)
        out.append(model.patch_features(feats).data)
    return np.concatenate(out)


def _dump_sim(path, samples, patches):
    sims = build_similarity_matrix(patches).data
    p = sims.shape[-1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "i", "j", "a_sim", "a_label"])
        for s, sim in zip(samples, sims):
            label = build_label_matrix(np.full(p, s.label))
            for i in range(p):
                for j in range(p):
                    w.writerow([s.sample_id, i, j, repr(float(sim[i, j])), int(label[i, j])])


def _dump_features(path, samples, patches):
    c = patches.shape[1]
    flat = patches.reshape(len(samples), c, -1)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "slot"] + [f"f{k}" for k in range(c)])
        for s, vecs in zip(samples, flat):
            for slot in range(vecs.shape[1]):
                w.writerow([s.sample_id, slot] + [repr(float(v)) for v in vecs[:, slot]])


def cmd_eval(args):
    if args.oracle and (args.dump_sim or args.dump_features):
        raise UsageError("--dump-sim and --dump-features need a model checkpoint, not --oracle")
    if not args.oracle and not args.checkpoint:
        raise UsageError("eval needs --checkpoint (or --oracle)")
    manifest = _manifest(args.manifest)
    model = None
    if args.oracle:
        scorer = oracle_scorer
    else:
        model = load_checkpoint(args.checkpoint).build_model()
        if (manifest.height, manifest.width) != (model.config.height, model.config.width):
            raise UsageError("manifest image size does not match the checkpoint's model")
        scorer = model_scorer(model)
    report, scored = run_protocol(scorer, manifest, args.protocol)
    print(report.to_json())
    if args.report:
        append_report(args.report, report)
    if args.dump_scores:
        write_scores_csv(args.dump_scores, scored)
    if model is not None and (args.dump_sim or args.dump_features):
        samples = generate_split(manifest, report.test_split)
        patches = _eval_features(model, samples)
        if args.dump_sim:
            _dump_sim(args.dump_sim, samples, patches)
        if args.dump_features:
            _dump_features(args.dump_features, samples, patches)
    return 0


def cmd_augment_preview(args):
    config = _config(args)
    if args.identity:
        config.use_destruction = False
    if args.no_augment:
        config.use_combination = False
    pool = generate_split(resolve_manifest(config), "train")
    batch = build_batch(step_rng(args.seed, 0), pool, config)
    by_id = {s.sample_id: s for s in pool}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sidecar = []
    for k, (view, sid) in enumerate(zip(batch.views[:args.count], batch.base_sample_ids)):
        after = grid_overlay(view.image, config.model.grid) if args.overlay else view.image
        dump_preview(by_id[int(sid)].image, out / f"view{k:02d}_before.ppm")
        dump_preview(after, out / f"view{k:02d}_after.ppm")
        dump_preview(view.labels[0], out / f"view{k:02d}_reflection.pgm")
        sidecar.append({"view": k, "base_sample_id": int(sid), "base_label": int(batch.base_labels[k]),
                        "class_mask": batch.class_masks[k].tolist(), "provenance": view.provenance.to_dict()})
    (out / "provenance.json").write_text(json.dumps({"seed": args.seed, "grid": [config.model.grid_rows,
                                                    config.model.grid_cols], "views": sidecar}, indent=2))
    print(f"wrote {len(sidecar)} views to {out}")
    return 0


def cmd_gradcheck(args):
    results = run_suite(seed=args.seed, tol=args.tol)
    for r in results:
        print(f"{'ok  ' if r.ok else 'FAIL'} {r.name:40s} max_rel={r.max_rel_error:.2e} ({r.seconds:.2f}s)")
    failed = [r.name for r in results if not r.ok]
    print(f"{len(results) - len(failed)}/{len(results)} passed")
    return 1 if failed else 0


# -------------------------------------------------------------------- parser


def build_parser():
    parser = argparse.ArgumentParser(prog="dcn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="materialize a dataset manifest")
    p.add_argument("--manifest", help="manifest JSON (default: built-in desk manifest)")
    p.add_argument("--out", required=True)
    p.add_argument("--previews", type=int, default=4, help="preview images per split")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", help="TOML config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override")
    p.add_argument("--steps", type=int)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint under a protocol")
    p.add_argument("--checkpoint")
    p.add_argument("--manifest", help="manifest JSON (default: built-in desk manifest)")
    p.add_argument("--protocol", choices=["intra", "cross"], default="intra")
    p.add_argument("--oracle", action="store_true", help="score with the ground-truth reflection maps")
    p.add_argument("--report", help="append the report as a JSON line to this file")
    p.add_argument("--dump-scores", metavar="CSV")
    p.add_argument("--dump-sim", metavar="CSV")
    p.add_argument("--dump-features", metavar="CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("augment-preview", help="dump augmented training views")
    p.add_argument("--config")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--identity", action="store_true", help="force the identity permutation")
    p.add_argument("--no-augment", action="store_true", help="disable patch exchange")
    p.add_argument("--overlay", action="store_true", help="draw slot boundaries on the output")
    p.set_defaults(func=cmd_augment_preview)

    p = sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s")
    try:
        return args.func(args)
    except (UsageError, ValidationError) as exc:
        parser.exit(2, f"dcn {args.command}: error: {exc}\n")
    except (ConfigurationError, RuntimeError, ArithmeticError, OSError, ValueError) as exc:
        print(f"dcn {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
