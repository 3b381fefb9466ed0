"""Command-line entry point: gen-toy, synth, train, eval, inspect.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import nn
from .blending import synthesize
from .config import BlendType, ForgeryConfig
from .data import FaceDataset, derive_seed, generate_toy_dataset, write_dataset
from .detector import score_forgery
from .metrics import evaluate, load_detector
from .policy import SynthesizerPolicy, random_config
from .records import DATASET_FORGERY, PRISTINE
from .trainer import TrainConfig, train

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _common(p):
    p.add_argument("--seed", type=int, default=0, help="run seed (default 0)")
    p.add_argument("--config", type=Path, help="JSON file of option defaults; explicit flags win")


def build_parser():
    parser = _Parser(prog="forgeaug", description="Adversarial forgery augmentation toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-toy", help="generate a procedural toy-face dataset")
    p.add_argument("--n-pristine", type=int, default=200)
    p.add_argument("--n-forgery", type=int, default=200)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--out", type=Path, required=True)
    _common(p)

    p = sub.add_parser("synth", help="render forgeries from a manifest's pristines")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    src = p.add_mutually_exclusive_group()
    src.add_argument("--policy", type=Path, help="policy checkpoint to sample configs from")
    src.add_argument("--random", action="store_true", help="uniform random configs")
    p.add_argument("--region", type=int, help="fixed region index 0-9")
    p.add_argument("--blend", help="fixed blend: alpha, poisson, mixup or none")
    p.add_argument("--ratio", type=float, default=0.5, help="mixup ratio for a fixed config")
    p.add_argument("--limit", type=int, help="render at most this many pristines")
    _common(p)

    p = sub.add_parser("train", help="adversarial (or random-config) training")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr-detector", type=float, default=2e-4)
    p.add_argument("--lr-policy", type=float, default=5e-5)
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--mu", type=float, default=0.05)
    p.add_argument("--gamma", type=float, default=0.1)
    p.add_argument("--augment", choices=("adversarial", "random"), default="adversarial")
    p.add_argument("--checkpoint-every", type=int, default=500)
    p.add_argument("--loss-scope", choices=("all", "synthesized"), default="all")
    p.add_argument("--baseline", action="store_true", help="subtract a moving-average baseline from L_b")
    _common(p)

    p = sub.add_parser("eval", help="score a manifest with a detector checkpoint")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--out", type=Path, help="write the JSON report here instead of stdout")
    _common(p)

    p = sub.add_parser("inspect", help="dump per-sample head outputs and policy configs")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--policy", type=Path, help="policy checkpoint; adds config distributions")
    p.add_argument("--limit", type=int)
    p.add_argument("--out", type=Path)
    _common(p)
    return parser


def parse_args(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config is None:
        return args
    try:
        overrides = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config file {args.config}: {exc}") from exc
    if not isinstance(overrides, dict):
        raise UsageError(f"config file {args.config} must hold a JSON object")
    sub = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest for a in sub._actions}
    unknown = {k.replace("-", "_") for k in overrides} - known
    if unknown:
        raise UsageError(f"config file {args.config}: unknown options {sorted(unknown)}")
    sub.set_defaults(**{k.replace("-", "_"): v for k, v in overrides.items()})
    return parser.parse_args(argv)


def _emit(text, out):
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)


# ------------------------------------------------------------------ commands

def cmd_gen_toy(args):
    _, path = generate_toy_dataset(args.n_pristine, args.n_forgery, args.seed, args.out, args.size)
    print(f"wrote {args.n_pristine + args.n_forgery} records to {path}")


def _fixed_config(args):
    if args.region is None or args.blend is None:
        raise UsageError("synth needs --policy, --random, or both --region and --blend")
    return ForgeryConfig(args.region, BlendType.parse(args.blend), args.ratio)


def cmd_synth(args):
    dataset = FaceDataset.from_manifest(args.manifest)
    pristine, forgeries = dataset.pristine_indices, dataset.forgery_indices
    if len(forgeries) == 0:
        raise ValueError("manifest has no forgeries to use as references")
    if args.limit is not None:
        pristine = pristine[:args.limit]
    fixed = None if (args.policy or args.random) else _fixed_config(args)
    policy = None
    if args.policy:
        params, meta = nn.load_params(args.policy)
        policy = SynthesizerPolicy.from_config(meta, params)
    images, lms, cats, masks, meta = [], [], [], [], []
    for i in pristine:
        seed = derive_seed("synth", args.seed, int(i))
        rng = np.random.default_rng(seed)
        ref = int(rng.choice(forgeries))
        if policy is not None:
            cfg = policy.sample(policy.forward(dataset.images[i], dataset.images[ref]), rng)
        elif args.random:
            cfg = random_config(rng)
        else:
            cfg = fixed
        if cfg.blend == BlendType.NONE:
            img, mask, cat = dataset.images[i], None, PRISTINE
        else:
            img, mask = synthesize(dataset.images[i], dataset.landmarks[i], dataset.images[ref],
                                   dataset.landmarks[ref], cfg, rng)
            cat = DATASET_FORGERY
        images.append(img)
        lms.append(dataset.landmarks[i])
        cats.append(cat)
        masks.append(mask)
        meta.append({"source": int(i), "reference": ref, "seed": seed, "config": cfg.to_dict()})
    if not images:
        raise ValueError("manifest has no pristines to synthesize from")
    out = FaceDataset(np.stack(images), np.stack(lms), cats, masks, meta)
    path = write_dataset(out, args.out)
    print(f"wrote {len(images)} records to {path}")


def cmd_train(args):
    dataset = FaceDataset.from_manifest(args.manifest)
    cfg = TrainConfig(batch_size=args.batch_size, lr_detector=args.lr_detector, lr_policy=args.lr_policy,
                      alpha=args.alpha, mu=args.mu, gamma=args.gamma, steps=args.steps, seed=args.seed,
                      augment=args.augment, checkpoint_every=args.checkpoint_every,
                      loss_scope=args.loss_scope, baseline=args.baseline)

    def progress(step, row, detector, policy):
        if step % 100 == 0 or step == cfg.steps:
            logging.info("step %d total %.4f", step, row["total"])

    train(dataset, cfg, args.out, manifest_path=args.manifest, progress=progress)
    print(f"trained {cfg.steps} steps; checkpoints in {args.out}")


def cmd_eval(args):
    report = evaluate(args.manifest, args.checkpoint)
    _emit(report.to_json(), args.out)


def cmd_inspect(args):
    dataset = FaceDataset.from_manifest(args.manifest)
    detector = load_detector(args.checkpoint)
    policy = None
    if args.policy:
        params, meta = nn.load_params(args.policy)
        policy = SynthesizerPolicy.from_config(meta, params)
    n = len(dataset) if args.limit is None else min(args.limit, len(dataset))
    forgeries = dataset.forgery_indices
    rows = []
    for i in range(n):
        out = detector.forward(dataset.images[i]).row(0)
        row = {
            "index": i,
            "category": dataset.categories[i],
            "score": float(score_forgery(out["main_logits"])),
            "main_logits": out["main_logits"].tolist(),
            "type_logits": out["type_logits"].tolist(),
            "ratio": float(out["ratio"]),
            "region_map": out["region_map"].tolist(),
        }
        if policy is not None and dataset.categories[i] == PRISTINE and len(forgeries):
            ref = int(np.random.default_rng(derive_seed("inspect", args.seed, i)).choice(forgeries))
            dist = policy.forward(dataset.images[i], dataset.images[ref])
            row["policy"] = {"reference": ref, "p_region": dist.p_region.tolist(), "p_type": dist.p_type.tolist(),
                             "ratio_mean": float(dist.a_mean), "ratio_spread": float(dist.a_spread)}
        rows.append(row)
    _emit(json.dumps({"samples": rows}, indent=2, sort_keys=True) + "\n", args.out)


COMMANDS = {"gen-toy": cmd_gen_toy, "synth": cmd_synth, "train": cmd_train, "eval": cmd_eval,
            "inspect": cmd_inspect}


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        args = parse_args(sys.argv[1:] if argv is None else list(argv))
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    except (ValueError, OSError, RuntimeError, FloatingPointError) as exc:
        print(f"forgeaug: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
