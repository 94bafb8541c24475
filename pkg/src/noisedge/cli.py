"""Command-line surface: weight init, dataset generation, edge ground
truth, training, evaluation, gradient checking and ablation sweeps.

Exit codes: 0 success, 2 usage error (argparse), 1 runtime error.
"""
from __future__ import annotations

import argparse
import os
import sys

from .config import RunConfig
from .constrained import SCHEMES, ConstrainedKernelBank
from .datagen import attach_edges, generate_dataset
from .evaluate import evaluate_model
from .gradcheck import DEFAULT_TOL, run_registry
from .model import NedbModel, load_checkpoint, save_checkpoint
from .morphology import SHAPES
from .training import ForgeryDataset, train_model

ABLATION_HEADER = "variant,precision,recall,f1,auc"


def _odd_int(text: str) -> int:
    value = int(text)
    if value < 1 or value % 2 == 0:
        raise argparse.ArgumentTypeError(f"size must be odd and positive, got {value}")
    return value


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return value


def _list_dir(directory, suffix):
    names = sorted(n for n in os.listdir(directory) if n.endswith(suffix))
    return [os.path.join(directory, n) for n in names]


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_init_weights(args) -> int:
    bank = ConstrainedKernelBank(kernel_size=args.size, scheme=args.scheme,
                                 mode=args.mode, seed=args.seed, dense=args.dense)
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    bank.save(args.out)
    print(f"wrote {bank.n_kernels} {args.size}x{args.size} {args.scheme} kernels to {args.out}")
    return 0


def cmd_gen_forgery(args) -> int:
    image_paths = object_paths = None
    if args.coco_style_dir:
        image_paths = _list_dir(os.path.join(args.coco_style_dir, "images"), ".ppm")
        obj_dir = os.path.join(args.coco_style_dir, "objects")
        if os.path.isdir(obj_dir):
            object_paths = _list_dir(obj_dir, ".pgm")
    if args.images:
        image_paths = _list_dir(args.images, ".ppm")
    if args.objects:
        object_paths = _list_dir(args.objects, ".pgm")
    manifest = generate_dataset(
        args.out, args.count, size=args.size, seed=args.seed,
        image_paths=image_paths, object_paths=object_paths,
        rotation_range=tuple(args.rotation), scale_range=tuple(args.scale),
        blur_sigma_range=tuple(args.blur), splice_prob=args.splice_prob)
    attach_edges(manifest, shape=args.edge_shape, size=args.edge_size)
    print(f"wrote {args.count} forgeries under {args.out}")
    return 0


def cmd_gen_edge_gt(args) -> int:
    manifest = attach_edges(args.manifest, shape=args.shape, size=args.size,
                            out_dir=args.out)
    print(f"wrote edge masks and manifest {manifest}")
    return 0


def _train_once(config: RunConfig, out_dir):
    if not config.train_manifest:
        raise ValueError("config does not set train_manifest")
    os.makedirs(out_dir, exist_ok=True)
    model = NedbModel(config.model)
    dataset = ForgeryDataset(config.train_manifest,
                             edge_shape=config.model.edge_shape,
                             edge_size=config.model.edge_size)
    rows = train_model(model, dataset, steps=config.steps,
                       batch_size=config.batch_size, base_lr=config.base_lr,
                       momentum=config.momentum, alpha=config.model.alpha,
                       seed=config.train_seed, augment=config.augment,
                       log_path=os.path.join(out_dir, "loss_log.csv"))
    return model, rows


def cmd_train(args) -> int:
    config = RunConfig.load(args.config)
    model, rows = _train_once(config, args.out)
    config.save(os.path.join(args.out, "config.txt"))
    save_checkpoint(model, os.path.join(args.out, "model.ckpt"))
    final = rows[-1]
    print(f"step {final[0]} lr {final[1]:.6f} loss_total {final[4]:.6f}")
    print(f"checkpoint {os.path.join(args.out, 'model.ckpt')}")
    return 0


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    dataset = ForgeryDataset(args.manifest)
    overlay_dir = os.path.join(args.out, "overlays") if args.overlays else None
    os.makedirs(args.out, exist_ok=True)
    report = evaluate_model(model, dataset, threshold=args.threshold,
                            aggregate=args.aggregate, overlay_dir=overlay_dir)
    report.write_csv(os.path.join(args.out, "metrics.csv"))
    p, r, f, a = report.mean_row()
    auc_text = "nan" if a is None else f"{a:.6f}"
    print(f"MEAN precision {p:.6f} recall {r:.6f} f1 {f:.6f} auc {auc_text}")
    return 0


def cmd_gradcheck(args) -> int:
    rows = run_registry(seed=args.seed, tol=args.tol, inject_fault=args.inject_fault)
    width = max(len(name) for name, _, _ in rows)
    for name, err, passed in rows:
        print(f"{name:<{width}}  {err:12.3e}  {'PASS' if passed else 'FAIL'}")
    failed = sum(1 for _, _, ok in rows if not ok)
    print(f"{len(rows) - failed}/{len(rows)} ops passed")
    return 0 if failed == 0 else 1


# ---------------------------------------------------------------------------
# ablation suites
# ---------------------------------------------------------------------------

def _suite_variants(suite: str):
    """(name, model-config overrides, edge-footprint override) triples."""
    plain = dict(use_constrained=False, use_edge=False, nonlocal_mode="none")
    if suite == "dual-branch":
        return [
            ("SB", dict(plain, dual_branch=False), None),
            ("DB", dict(plain), None),
            ("DB+origin-CC", dict(plain, use_constrained=True, mode="original"), None),
            ("DB+CC", dict(plain, use_constrained=True), None),
            ("DB+CC+Edge", dict(use_constrained=True, use_edge=True,
                                nonlocal_mode="none"), None),
            ("DB+CC+Edge+NL", dict(use_constrained=True, use_edge=True,
                                   nonlocal_mode="vanilla"), None),
            ("DB+CC+Edge+NL-D", dict(use_constrained=True, use_edge=True,
                                     nonlocal_mode="distance"), None),
        ]
    if suite == "init":
        return [(scheme, dict(scheme=scheme), None) for scheme in SCHEMES]
    if suite == "kernel-size":
        return [(f"{k}x{k}", dict(kernel_size=k), None) for k in (3, 5, 7, 9, 11)]
    if suite == "edge-kernel":
        return [(f"{shape}_{k}x{k}", dict(edge_shape=shape, edge_size=k), (shape, k))
                for shape in SHAPES for k in (3, 5, 7, 9)]
    if suite == "attention":
        return [(mode, dict(nonlocal_mode=mode), None)
                for mode in ("none", "vanilla", "distance")]
    raise ValueError(f"unknown suite {suite!r}")


def cmd_ablate(args) -> int:
    config = RunConfig.load(args.config)
    if not config.train_manifest or not config.eval_manifest:
        raise ValueError("config must set train_manifest and eval_manifest")
    os.makedirs(args.out, exist_ok=True)
    lines = [ABLATION_HEADER]
    for name, overrides, edge_se in _suite_variants(args.suite):
        model_kwargs = {key: getattr(config.model, key)
                        for key in ("base_width", "input_size", "fusion_width",
                                    "scheme", "kernel_size", "mode", "strict_center",
                                    "dense_bank", "dual_branch", "use_constrained",
                                    "nonlocal_mode", "use_edge", "edge_shape",
                                    "edge_size", "alpha", "seed")}
        model_kwargs["depths"] = config.model.depths
        model_kwargs.update(overrides)
        variant = RunConfig(model=type(config.model)(**model_kwargs),
                            **{key: getattr(config, key) for key in
                               ("steps", "batch_size", "train_seed", "base_lr",
                                "momentum", "threshold", "train_manifest",
                                "eval_manifest", "aggregate", "augment")})
        model, _ = _train_once(variant, os.path.join(args.out, name.replace("+", "_")))
        eval_set = ForgeryDataset(variant.eval_manifest,
                                  edge_shape=edge_se[0] if edge_se else variant.model.edge_shape,
                                  edge_size=edge_se[1] if edge_se else variant.model.edge_size)
        report = evaluate_model(model, eval_set, threshold=variant.threshold,
                                aggregate=variant.aggregate)
        p, r, f, a = report.mean_row()
        auc_text = "nan" if a is None else f"{a:.6f}"
        lines.append(f"{name},{p:.6f},{r:.6f},{f:.6f},{auc_text}")
        print(lines[-1])
    path = os.path.join(args.out, f"ablation_{args.suite}.csv")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    print(f"wrote {path}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="noisedge",
        description="Manipulation-region detection: noise-residual dual-branch "
                    "network with edge supervision.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init-weights", help="write an initialized kernel bank")
    p.add_argument("--scheme", choices=SCHEMES, required=True)
    p.add_argument("--size", type=_odd_int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mode", choices=("improved", "original"), default="improved")
    p.add_argument("--dense", action="store_true")
    p.set_defaults(func=cmd_init_weights)

    p = sub.add_parser("gen-forgery", help="generate a synthetic forgery dataset")
    p.add_argument("--coco-style-dir", help="directory with images/ and objects/ subdirs")
    p.add_argument("--images", help="directory of source .ppm images")
    p.add_argument("--objects", help="directory of object-mask .pgm files")
    p.add_argument("--count", type=_positive_int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--splice-prob", type=float, default=0.75)
    p.add_argument("--rotation", type=float, nargs=2, default=(-30.0, 30.0))
    p.add_argument("--scale", type=float, nargs=2, default=(0.7, 1.3))
    p.add_argument("--blur", type=float, nargs=2, default=(0.0, 1.0))
    p.add_argument("--edge-shape", choices=SHAPES, default="ellipse")
    p.add_argument("--edge-size", type=_odd_int, default=5)
    p.set_defaults(func=cmd_gen_forgery)

    p = sub.add_parser("gen-edge-gt", help="derive edge ground truth for a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--shape", choices=SHAPES, default="ellipse")
    p.add_argument("--size", type=_odd_int, default=5)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_gen_edge_gt)

    p = sub.add_parser("train", help="train a model from a run config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint against a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--aggregate", choices=("per-image", "pooled"), default="per-image")
    p.add_argument("--overlays", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=DEFAULT_TOL)
    p.add_argument("--inject-fault", action="store_true",
                   help="corrupt analytic gradients to prove failures are caught")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train and score a family of variants")
    p.add_argument("--suite", required=True,
                   choices=("dual-branch", "init", "kernel-size", "edge-kernel",
                            "attention"))
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, AssertionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
