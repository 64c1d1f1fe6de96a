"""Command-line entry point.

Exit codes: 0 success, 1 usage/validation/config error, 2 I/O error,
3 numeric failure.  The last line written to stdout is always one JSON
object; progress logs go to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .errors import LTDError, LTDValidationError, NumericError
from .features import resolve_threads

log = logging.getLogger("ltd")

EXIT_OK, EXIT_VALIDATION, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


class DegradeAction(argparse.Action):
    """Collect --jpeg/--downsample/--blur into one list, keeping command-line order."""

    def __call__(self, parser, namespace, values, option_string=None):
        from .imaging import DegradeSpec

        specs = list(getattr(namespace, "degrade", None) or [])
        kind = self.dest
        try:
            if kind == "jpeg":
                spec = DegradeSpec("jpeg", quality=int(values))
            elif kind == "downsample":
                spec = DegradeSpec("downsample", factor=float(values))
            else:
                spec = DegradeSpec("blur", kernel=int(values[0]), sigma=float(values[1]))
        except (ValueError, LTDValidationError) as exc:
            parser.error(f"{option_string}: {exc}")
        specs.append(spec)
        namespace.degrade = specs


def add_degrade_flags(p):
    p.set_defaults(degrade=[])
    p.add_argument("--jpeg", dest="jpeg", metavar="Q", action=DegradeAction, help="JPEG re-encode at quality Q (1-100)")
    p.add_argument("--downsample", dest="downsample", metavar="F", action=DegradeAction,
                   help="bilinear downsample by factor F in (0, 1]")
    p.add_argument("--blur", dest="blur", nargs=2, metavar=("K", "SIGMA"), action=DegradeAction,
                   help="Gaussian blur, odd kernel K, std SIGMA")


def build_parser():
    common = Parser(add_help=False)
    common.add_argument("--threads", type=int, default=None,
                        help="worker threads (default: $LTD_THREADS, else all cores)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = Parser(prog="ltd", description="Layer-transition-discrepancy detector for AI-generated images.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=Parser)
    sub.required = True

    p = sub.add_parser("gen-data", parents=[common], help="write a seeded synthetic real/fake dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-per-class", type=int, default=200)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("init-backbone", parents=[common], help="write a randomly initialised backbone archive")
    p.add_argument("--out", required=True)
    p.add_argument("--preset", choices=("toy", "clip-vit-l14"), default="toy")
    p.add_argument("--seed", type=int, default=0)
    for flag in ("image-size", "patch-size", "depth", "width", "heads"):
        p.add_argument(f"--{flag}", type=int, default=None)
    p.add_argument("--zero-residual", action="store_true",
                   help="zero every attention/MLP output projection (blocks become identities)")

    p = sub.add_parser("train", parents=[common], help="train a detector head")
    p.add_argument("--train-manifest", required=True)
    p.add_argument("--val-manifest", required=True)
    p.add_argument("--backbone", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--lr", type=float, default=5e-5)
    p.add_argument("--batch", type=int, default=None, help="default 256 for 24+ layer backbones, else 32")
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--layer-lo", type=int, default=None)
    p.add_argument("--layer-hi", type=int, default=None)
    p.add_argument("--window", type=int, default=None)
    p.add_argument("--tau", type=float, default=1.0)
    p.add_argument("--no-shared-block", action="store_true")
    p.add_argument("--no-pos-enc", action="store_true")
    p.add_argument("--branch", choices=("both", "raw", "ltd"), default="both")
    p.add_argument("--feature-cache", action="store_true", help="encode once without augmentation")
    p.add_argument("--grad-clip", type=float, default=None)
    p.add_argument("--resume", default=None, help="continue from a last.ltdw checkpoint")

    p = sub.add_parser("eval", parents=[common], help="score a manifest and report Acc/AP")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--backbone", default=None, help="default: the backbone recorded in the checkpoint")
    p.add_argument("--report", default=None, help="write the full JSON report here")
    add_degrade_flags(p)

    p = sub.add_parser("score", parents=[common], help="probability that one image is generated")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--backbone", default=None)

    p = sub.add_parser("degrade", parents=[common], help="apply degradations to one image")
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    add_degrade_flags(p)

    p = sub.add_parser("profile", parents=[common], help="adjacent-layer cosine / L2 profile CSV")
    p.add_argument("--backbone", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-per-class", action="store_true")

    p = sub.add_parser("export-features", parents=[common], help="per-layer CLS vectors as CSV")
    p.add_argument("--backbone", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--layers", required=True, help="comma-separated layer indices, e.g. 2,3,4")
    p.add_argument("--diff", action="store_true", help="export f[k+1] - f[k] instead of f[k]")
    p.add_argument("--out", required=True)
    return parser


# -- subcommands --------------------------------------------------------------

def cmd_gen_data(args, threads):
    from .synthetic import gen_synthetic_dataset

    m = gen_synthetic_dataset(args.n_per_class, args.size, args.seed, args.out)
    return {"manifest": os.path.abspath(m.source), "records": len(m), **m.counts()}


def cmd_init_backbone(args, threads):
    from .backbone import BackboneConfig, init_random_backbone, parameter_count, save_backbone, zero_residual

    base = BackboneConfig.toy() if args.preset == "toy" else BackboneConfig.clip_vit_l14()
    overrides = {k: getattr(args, k) for k in ("image_size", "patch_size", "depth", "width", "heads")
                 if getattr(args, k) is not None}
    cfg = BackboneConfig.from_dict({**base.to_dict(), **overrides})
    weights = init_random_backbone(cfg, args.seed)
    if args.zero_residual:
        weights = zero_residual(weights)
    save_backbone(args.out, weights)
    return {"backbone": os.path.abspath(args.out), "parameters": parameter_count(cfg),
            "hash": weights.content_hash(), "config": cfg.to_dict()}


def cmd_train(args, threads):
    from .backbone import load_weight_archive
    from .head import HeadConfig
    from .manifest import load_manifest
    from .train import TrainConfig, TrainingAborted, load_checkpoint, save_checkpoint, train

    _, weights = load_weight_archive(args.backbone)
    tr, va = load_manifest(args.train_manifest), load_manifest(args.val_manifest)
    depth, width = weights.config.depth, weights.config.width
    batch = args.batch if args.batch is not None else (256 if depth >= 24 else 32)
    cfg = TrainConfig(lr=args.lr, batch_size=batch, epochs=args.epochs, seed=args.seed,
                      feature_cache=args.feature_cache, grad_clip=args.grad_clip).validate()
    head_cfg = HeadConfig.default(depth, width, layer_lo=args.layer_lo, layer_hi=args.layer_hi, window=args.window,
                                  tau=args.tau, shared_block=not args.no_shared_block,
                                  pos_enc=not args.no_pos_enc, branch=args.branch)
    os.makedirs(args.out, exist_ok=True)
    resume = load_checkpoint(args.resume)[0] if args.resume else None
    log_path = os.path.join(args.out, "train_log.jsonl")
    try:
        result = train(tr, va, weights, cfg, head_cfg, log_path=log_path, resume=resume, threads=threads)
    except TrainingAborted as exc:
        path = os.path.join(args.out, "last_good.ltdw")
        save_checkpoint(exc.checkpoint, path, args.backbone)
        log.error("last good state (epoch %d) saved to %s", exc.checkpoint.epoch, path)
        raise
    best_path, last_path = os.path.join(args.out, "best.ltdw"), os.path.join(args.out, "last.ltdw")
    save_checkpoint(result.best, best_path, args.backbone)
    save_checkpoint(result.last, last_path, args.backbone)
    hc = result.best.head.config
    return {"best": os.path.abspath(best_path), "last": os.path.abspath(last_path),
            "log": os.path.abspath(log_path), "best_epoch": result.best.epoch,
            "val_acc": result.best.metrics.get("val_acc"), "val_ap": result.best.metrics.get("val_ap"),
            "trainable_parameters": result.best.head.parameter_count(),
            "head": {"layer_lo": hc.layer_lo, "layer_hi": hc.layer_hi, "window": hc.window, "branch": hc.branch,
                     "shared_block": hc.shared_block, "pos_enc": hc.pos_enc}}


def _checkpoint_and_backbone(args):
    from .backbone import load_weight_archive
    from .train import load_checkpoint

    ckpt, recorded = load_checkpoint(args.checkpoint)
    path = args.backbone or recorded
    if not path:
        raise LTDValidationError("checkpoint records no backbone; pass --backbone")
    _, weights = load_weight_archive(path)
    return ckpt, weights


def cmd_eval(args, threads):
    from .manifest import load_manifest
    from .train import evaluate

    ckpt, weights = _checkpoint_and_backbone(args)
    report = evaluate(ckpt, load_manifest(args.manifest), weights, args.degrade, threads=threads)
    out = report.summary()
    out["degradations"] = report.degradations
    if args.report:
        report.write(args.report)
        out["report"] = os.path.abspath(args.report)
    return out


def cmd_score(args, threads):
    from .train import score_image

    ckpt, weights = _checkpoint_and_backbone(args)
    prob, label = score_image(ckpt, weights, args.image)
    return {"image": args.image, "probability": prob, "label": label, "class": "fake" if label else "real"}


def cmd_degrade(args, threads):
    from .imaging import apply_degradations, load_image, save_image

    out = apply_degradations(load_image(args.image), args.degrade)
    save_image(out, args.out)
    return {"image": os.path.abspath(args.out), "height": out.shape[0], "width": out.shape[1],
            "degradations": [d.to_dict() for d in args.degrade]}


def cmd_profile(args, threads):
    from .analysis import layer_profiles
    from .backbone import load_weight_archive
    from .manifest import load_manifest

    _, weights = load_weight_archive(args.backbone)
    prof = layer_profiles(weights, load_manifest(args.manifest), per_class=not args.no_per_class, threads=threads)
    prof.to_csv(args.out)
    return {"profile": os.path.abspath(args.out), "rows": len(prof.rows)}


def cmd_export_features(args, threads):
    from .analysis import export_features
    from .backbone import load_weight_archive
    from .manifest import load_manifest

    try:
        layers = [int(x) for x in args.layers.split(",") if x.strip()]
    except ValueError as exc:
        raise LTDValidationError(f"--layers: {exc}") from exc
    _, weights = load_weight_archive(args.backbone)
    n = export_features(weights, load_manifest(args.manifest), layers, args.out, diff=args.diff, threads=threads)
    return {"features": os.path.abspath(args.out), "rows": n, "layers": layers, "diff": args.diff}


COMMANDS = {
    "gen-data": cmd_gen_data,
    "init-backbone": cmd_init_backbone,
    "train": cmd_train,
    "eval": cmd_eval,
    "score": cmd_score,
    "degrade": cmd_degrade,
    "profile": cmd_profile,
    "export-features": cmd_export_features,
}


def _emit(obj):
    print(json.dumps(obj, sort_keys=True, default=str), flush=True)


def run(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        _emit({"ok": False, "exit_code": EXIT_VALIDATION, "error": str(exc)})
        return EXIT_VALIDATION
    except SystemExit as exc:  # --help
        return int(exc.code or 0)

    logging.basicConfig(stream=sys.stderr, level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", force=True)
    try:
        threads = resolve_threads(args.threads)
        result = COMMANDS[args.command](args, threads)
    except (LTDError, OSError) as exc:
        code = exit_code(exc)
        log.error("%s", exc)
        _emit({"ok": False, "command": args.command, "exit_code": code, "error": str(exc)})
        return code
    _emit({"ok": True, "command": args.command, **result})
    return EXIT_OK


def exit_code(exc):
    if isinstance(exc, NumericError):
        return EXIT_NUMERIC
    if isinstance(exc, LTDValidationError):
        return EXIT_VALIDATION
    return EXIT_IO


def main():
    sys.exit(run())
