"""Command-line entry point: ``attention-i2i <command> [options]``.

Human-readable logs go to stderr; evaluation commands print one JSON object on stdout.
Exit codes: 0 success, 1 user or configuration error, 2 internal error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch
from PIL import Image

from ._validation import ConfigurationError, IntegrityError, ShapeError, VersionError
from .config import RunConfig
from .data import DatasetSpec, dataset_digest, to_uint8
from .evaluation import evaluate_detection, evaluate_distribution, load_split, translate_images
from .export import export_attention_masks, export_region_features
from .metrics import frechet_distance, kernel_distance, load_features
from .toy import synthesize_toy_dataset
from .trainer import fit, load_checkpoint

logger = logging.getLogger("attention_i2i")

USER_ERRORS = (ConfigurationError, ShapeError, VersionError, IntegrityError, FileNotFoundError,
               NotADirectoryError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON run configuration")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one configuration value (repeatable)")
    p.add_argument("--seed", type=int, help="global random seed")
    p.add_argument("--out", type=Path, help="output path")
    p.add_argument("--device", default="cpu", help="compute device (only 'cpu' is supported)")
    p.add_argument("-v", "--verbose", action="store_true")


def _eval_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True, help="dataset root")
    p.add_argument("--split", help="dataset split (default from config: test)")
    p.add_argument("--force", action="store_true", help="load a checkpoint despite digest mismatch")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="attention-i2i", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("make-toy", help="synthesize the fog/clean toy dataset")
    _common(p)
    p.add_argument("--n", type=int, help="images per domain (train split)")
    p.add_argument("--n-test", type=int, help="images per domain (test split)")
    p.add_argument("--size", type=int, help="image side in pixels")

    p = sub.add_parser("train", help="train a translation model")
    _common(p)
    p.add_argument("--data", type=Path, help="dataset root (overrides data.root)")
    p.add_argument("--mode", choices=["unsupervised", "supervised", "no_ga", "no_attention"])
    p.add_argument("--max-iters", type=int)
    p.add_argument("--resume", type=Path, help="checkpoint directory to resume from")

    p = sub.add_parser("translate", help="translate domain-A images of a split")
    _common(p)
    _eval_args(p)

    for name, helptext in (("eval-metrics", "FID/KID and instance-region variants"),
                           ("eval-detect", "proxy-detector AP on raw vs translated images")):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        if name == "eval-metrics":
            p.add_argument("--checkpoint", type=Path)
            p.add_argument("--data", type=Path)
            p.add_argument("--split")
            p.add_argument("--force", action="store_true")
            p.add_argument("--features-a", type=Path, help="precomputed N x D features (csv/npy)")
            p.add_argument("--features-b", type=Path, help="precomputed M x D features (csv/npy)")
        else:
            _eval_args(p)

    p = sub.add_parser("viz-attn", help="export attention-mask panels")
    _common(p)
    _eval_args(p)
    p.add_argument("--count", type=int)

    p = sub.add_parser("export-feats", help="export labeled region features as CSV")
    _common(p)
    _eval_args(p)
    p.add_argument("--sample-count", type=int)
    return parser


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    sets = list(args.set)
    if args.seed is not None:
        sets.append(f"train.seed={args.seed}")
    if getattr(args, "mode", None):
        sets.append(f"train.mode={json.dumps(args.mode)}")
    if getattr(args, "max_iters", None) is not None:
        sets.append(f"train.max_iters={args.max_iters}")
    if getattr(args, "data", None) is not None:
        sets.append(f"data.root={json.dumps(str(args.data))}")
    return cfg.override(sets) if sets else cfg


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")
    sys.stdout.flush()


def _load(args, cfg: RunConfig):
    state = load_checkpoint(args.checkpoint, force=args.force)
    split_name = args.split or cfg.eval.split
    spec = DatasetSpec(args.data, image_size=state.train_cfg.smallest_side).for_split(split_name)
    return state, load_split(spec)


def cmd_make_toy(args, cfg: RunConfig) -> None:
    if args.out is None:
        raise ConfigurationError("make-toy needs --out")
    n = args.n if args.n is not None else cfg.data.num_images
    n_test = args.n_test if args.n_test is not None else cfg.data.num_test
    size = args.size if args.size is not None else cfg.data.image_size
    synthesize_toy_dataset(n, size, cfg.train.seed, args.out, num_test=n_test)
    _emit({"path": str(args.out), "digest": dataset_digest(args.out)})


def cmd_train(args, cfg: RunConfig) -> None:
    if cfg.data.root is None:
        raise ConfigurationError("train needs --data or data.root in the config")
    if args.out is None:
        raise ConfigurationError("train needs --out")
    root = Path(cfg.data.root)
    if not root.is_dir():
        raise ConfigurationError(f"dataset directory not found: {root}")
    ann = root / "annotations_train.json"
    spec = DatasetSpec(root, "trainA", "trainB", ann if ann.exists() else None, cfg.data.image_size)
    args.out.mkdir(parents=True, exist_ok=True)
    cfg.save(args.out / "config.json")
    ck = fit(spec, cfg.train, args.out, cfg.model, cfg.local_global, resume=args.resume)
    _emit({"checkpoint": str(ck.path), "iteration": ck.iteration, "config_digest": ck.config_digest})


def cmd_translate(args, cfg: RunConfig) -> None:
    if args.out is None:
        raise ConfigurationError("translate needs --out")
    state, split = _load(args, cfg)
    imgs, _, keys = split["A"]
    args.out.mkdir(parents=True, exist_ok=True)
    for key, y in zip(keys, translate_images(state.model, imgs, state.train_cfg.mode)):
        Image.fromarray(to_uint8(y), mode="RGB").save(args.out / Path(key).name)
    _emit({"translated": len(keys), "out": str(args.out)})


def cmd_eval_metrics(args, cfg: RunConfig) -> None:
    if args.features_a is not None or args.features_b is not None:
        if args.features_a is None or args.features_b is None:
            raise ConfigurationError("--features-a and --features-b must be given together")
        fa, fb = load_features(args.features_a), load_features(args.features_b)
        subset = min(cfg.eval.kid_subset_size, len(fa), len(fb))
        _emit({"fid": frechet_distance(fa, fb),
               "kid": kernel_distance(fa, fb, subset, cfg.eval.kid_num_subsets),
               "fid_inst": None, "kid_inst": None})
        return
    if args.checkpoint is None or args.data is None:
        raise ConfigurationError("eval-metrics needs --checkpoint and --data (or feature files)")
    state, split = _load(args, cfg)
    _emit(evaluate_distribution(state.model, split, state.train_cfg.mode, cfg.eval.extractor(),
                                cfg.eval.kid_subset_size, cfg.eval.kid_num_subsets))


def cmd_eval_detect(args, cfg: RunConfig) -> None:
    state, split = _load(args, cfg)
    _emit(evaluate_detection(state.model, split, state.train_cfg.mode))


def cmd_viz_attn(args, cfg: RunConfig) -> None:
    if args.out is None:
        raise ConfigurationError("viz-attn needs --out")
    state, split = _load(args, cfg)
    if state.train_cfg.mode == "no_attention":
        raise ConfigurationError("the no_attention ablation has no attention masks")
    count = args.count if args.count is not None else cfg.eval.num_panels
    panels = export_attention_masks(state.model, split["A"][0][:count], args.out)
    _emit({"panels": len(panels), "out": str(args.out)})


def cmd_export_feats(args, cfg: RunConfig) -> None:
    if args.out is None:
        raise ConfigurationError("export-feats needs --out")
    state, split = _load(args, cfg)
    imgs, boxes, _ = split["A"]
    count = args.sample_count if args.sample_count is not None else cfg.eval.sample_count
    res = export_region_features(state.model, imgs, boxes, args.out, count, seed=cfg.train.seed)
    _emit({"rows": int(len(res.labels)), "available": int(res.available),
           "objects": int(res.labels.sum()), "out": str(args.out)})


COMMANDS = {
    "make-toy": cmd_make_toy,
    "train": cmd_train,
    "translate": cmd_translate,
    "eval-metrics": cmd_eval_metrics,
    "eval-detect": cmd_eval_detect,
    "viz-attn": cmd_viz_attn,
    "export-feats": cmd_export_feats,
}


def dispatch(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1
    if args.command is None:
        parser.print_help(sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.device != "cpu":
            raise ConfigurationError(f"unsupported device {args.device!r}; only 'cpu' is available")
        cfg = resolve_config(args)
        COMMANDS[args.command](args, cfg)
    except USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception:  # noqa: BLE001
        logger.exception("internal error")
        return 2
    return 0


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
