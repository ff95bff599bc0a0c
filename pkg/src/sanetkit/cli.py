"""``sanetkit`` command line: synth, resample, train, eval, gradcheck.

Exit codes: 0 success, 2 usage or configuration error, 3 data error,
4 numeric failure (non-finite training values or a failed gradient check).
"""

from __future__ import annotations

import argparse
import logging
import shutil
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import data as D
from .config import RunConfig, default_seed, load_config
from .errors import CheckpointError, ConfigError, DataError, NumericError, PipelineError
from .metrics import (CLASS_NAMES, ConfusionMatrix, macro_scores, multi_resolution_csv, multi_resolution_rows,
                      report_csv, report_table, resolution_label, secant_csv)
from .model import SaNet, load_checkpoint
from .train import confusion, fit

log = logging.getLogger("sanetkit")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


def _positive_float(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not value > 0 or not np.isfinite(value):
        raise argparse.ArgumentTypeError(f"factor must be a finite number > 0, got {text}")
    return value


def _prepare_out(path: Path, force: bool) -> None:
    if D.is_nonempty_dir(path):
        if not force:
            raise UsageError(f"{path} exists and is not empty; pass --force to overwrite")
        shutil.rmtree(path)
    elif path.exists() and not path.is_dir():
        raise UsageError(f"{path} exists and is not a directory")
    path.mkdir(parents=True, exist_ok=True)


def _tile_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


# -- synth -------------------------------------------------------------------------

def cmd_synth(args) -> int:
    out = Path(args.out)
    specs = [D.SyntheticSceneSpec(seed=_tile_seed(args.seed, k), size=args.size, min_patch=args.patch)
             for k in range(args.tiles)]
    _prepare_out(out, args.force)
    total = np.zeros(len(CLASS_NAMES), dtype=np.int64)
    for k, spec in enumerate(specs):
        image, label = D.render_scene(spec)
        D.write_tile(out, f"tile_{k:03d}", image, label)
        total += D.class_histogram(label, len(CLASS_NAMES))
    print(f"wrote {args.tiles} tiles of {args.size}x{args.size} to {out}")
    print("class       pixels  fraction")
    for name, n in zip(CLASS_NAMES, total):
        print(f"{name:<9} {n:>9}  {n / total.sum():.4f}")
    return EXIT_OK


# -- resample ----------------------------------------------------------------------

def cmd_resample(args) -> int:
    out = Path(args.out) if args.out else D.resampled_root(args.input, args.factor)
    D.list_tiles(args.input)  # fail on a bad input before touching the output
    _prepare_out(out, args.force)
    manifest = D.resample_dataset(args.input, args.factor, out, patch=args.patch)
    print(f"{len(manifest)} patches of {args.patch}px at factor {D.format_factor(args.factor)} -> {out}")
    return EXIT_OK


# -- train -------------------------------------------------------------------------

def load_samples(root: str | Path, patch: int) -> tuple[list, float]:
    """Patches of a dataset directory and the resolution factor they were sampled at."""
    root = Path(root)
    if (root / "manifest.txt").exists():
        manifest = D.PatchManifest.read(root / "manifest.txt")
        scales = {w.scale for w in manifest.windows}
        if len(scales) > 1:
            raise DataError(f"{root}: manifest mixes factors {sorted(scales)}")
        return D.load_patches(root), scales.pop() if scales else 1.0
    samples = []
    for tid in D.list_tiles(root):
        image, label = D.read_tile(root, tid)
        samples.extend(D.crop_arrays(image, label, patch))
    return samples, 1.0


def split_validation(root: str | Path, cfg: RunConfig) -> tuple[list, list]:
    """Hold out the last tiles (by name) as validation unless [data] val names a directory."""
    patch = cfg["data"]["patch"]
    if cfg["data"]["val"]:
        return load_samples(root, patch)[0], load_samples(cfg["data"]["val"], patch)[0]
    root = Path(root)
    tiles = D.list_tiles(root)
    if not tiles:
        raise DataError(f"{root}: no tiles")
    per_tile: dict[str, list] = {}
    if (root / "manifest.txt").exists():
        cache = {}
        for win in D.PatchManifest.read(root / "manifest.txt").windows:
            if win.tile_id not in cache:
                cache[win.tile_id] = D.read_tile(root, win.tile_id)
            img, lab = cache[win.tile_id]
            per_tile.setdefault(win.tile_id, []).append(
                (D.extract_window(img, win).copy(), D.extract_window(lab, win).copy()))
    else:
        for tid in tiles:
            per_tile[tid] = D.crop_arrays(*D.read_tile(root, tid), patch)
    order = sorted(per_tile)
    if len(order) >= 2:
        n_val = min(len(order) - 1, max(1, round(cfg["data"]["val_fraction"] * len(order))))
        train = [s for t in order[:-n_val] for s in per_tile[t]]
        val = [s for t in order[-n_val:] for s in per_tile[t]]
    else:
        samples = per_tile[order[0]]
        if len(samples) < 2:
            raise DataError(f"{root}: a single patch cannot be split into train and validation")
        n_val = max(1, round(cfg["data"]["val_fraction"] * len(samples)))
        train, val = samples[:-n_val], samples[-n_val:]
    return train, val


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set)
    out = Path(args.out)
    _prepare_out(out, args.force)
    cfg.write(out / "config.txt")
    train_set, val_set = split_validation(args.data, cfg)
    model = SaNet(cfg.model_config(), seed=cfg["model"]["seed"], dtype=cfg.dtype)
    log.info("%s: %d parameters, %d train / %d val patches", cfg["model"]["variant"], model.num_parameters(),
             len(train_set), len(val_set))
    result = fit(model, train_set, val_set, cfg.train_config(), out_dir=out)
    print(f"best epoch {result.best_epoch} of {len(result.history)}; "
          f"val mean F1 {result.history[result.best_epoch - 1].val_mean_f1:.4f}; checkpoints in {out}")
    return EXIT_OK


# -- eval --------------------------------------------------------------------------

def cmd_eval(args) -> int:
    if args.ckpt is None and not args.truth_as_prediction:
        raise UsageError("eval needs --ckpt (or --truth-as-prediction for a metrics self-check)")
    config_path = args.config
    if config_path is None and args.ckpt is not None and (Path(args.ckpt).parent / "config.txt").exists():
        config_path = Path(args.ckpt).parent / "config.txt"
    cfg = load_config(config_path, args.set)
    model = None
    if not args.truth_as_prediction:
        model = SaNet(cfg.model_config(), seed=cfg["model"]["seed"], dtype=cfg.dtype)
        load_checkpoint(model, args.ckpt)
    matrices: dict[float, ConfusionMatrix] = {}
    for root in args.data:
        samples, factor = load_samples(root, cfg["data"]["patch"])
        if model is None:
            cm = ConfusionMatrix(cfg["model"]["num_classes"])
            for _, lab in samples:
                cm.accumulate(lab, lab)
        else:
            cm = confusion(model, samples, cfg["eval"]["batch_size"])
        matrices[factor] = matrices[factor].merge(cm) if factor in matrices else cm
    results = {f: macro_scores(cm) for f, cm in sorted(matrices.items(), reverse=True)}
    method = args.method or ("truth" if model is None else cfg["model"]["variant"])

    parts = [multi_resolution_rows(results, method)]
    for f, s in results.items():
        parts.append(f"\n[{resolution_label(f)}]\n{report_table(s)}")
    text = "".join(parts)
    print(text, end="")
    if args.report:
        report = Path(args.report)
        report.parent.mkdir(parents=True, exist_ok=True)
        report.write_text(text)
        stem = report.with_suffix("")
        Path(f"{stem}_row.csv").write_text(multi_resolution_csv(results, method))
        Path(f"{stem}_secant.csv").write_text(secant_csv(results))
        for f, s in results.items():
            Path(f"{stem}_classes_{resolution_label(f)}.csv").write_text(report_csv(s))
        cfg.write(f"{stem}_config.txt")
    return EXIT_OK


# -- gradcheck ---------------------------------------------------------------------

def cmd_gradcheck(args) -> int:
    from .gradcheck import main_report

    return EXIT_OK if main_report(args.module, seed=args.seed) else EXIT_NUMERIC


# -- entry point -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sanetkit", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render synthetic aerial tiles with labels")
    p.add_argument("--seed", type=int, default=None, help="default: $SANETKIT_SEED or 0")
    p.add_argument("--tiles", type=int, default=4)
    p.add_argument("--size", type=int, default=512)
    p.add_argument("--patch", type=int, default=D.PATCH_SIZE, help="minimum tile side")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("resample", help="resample a dataset and write its patch manifest")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--factor", type=_positive_float, required=True)
    p.add_argument("--out", default=None, help="default: <in>_s<factor>")
    p.add_argument("--patch", type=int, default=D.PATCH_SIZE)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_resample)

    p = sub.add_parser("train", help="train a model with early stopping")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on one or more resampled datasets")
    p.add_argument("--ckpt", default=None)
    p.add_argument("--config", default=None, help="default: config.txt next to the checkpoint")
    p.add_argument("--data", action="append", required=True, help="repeat once per factor")
    p.add_argument("--report", default=None)
    p.add_argument("--method", default=None, help="row label in the report")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    p.add_argument("--truth-as-prediction", action="store_true",
                   help="score the labels against themselves instead of running a model")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    p.add_argument("--module", choices=("all", "layers", "sfr", "dcfpn", "model"), default="all")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        if getattr(args, "seed", 0) is None:
            args.seed = default_seed()
        return args.func(args)
    except (UsageError, ConfigError, PipelineError) as exc:
        print(f"sanetkit {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, FileNotFoundError) as exc:
        print(f"sanetkit {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"sanetkit {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    raise SystemExit(main())
