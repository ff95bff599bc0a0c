"""Desk-scale experiments: the memorization sanity run and the cross-resolution benchmark.

The benchmark trains each model on full-resolution synthetic patches only
and tests it on held-out scenes resampled to every factor, so the OA drop
from 1.0x to 0.25x measures how well a model transfers across ground
sampling distances it never saw.

Run ``python -m sanetkit.experiment --out results.json`` for the full
three-seed comparison.
"""

from __future__ import annotations

import argparse
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .data import CLUTTER, SyntheticSceneSpec, crop_arrays, render_scene, resample_tile
from .metrics import macro_scores
from .model import ModelConfig, SaNet
from .train import AdamW, TrainConfig, confusion, evaluate, fit, train_step

log = logging.getLogger(__name__)

Sample = tuple[np.ndarray, np.ndarray]

TEST_FACTORS = (1.0, 0.75, 0.5, 0.25)


# -- memorization sanity -------------------------------------------------------------

def overfit_samples(seed: int = 4, count: int = 4, patch: int = 64, scene_size: int = 512) -> list[Sample]:
    """The ``count`` clutter-free crops of one scene with the most classes present.

    Without clutter pixels the foreground-only OA equals plain pixel accuracy,
    so memorization shows up directly in that score.
    """
    image, label = render_scene(SyntheticSceneSpec(seed=seed, size=scene_size, min_patch=patch))
    crops = crop_arrays(image, label, patch)
    clean = [i for i, (_, lab) in enumerate(crops) if not (lab == CLUTTER).any()]
    ranked = sorted(clean, key=lambda i: (-len(np.unique(crops[i][1])), i))
    if len(ranked) < count:
        raise ValueError(f"scene {seed} has only {len(ranked)} clutter-free {patch}px crops")
    return [(crops[i][0].copy(), crops[i][1].copy()) for i in ranked[:count]]


@dataclass
class OverfitResult:
    epochs: int
    final_oa: float
    best_oa: float
    seconds: float
    history: list[float] = field(default_factory=list)


def overfit(samples: Sequence[Sample], cfg: ModelConfig = ModelConfig(), lr: float = 1e-3,
            weight_decay: float = 0.01, max_epochs: int = 300, target: float = 0.99,
            seed: int = 0, dtype=np.float64) -> OverfitResult:
    """Memorize ``samples`` with batch size 1 and no augmentation; stop once train OA reaches ``target``."""
    model = SaNet(cfg, seed=seed, dtype=dtype)
    opt = AdamW(model.parameters(), lr=lr, weight_decay=weight_decay)
    start = time.perf_counter()
    history = []
    for epoch in range(1, max_epochs + 1):
        for s in samples:
            train_step(model, opt, [s])
        history.append(macro_scores(confusion(model, samples)).oa)
        if history[-1] >= target:
            break
    return OverfitResult(epoch, history[-1], max(history), time.perf_counter() - start, history)


# -- cross-resolution benchmark --------------------------------------------------------

@dataclass(frozen=True)
class BenchmarkSpec:
    seed: int = 0
    patch: int = 64
    train_scenes: int = 4
    val_scenes: int = 1
    test_scenes: int = 4
    train_size: int = 512
    test_size: int = 1024
    factors: tuple[float, ...] = TEST_FACTORS


@dataclass
class Benchmark:
    train: list[Sample]
    val: list[Sample]
    test: dict[float, list[Sample]]


def _scene_seed(base: int, split: int, k: int) -> int:
    # disjoint seed ranges per split keep train, val and test scenes independent
    return base * 10_000 + split * 1_000 + k


def build_benchmark(spec: BenchmarkSpec = BenchmarkSpec()) -> Benchmark:
    def scenes(split: int, n: int, size: int):
        for k in range(n):
            yield render_scene(SyntheticSceneSpec(seed=_scene_seed(spec.seed, split, k), size=size,
                                                  min_patch=spec.patch))

    train = [c for img, lab in scenes(0, spec.train_scenes, spec.train_size) for c in crop_arrays(img, lab, spec.patch)]
    val = [c for img, lab in scenes(1, spec.val_scenes, spec.train_size) for c in crop_arrays(img, lab, spec.patch)]
    test: dict[float, list[Sample]] = {f: [] for f in spec.factors}
    for img, lab in scenes(2, spec.test_scenes, spec.test_size):
        for f in spec.factors:
            rimg, rlab = resample_tile(img, lab, f, patch=spec.patch)
            test[f].extend(crop_arrays(rimg, rlab, spec.patch))
    return Benchmark(train, val, test)


@dataclass
class VariantRun:
    variant: str
    seed: int
    best_epoch: int
    epochs: int
    oa: dict[str, float]
    mean_f1: dict[str, float]
    seconds: float

    @property
    def drop(self) -> float:
        return self.oa["1.0"] - self.oa["0.25"]


def run_variant(variant: str, bench: Benchmark, seed: int, train_cfg: TrainConfig | None = None,
                dtype=np.float32) -> VariantRun:
    train_cfg = train_cfg or TrainConfig(seed=seed, max_epochs=60, patience=5)
    start = time.perf_counter()
    model = SaNet(ModelConfig.variant(variant), seed=seed, dtype=dtype)
    result = fit(model, bench.train, bench.val, train_cfg)
    oa, mf1 = {}, {}
    for f, samples in bench.test.items():
        scores = evaluate(model, samples, batch_size=32)
        oa[repr(f)], mf1[repr(f)] = scores.oa, scores.mean_f1
    run = VariantRun(variant, seed, result.best_epoch, len(result.history), oa, mf1, time.perf_counter() - start)
    log.info("%s seed %d: best epoch %d/%d, OA %s, %.0fs", variant, seed, run.best_epoch, run.epochs,
             {k: round(v, 4) for k, v in oa.items()}, run.seconds)
    return run


@dataclass
class SeedOutcome:
    seed: int
    baseline: VariantRun
    sanet: VariantRun

    @property
    def smaller_drop(self) -> bool:
        return self.sanet.drop < self.baseline.drop

    @property
    def better_low_res(self) -> bool:
        return self.sanet.oa["0.25"] >= self.baseline.oa["0.25"]

    @property
    def satisfied(self) -> bool:
        return self.smaller_drop and self.better_low_res


def cross_resolution(seeds: Sequence[int] = (0, 1, 2), spec: BenchmarkSpec = BenchmarkSpec(),
                     train_cfg: TrainConfig | None = None) -> list[SeedOutcome]:
    outcomes = []
    for seed in seeds:
        bench = build_benchmark(BenchmarkSpec(**{**asdict(spec), "seed": seed}))
        cfg = train_cfg if train_cfg is None else TrainConfig(**{**asdict(train_cfg), "seed": seed})
        outcomes.append(SeedOutcome(seed, run_variant("baseline", bench, seed, cfg),
                                    run_variant("sanet", bench, seed, cfg)))
    return outcomes


def summarize(outcomes: Sequence[SeedOutcome]) -> dict:
    rows = []
    for o in outcomes:
        rows.append({
            "seed": o.seed,
            "baseline": {**asdict(o.baseline), "drop": o.baseline.drop},
            "sanet": {**asdict(o.sanet), "drop": o.sanet.drop},
            "smaller_drop": o.smaller_drop,
            "better_low_res": o.better_low_res,
            "satisfied": o.satisfied,
        })
    wins = sum(o.satisfied for o in outcomes)
    return {"seeds": rows, "satisfied": wins, "majority": wins * 2 > len(outcomes)}


def main(argv: Sequence[str] | None = None) -> int:
    parser = argparse.ArgumentParser(description="baseline vs SaNet cross-resolution benchmark")
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    parser.add_argument("--out", help="write the JSON summary here")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    summary = summarize(cross_resolution(args.seeds))
    text = json.dumps(summary, indent=2)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    print(text)
    return 0 if summary["majority"] else 1


if __name__ == "__main__":
    raise SystemExit(main())
