"""Training loops (plain ERM and the closed augmentation loop) plus evaluation.

The joint loss is mean cross-entropy over the original batch plus
aug_weight times mean cross-entropy over the mined hard batch; when no
sample survives mining the augmented term is dropped and the step reduces
exactly to ERM. With mining disabled the two training modes are
bit-identical under equal seeds, which the test suite asserts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tinynet
from .attribution import SearchConfig, greedy_counterfactual, select_counter_target
from .augment import (
    AugmentedSample,
    DonorPool,
    LabeledSample,
    MiningConfig,
    _prefix_counter_cmax,
    build_donor_pool,
    mine_hard_batch,
)
from .errors import DataError, NumericError
from .imaging import Image, partition_grid
from .scorer import Scorer, ScoreVector
from .testbed import CorruptionSpec, DatasetSplit, TestbedData, apply_corruption, mix_seed
from .tinynet import Arch, TinyNetParams, TinyNetScorer, TrainConfig

_Z95 = 1.959963984540054


@dataclass(frozen=True)
class JointBatch:
    """An original batch merged with its mined hard batch (M <= N)."""

    originals: tuple[LabeledSample, ...]
    augmented: tuple[AugmentedSample, ...]

    def __post_init__(self) -> None:
        if not self.originals:
            raise ValueError("originals must be nonempty")
        if len(self.augmented) > len(self.originals):
            raise ValueError("hard batch cannot exceed the original batch")
        for aug in self.augmented:
            if not 0 <= aug.source_index < len(self.originals):
                raise ValueError(f"augmented sample source {aug.source_index} out of range")


def joint_loss_from_ce(
    ce_originals: Sequence[float], ce_augmented: Sequence[float], aug_weight: float = 1.0
) -> float:
    """Joint objective from per-sample CE values; empty hard batch drops the term."""
    orig = float(np.mean(ce_originals))
    if len(ce_augmented) == 0:
        return orig
    return orig + aug_weight * float(np.mean(ce_augmented))


@dataclass
class StepLog:
    step: int
    epoch: int
    batch_indices: np.ndarray
    mined: list[AugmentedSample]
    n_candidates: int
    loss_orig: float
    loss_aug: float | None
    loss_joint: float
    params_before: TinyNetParams
    params_after: TinyNetParams


@dataclass
class TrainResult:
    params: TinyNetParams
    loss_rows: list[dict]


ScorerFactory = Callable[[TinyNetParams], Scorer]
StepCallback = Callable[[StepLog], None]


def _train_loop(
    data: TestbedData,
    arch: Arch,
    config: TrainConfig,
    mining: MiningConfig | None,
    aug_weight: float,
    on_step: StepCallback | None,
    scorer_factory: ScorerFactory,
) -> TrainResult:
    train = data.splits["train"]
    n = len(train)
    if n == 0:
        raise DataError("train split is empty")
    params = tinynet.init(arch, config.rng_seed)
    opt_state = None
    shuffle_rng = np.random.default_rng((config.rng_seed, 11))
    mining_active = (
        mining is not None and mining.tau_aug < 1.0 and mining.candidate_fraction > 0.0
    )
    pool: DonorPool | None = None
    if mining_active:
        pool = build_donor_pool(
            data.donors, seed=config.rng_seed, expected_shape=train.images.shape[1:]
        )
    mined_cache: list[AugmentedSample] = []
    cached_candidates = 0
    rows: list[dict] = []
    step = 0
    for epoch in range(config.epochs):
        perm = shuffle_rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = perm[start : start + config.batch_size]
            x = train.images[idx]
            y = train.labels[idx]
            mined: list[AugmentedSample] = []
            n_candidates = 0
            if mining_active and epoch >= mining.warmup_epochs:
                assert pool is not None
                if step % mining.refresh_interval == 0:
                    scorer = scorer_factory(params)  # frozen view of the live params
                    batch_samples = [
                        LabeledSample(Image(x[i].copy()), int(y[i])) for i in range(len(idx))
                    ]
                    pool.reseed((config.rng_seed, 13, step))
                    sel_rng = np.random.default_rng((config.rng_seed, 17, step))
                    mined_cache = mine_hard_batch(batch_samples, scorer, pool, mining, rng=sel_rng)
                    cached_candidates = math.ceil(mining.candidate_fraction * len(idx))
                mined = mined_cache
                n_candidates = cached_candidates
            if mined:
                aug_x = np.stack([a.image.data for a in mined])
                aug_y = np.array([a.label for a in mined], dtype=np.int64)
                bx = np.concatenate([x, aug_x], axis=0)
                by = np.concatenate([y, aug_y])
                weights = np.concatenate(
                    [np.full(len(idx), 1.0 / len(idx)), np.full(len(mined), aug_weight / len(mined))]
                )
            else:
                bx, by = x, y
                weights = np.full(len(idx), 1.0 / len(idx))
            ce, grads = tinynet.loss_and_grads(params, bx, by, weights)
            loss_orig = float(ce[: len(idx)].mean())
            loss_aug = float(ce[len(idx) :].mean()) if mined else None
            loss_joint = loss_orig + aug_weight * loss_aug if mined else loss_orig
            if not np.isfinite(loss_joint):
                raise NumericError(f"non-finite loss at step {step}")
            params_before = params
            params, opt_state = tinynet.optimizer_step(params, grads, config, step, opt_state)
            rows.append(
                {
                    "step": step,
                    "epoch": epoch,
                    "loss_joint": loss_joint,
                    "loss_orig": loss_orig,
                    "loss_aug": loss_aug,
                    "n_candidates": n_candidates,
                    "n_mined": len(mined),
                }
            )
            if on_step is not None:
                on_step(
                    StepLog(
                        step=step,
                        epoch=epoch,
                        batch_indices=idx.copy(),
                        mined=list(mined),
                        n_candidates=n_candidates,
                        loss_orig=loss_orig,
                        loss_aug=loss_aug,
                        loss_joint=loss_joint,
                        params_before=params_before,
                        params_after=params,
                    )
                )
            step += 1
    return TrainResult(params=params, loss_rows=rows)


def train_erm(
    data: TestbedData,
    arch: Arch,
    config: TrainConfig,
    on_step: StepCallback | None = None,
) -> TrainResult:
    """Plain empirical-risk minimization over the train split."""
    return _train_loop(data, arch, config, None, 0.0, on_step, TinyNetScorer)


def train_ssca(
    data: TestbedData,
    arch: Arch,
    config: TrainConfig,
    mining: MiningConfig,
    aug_weight: float = 1.0,
    on_step: StepCallback | None = None,
    scorer_factory: ScorerFactory = TinyNetScorer,
) -> TrainResult:
    """Closed-loop training: per-step hard mining against the live model,
    then one optimizer step on the joint gradient."""
    return _train_loop(data, arch, config, mining, aug_weight, on_step, scorer_factory)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def _predict(params: TinyNetParams, images: np.ndarray, chunk: int = 512) -> np.ndarray:
    preds = np.empty(images.shape[0], dtype=np.int64)
    for start in range(0, images.shape[0], chunk):
        probs, _ = tinynet.forward_array(params, images[start : start + chunk])
        preds[start : start + chunk] = probs.argmax(axis=1)  # first max: lowest class id
    return preds


def evaluate(model: TinyNetParams | Scorer, split: DatasetSplit) -> float:
    """Top-1 accuracy in percent; argmax ties break to the lowest class id.

    Accepts trained params (fast array path) or any scorer implementation.
    """
    if len(split) == 0:
        raise DataError(f"split {split.name} is empty")
    if isinstance(model, TinyNetParams):
        preds = _predict(model, split.images)
    else:
        scores = model.score_batch([Image(split.images[i]) for i in range(len(split))])
        preds = np.array([int(np.argmax(sv.probs)) for sv in scores])
    return float(100.0 * (preds == split.labels).mean())


def evaluate_corruptions(
    params: TinyNetParams,
    split: DatasetSplit,
    specs: Sequence[CorruptionSpec],
    seed: int = 0,
) -> dict[str, float]:
    """Accuracy per corruption; noise streams depend only on (seed, spec, index),
    so two models evaluated with the same seed see identical corrupted pixels."""
    out: dict[str, float] = {}
    for spec_index, spec in enumerate(specs):
        corrupted = np.empty_like(split.images)
        for i in range(len(split)):
            img = apply_corruption(
                Image(split.images[i]), spec, seed=mix_seed(seed, spec_index, i)
            )
            corrupted[i] = img.data
        preds = _predict(params, corrupted)
        out[spec.label()] = float(100.0 * (preds == split.labels).mean())
    return out


@dataclass(frozen=True)
class FlipRateReport:
    strategy: str
    n: int
    successes: int
    rate: float | None
    ci95: tuple[float, float] | None
    c_max_values: tuple[float, ...]
    threshold: float = 0.5

    def to_json_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "n": self.n,
            "successes": self.successes,
            "rate": self.rate,
            "ci95": list(self.ci95) if self.ci95 is not None else None,
            "threshold": self.threshold,
        }


def wilson_interval(successes: int, n: int, z: float = _Z95) -> tuple[float, float]:
    """Wilson score interval for a binomial proportion."""
    if n == 0:
        raise ValueError("n must be positive")
    p = successes / n
    denom = 1.0 + z * z / n
    center = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    return (max(0.0, center - half), min(1.0, center + half))


def flip_rate(
    params: TinyNetParams,
    split: DatasetSplit,
    search: SearchConfig,
    sample_count: int = 200,
    seed: int = 0,
    strategy: str = "greedy",
) -> FlipRateReport:
    """Fraction of correctly-classified samples whose region-removal trajectory
    reaches counter-class confidence > 0.5 within the budget.

    strategy "greedy" runs the counterfactual search; "random" deletes a
    uniformly chosen region set of equal budget (the comparison oracle).
    """
    if strategy not in ("greedy", "random"):
        raise ValueError(f"unknown strategy {strategy!r}")
    probs_all = np.empty((len(split), params.arch.num_classes))
    logits_all = np.empty_like(probs_all)
    chunk = 512
    for start in range(0, len(split), chunk):
        p, l = tinynet.forward_array(params, split.images[start : start + chunk])
        probs_all[start : start + chunk] = p
        logits_all[start : start + chunk] = l
    preds = probs_all.argmax(axis=1)
    correct = np.flatnonzero(preds == split.labels)
    if correct.size == 0:
        return FlipRateReport(
            strategy=strategy, n=0, successes=0, rate=None, ci95=None, c_max_values=()
        )
    rng = np.random.default_rng((seed, 23))
    take = min(sample_count, correct.size)
    chosen = rng.choice(correct, size=take, replace=False)
    scorer = TinyNetScorer(params)
    gh, gw = search.grid_shape
    grid = partition_grid(split.images.shape[1], split.images.shape[2], gh, gw)
    budget = search.resolve_budget(grid.num_regions)
    c_values: list[float] = []
    for i in chosen:
        i = int(i)
        label = int(split.labels[i])
        sv = ScoreVector(probs=probs_all[i], logits=logits_all[i])
        y_counter = select_counter_target(sv, label)
        image = Image(split.images[i].copy())
        if strategy == "greedy":
            result = greedy_counterfactual(scorer, image, label, y_counter, search)
            c_values.append(result.c_max)
        else:
            sel_rng = np.random.default_rng((seed, 29, i))
            ordered = [int(r) for r in sel_rng.choice(grid.num_regions, size=budget, replace=False)]
            c_values.append(
                _prefix_counter_cmax(scorer, image, grid, ordered, y_counter, search.baseline)
            )
    successes = sum(1 for c in c_values if c > 0.5)
    return FlipRateReport(
        strategy=strategy,
        n=take,
        successes=successes,
        rate=successes / take,
        ci95=wilson_interval(successes, take),
        c_max_values=tuple(c_values),
    )


# ---------------------------------------------------------------------------
# Evaluation report
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    tool_version: str
    config_echo: dict
    seeds: list[int]
    splits: dict[str, float]
    corruptions: dict[str, float] | None = None
    flip: FlipRateReport | None = None
    per_step_loss: str | None = None

    def to_json_dict(self) -> dict:
        return {
            "tool_version": self.tool_version,
            "config": self.config_echo,
            "seeds": self.seeds,
            "splits": self.splits,
            "corruptions": self.corruptions,
            "flip_rate": self.flip.to_json_dict() if self.flip is not None else None,
            "per_step_loss": self.per_step_loss,
        }


def validate_eval_report(d: dict) -> list[str]:
    """Structural check of a report dict against the published schema;
    returns a list of problems (empty means valid)."""
    errors: list[str] = []
    required = {"tool_version", "config", "seeds", "splits", "corruptions", "flip_rate", "per_step_loss"}
    missing = required - set(d)
    extra = set(d) - required
    if missing:
        errors.append(f"missing keys: {sorted(missing)}")
    if extra:
        errors.append(f"unknown keys: {sorted(extra)}")
    if not isinstance(d.get("tool_version"), str):
        errors.append("tool_version must be a string")
    if not isinstance(d.get("config"), dict):
        errors.append("config must be an object")
    seeds = d.get("seeds")
    if not isinstance(seeds, list) or not all(isinstance(s, int) for s in seeds):
        errors.append("seeds must be a list of integers")
    splits = d.get("splits")
    if not isinstance(splits, dict) or not splits:
        errors.append("splits must be a nonempty object")
    else:
        for name, acc in splits.items():
            if not isinstance(acc, (int, float)) or not 0.0 <= float(acc) <= 100.0:
                errors.append(f"splits.{name} must be a percentage in [0, 100]")
    corruptions = d.get("corruptions")
    if corruptions is not None:
        if not isinstance(corruptions, dict):
            errors.append("corruptions must be an object or null")
        else:
            for name, acc in corruptions.items():
                if not isinstance(acc, (int, float)) or not 0.0 <= float(acc) <= 100.0:
                    errors.append(f"corruptions.{name} must be a percentage in [0, 100]")
    flip = d.get("flip_rate")
    if flip is not None:
        if not isinstance(flip, dict):
            errors.append("flip_rate must be an object or null")
        else:
            for key in ("strategy", "n", "successes", "rate", "ci95", "threshold"):
                if key not in flip:
                    errors.append(f"flip_rate.{key} missing")
    psl = d.get("per_step_loss")
    if psl is not None and not isinstance(psl, str):
        errors.append("per_step_loss must be a string path or null")
    return errors
