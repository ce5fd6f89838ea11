"""Counterfactual and factual region attribution by greedy subset search.

The counterfactual search grows a set of regions whose removal drives the
classifier from the ground-truth class toward a chosen counter class. Each
candidate set S is scored by a four-term utility built from two probe
images: the deletion image (S masked out) and the insertion image (only S
visible):

    F(S) = lambda1 * f_counter(deletion)        (counterfactual driver)
         + lambda1 * (1 - f_counter(insertion)) (counterfactual consistency)
         + lambda2 * (1 - f_gt(deletion))       (gt suppression)
         + lambda2 * f_gt(insertion)            (gt fidelity)

The greedy step keeps the candidate with maximal F; because F(S) is fixed
within a step, ranking by F(S + {v}) equals ranking by marginal gain.
Factual attribution greedily maximizes the area-weighted cumulative
ground-truth confidence over insertion prefixes instead.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DimensionMismatchError, GuardError
from .imaging import (
    Image,
    RegionGrid,
    RegionMask,
    _baseline_vector,
    area_fraction,
    mask_delete,
    mask_insert,
    partition_grid,
    write_ppm,
)
from .scorer import Scorer, ScoreVector, score_batch

STOP_BUDGET = "budget_exhausted"
STOP_THRESHOLD = "threshold_reached"


@dataclass(frozen=True)
class UtilityWeights:
    lambda1: float = 1.0
    lambda2: float = 1.0

    def __post_init__(self) -> None:
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("utility weights must be nonnegative")
        if self.lambda1 == 0 and self.lambda2 == 0:
            raise ValueError("utility weights must not both be zero")


@dataclass(frozen=True)
class SearchConfig:
    """Greedy-search knobs. budget_k=None resolves to ceil(0.25 * m) at run time."""

    budget_k: int | None = None
    tau_cf: float = 0.5
    weights: UtilityWeights = field(default_factory=UtilityWeights)
    baseline: float = 0.0
    grid_shape: tuple[int, int] = (7, 7)

    def __post_init__(self) -> None:
        if not 0.0 <= self.tau_cf <= 1.0:
            raise ValueError(f"tau_cf must lie in [0, 1], got {self.tau_cf}")
        gh, gw = self.grid_shape
        if gh < 1 or gw < 1:
            raise ValueError(f"grid shape must be positive, got {self.grid_shape}")
        if self.budget_k is not None and self.budget_k < 0:
            raise ValueError(f"budget_k must be nonnegative, got {self.budget_k}")

    def resolve_budget(self, num_regions: int) -> int:
        k = self.budget_k if self.budget_k is not None else math.ceil(0.25 * num_regions)
        if k > num_regions:
            raise ValueError(f"budget_k {k} exceeds region count {num_regions}")
        return k


@dataclass(frozen=True)
class StepRecord:
    """One accepted region: the four probe confidences and the utility terms.

    Standalone utility evaluations reuse this shape with step=0, region_id=-1.
    """

    step: int
    region_id: int
    f_gt_del: float
    f_cf_del: float
    f_gt_ins: float
    f_cf_ins: float
    lambda1: float
    lambda2: float
    utility_total: float
    area_fraction: float

    @property
    def term_a(self) -> float:
        return self.lambda1 * self.f_cf_del

    @property
    def term_b(self) -> float:
        return self.lambda1 * (1.0 - self.f_cf_ins)

    @property
    def term_c(self) -> float:
        return self.lambda2 * (1.0 - self.f_gt_del)

    @property
    def term_d(self) -> float:
        return self.lambda2 * self.f_gt_ins

    def recomputed_utility(self) -> float:
        return self.term_a + self.term_b + self.term_c + self.term_d

    def to_json_dict(self) -> dict:
        return {
            "step": self.step,
            "region_id": self.region_id,
            "f_gt_del": self.f_gt_del,
            "f_cf_del": self.f_cf_del,
            "f_gt_ins": self.f_gt_ins,
            "f_cf_ins": self.f_cf_ins,
            "lambda1": self.lambda1,
            "lambda2": self.lambda2,
            "utility_total": self.utility_total,
            "area_fraction": self.area_fraction,
            "components": {
                "a": self.term_a,
                "b": self.term_b,
                "c": self.term_c,
                "d": self.term_d,
            },
        }

    @staticmethod
    def from_json_dict(d: dict) -> "StepRecord":
        return StepRecord(
            step=int(d["step"]),
            region_id=int(d["region_id"]),
            f_gt_del=float(d["f_gt_del"]),
            f_cf_del=float(d["f_cf_del"]),
            f_gt_ins=float(d["f_gt_ins"]),
            f_cf_ins=float(d["f_cf_ins"]),
            lambda1=float(d["lambda1"]),
            lambda2=float(d["lambda2"]),
            utility_total=float(d["utility_total"]),
            area_fraction=float(d["area_fraction"]),
        )


@dataclass(frozen=True)
class AttributionResult:
    y_gt: int
    y_counter: int
    ordered_regions: tuple[int, ...]
    final_mask: RegionMask
    steps: tuple[StepRecord, ...]
    c_max: float
    stop_reason: str
    config: SearchConfig

    @property
    def grid(self) -> RegionGrid:
        return self.final_mask.grid

    def to_json_dict(self) -> dict:
        g = self.grid
        return {
            "y_gt": self.y_gt,
            "y_counter": self.y_counter,
            "ordered_regions": list(self.ordered_regions),
            "c_max": self.c_max,
            "stop_reason": self.stop_reason,
            "grid": {
                "gh": g.gh,
                "gw": g.gw,
                "image_height": g.image_height,
                "image_width": g.image_width,
            },
            "search": {
                "budget_k": self.config.budget_k,
                "tau_cf": self.config.tau_cf,
                "lambda1": self.config.weights.lambda1,
                "lambda2": self.config.weights.lambda2,
                "baseline": self.config.baseline,
                "grid_shape": list(self.config.grid_shape),
            },
            "steps": [s.to_json_dict() for s in self.steps],
        }

    @staticmethod
    def from_json_dict(d: dict) -> "AttributionResult":
        g = d["grid"]
        grid = partition_grid(g["image_height"], g["image_width"], g["gh"], g["gw"])
        s = d["search"]
        config = SearchConfig(
            budget_k=s["budget_k"],
            tau_cf=float(s["tau_cf"]),
            weights=UtilityWeights(float(s["lambda1"]), float(s["lambda2"])),
            baseline=float(s["baseline"]),
            grid_shape=tuple(s["grid_shape"]),
        )
        ordered = tuple(int(r) for r in d["ordered_regions"])
        return AttributionResult(
            y_gt=int(d["y_gt"]),
            y_counter=int(d["y_counter"]),
            ordered_regions=ordered,
            final_mask=RegionMask(grid, frozenset(ordered)),
            steps=tuple(StepRecord.from_json_dict(sd) for sd in d["steps"]),
            c_max=float(d["c_max"]),
            stop_reason=str(d["stop_reason"]),
            config=config,
        )


@dataclass(frozen=True)
class CurvePoint:
    step: int
    area_fraction_removed: float
    f_gt_del: float
    f_cf_del: float


@dataclass(frozen=True)
class FactualStep:
    step: int
    region_id: int
    insertion_confidence: float
    gain: float
    partial_objective: float


@dataclass(frozen=True)
class FactualResult:
    y_gt: int
    ordered_regions: tuple[int, ...]
    steps: tuple[FactualStep, ...]
    objective: float
    grid: RegionGrid


def select_counter_target(scores: ScoreVector, y_gt: int) -> int:
    """The strongest competitor class: argmax over logits (probs fallback), ties low."""
    vec = scores.logits if scores.logits is not None else scores.probs
    if not 0 <= y_gt < vec.size:
        raise ValueError(f"y_gt {y_gt} out of range for {vec.size} classes")
    masked = np.array(vec, dtype=np.float64)
    masked[y_gt] = -np.inf
    return int(np.argmax(masked))


def _fill_cell(data: np.ndarray, grid: RegionGrid, rid: int, value: np.ndarray) -> None:
    t, l, b, r = grid.cells[rid]
    data[t:b, l:r, :] = value


def _restore_cell(data: np.ndarray, grid: RegionGrid, rid: int, source: np.ndarray) -> None:
    t, l, b, r = grid.cells[rid]
    data[t:b, l:r, :] = source[t:b, l:r, :]


def counterfactual_utility(
    scorer: Scorer,
    image: Image,
    grid: RegionGrid,
    mask: RegionMask,
    y_gt: int,
    y_counter: int,
    weights: UtilityWeights,
    baseline: float = 0.0,
) -> StepRecord:
    """Evaluate the four-term utility F(S) for one region set."""
    if mask.grid != grid:
        raise DimensionMismatchError("mask was built on a different grid")
    deletion = mask_delete(image, mask, baseline)
    insertion = mask_insert(image, mask, baseline)
    s_del = score_batch(scorer, [deletion])[0]
    s_ins = score_batch(scorer, [insertion])[0]
    f_gt_del = float(s_del.probs[y_gt])
    f_cf_del = float(s_del.probs[y_counter])
    f_gt_ins = float(s_ins.probs[y_gt])
    f_cf_ins = float(s_ins.probs[y_counter])
    total = (
        weights.lambda1 * f_cf_del
        + weights.lambda1 * (1.0 - f_cf_ins)
        + weights.lambda2 * (1.0 - f_gt_del)
        + weights.lambda2 * f_gt_ins
    )
    return StepRecord(
        step=0,
        region_id=-1,
        f_gt_del=f_gt_del,
        f_cf_del=f_cf_del,
        f_gt_ins=f_gt_ins,
        f_cf_ins=f_cf_ins,
        lambda1=weights.lambda1,
        lambda2=weights.lambda2,
        utility_total=total,
        area_fraction=area_fraction(grid, mask),
    )


def greedy_counterfactual(
    scorer: Scorer,
    image: Image,
    y_gt: int,
    y_counter: int,
    config: SearchConfig,
) -> AttributionResult:
    """Greedy counterfactual region search.

    At each step every remaining region is appended tentatively to the
    current set, all candidate deletion images are scored in one batch and
    all insertion images in a second batch, and the candidate with maximal
    utility wins (ties break to the lowest region id). The search stops when
    the chosen candidate's counter-class confidence on the deletion image
    exceeds tau_cf, or when the region budget is exhausted.
    """
    num_classes = scorer.info.num_classes
    if y_gt == y_counter:
        raise ValueError("y_gt and y_counter must differ")
    if not (0 <= y_gt < num_classes and 0 <= y_counter < num_classes):
        raise ValueError(f"class ids ({y_gt}, {y_counter}) out of range for {num_classes}")
    gh, gw = config.grid_shape
    grid = partition_grid(image.height, image.width, gh, gw)
    budget = config.resolve_budget(grid.num_regions)
    w = config.weights
    base_vec = _baseline_vector(config.baseline, image.channels)

    # running probe images: deletion starts at the full image, insertion at all-baseline
    del_base = image.data.copy()
    ins_base = np.broadcast_to(base_vec, image.shape).copy()

    chosen: list[int] = []
    steps: list[StepRecord] = []
    remaining = list(range(grid.num_regions))
    c_max = 0.0
    removed_area = 0
    stop_reason = STOP_BUDGET

    for t in range(1, budget + 1):
        del_batch: list[Image] = []
        ins_batch: list[Image] = []
        for rid in remaining:
            cand_del = del_base.copy()
            _fill_cell(cand_del, grid, rid, base_vec)
            cand_ins = ins_base.copy()
            _restore_cell(cand_ins, grid, rid, image.data)
            del_batch.append(Image(cand_del))
            ins_batch.append(Image(cand_ins))
        scores_del = score_batch(scorer, del_batch)
        scores_ins = score_batch(scorer, ins_batch)
        s_del_gt = np.array([s.probs[y_gt] for s in scores_del])
        s_del_cf = np.array([s.probs[y_counter] for s in scores_del])
        s_ins_gt = np.array([s.probs[y_gt] for s in scores_ins])
        s_ins_cf = np.array([s.probs[y_counter] for s in scores_ins])
        gains = (
            w.lambda1 * s_del_cf
            + w.lambda1 * (1.0 - s_ins_cf)
            + w.lambda2 * (1.0 - s_del_gt)
            + w.lambda2 * s_ins_gt
        )
        i_star = int(np.argmax(gains))  # first max, and remaining is ascending: lowest id wins
        v_star = remaining[i_star]
        c_current = float(s_del_cf[i_star])

        chosen.append(v_star)
        remaining.pop(i_star)
        _fill_cell(del_base, grid, v_star, base_vec)
        _restore_cell(ins_base, grid, v_star, image.data)
        removed_area += grid.cell_area(v_star)
        steps.append(
            StepRecord(
                step=t,
                region_id=v_star,
                f_gt_del=float(s_del_gt[i_star]),
                f_cf_del=c_current,
                f_gt_ins=float(s_ins_gt[i_star]),
                f_cf_ins=float(s_ins_cf[i_star]),
                lambda1=w.lambda1,
                lambda2=w.lambda2,
                utility_total=float(gains[i_star]),
                area_fraction=removed_area / grid.image_area,
            )
        )
        if c_current > c_max:
            c_max = c_current
        if c_current > config.tau_cf:
            stop_reason = STOP_THRESHOLD
            break

    return AttributionResult(
        y_gt=y_gt,
        y_counter=y_counter,
        ordered_regions=tuple(chosen),
        final_mask=RegionMask(grid, frozenset(chosen)),
        steps=tuple(steps),
        c_max=c_max,
        stop_reason=stop_reason,
        config=config,
    )


def greedy_factual(
    scorer: Scorer,
    image: Image,
    y_gt: int,
    grid: RegionGrid,
    budget_k: int,
    baseline: float = 0.0,
) -> FactualResult:
    """Greedy insertion order maximizing area-weighted cumulative gt confidence.

    Each step appends the region v maximizing (|v| / A) * f_gt(insertion of
    S + {v}); the reported objective is the sum of those per-step terms.
    """
    if not 0 <= y_gt < scorer.info.num_classes:
        raise ValueError(f"y_gt {y_gt} out of range")
    if budget_k > grid.num_regions:
        raise ValueError(f"budget_k {budget_k} exceeds region count {grid.num_regions}")
    base_vec = _baseline_vector(baseline, image.channels)
    ins_base = np.broadcast_to(base_vec, image.shape).copy()
    remaining = list(range(grid.num_regions))
    chosen: list[int] = []
    steps: list[FactualStep] = []
    objective = 0.0
    for t in range(1, budget_k + 1):
        batch = []
        for rid in remaining:
            cand = ins_base.copy()
            _restore_cell(cand, grid, rid, image.data)
            batch.append(Image(cand))
        scores = score_batch(scorer, batch)
        conf = np.array([s.probs[y_gt] for s in scores])
        areas = np.array([grid.cell_area(rid) for rid in remaining], dtype=np.float64)
        gains = (areas / grid.image_area) * conf
        i_star = int(np.argmax(gains))
        v_star = remaining[i_star]
        objective += float(gains[i_star])
        chosen.append(v_star)
        remaining.pop(i_star)
        _restore_cell(ins_base, grid, v_star, image.data)
        steps.append(
            FactualStep(
                step=t,
                region_id=v_star,
                insertion_confidence=float(conf[i_star]),
                gain=float(gains[i_star]),
                partial_objective=objective,
            )
        )
    return FactualResult(
        y_gt=y_gt,
        ordered_regions=tuple(chosen),
        steps=tuple(steps),
        objective=objective,
        grid=grid,
    )


def deletion_curve(scorer: Scorer, image: Image, result: AttributionResult) -> list[CurvePoint]:
    """Confidences on prefix-deletion images along the selected order.

    Point 0 is the unmasked image; point t has the first t regions removed.
    All points are scored fresh in a single batch.
    """
    grid = result.grid
    if (grid.image_height, grid.image_width) != (image.height, image.width):
        raise DimensionMismatchError("result was produced on an image with different dims")
    base_vec = _baseline_vector(result.config.baseline, image.channels)
    batch = [Image(image.data.copy())]
    running = image.data.copy()
    areas = [0.0]
    removed = 0
    for rid in result.ordered_regions:
        _fill_cell(running, grid, rid, base_vec)
        removed += grid.cell_area(rid)
        batch.append(Image(running.copy()))
        areas.append(removed / grid.image_area)
    scores = score_batch(scorer, batch)
    return [
        CurvePoint(
            step=t,
            area_fraction_removed=areas[t],
            f_gt_del=float(scores[t].probs[result.y_gt]),
            f_cf_del=float(scores[t].probs[result.y_counter]),
        )
        for t in range(len(batch))
    ]


def brute_force_best_set(
    scorer: Scorer,
    image: Image,
    grid: RegionGrid,
    y_gt: int,
    y_counter: int,
    weights: UtilityWeights,
    size_k: int,
    baseline: float = 0.0,
) -> tuple[frozenset[int], float]:
    """Exhaustive utility maximum over all size-k region sets (oracle; m <= 12)."""
    m = grid.num_regions
    if m > 12:
        raise GuardError(f"brute force is guarded at m <= 12, got m = {m}")
    if not 0 <= size_k <= m:
        raise ValueError(f"size_k {size_k} out of range")
    best_set: frozenset[int] | None = None
    best_value = -np.inf
    for combo in itertools.combinations(range(m), size_k):
        rec = counterfactual_utility(
            scorer, image, grid, RegionMask(grid, frozenset(combo)), y_gt, y_counter, weights, baseline
        )
        if rec.utility_total > best_value:
            best_value = rec.utility_total
            best_set = frozenset(combo)
    assert best_set is not None
    return best_set, float(best_value)


# ---------------------------------------------------------------------------
# Artifact emission
# ---------------------------------------------------------------------------

CURVE_CSV_HEADER = "step,region_id,area_removed,f_gt_del,f_cf_del,f_gt_ins,f_cf_ins,utility"


def build_curve_rows(scorer: Scorer, image: Image, result: AttributionResult) -> list[dict]:
    """Step-0 row (fresh empty-set evaluation) plus one row per search step."""
    zero = counterfactual_utility(
        scorer,
        image,
        result.grid,
        RegionMask(result.grid, frozenset()),
        result.y_gt,
        result.y_counter,
        result.config.weights,
        result.config.baseline,
    )
    rows = [
        {
            "step": 0,
            "region_id": -1,
            "area_removed": 0.0,
            "f_gt_del": zero.f_gt_del,
            "f_cf_del": zero.f_cf_del,
            "f_gt_ins": zero.f_gt_ins,
            "f_cf_ins": zero.f_cf_ins,
            "utility": zero.utility_total,
        }
    ]
    for s in result.steps:
        rows.append(
            {
                "step": s.step,
                "region_id": s.region_id,
                "area_removed": s.area_fraction,
                "f_gt_del": s.f_gt_del,
                "f_cf_del": s.f_cf_del,
                "f_gt_ins": s.f_gt_ins,
                "f_cf_ins": s.f_cf_ins,
                "utility": s.utility_total,
            }
        )
    return rows


def write_curve_csv(path: str | Path, rows: Sequence[dict]) -> None:
    fieldnames = CURVE_CSV_HEADER.split(",")
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in fieldnames})


def write_overlay_ppm(
    path: str | Path,
    image: Image,
    mask: RegionMask,
    tint: tuple[float, float, float] = (1.0, 0.15, 0.15),
    alpha: float = 0.45,
    comment: str | None = None,
) -> None:
    """Export the image with selected cells blended toward a tint color."""
    data = image.data
    if image.channels == 1:
        data = np.repeat(data, 3, axis=2)
    out = data.copy()
    tint_vec = np.asarray(tint, dtype=np.float64)
    sel = mask.bool_array()
    out[sel] = (1.0 - alpha) * out[sel] + alpha * tint_vec
    write_ppm(path, Image(np.clip(out, 0.0, 1.0)), comment=comment)


def make_search_config(
    grid_shape: tuple[int, int] = (7, 7),
    budget_k: int | None = None,
    tau_cf: float = 0.5,
    lambda1: float = 1.0,
    lambda2: float = 1.0,
    baseline: float = 0.0,
) -> SearchConfig:
    return SearchConfig(
        budget_k=budget_k,
        tau_cf=tau_cf,
        weights=UtilityWeights(lambda1, lambda2),
        baseline=baseline,
        grid_shape=grid_shape,
    )
