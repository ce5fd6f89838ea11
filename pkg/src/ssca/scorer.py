"""Black-box classifier interface plus deterministic mock scorers.

A scorer maps a batch of images to per-class probability vectors. The two
mock scorers here have closed-form outputs, which makes them exact oracles
for the greedy search tests.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, Sequence, runtime_checkable

import numpy as np

from .errors import DimensionMismatchError
from .imaging import Image, RegionGrid, _baseline_vector

_SIMPLEX_TOL = 1e-6


@dataclass(frozen=True)
class ScoreVector:
    """Per-class probabilities, with optional raw logits."""

    probs: np.ndarray
    logits: np.ndarray | None = None

    def __post_init__(self) -> None:
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 1 or p.size < 2:
            raise ValueError(f"probs must be a 1-d vector of >= 2 classes, got shape {p.shape}")
        if (p < -_SIMPLEX_TOL).any() or abs(float(p.sum()) - 1.0) > _SIMPLEX_TOL:
            raise ValueError(f"probs must be nonnegative and sum to 1, got sum {p.sum()}")
        object.__setattr__(self, "probs", p)
        if self.logits is not None:
            l = np.asarray(self.logits, dtype=np.float64)
            if l.shape != p.shape:
                raise ValueError("logits must match probs shape")
            object.__setattr__(self, "logits", l)

    @property
    def num_classes(self) -> int:
        return self.probs.size


@dataclass(frozen=True)
class ScorerInfo:
    """Static facts about a scorer. None dims mean "any size accepted"."""

    num_classes: int
    expected_height: int | None = None
    expected_width: int | None = None
    expected_channels: int | None = None

    def __post_init__(self) -> None:
        if self.num_classes < 2:
            raise ValueError(f"a scorer needs >= 2 classes, got {self.num_classes}")


@runtime_checkable
class Scorer(Protocol):
    @property
    def info(self) -> ScorerInfo: ...

    def score_batch(self, images: Sequence[Image]) -> list[ScoreVector]: ...


def _check_dims(info: ScorerInfo, image: Image) -> None:
    for got, want, name in (
        (image.height, info.expected_height, "height"),
        (image.width, info.expected_width, "width"),
        (image.channels, info.expected_channels, "channels"),
    ):
        if want is not None and got != want:
            raise DimensionMismatchError(f"image {name} {got} != scorer's expected {want}")


def score_batch(scorer: Scorer, images: Sequence[Image]) -> list[ScoreVector]:
    """Score a batch, preserving order; validates dims against the scorer's info."""
    if not images:
        return []
    info = scorer.info
    for img in images:
        _check_dims(info, img)
    out = scorer.score_batch(images)
    if len(out) != len(images):
        raise ValueError(f"scorer returned {len(out)} scores for {len(images)} images")
    return out


class MockAreaScorer:
    """Two-class scorer: gt confidence = fraction of pixels strictly above baseline."""

    def __init__(self, gt_class: int, cf_class: int, baseline: float | Sequence[float] = 0.0):
        if {gt_class, cf_class} != {0, 1}:
            raise ValueError("area scorer is two-class; gt/cf ids must be 0 and 1")
        self.gt_class = gt_class
        self.cf_class = cf_class
        self.baseline = baseline
        self._info = ScorerInfo(num_classes=2)

    @property
    def info(self) -> ScorerInfo:
        return self._info

    def score_batch(self, images: Sequence[Image]) -> list[ScoreVector]:
        out = []
        for img in images:
            vec = _baseline_vector(self.baseline, img.channels)
            visible = (img.data > vec).any(axis=2)
            f_gt = float(visible.mean())
            probs = np.zeros(2)
            probs[self.gt_class] = f_gt
            probs[self.cf_class] = 1.0 - f_gt
            out.append(ScoreVector(probs=probs))
        return out


class MockRegionWeightScorer:
    """Two-class scorer: gt confidence = sum of weights of fully visible regions.

    A region counts as visible when every one of its pixels differs from the
    baseline fill in at least one channel. The induced utility is modular in
    the selected set, so greedy selection is provably optimal against it.
    """

    def __init__(
        self,
        grid: RegionGrid,
        weights: Sequence[float],
        gt_class: int = 0,
        cf_class: int = 1,
        baseline: float | Sequence[float] = 0.0,
    ):
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (grid.num_regions,):
            raise ValueError(f"need one weight per region ({grid.num_regions}), got {w.shape}")
        if (w < 0).any() or abs(float(w.sum()) - 1.0) > 1e-9:
            raise ValueError("region weights must be nonnegative and sum to 1")
        if {gt_class, cf_class} != {0, 1}:
            raise ValueError("region-weight scorer is two-class; gt/cf ids must be 0 and 1")
        self.grid = grid
        self.weights = w
        self.gt_class = gt_class
        self.cf_class = cf_class
        self.baseline = baseline
        self._info = ScorerInfo(
            num_classes=2,
            expected_height=grid.image_height,
            expected_width=grid.image_width,
        )

    @property
    def info(self) -> ScorerInfo:
        return self._info

    def score_batch(self, images: Sequence[Image]) -> list[ScoreVector]:
        out = []
        for img in images:
            vec = _baseline_vector(self.baseline, img.channels)
            nonbase = (img.data != vec).any(axis=2)
            f_gt = 0.0
            for rid, (t, l, b, r) in enumerate(self.grid.cells):
                if nonbase[t:b, l:r].all():
                    f_gt += self.weights[rid]
            f_gt = float(min(f_gt, 1.0))
            probs = np.zeros(2)
            probs[self.gt_class] = f_gt
            probs[self.cf_class] = 1.0 - f_gt
            out.append(ScoreVector(probs=probs))
        return out


def mock_area_scorer(
    gt_class: int, cf_class: int, baseline: float | Sequence[float] = 0.0
) -> MockAreaScorer:
    return MockAreaScorer(gt_class, cf_class, baseline)


def mock_region_weight_scorer(
    grid: RegionGrid,
    weights: Sequence[float],
    gt_class: int = 0,
    cf_class: int = 1,
    baseline: float | Sequence[float] = 0.0,
) -> MockRegionWeightScorer:
    return MockRegionWeightScorer(grid, weights, gt_class, cf_class, baseline)
