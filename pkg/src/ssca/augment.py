"""Attribution-guided augmentation: donor pools, background refilling, hard mining.

An attributed region set is spliced over with content from a cue-free donor
image; the result keeps its original ground-truth label. Hard mining keeps
only samples whose search produced a strong counterfactual flip.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .attribution import (
    SearchConfig,
    greedy_counterfactual,
    greedy_factual,
    select_counter_target,
)
from .errors import DataError, DimensionMismatchError
from .imaging import (
    Image,
    RegionGrid,
    RegionMask,
    _baseline_vector,
    composite,
    partition_grid,
    write_tensor,
)
from .scorer import Scorer, score_batch

GUIDANCE_KINDS = ("counterfactual", "factual", "random")


@dataclass(frozen=True)
class LabeledSample:
    image: Image
    label: int


@dataclass
class DonorPool:
    """Cue-free donor images with a seeded uniform sampler."""

    donors: list[Image]
    rng_seed: int = 0
    sources: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        if not self.donors:
            raise DataError("donor pool must be nonempty")
        shape = self.donors[0].shape
        for i, d in enumerate(self.donors):
            if d.shape != shape:
                raise DimensionMismatchError(
                    f"donor {i} has shape {d.shape}, pool expects {shape}"
                )
        self._rng = np.random.default_rng(self.rng_seed)

    def __len__(self) -> int:
        return len(self.donors)

    def reseed(self, seed) -> None:
        self._rng = np.random.default_rng(seed)

    def draw(self) -> tuple[int, Image]:
        idx = int(self._rng.integers(len(self.donors)))
        return idx, self.donors[idx]


def build_donor_pool(
    backgrounds: Sequence[Image],
    seed: int = 0,
    expected_shape: tuple[int, int, int] | None = None,
) -> DonorPool:
    """Wrap background images as a donor pool, rejecting dimension mismatches."""
    donors = list(backgrounds)
    if not donors:
        raise DataError("cannot build a donor pool from an empty background set")
    if expected_shape is not None:
        for i, d in enumerate(donors):
            if d.shape != tuple(expected_shape):
                raise DimensionMismatchError(
                    f"donor {i} has shape {d.shape}, dataset expects {tuple(expected_shape)}"
                )
    return DonorPool(donors=donors, rng_seed=seed)


@dataclass(frozen=True)
class MiningConfig:
    """Hard-mining knobs.

    warmup_epochs delays mining until the scorer has learned something worth
    attributing; a model trained from scratch yields noise attributions (and
    destabilizing hard samples) during its first epochs.
    """

    search: SearchConfig = field(default_factory=SearchConfig)
    tau_aug: float = 0.5
    candidate_fraction: float = 0.5
    guidance: str = "counterfactual"
    refresh_interval: int = 1
    warmup_epochs: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.tau_aug <= 1.0:
            raise ValueError(f"tau_aug must lie in [0, 1], got {self.tau_aug}")
        if not 0.0 <= self.candidate_fraction <= 1.0:
            # 0 disables mining entirely (no candidates attributed)
            raise ValueError(f"candidate_fraction must lie in [0, 1], got {self.candidate_fraction}")
        if self.guidance not in GUIDANCE_KINDS:
            raise ValueError(f"guidance must be one of {GUIDANCE_KINDS}, got {self.guidance!r}")
        if self.refresh_interval < 1:
            raise ValueError("refresh_interval must be >= 1")
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be nonnegative")


@dataclass(frozen=True)
class AugmentedSample:
    image: Image
    label: int
    c_max: float
    source_index: int
    donor_index: int
    mask: RegionMask


def _prefix_counter_cmax(
    scorer: Scorer,
    image: Image,
    grid: RegionGrid,
    ordered: Sequence[int],
    y_counter: int,
    baseline: float,
) -> float:
    """Max counter-class confidence over prefix-deletion images (one batch)."""
    if not ordered:
        return 0.0
    base_vec = _baseline_vector(baseline, image.channels)
    running = image.data.copy()
    batch = []
    for rid in ordered:
        t, l, b, r = grid.cells[rid]
        running[t:b, l:r, :] = base_vec
        batch.append(Image(running.copy()))
    scores = score_batch(scorer, batch)
    return float(max(s.probs[y_counter] for s in scores))


def _select_regions(
    sample: LabeledSample,
    scorer: Scorer,
    config: MiningConfig,
    rng: np.random.Generator | None,
) -> tuple[RegionMask, float]:
    """Pick the regions to refill, per the configured guidance strategy."""
    search = config.search
    scores = score_batch(scorer, [sample.image])[0]
    y_counter = select_counter_target(scores, sample.label)
    if config.guidance == "counterfactual":
        result = greedy_counterfactual(scorer, sample.image, sample.label, y_counter, search)
        return result.final_mask, result.c_max
    gh, gw = search.grid_shape
    grid = partition_grid(sample.image.height, sample.image.width, gh, gw)
    budget = search.resolve_budget(grid.num_regions)
    if config.guidance == "factual":
        factual = greedy_factual(
            scorer, sample.image, sample.label, grid, budget, search.baseline
        )
        ordered: Sequence[int] = factual.ordered_regions
    else:
        if rng is None:
            raise ValueError("random guidance needs an rng")
        ordered = [int(r) for r in rng.choice(grid.num_regions, size=budget, replace=False)]
    c_max = _prefix_counter_cmax(scorer, sample.image, grid, ordered, y_counter, search.baseline)
    return RegionMask(grid, frozenset(ordered)), c_max


def counterfactual_augment(
    sample: LabeledSample,
    scorer: Scorer,
    pool: DonorPool,
    config: MiningConfig,
    source_index: int = 0,
    rng: np.random.Generator | None = None,
) -> AugmentedSample:
    """Attribute one sample, refill the selected regions from a donor, keep the label."""
    mask, c_max = _select_regions(sample, scorer, config, rng)
    donor_index, donor = pool.draw()
    if donor.shape != sample.image.shape:
        raise DimensionMismatchError(
            f"donor shape {donor.shape} does not match sample shape {sample.image.shape}"
        )
    aug = composite(sample.image, donor, mask)
    return AugmentedSample(
        image=aug,
        label=sample.label,
        c_max=c_max,
        source_index=source_index,
        donor_index=donor_index,
        mask=mask,
    )


def mine_hard_batch(
    batch: Sequence[LabeledSample],
    scorer: Scorer,
    pool: DonorPool,
    config: MiningConfig,
    rng: np.random.Generator | None = None,
) -> list[AugmentedSample]:
    """Augment the leading candidate slice of an (already shuffled) batch and
    keep exactly the samples whose search reached c_max > tau_aug."""
    if not batch:
        raise ValueError("batch must be nonempty")
    n_cand = math.ceil(config.candidate_fraction * len(batch))
    if n_cand == 0 or config.tau_aug >= 1.0:
        return []  # c_max <= 1 can never pass the filter
    mined: list[AugmentedSample] = []
    for i in range(n_cand):
        aug = counterfactual_augment(batch[i], scorer, pool, config, source_index=i, rng=rng)
        if aug.c_max > config.tau_aug:
            mined.append(aug)
    return mined


def export_augmented_sample(sample: AugmentedSample, tensor_path: str | Path, sidecar_path: str | Path) -> None:
    """Write the augmented raster plus a JSON sidecar with its provenance."""
    write_tensor(tensor_path, sample.image.data)
    sidecar = {
        "label": sample.label,
        "c_max": sample.c_max,
        "donor_index": sample.donor_index,
        "source_index": sample.source_index,
        "mask_region_ids": sorted(sample.mask.selected),
        "grid": {
            "gh": sample.mask.grid.gh,
            "gw": sample.mask.grid.gw,
            "image_height": sample.mask.grid.image_height,
            "image_width": sample.mask.grid.image_width,
        },
    }
    Path(sidecar_path).write_text(json.dumps(sidecar, indent=2, sort_keys=True))
