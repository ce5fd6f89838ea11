"""Shared oracles for the attribution tests: a step-by-step greedy audit and
an exhaustive ordered-objective enumerator."""

import itertools

import numpy as np

from ssca.attribution import AttributionResult
from ssca.imaging import Image, _baseline_vector
from ssca.scorer import Scorer, score_batch


def audit_greedy_steps(scorer: Scorer, image: Image, result: AttributionResult) -> int:
    """Replay the candidate sweep for every recorded step and assert the chosen
    region attained the maximum utility (ties resolved to the lowest id).

    Returns the number of audited (step, candidate) evaluations.
    """
    grid = result.grid
    w = result.config.weights
    base_vec = _baseline_vector(result.config.baseline, image.channels)
    del_base = image.data.copy()
    ins_base = np.broadcast_to(base_vec, image.data.shape).copy()
    remaining = list(range(grid.num_regions))
    audited = 0
    for rec in result.steps:
        del_batch, ins_batch = [], []
        for rid in remaining:
            t, l, b, r = grid.cells[rid]
            d = del_base.copy()
            d[t:b, l:r, :] = base_vec
            i = ins_base.copy()
            i[t:b, l:r, :] = image.data[t:b, l:r, :]
            del_batch.append(Image(d))
            ins_batch.append(Image(i))
        s_del = score_batch(scorer, del_batch)
        s_ins = score_batch(scorer, ins_batch)
        gains = np.array(
            [
                w.lambda1 * sd.probs[result.y_counter]
                + w.lambda1 * (1.0 - si.probs[result.y_counter])
                + w.lambda2 * (1.0 - sd.probs[result.y_gt])
                + w.lambda2 * si.probs[result.y_gt]
                for sd, si in zip(s_del, s_ins)
            ]
        )
        audited += len(gains)
        best = gains.max()
        chosen_pos = remaining.index(rec.region_id)
        assert gains[chosen_pos] == best, (
            f"step {rec.step}: chosen region {rec.region_id} has F={gains[chosen_pos]}, "
            f"but a candidate reaches {best}"
        )
        ties = [remaining[j] for j in range(len(gains)) if gains[j] == best]
        assert min(ties) == rec.region_id, f"step {rec.step}: tie not broken to lowest id"
        assert rec.utility_total == gains[chosen_pos]
        assert rec.f_cf_del == s_del[chosen_pos].probs[result.y_counter]
        t, l, b, r = grid.cells[rec.region_id]
        del_base[t:b, l:r, :] = base_vec
        ins_base[t:b, l:r, :] = image.data[t:b, l:r, :]
        remaining.remove(rec.region_id)
    running = 0.0
    for rec in result.steps:
        running = max(running, rec.f_cf_del)
    assert result.c_max == running
    return audited


def best_ordered_factual(weights, area_fractions, k):
    """Exhaustive maximum of the ordered area-weighted cumulative objective for
    a modular gt confidence (sum of per-region weights)."""
    m = len(weights)
    best_value = -np.inf
    best_order = None
    for order in itertools.permutations(range(m), k):
        total = 0.0
        running = 0.0
        for rid in order:
            running += weights[rid]
            total += area_fractions[rid] * running
        if total > best_value:
            best_value = total
            best_order = order
    return best_order, best_value
