"""Representational-collapse detection from the per-step metrics log."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class CollapseDiagnosis:
    collapsed: bool
    first_flag_step: int | None
    threshold: float
    reference_std: float
    longest_run: int


def embedding_feature_stats(Z: np.ndarray) -> tuple[float, float]:
    """(min, median) over features of the per-feature batch std of raw embeddings."""
    std = np.asarray(Z, dtype=np.float64).std(axis=0)
    return float(std.min()), float(np.median(std))


def collapse_probe(log: list[dict], rel_threshold: float = 0.1, window: int = 20,
                   warmup: int = 10, abs_floor: float = 1e-6, min_steps: int = 100
                   ) -> CollapseDiagnosis:
    """Flag collapse when ``feature_std_min`` stays below the threshold for
    ``window`` consecutive steps.

    The threshold is ``max(abs_floor, rel_threshold * ref)`` where ``ref`` is
    the median ``feature_std_median`` over the ``window`` steps following
    ``warmup``. A constant embedding stream has zero std everywhere and is
    always flagged.
    """
    if len(log) < min_steps:
        raise ValueError(f"need at least {min_steps} logged steps, got {len(log)}")
    std_min = np.array([r["feature_std_min"] for r in log], dtype=np.float64)
    typical = np.array([r.get("feature_std_median", r["feature_std_min"]) for r in log])
    ref = float(np.median(typical[warmup: warmup + window]))
    threshold = max(abs_floor, rel_threshold * ref)
    run = longest = 0
    first = None
    for i, v in enumerate(std_min[warmup:], start=warmup):
        run = run + 1 if v < threshold else 0
        longest = max(longest, run)
        if run == window and first is None:
            first = int(log[i].get("step", i))
    return CollapseDiagnosis(first is not None, first, threshold, ref, longest)
