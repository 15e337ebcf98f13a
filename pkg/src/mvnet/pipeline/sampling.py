"""Choosing (first, second) scan pairs by view overlap."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from ..errors import InvalidInputError, NoPairError
from ..geometry import DEFAULT_DEPTH_TOL, RgbdFrame, overlap_ratio

DEFAULT_OVERLAP_RANGE = (0.4, 0.8)
DEFAULT_CANDIDATE_VIEWS = 5


def overlap_matrix(frames: Sequence[RgbdFrame], depth_tol: float = DEFAULT_DEPTH_TOL) -> np.ndarray:
    """``O[i, j] = overlap_ratio(frames[i], frames[j])``."""
    n = len(frames)
    O = np.ones((n, n))
    for i in range(n):
        for j in range(n):
            if i != j:
                O[i, j] = overlap_ratio(frames[i], frames[j], depth_tol)
    return O


def candidate_views(
    overlaps_from_first: np.ndarray,
    first: int,
    overlap_range=DEFAULT_OVERLAP_RANGE,
    max_candidates: int = DEFAULT_CANDIDATE_VIEWS,
) -> list[int]:
    """Indices of frames whose overlap with ``first`` lies in the closed range.

    When more than ``max_candidates`` qualify, the ones closest to ``first`` in
    sequence order are kept (ties go to the earlier frame).
    """
    lo, hi = overlap_range
    inside = [j for j, o in enumerate(overlaps_from_first) if j != first and lo <= o <= hi]
    inside.sort(key=lambda j: (abs(j - first), j))
    return sorted(inside[:max_candidates])


def sample_pair(
    frames: Sequence[RgbdFrame],
    overlap_range=DEFAULT_OVERLAP_RANGE,
    candidate_count: int = DEFAULT_CANDIDATE_VIEWS,
    rng: Optional[np.random.Generator] = None,
    overlaps: Optional[np.ndarray] = None,
    first: Optional[int] = None,
) -> tuple[RgbdFrame, RgbdFrame]:
    """Pick a first scan uniformly, then a second one among its in-range candidates.

    Raises :class:`NoPairError` when the chosen first scan has no candidate; the
    caller may draw again.
    """
    if len(frames) < 2:
        raise InvalidInputError("need at least two frames to form a pair")
    rng = rng if rng is not None else np.random.default_rng()
    i = int(rng.integers(len(frames))) if first is None else first
    if overlaps is None:
        row = np.array([1.0 if j == i else overlap_ratio(frames[i], frames[j]) for j in range(len(frames))])
    else:
        row = overlaps[i]
    cands = candidate_views(row, i, overlap_range, candidate_count)
    if not cands:
        raise NoPairError(f"frame {frames[i].frame_id!r} has no second view with overlap in {tuple(overlap_range)}")
    j = cands[int(rng.integers(len(cands)))]
    return frames[i], frames[j]


def sample_pair_retrying(frames, overlap_range, candidate_count, rng, overlaps=None, attempts: int = 100):
    for _ in range(attempts):
        try:
            return sample_pair(frames, overlap_range, candidate_count, rng, overlaps)
        except NoPairError:
            continue
    raise NoPairError(f"no valid pair found in {attempts} draws")
