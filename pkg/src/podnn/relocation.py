"""Moving low-confidence points from the most spread-out expert to an idle one."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)


@dataclass
class RelocationDecision:
    donor: Optional[int]
    recipient: int
    moved: list = field(default_factory=list)
    spreads: list = field(default_factory=list)


def hidden_spread(hidden: np.ndarray) -> float:
    """Population std of all pairwise euclidean distances between rows.

    Defined as 0 for fewer than two rows.
    """
    hidden = np.asarray(hidden, dtype=np.float64)
    n = len(hidden)
    if n < 2:
        return 0.0
    sq = np.sum(hidden * hidden, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * hidden @ hidden.T
    iu = np.triu_indices(n, k=1)
    dists = np.sqrt(np.maximum(d2[iu], 0.0))
    return float(dists.std())


def expert_spreads(hidden: np.ndarray, assignment: Sequence[Sequence[int]]) -> list[float]:
    """Spread of each expert's own hidden vectors on the points it claims.

    ``hidden`` has shape (n_experts, batch, hidden_size).
    """
    return [hidden_spread(hidden[i][list(pts)]) for i, pts in enumerate(assignment)]


def relocate(hidden: np.ndarray, scores: np.ndarray, assignment: Sequence[Sequence[int]],
             recipient: int, rp: float) -> tuple[list[list[int]], RelocationDecision]:
    """Move ceil(rp * |claims|) lowest-scored points of the widest expert to ``recipient``.

    The donor is the expert with the largest hidden spread among those
    claiming at least two points (lowest index on ties). When no expert
    claims two or more points the assignment is returned unchanged.
    """
    if len(assignment[recipient]) != 0:
        raise ValueError(f"recipient expert {recipient} already claims {len(assignment[recipient])} points")
    if not 0.0 < rp < 1.0:
        raise ValueError(f"relocation fraction must lie in (0, 1), got {rp}")
    new = [list(pts) for pts in assignment]
    spreads = expert_spreads(hidden, new)
    if max(len(p) for p in new) < 2:
        logger.debug("relocation skipped: no expert claims two or more points")
        return new, RelocationDecision(None, recipient, [], spreads)

    # experts with < 2 claims have spread 0 by definition and cannot donate;
    # masking them keeps an all-zero tie from picking the recipient itself
    eligible = [sp if len(p) >= 2 else -np.inf for sp, p in zip(spreads, new)]
    donor = int(np.argmax(eligible))
    pts = new[donor]
    # the epsilon keeps e.g. 0.7 * 10 = 7.000000000000001 from rounding up to 8
    n_move = math.ceil(rp * len(pts) - 1e-9)
    donor_scores = np.asarray(scores)[donor]
    # stable sort keeps lower batch index first among equal scores
    ranked = sorted(pts, key=lambda j: (donor_scores[j], j))
    moved = ranked[:n_move]
    moved_set = set(moved)
    new[donor] = [j for j in pts if j not in moved_set]
    new[recipient] = sorted(moved)
    return new, RelocationDecision(donor, recipient, sorted(moved), spreads)
