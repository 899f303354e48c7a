"""Independent checks that a negative really violates what its kind claims.

These predicates deliberately avoid the samplers' code paths: similarities
are recomputed in plain Python from the pool's step-text embeddings.
"""
from __future__ import annotations

import math
from typing import Mapping, Sequence

from .corpus import ClipRef


def _cos(a, b) -> float:
    dot = sum(float(x) * float(y) for x, y in zip(a, b))
    na = math.sqrt(sum(float(x) ** 2 for x in a))
    nb = math.sqrt(sum(float(y) ** 2 for y in b))
    return dot / (na * nb)


def _inverted_pairs(clips: Sequence[ClipRef]):
    pairs = []
    for p, a in enumerate(clips):
        for q in range(p + 1, len(clips)):
            b = clips[q]
            if a.video_id == b.video_id and a.t_start > b.t_start:
                pairs.append((p, q))
    return pairs


def check_negative(
    negative,
    step_text_of: Mapping[ClipRef, Sequence[float]],
    threshold: float = 0.8,
    require_step_match: bool = True,
) -> tuple[bool, str]:
    """``(holds, reason)`` for one negative.

    ``step_text_of`` maps pool clips to the embedding of their step text.
    """
    base = list(negative.base.clips)
    new = list(negative.clips)
    steps = negative.base.procedure.embeddings
    if len(base) != len(new):
        return False, "length changed"
    diff = {i for i in range(len(base)) if base[i] != new[i]}
    if diff != set(negative.modified_positions):
        return False, f"declared positions {sorted(negative.modified_positions)} != actual {sorted(diff)}"
    if not 1 <= len(diff) <= 2:
        return False, f"{len(diff)} positions modified"

    def matches(clip, pos):
        emb = step_text_of.get(clip)
        if emb is None:
            return None
        return _cos(emb, steps[pos]) >= threshold

    kind = negative.kind
    if kind == "step_violation":
        if len(diff) != 1:
            return False, "step violation must modify one position"
        (p,) = diff
        if new[p].video_id not in {c.video_id for c in base}:
            return False, "replacement video does not contribute to the sample"
        m = matches(new[p], p)
        if m is None or m:
            return False, "replacement matches the step"
        return True, ""
    if kind == "continuity_violation":
        if len(diff) != 1:
            return False, "continuity violation must modify one position"
        (p,) = diff
        if not (0 < p < len(base) - 1 and base[p - 1].video_id == base[p].video_id == base[p + 1].video_id):
            return False, "modified position is not the middle of a same-source run"
        if new[p].video_id == base[p].video_id:
            return False, "replacement comes from the same video"
        if not matches(new[p], p):
            return False, "replacement does not match the step"
        return True, ""
    if kind == "state_violation":
        inv = _inverted_pairs(new)
        if len(inv) != 1:
            return False, f"{len(inv)} inverted same-source pairs"
        y, x = inv[0]
        if not diff <= {y, x}:
            return False, "modification outside the inverted pair"
        if require_step_match and not (matches(new[y], y) and matches(new[x], x)):
            return False, "inverted clips do not match their steps"
        if new[y].video_id not in {c.video_id for c in base}:
            return False, "inverted pair comes from a non-contributing video"
        return True, ""
    return False, f"unknown kind {kind!r}"
