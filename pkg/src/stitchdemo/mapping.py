"""Procedure mapping: candidate pool clips for every query step."""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .corpus import ClipRef, Procedure, cosine_matrix
from .localizer import PoolEntry

DEFAULT_THRESHOLD = 0.8
DEFAULT_TOP_S = 50


@dataclass(frozen=True)
class Match:
    clip: ClipRef
    score: float
    entry: PoolEntry


@dataclass(eq=False)
class ProcedureMapping:
    query: Procedure
    steps: list[list[Match]]  # per query step, by descending score
    threshold: float = DEFAULT_THRESHOLD

    def __len__(self) -> int:
        return len(self.steps)

    def clips_for(self, step: int) -> list[ClipRef]:
        return [m.clip for m in self.steps[step]]

    def to_json(self) -> list[list[dict]]:
        return [
            [{**m.clip.to_json(), "score": round(m.score, 6)} for m in matches]
            for matches in self.steps
        ]


def similarity_to_pool(query: Procedure, pool: Sequence[PoolEntry]) -> np.ndarray:
    if not pool:
        return np.zeros((len(query), 0))
    return cosine_matrix(query.embeddings, np.stack([e.embedding for e in pool]))


def build_mapping(
    query: Procedure,
    pool: Sequence[PoolEntry],
    threshold: float = DEFAULT_THRESHOLD,
    top_s: int = DEFAULT_TOP_S,
) -> ProcedureMapping:
    """Keep, per query step, the ``top_s`` pool entries whose step text scores ``>= threshold``.

    Score ties are broken by ``(video_id, t_start)``.
    """
    if top_s < 1:
        raise ValueError("top_s must be positive")
    sims = similarity_to_pool(query, pool)
    steps = []
    for i in range(len(query)):
        keep = np.flatnonzero(sims[i] >= threshold)
        order = sorted(
            keep.tolist(),
            key=lambda k: (-sims[i, k], pool[k].clip.video_id, pool[k].clip.t_start, k),
        )
        steps.append([Match(pool[k].clip, float(sims[i, k]), pool[k]) for k in order[:top_s]])
    return ProcedureMapping(query, steps, threshold)


def dump_mappings(mappings: Sequence[ProcedureMapping], path) -> None:
    payload = {m.query.procedure_id: m.to_json() for m in mappings}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1)
        fh.write("\n")
