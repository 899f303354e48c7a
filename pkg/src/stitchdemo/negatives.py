"""Hard negatives: targeted corruptions of correct demonstrations.

* step violation: one clip replaced by a clip of a video already used in the
  sample whose step text does not match the target step;
* continuity violation: the middle clip of three consecutive same-source
  clips replaced by a matching clip from another video;
* state violation: two positions rewritten with step-matching clips of one
  source video placed in the reverse of their order in that video.

"Matches" always means step-text cosine similarity ``>= threshold``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Collection, Mapping, Sequence

import numpy as np

from .corpus import ClipRef, GroundTruthSample
from .errors import CannotViolate
from .localizer import PoolEntry
from .mapping import DEFAULT_THRESHOLD

STEP = "step_violation"
CONTINUITY = "continuity_violation"
STATE = "state_violation"
KINDS = (STEP, CONTINUITY, STATE)
SHORT_KINDS = {"cor": STEP, "con": CONTINUITY, "osc": STATE}


@dataclass(eq=False)
class NegativeSample:
    base: GroundTruthSample
    clips: tuple[ClipRef, ...]
    kind: str
    modified_positions: frozenset[int]

    def to_json(self) -> dict:
        return {
            "procedure_id": self.base.procedure.procedure_id,
            "kind": self.kind,
            "modified_positions": sorted(self.modified_positions),
            "clips": [c.to_json() for c in self.clips],
        }


class PoolIndex:
    """Pool entries grouped by video with unit-normalized step-text embeddings."""

    def __init__(self, pool: Sequence[PoolEntry]):
        self.entries = list(pool)
        emb = np.stack([e.embedding for e in self.entries]).astype(np.float64) if self.entries else np.zeros((0, 1))
        norms = np.linalg.norm(emb, axis=1, keepdims=True)
        self.unit = emb / np.where(norms == 0, 1.0, norms)
        self.by_video: dict[str, np.ndarray] = {}
        for k, e in enumerate(self.entries):
            self.by_video.setdefault(e.video_id, []).append(k)
        self.by_video = {v: np.array(ix) for v, ix in self.by_video.items()}
        self.by_clip = {e.clip: e for e in self.entries}

    def sims(self, step_embeddings: np.ndarray, idx: np.ndarray) -> np.ndarray:
        q = np.asarray(step_embeddings, dtype=np.float64)
        q = q / np.linalg.norm(q, axis=1, keepdims=True)
        return q @ self.unit[idx].T

    def all_indices(self) -> np.ndarray:
        return np.arange(len(self.entries))


def _negative(sample, clips, kind) -> NegativeSample:
    changed = frozenset(i for i, (a, b) in enumerate(zip(sample.clips, clips)) if a != b)
    return NegativeSample(sample, tuple(clips), kind, changed)


def make_step_violation(
    sample: GroundTruthSample, pool: PoolIndex, rng: np.random.Generator, threshold: float = DEFAULT_THRESHOLD
) -> NegativeSample:
    used = set(sample.clips)
    videos = sorted({c.video_id for c in sample.clips} & set(pool.by_video))
    if not videos:
        raise CannotViolate("no contributing video has pool clips")
    idx = np.concatenate([pool.by_video[v] for v in videos])
    sims = pool.sims(sample.procedure.embeddings, idx)
    options = []
    for pos in range(len(sample.clips)):
        ok = [int(idx[k]) for k in np.flatnonzero(sims[pos] < threshold) if pool.entries[idx[k]].clip not in used]
        if ok:
            options.append((pos, ok))
    if not options:
        raise CannotViolate("every clip of the contributing videos matches its step")
    pos, ok = options[int(rng.integers(len(options)))]
    clips = list(sample.clips)
    clips[pos] = pool.entries[ok[int(rng.integers(len(ok)))]].clip
    return _negative(sample, clips, STEP)


def make_continuity_violation(
    sample: GroundTruthSample, pool: PoolIndex, rng: np.random.Generator, threshold: float = DEFAULT_THRESHOLD
) -> NegativeSample:
    clips = sample.clips
    middles = sorted(
        {
            k + 1
            for k in range(len(clips) - 2)
            if clips[k].video_id == clips[k + 1].video_id == clips[k + 2].video_id
        }
    )
    if not middles:
        raise CannotViolate("no run of three consecutive same-source clips")
    idx = pool.all_indices()
    sims = pool.sims(sample.procedure.embeddings[middles], idx)
    options = []
    for row, pos in enumerate(middles):
        source = clips[pos].video_id
        ok = [
            int(k) for k in np.flatnonzero(sims[row] >= threshold)
            if pool.entries[k].video_id != source
        ]
        if ok:
            options.append((pos, ok))
    if not options:
        raise CannotViolate("no other video offers a clip matching a middle step")
    pos, ok = options[int(rng.integers(len(options)))]
    new = list(clips)
    new[pos] = pool.entries[ok[int(rng.integers(len(ok)))]].clip
    return _negative(sample, new, CONTINUITY)


def source_inversions(clips: Sequence[ClipRef]) -> list[tuple[int, int]]:
    """Position pairs ``p < q`` from one video whose clips run backwards in time."""
    return [
        (p, q)
        for p in range(len(clips))
        for q in range(p + 1, len(clips))
        if clips[p].video_id == clips[q].video_id and clips[p].t_start > clips[q].t_start
    ]


def make_state_violation(
    sample: GroundTruthSample,
    pool: PoolIndex,
    rng: np.random.Generator,
    threshold: float = DEFAULT_THRESHOLD,
    require_step_match: bool = True,
    commutative: Collection[tuple[int, int]] = (),
) -> NegativeSample:
    """Place an earlier clip ``v`` at a later step ``x`` and a later clip ``v'`` at an earlier step ``y``.

    Both clips come from one contributing video. With ``require_step_match``
    (default) ``v`` must match step ``x`` and ``v'`` step ``y``; otherwise the
    sample's own same-source clips are swapped. Step pairs listed in
    ``commutative`` may run in either order and are never inverted.
    """
    clips = sample.clips
    n = len(clips)
    exempt = {frozenset(pair) for pair in commutative}
    options: list[list[ClipRef]] = []
    if require_step_match:
        for video in sorted({c.video_id for c in clips} & set(pool.by_video)):
            idx = pool.by_video[video]
            match = pool.sims(sample.procedure.embeddings, idx) >= threshold
            for y in range(n):
                for x in range(y + 1, n):
                    if frozenset((x, y)) in exempt:
                        continue
                    for a in np.flatnonzero(match[x]):
                        v = pool.entries[idx[a]].clip
                        for b in np.flatnonzero(match[y]):
                            v2 = pool.entries[idx[b]].clip
                            if not v.t_start < v2.t_start:
                                continue
                            new = list(clips)
                            new[x], new[y] = v, v2
                            if len(source_inversions(new)) == 1 and new != list(clips):
                                options.append(new)
    else:
        for y in range(n):
            for x in range(y + 1, n):
                if frozenset((x, y)) in exempt:
                    continue
                if clips[x].video_id == clips[y].video_id and clips[y].t_start < clips[x].t_start:
                    new = list(clips)
                    new[x], new[y] = clips[y], clips[x]
                    if len(source_inversions(new)) == 1:
                        options.append(new)
    if not options:
        raise CannotViolate("no same-source clip pair can be placed in reverse order")
    return _negative(sample, options[int(rng.integers(len(options)))], STATE)


class NegativeGenerator:
    """Callable producing ``n`` negatives per sample, cycling through ``kinds``.

    A kind that cannot corrupt the sample falls through to the next kind; the
    result may be shorter than ``n`` when no kind applies. ``commutative``
    maps a procedure id to step-index pairs that state violations leave alone.
    """

    def __init__(
        self,
        pool: Sequence[PoolEntry] | PoolIndex,
        kinds: Sequence[str] = KINDS,
        threshold: float = DEFAULT_THRESHOLD,
        require_step_match: bool = True,
        commutative: Mapping[str, Collection[tuple[int, int]]] | None = None,
    ):
        self.commutative = dict(commutative or {})
        self.pool = pool if isinstance(pool, PoolIndex) else PoolIndex(pool)
        self.kinds = [SHORT_KINDS.get(k, k) for k in kinds]
        unknown = set(self.kinds) - set(KINDS)
        if unknown or not self.kinds:
            raise ValueError(f"unknown negative kinds: {sorted(unknown) or kinds}")
        self.threshold = threshold
        self.require_step_match = require_step_match

    def make(self, kind: str, sample, rng) -> NegativeSample:
        if kind == STEP:
            return make_step_violation(sample, self.pool, rng, self.threshold)
        if kind == CONTINUITY:
            return make_continuity_violation(sample, self.pool, rng, self.threshold)
        pairs = self.commutative.get(sample.procedure.procedure_id, ())
        return make_state_violation(sample, self.pool, rng, self.threshold, self.require_step_match, pairs)

    def __call__(self, sample: GroundTruthSample, rng: np.random.Generator, n: int = 3) -> list[NegativeSample]:
        out = []
        offset = int(rng.integers(len(self.kinds)))
        dead: set[str] = set()
        for i in range(n):
            for j in range(len(self.kinds)):
                kind = self.kinds[(offset + i + j) % len(self.kinds)]
                if kind in dead:
                    continue
                try:
                    out.append(self.make(kind, sample, rng))
                    break
                except CannotViolate:
                    dead.add(kind)
        return out


def write_negatives(negatives: Sequence[NegativeSample], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for neg in negatives:
            fh.write(json.dumps(neg.to_json()) + "\n")
