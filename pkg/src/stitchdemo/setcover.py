"""Search-space reduction with greedy set covers over source videos.

Each video defines the set of query steps it can demonstrate. Greedy covers
pick videos covering the most still-uncovered steps; alternative covers are
enumerated by deviating from the greedy choice (taking the 2nd, 3rd, ...
best video at some pick), cheapest total deviation first. Inside a cover,
clips are assigned to steps so that the number of source switches between
adjacent steps is minimal.
"""
from __future__ import annotations

import heapq
import json
import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .corpus import ClipRef, Procedure
from .errors import CorpusError
from .mapping import Match, ProcedureMapping

log = logging.getLogger(__name__)


@dataclass(eq=False)
class CoverSet:
    video_id: str
    covered: dict[int, Match]  # step index -> best clip of this video for the step

    @property
    def steps(self) -> frozenset[int]:
        return frozenset(self.covered)


def switch_count(clips: Sequence[ClipRef]) -> int:
    return sum(a.video_id != b.video_id for a, b in zip(clips, clips[1:]))


@dataclass(eq=False)
class CandidateSequence:
    query: Procedure
    clips: tuple[ClipRef, ...]
    switch_count: int | None = None
    strategy: str = ""
    score: float = 0.0

    def __post_init__(self):
        self.clips = tuple(self.clips)
        if len(self.clips) != len(self.query):
            raise CorpusError(
                f"candidate has {len(self.clips)} clips for a {len(self.query)}-step query"
            )
        actual = switch_count(self.clips)
        if self.switch_count is None:
            self.switch_count = actual
        elif self.switch_count != actual:
            raise CorpusError(f"stored switch_count {self.switch_count} != recomputed {actual}")

    @property
    def key(self) -> tuple[ClipRef, ...]:
        return self.clips

    @property
    def sources(self) -> list[str]:
        return [c.video_id for c in self.clips]

    def to_json(self) -> dict:
        return {
            "procedure_id": self.query.procedure_id,
            "clips": [c.to_json() for c in self.clips],
            "switch_count": self.switch_count,
            "strategy": self.strategy,
            "sources": sorted(set(self.sources)),
        }


def build_cover_sets(mapping: ProcedureMapping) -> list[CoverSet]:
    """One set per video in the mapping, keeping its best clip for each step."""
    sets: dict[str, dict[int, Match]] = {}
    for step, matches in enumerate(mapping.steps):
        for m in matches:
            covered = sets.setdefault(m.clip.video_id, {})
            best = covered.get(step)
            if best is None or m.score > best.score:
                covered[step] = m
    return [CoverSet(vid, sets[vid]) for vid in sorted(sets)]


@dataclass(eq=False)
class Cover:
    videos: tuple[str, ...]  # in pick order
    assignment: list[Match | None]  # per query step
    switch_count: int
    score: float
    deviation: tuple[int, ...] = field(default=(), repr=False)

    @property
    def uncovered(self) -> int:
        return sum(a is None for a in self.assignment)


def assign_min_switch(subset: Sequence[CoverSet], n_steps: int) -> tuple[list[Match | None], int, float]:
    """Pick one clip per step from ``subset`` minimizing (switches, -total score).

    Steps no set covers stay ``None``; switches are counted between
    consecutive covered steps.
    """
    order = sorted(subset, key=lambda s: s.video_id)
    # best[v] = (switches, -score, path) for paths ending in video v
    best: dict[str, tuple[int, float, list]] = {}
    assignment_prefix: list = []
    for step in range(n_steps):
        options = [(s.video_id, s.covered[step]) for s in order if step in s.covered]
        if not options:
            for v in best:
                best[v][2].append(None)
            assignment_prefix.append(None)
            continue
        new: dict[str, tuple[int, float, list]] = {}
        for vid, match in options:
            if not best:
                new[vid] = (0, -match.score, assignment_prefix + [match])
                continue
            cands = []
            for prev, (sw, neg, path) in best.items():
                cands.append((sw + (prev != vid), neg - match.score, prev, path))
            sw, neg, _, path = min(cands, key=lambda c: (c[0], c[1], c[2] != vid, c[2]))
            new[vid] = (sw, neg, path + [match])
        best = new
    if not best:
        return [None] * n_steps, 0, 0.0
    vid = min(best, key=lambda v: (best[v][0], best[v][1], v))
    sw, neg, path = best[vid]
    return path, sw, -neg


def _ranked_candidates(sets: Sequence[CoverSet], uncovered: frozenset[int], chosen: set[str]):
    cands = []
    for s in sets:
        if s.video_id in chosen:
            continue
        gain = s.steps & uncovered
        if gain:
            cands.append((-len(gain), -sum(s.covered[i].score for i in gain), s.video_id, s))
    cands.sort(key=lambda c: c[:3])
    return [c[3] for c in cands]


def _walk(sets, coverable, ranks: Sequence[int]):
    """Follow ``ranks`` (deviation per pick, 0 = greedy), then complete greedily.

    Returns the picked sets and the full rank vector, or ``None`` when a rank
    exceeds the number of available choices.
    """
    uncovered = coverable
    chosen: list[CoverSet] = []
    full: list[int] = []
    k = 0
    while uncovered:
        cands = _ranked_candidates(sets, uncovered, {s.video_id for s in chosen})
        r = ranks[k] if k < len(ranks) else 0
        if r >= len(cands):
            return None
        pick = cands[r]
        chosen.append(pick)
        full.append(r)
        uncovered = uncovered - pick.steps
        k += 1
    return chosen, tuple(full)


def greedy_top_k_covers(
    sets: Sequence[CoverSet], k: int, n_steps: int | None = None, max_expansions: int | None = None
) -> list[Cover]:
    """Up to ``k`` distinct covers of every coverable step.

    The first cover generated is the plain greedy one. Output is sorted by
    (uncovered steps, switch count, -total score), generation order last.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    sets = list(sets)
    coverable = frozenset().union(*(s.steps for s in sets)) if sets else frozenset()
    if n_steps is None:
        n_steps = max(coverable) + 1 if coverable else 0
    if not coverable:
        return []
    max_expansions = max_expansions or 50 * k
    root = _walk(sets, coverable, ())
    heap = [(0, root[1], 0)]  # (total deviation, rank vector, pivot)
    seen_subsets: set[frozenset[str]] = set()
    covers: list[Cover] = []
    expansions = 0
    while heap and len(covers) < k and expansions < max_expansions:
        total, ranks, pivot = heapq.heappop(heap)
        expansions += 1
        walked = _walk(sets, coverable, ranks)
        chosen, _ = walked
        subset = frozenset(s.video_id for s in chosen)
        if subset not in seen_subsets:
            seen_subsets.add(subset)
            assignment, sw, score = assign_min_switch(chosen, n_steps)
            covers.append(Cover(tuple(s.video_id for s in chosen), assignment, sw, score, ranks))
        for j in range(pivot, len(ranks)):
            child = _walk(sets, coverable, ranks[:j] + (ranks[j] + 1,))
            if child is not None:
                heapq.heappush(heap, (total + 1, child[1], j))
    order = sorted(range(len(covers)), key=lambda i: (covers[i].uncovered, covers[i].switch_count, -covers[i].score, i))
    return [covers[i] for i in order]


def expand_candidates(
    covers: Iterable[Cover],
    mapping: ProcedureMapping,
    limit: int,
    stats: dict | None = None,
) -> list[CandidateSequence]:
    """Materialize complete covers as candidate sequences (deduplicated, at most ``limit``)."""
    out: list[CandidateSequence] = []
    seen: set[tuple[ClipRef, ...]] = set()
    rejected = 0
    for cover in covers:
        if len(out) >= limit:
            break
        if cover.uncovered:
            rejected += 1
            continue
        clips = tuple(m.clip for m in cover.assignment)
        if clips in seen:
            continue
        seen.add(clips)
        out.append(
            CandidateSequence(mapping.query, clips, cover.switch_count, "setcover", cover.score)
        )
    if rejected:
        log.info("%d cover(s) left steps uncovered and were rejected", rejected)
    if stats is not None:
        stats["rejected"] = stats.get("rejected", 0) + rejected
        stats["emitted"] = stats.get("emitted", 0) + len(out)
    return out


def setcover_candidates(mapping: ProcedureMapping, k: int, limit: int | None = None) -> list[CandidateSequence]:
    sets = build_cover_sets(mapping)
    covers = greedy_top_k_covers(sets, k, n_steps=len(mapping))
    return expand_candidates(covers, mapping, limit or k)


def write_candidates(candidates: Iterable[CandidateSequence], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for cand in candidates:
            fh.write(json.dumps(cand.to_json()) + "\n")
