"""Step localization by dynamic time warping with drops.

Every annotated step of a video is either assigned one contiguous run of
windows or dropped; windows outside every run are dropped as well. Runs
follow step order and never overlap. The alignment minimizes

    sum(match costs of assigned windows)
    + sum(drop costs of unassigned windows)
    + step_drop_cost * (number of dropped steps)
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .corpus import ClipRef, Corpus, VideoRecord, cosine_matrix
from .errors import CorpusError, EmptyInstance

log = logging.getLogger(__name__)

DROP_PERCENTILE = 30.0
STEP_DROP_COST = 0.6

# backpointer codes
_MATCH, _DROP_WINDOW, _DROP_STEP = 0, 1, 2
_START, _EXTEND = 0, 1


@dataclass
class AlignmentCostMatrix:
    costs: np.ndarray  # (steps, windows)
    drop_cost: np.ndarray  # (windows,) cost of leaving each window unassigned
    step_drop_cost: float

    def __post_init__(self):
        self.costs = np.asarray(self.costs, dtype=np.float64)
        if self.costs.ndim != 2:
            raise ValueError("costs must be a steps x windows matrix")
        self.drop_cost = np.broadcast_to(
            np.asarray(self.drop_cost, dtype=np.float64), (self.costs.shape[1],)
        ).copy()
        self.step_drop_cost = float(self.step_drop_cost)
        if not (
            np.all(np.isfinite(self.costs))
            and np.all(np.isfinite(self.drop_cost))
            and np.isfinite(self.step_drop_cost)
        ):
            raise ValueError("alignment costs must be finite")

    @property
    def shape(self) -> tuple[int, int]:
        return self.costs.shape


@dataclass(frozen=True)
class StepLocalization:
    """Per step, a half-open window-index run ``(first, stop)`` or ``None`` if dropped."""

    runs: tuple[tuple[int, int] | None, ...]

    def intervals(self, windows: np.ndarray) -> list[tuple[float, float] | None]:
        return [
            None if run is None else (float(windows[run[0], 0]), float(windows[run[1] - 1, 1]))
            for run in self.runs
        ]


def build_cost_matrix(
    video: VideoRecord,
    step_embeddings,
    drop_cost=None,
    step_drop_cost: float = STEP_DROP_COST,
    drop_percentile: float = DROP_PERCENTILE,
) -> AlignmentCostMatrix:
    """Cosine costs ``1 - cos(step_i, window_j)``.

    ``drop_cost`` defaults to the ``drop_percentile`` percentile of each
    window's column of costs.
    """
    steps = np.atleast_2d(np.asarray(step_embeddings))
    if video.n_windows == 0 or steps.shape[0] == 0:
        raise EmptyInstance(f"{video.video_id}: need at least one window and one step")
    costs = 1.0 - cosine_matrix(steps, video.embeddings)
    if drop_cost is None:
        drop_cost = np.percentile(costs, drop_percentile, axis=0)
    return AlignmentCostMatrix(costs, drop_cost, step_drop_cost)


def drop_dtw(matrix: AlignmentCostMatrix) -> tuple[float, StepLocalization]:
    """Exact minimum-cost monotone alignment with window and step drops.

    Ties prefer matching over dropping, then dropping a window over dropping
    a step, and extending a run backwards (earlier start) over starting it later.
    """
    C = matrix.costs
    S, W = C.shape
    if S == 0 or W == 0:
        raise EmptyInstance("empty alignment instance")
    d = matrix.drop_cost
    sd = matrix.step_drop_cost
    inf = np.inf
    # free[i, j]: first j windows consumed, first i steps resolved, no open run
    # open_[i, j]: same, but step i-1 matched with a run ending at window j-1
    free = np.full((S + 1, W + 1), inf)
    open_ = np.full((S + 1, W + 1), inf)
    free_bp = np.full((S + 1, W + 1), -1, dtype=np.int8)
    open_bp = np.full((S + 1, W + 1), -1, dtype=np.int8)
    free[0, 0] = 0.0
    for j in range(W + 1):
        for i in range(S + 1):
            if i > 0 and j > 0:
                start = free[i - 1, j - 1] + C[i - 1, j - 1]
                extend = open_[i, j - 1] + C[i - 1, j - 1]
                if extend <= start:
                    open_[i, j], open_bp[i, j] = extend, _EXTEND
                else:
                    open_[i, j], open_bp[i, j] = start, _START
            if i == 0 and j == 0:
                continue
            best, bp = open_[i, j], _MATCH
            if j > 0 and free[i, j - 1] + d[j - 1] < best:
                best, bp = free[i, j - 1] + d[j - 1], _DROP_WINDOW
            if i > 0 and free[i - 1, j] + sd < best:
                best, bp = free[i - 1, j] + sd, _DROP_STEP
            free[i, j], free_bp[i, j] = best, bp

    runs: list[tuple[int, int] | None] = [None] * S
    i, j = S, W
    while i > 0 or j > 0:
        bp = free_bp[i, j]
        if bp == _DROP_WINDOW:
            j -= 1
        elif bp == _DROP_STEP:
            i -= 1
        else:
            stop = j
            while open_bp[i, j] == _EXTEND:
                j -= 1
            j -= 1  # the run's first window
            runs[i - 1] = (j, stop)
            i -= 1
    return float(free[S, W]), StepLocalization(tuple(runs))


# ---------------------------------------------------------------------------
# pool of localized (step text, clip) pairs


@dataclass(eq=False)
class PoolEntry:
    clip: ClipRef
    step_text: str
    embedding: np.ndarray
    step_index: int

    @property
    def video_id(self) -> str:
        return self.clip.video_id

    def to_json(self) -> dict:
        return {
            "video_id": self.clip.video_id,
            "t_start": self.clip.t_start,
            "t_end": self.clip.t_end,
            "step_text": self.step_text,
            "step_index": self.step_index,
        }


def localize_video(video: VideoRecord, **cost_kwargs) -> list[PoolEntry]:
    steps = video.steps or []
    if not steps or video.n_windows == 0:
        return []
    emb = np.stack([s.embedding for s in steps])
    _, loc = drop_dtw(build_cost_matrix(video, emb, **cost_kwargs))
    entries = []
    for k, interval in enumerate(loc.intervals(video.windows)):
        if interval is None:
            continue
        clip = ClipRef(video.video_id, interval[0], interval[1])
        entries.append(PoolEntry(clip, steps[k].text, steps[k].embedding, k))
    return entries


def localize_corpus(corpus: Corpus, **cost_kwargs) -> tuple[list[PoolEntry], int]:
    """Localize every annotated video; returns the pool and the number of skipped videos."""
    pool: list[PoolEntry] = []
    skipped = 0
    for video_id in sorted(corpus.video_ids()):
        video = corpus[video_id]
        if not video.steps:
            skipped += 1
            continue
        pool.extend(localize_video(video, **cost_kwargs))
    if skipped:
        log.warning("skipped %d video(s) without step annotations", skipped)
    return pool, skipped


def write_pool(pool: Iterable[PoolEntry], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for entry in pool:
            fh.write(json.dumps(entry.to_json()) + "\n")


def read_pool(path, corpus: Corpus) -> list[PoolEntry]:
    """Read ``pool.jsonl``; step embeddings are resolved from the corpus annotations."""
    pool = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                clip = ClipRef.from_json(obj)
                k = int(obj["step_index"])
                step = corpus[clip.video_id].steps[k]
            except (json.JSONDecodeError, KeyError, TypeError, IndexError, ValueError) as exc:
                raise CorpusError(f"{path}:{lineno}: invalid pool entry ({exc})") from None
            pool.append(PoolEntry(clip, str(obj["step_text"]), step.embedding, k))
    return pool


def pool_by_video(pool: Sequence[PoolEntry]) -> dict[str, list[PoolEntry]]:
    out: dict[str, list[PoolEntry]] = {}
    for entry in pool:
        out.setdefault(entry.video_id, []).append(entry)
    return out
