"""Retrieval evaluation: distractor sets, ranking metrics, baselines and experiments."""
from __future__ import annotations

import csv
import heapq
import logging
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .corpus import ClipRef, Corpus, GroundTruthSample, Procedure, cosine_matrix
from .errors import DistractorShortfall
from .localizer import PoolEntry, build_cost_matrix, drop_dtw
from .mapping import DEFAULT_THRESHOLD, DEFAULT_TOP_S, ProcedureMapping, build_mapping
from .setcover import CandidateSequence, build_cover_sets, setcover_candidates

log = logging.getLogger(__name__)

STRATEGIES = ("RS", "Full", "Other-pos", "Rand-match", "Sim-match")
N_DISTRACTORS = 499
# large enough that dropping a query step never beats matching it
_NO_STEP_DROP = 1e6


# ---------------------------------------------------------------------------
# metrics


def median_rank(ranks: Sequence[int]) -> float:
    if len(ranks) == 0:
        raise ValueError("median rank of an empty list")
    s = sorted(ranks)
    n = len(s)
    mid = n // 2
    if n % 2:
        return float(s[mid])
    return (s[mid - 1] + s[mid]) / 2


def recall_at_k(ranks: Sequence[int], k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(ranks) == 0:
        return 0.0
    return sum(r <= k for r in ranks) / len(ranks)


def pessimistic_rank(scores: Sequence[float], index: int) -> int:
    """1-based rank of ``scores[index]``; every tie counts as ranked above it."""
    s = np.asarray(scores, dtype=np.float64)
    return int(np.sum(s >= s[index]))


@dataclass
class RetrievalReport:
    method: str
    ranks: dict[str, int]  # procedure id -> rank of the ground truth
    set_size: int

    @property
    def median_rank(self) -> float:
        return median_rank(list(self.ranks.values()))

    def recall_at(self, k: int) -> float:
        return recall_at_k(list(self.ranks.values()), k)

    def row(self, ks: Sequence[int] = (1, 5, 50)) -> dict:
        out = {"method": self.method, "MR": self.median_rank}
        out.update({f"R@{k}": self.recall_at(k) for k in ks})
        return out


# ---------------------------------------------------------------------------
# distractor sets


@dataclass(eq=False)
class DistractorSet:
    query: Procedure
    ground_truth: CandidateSequence
    distractors: list[CandidateSequence]
    backfilled: int = 0

    def candidates(self) -> list[CandidateSequence]:
        """Ground truth first, then distractors in construction order."""
        return [self.ground_truth] + self.distractors

    def yields(self) -> dict[str, int]:
        out = {s: 0 for s in STRATEGIES}
        for d in self.distractors:
            out[d.strategy] += 1
        return out

    def to_json(self) -> dict:
        return {
            "procedure_id": self.query.procedure_id,
            "ground_truth": [c.to_json() for c in self.ground_truth.clips],
            "distractors": [
                {"strategy": d.strategy, "clips": [c.to_json() for c in d.clips]} for d in self.distractors
            ],
        }


def quotas(n: int, strategies: Sequence[str] = STRATEGIES) -> dict[str, int]:
    base, extra = divmod(n, len(strategies))
    return {s: base + (i < extra) for i, s in enumerate(strategies)}


def query_seed(procedure_id: str, seed: int) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(procedure_id.encode("utf-8"))])


def _full_video_sequences(query: Procedure, corpus: Corpus) -> list[tuple[ClipRef, ...]]:
    out = []
    for video in sorted(corpus.by_task(query.task), key=lambda v: v.video_id):
        if video.n_windows < len(query):
            continue
        _, loc = drop_dtw(build_cost_matrix(video, query.embeddings, step_drop_cost=_NO_STEP_DROP))
        intervals = loc.intervals(video.windows)
        if any(iv is None for iv in intervals):
            continue
        out.append(tuple(ClipRef(video.video_id, a, b) for a, b in intervals))
    return out


def _reconcile(clips: Sequence[ClipRef], n: int) -> tuple[ClipRef, ...]:
    """Truncate to ``n`` clips or pad by repeating the last one."""
    clips = tuple(clips[:n])
    return clips + (clips[-1],) * (n - len(clips))


def _ranked_combinations(per_step: Sequence[Sequence[ClipRef]], scores: Sequence[np.ndarray]):
    """Clip combinations by descending total score (one clip per step)."""
    n = len(per_step)
    if any(len(p) == 0 for p in per_step):
        return
    start = (0,) * n
    heap = [(-sum(float(s[0]) for s in scores), start, 0)]
    while heap:
        neg, ranks, pivot = heapq.heappop(heap)
        yield tuple(per_step[i][r] for i, r in enumerate(ranks))
        for j in range(pivot, n):
            if ranks[j] + 1 < len(per_step[j]):
                child = ranks[:j] + (ranks[j] + 1,) + ranks[j + 1 :]
                delta = float(scores[j][ranks[j]] - scores[j][ranks[j] + 1])
                heapq.heappush(heap, (neg + delta, child, j))


class _Collector:
    def __init__(self, query: Procedure, exclude: tuple[ClipRef, ...]):
        self.query = query
        self.seen = {exclude}
        self.out: list[CandidateSequence] = []

    def add(self, clips, strategy: str) -> bool:
        clips = tuple(clips)
        if clips in self.seen:
            return False
        self.seen.add(clips)
        self.out.append(CandidateSequence(self.query, clips, strategy=strategy))
        return True


def build_distractors(
    sample: GroundTruthSample,
    corpus: Corpus,
    mapping: ProcedureMapping,
    pool: Sequence[PoolEntry],
    test_set: Sequence[GroundTruthSample],
    seed: int = 0,
    n: int = N_DISTRACTORS,
    rs_k: int | None = None,
) -> DistractorSet:
    """``n`` distinct incorrect candidates for ``sample``, about a fifth per strategy.

    Strategies short of their quota are backfilled with random mix-n-match.
    """
    query = sample.procedure
    rng = query_seed(query.procedure_id, seed)
    gt = CandidateSequence(query, sample.clips, strategy="ground-truth")
    want = quotas(n)
    col = _Collector(query, gt.key)
    got: dict[str, int] = {}

    def take(strategy, source):
        before = len(col.out)
        for clips in source:
            if len(col.out) - before >= want[strategy]:
                break
            col.add(clips, strategy)
        got[strategy] = len(col.out) - before

    # RS: the reduced search space itself
    rs = setcover_candidates(mapping, rs_k or 2 * want["RS"] + 1)
    take("RS", (c.clips for c in rs))

    take("Full", _full_video_sequences(query, corpus))

    others = sorted((s for s in test_set if s.procedure.procedure_id != query.procedure_id),
                    key=lambda s: s.procedure.procedure_id)
    perm = rng.permutation(len(others))
    take("Other-pos", (_reconcile(others[i].clips, len(query)) for i in perm))

    # Sim-match: visual similarity per step only, no continuity
    clip_refs = [e.clip for e in pool]
    if clip_refs:
        vis = np.stack([corpus.clip_embedding(c) for c in clip_refs])
        sims = cosine_matrix(query.embeddings, vis)
        per_step, scores = [], []
        for i in range(len(query)):
            order = sorted(range(len(clip_refs)), key=lambda k: (-sims[i, k], clip_refs[k]))
            per_step.append([clip_refs[k] for k in order])
            scores.append(sims[i, order])
        take("Sim-match", _ranked_combinations(per_step, scores))
    else:
        got["Sim-match"] = 0

    same_task = [e.clip for e in pool if corpus[e.video_id].task == query.task]
    if not same_task:
        same_task = clip_refs

    def rand_match(limit):
        for _ in range(limit):
            yield tuple(same_task[int(rng.integers(len(same_task)))] for _ in range(len(query)))

    take("Rand-match", rand_match(50 * want["Rand-match"]) if same_task else ())

    missing = n - len(col.out)
    backfilled = 0
    if missing > 0 and same_task:
        before = len(col.out)
        for clips in rand_match(200 * missing):
            if len(col.out) >= n:
                break
            col.add(clips, "Rand-match")
        backfilled = len(col.out) - before
        log.info("%s: backfilled %d distractor(s) with Rand-match", query.procedure_id, backfilled)
    if len(col.out) < n:
        raise DistractorShortfall(
            f"{query.procedure_id}: only {len(col.out)} of {n} distractors constructible; "
            f"per-strategy yields {got}, backfilled {backfilled}"
        )
    return DistractorSet(query, gt, col.out, backfilled)


def build_all_distractors(
    test_set: Sequence[GroundTruthSample],
    corpus: Corpus,
    pool: Sequence[PoolEntry],
    seed: int = 0,
    n: int = N_DISTRACTORS,
    threshold: float = DEFAULT_THRESHOLD,
    top_s: int = DEFAULT_TOP_S,
) -> list[DistractorSet]:
    out = []
    for sample in sorted(test_set, key=lambda s: s.procedure.procedure_id):
        mapping = build_mapping(sample.procedure, pool, threshold, top_s)
        out.append(build_distractors(sample, corpus, mapping, pool, test_set, seed, n))
    return out


# ---------------------------------------------------------------------------
# scorers: (query, candidates) -> one score per candidate, higher is better

Scorer = Callable[[Procedure, Sequence[CandidateSequence]], np.ndarray]


def similarity_scorer(corpus: Corpus) -> Scorer:
    """Mean over steps of cosine(step text, clip embedding)."""

    def scorer(query, candidates):
        q = query.embeddings.astype(np.float64)
        q = q / np.linalg.norm(q, axis=1, keepdims=True)
        out = np.empty(len(candidates))
        for k, cand in enumerate(candidates):
            clips = np.stack([corpus.clip_embedding(c) for c in cand.clips]).astype(np.float64)
            clips = clips / np.linalg.norm(clips, axis=1, keepdims=True)
            out[k] = float(np.mean(np.sum(q * clips, axis=1)))
        return out

    return scorer


def _asr_step_score(corpus: Corpus, step_emb: np.ndarray, clip: ClipRef) -> float:
    video = corpus[clip.video_id]
    segs = [s.embedding for s in video.asr or () if s.t_start < clip.t_end and s.t_end > clip.t_start]
    if not segs:
        return 0.0
    return float(np.mean(cosine_matrix(step_emb[None, :], np.stack(segs))[0]))


def text_only_scorer(corpus: Corpus) -> Scorer:
    """Mean over steps of the mean cosine between step text and overlapping ASR segments."""

    def scorer(query, candidates):
        return np.array(
            [
                float(np.mean([_asr_step_score(corpus, query.embeddings[i], c) for i, c in enumerate(cand.clips)]))
                for cand in candidates
            ]
        )

    return scorer


def evaluator_scorer(model, corpus: Corpus) -> Scorer:
    from .evaluator import candidate_logits

    def scorer(query, candidates):
        return candidate_logits(model, query, list(candidates), corpus)

    return scorer


def random_scorer(seed: int = 0) -> Scorer:
    def scorer(query, candidates):
        return query_seed(query.procedure_id, seed).random(len(candidates))

    return scorer


def rank_sets(method: str, sets: Sequence[DistractorSet], scorer: Scorer) -> RetrievalReport:
    ranks = {}
    size = 0
    for ds in sorted(sets, key=lambda d: d.query.procedure_id):
        cands = ds.candidates()
        size = max(size, len(cands))
        ranks[ds.query.procedure_id] = pessimistic_rank(scorer(ds.query, cands), 0)
    return RetrievalReport(method, ranks, size)


def baseline_similarity_rank(sets: Sequence[DistractorSet], corpus: Corpus) -> RetrievalReport:
    return rank_sets("similarity", sets, similarity_scorer(corpus))


def baseline_text_only_rank(sets: Sequence[DistractorSet], corpus: Corpus) -> RetrievalReport:
    return rank_sets("text-only", sets, text_only_scorer(corpus))


def run_experiment(
    sets: Sequence[DistractorSet],
    corpus: Corpus,
    model=None,
    extra: Mapping[str, Scorer] | None = None,
) -> list[RetrievalReport]:
    """Evaluator (when given) and both baselines on identical distractor sets."""
    reports = []
    if model is not None:
        if corpus.dim is not None and model.config.feature_dim != corpus.dim:
            raise ValueError(
                f"checkpoint feature dim {model.config.feature_dim} != corpus dim {corpus.dim}"
            )
        reports.append(rank_sets("evaluator", sets, evaluator_scorer(model, corpus)))
    reports.append(baseline_similarity_rank(sets, corpus))
    reports.append(baseline_text_only_rank(sets, corpus))
    for name, scorer in (extra or {}).items():
        reports.append(rank_sets(name, sets, scorer))
    return reports


def _fmt(x) -> str:
    return f"{x:.6f}" if isinstance(x, float) else str(x)


def write_csv(rows: Sequence[dict], path, columns: Sequence[str]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in columns])


REPORT_COLUMNS = ("method", "MR", "R@1", "R@5", "R@50")


def write_report(reports: Sequence[RetrievalReport], path) -> None:
    write_csv([r.row() for r in reports], path, REPORT_COLUMNS)


def write_ranks(reports: Sequence[RetrievalReport], path) -> None:
    rows = [
        {"method": r.method, "procedure_id": pid, "rank": rank}
        for r in reports
        for pid, rank in sorted(r.ranks.items())
    ]
    write_csv(rows, path, ("method", "procedure_id", "rank"))


# ---------------------------------------------------------------------------
# ground-truth capture by search-space reduction strategies


def random_candidates(mapping: ProcedureMapping, k: int, rng: np.random.Generator) -> set[tuple[ClipRef, ...]]:
    if any(not m for m in mapping.steps):
        return set()
    out = set()
    for _ in range(k):
        out.add(tuple(m[int(rng.integers(len(m)))].clip for m in mapping.steps))
    return out


def edited_nn_candidates(mapping: ProcedureMapping, k: int) -> set[tuple[ClipRef, ...]]:
    """Nearest full videos, with steps they miss filled from the next-nearest videos.

    Videos are ranked by the summed best mapping score over the query steps.
    """
    sets = build_cover_sets(mapping)
    if not sets:
        return set()
    ranked = sorted(sets, key=lambda s: (-sum(m.score for m in s.covered.values()), s.video_id))
    out = set()
    for b, base in enumerate(ranked[:k]):
        neighbours = [base] + ranked[:b] + ranked[b + 1 :]
        clips = []
        for step in range(len(mapping)):
            hit = next((s.covered[step] for s in neighbours if step in s.covered), None)
            if hit is None:
                return out
            clips.append(hit.clip)
        out.add(tuple(clips))
    return out


CAPTURE_STRATEGIES = ("setcover", "random", "edited-nn")


def capture_curve(
    samples: Sequence[GroundTruthSample],
    pool: Sequence[PoolEntry],
    ks: Sequence[int] = (1, 5, 10, 20, 50, 100),
    seed: int = 0,
    threshold: float = DEFAULT_THRESHOLD,
    top_s: int = DEFAULT_TOP_S,
) -> list[dict]:
    """Fraction of samples whose ground truth lies in the size-``K`` candidate set, per strategy."""
    hits = {(s, k): 0 for s in CAPTURE_STRATEGIES for k in ks}
    for sample in samples:
        mapping = build_mapping(sample.procedure, pool, threshold, top_s)
        gt = tuple(sample.clips)
        for k in ks:
            rng = query_seed(sample.procedure.procedure_id, seed + k)
            found = {
                "setcover": gt in {c.key for c in setcover_candidates(mapping, k)},
                "random": gt in random_candidates(mapping, k, rng),
                "edited-nn": gt in edited_nn_candidates(mapping, k),
            }
            for s, hit in found.items():
                hits[(s, k)] += hit
    n = max(len(samples), 1)
    return [{"K": k, **{s: hits[(s, k)] / n for s in CAPTURE_STRATEGIES}} for k in ks]


def write_capture_curve(rows: Sequence[dict], path) -> None:
    write_csv(rows, path, ("K",) + CAPTURE_STRATEGIES)


def capture_svg(rows: Sequence[dict], path, width: int = 480, height: int = 320) -> None:
    """Minimal line chart of capture probability against K."""
    pad = 40
    ks = [r["K"] for r in rows]
    x_max = max(ks) if ks else 1

    def xy(k, p):
        return pad + (width - 2 * pad) * k / x_max, height - pad - (height - 2 * pad) * p

    colors = {"setcover": "#1f77b4", "random": "#d62728", "edited-nn": "#2ca02c"}
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
        f'<text x="{width / 2:.0f}" y="{height - 8}" text-anchor="middle">K</text>',
        f'<text x="12" y="{pad - 10}">GT captured</text>',
    ]
    for i, s in enumerate(CAPTURE_STRATEGIES):
        pts = " ".join(f"{x:.1f},{y:.1f}" for x, y in (xy(r["K"], r[s]) for r in rows))
        parts.append(f'<polyline fill="none" stroke="{colors[s]}" stroke-width="2" points="{pts}"/>')
        parts.append(f'<text x="{width - pad - 80}" y="{pad + 16 * i}" fill="{colors[s]}">{s}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# negative-kind ablation


@dataclass
class AblationRow:
    neg_kinds: str
    seed: int
    report: RetrievalReport
    losses: list[float] = field(default_factory=list)

    def row(self) -> dict:
        return {"neg_kinds": self.neg_kinds, "seed": self.seed, **self.report.row()}


ABLATION_COLUMNS = ("neg_kinds", "seed", "MR", "R@1", "R@5", "R@50")


def run_ablation(
    config,
    corpus: Corpus,
    pool: Sequence[PoolEntry],
    train_set: Sequence[GroundTruthSample],
    sets: Sequence[DistractorSet],
    kind_rows: Sequence[Sequence[str]] = (("cor", "con", "osc"), ("cor",)),
    seeds: Sequence[int] = (0,),
    threshold: float = DEFAULT_THRESHOLD,
) -> list[AblationRow]:
    """Train one evaluator per (negative kinds, seed) and rank the same distractor sets."""
    from dataclasses import replace

    from .evaluator import train
    from .negatives import NegativeGenerator, PoolIndex

    index = PoolIndex(pool)
    rows = []
    for kinds in kind_rows:
        for seed in seeds:
            gen = NegativeGenerator(index, kinds, threshold)
            result = train(replace(config, seed=seed), corpus, train_set, gen)
            report = rank_sets("evaluator", sets, evaluator_scorer(result.model, corpus))
            rows.append(AblationRow(",".join(kinds), seed, report, result.losses))
    return rows


def write_ablation(rows: Sequence[AblationRow], path) -> None:
    write_csv([r.row() for r in rows], path, ABLATION_COLUMNS)
