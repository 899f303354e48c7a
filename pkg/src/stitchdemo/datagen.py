"""Weak supervision: LLM step summaries, grouping of similar procedures, and mixing."""
from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .corpus import ClipRef, Corpus, GroundTruthSample, Procedure, VideoRecord, clip_embedding, cosine_matrix
from .errors import EmptyClip, LlmFormatError
from .llm import LlmClient, ParsedSummary, mix_prompt, parse_mix, parse_summary, summarize_prompt

log = logging.getLogger(__name__)

PAIR_THRESHOLD = 0.8


@dataclass(eq=False)
class Summary:
    """Timestamped step summary of one video, with step and summary embeddings."""

    video_id: str
    task: str
    parsed: ParsedSummary
    step_embeddings: np.ndarray  # (steps, dim)
    embedding: np.ndarray  # (dim,)

    @property
    def steps(self):
        return self.parsed.steps

    @property
    def title(self) -> str:
        return self.parsed.title


def summarize_narrations(video: VideoRecord, domain: str, llm: LlmClient) -> ParsedSummary:
    """Ask the LLM for a timestamped step list of ``video`` from its ASR lines."""
    if not video.asr:
        raise ValueError(f"{video.video_id}: no ASR segments")
    prompt = summarize_prompt(domain, [(s.t_start, s.t_end, s.text) for s in video.asr])
    return parse_summary(llm.complete(prompt), duration_s=video.duration_s)


def step_text_embedding(video: VideoRecord, t_start: float, t_end: float) -> np.ndarray:
    """Mean embedding of the ASR segments overlapping ``[t_start, t_end]``.

    Falls back to the visual clip embedding when no ASR segment overlaps.
    """
    overlapping = [s.embedding for s in video.asr or () if s.t_start < t_end and s.t_end > t_start]
    if overlapping:
        return np.mean(np.stack(overlapping).astype(np.float64), axis=0).astype(np.float32)
    return clip_embedding(video, t_start, t_end)


def summarize_corpus(corpus: Corpus, domain: str, llm: LlmClient, stats: Counter | None = None) -> list[Summary]:
    stats = stats if stats is not None else Counter()
    out = []
    for video_id in sorted(corpus.video_ids()):
        video = corpus[video_id]
        if not video.asr:
            stats["no_asr"] += 1
            continue
        try:
            parsed = summarize_narrations(video, domain, llm)
        except LlmFormatError as exc:
            stats["format_error"] += 1
            log.info("%s: unparseable summary: %r", video_id, exc.raw[:200])
            continue
        stats["rejected_steps"] += len(parsed.rejected)
        if parsed.not_possible or not parsed.steps:
            stats["not_possible"] += 1
            continue
        try:
            emb = np.stack([step_text_embedding(video, s.t_start, s.t_end) for s in parsed.steps])
        except EmptyClip:
            stats["empty_step"] += 1
            continue
        stats["summaries"] += 1
        out.append(Summary(video_id, video.task, parsed, emb, emb.astype(np.float64).mean(axis=0).astype(np.float32)))
    return out


def pair_similar_procedures(
    embeddings, threshold: float = PAIR_THRESHOLD, group_size: int = 2
) -> list[tuple[int, ...]]:
    """Disjoint groups whose members are all pairwise similar (``>= threshold``).

    Seeds are visited by descending pair similarity; each seed grows by the
    unused member with the largest minimum similarity to the group.
    """
    if group_size not in (2, 3, 4):
        raise ValueError("group_size must be 2, 3 or 4")
    emb = np.asarray(embeddings)
    n = len(emb)
    if n < group_size:
        return []
    sims = cosine_matrix(emb, emb)
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n) if sims[i, j] >= threshold]
    pairs.sort(key=lambda p: (-sims[p], p))
    used: set[int] = set()
    groups = []
    for i, j in pairs:
        if i in used or j in used:
            continue
        group = [i, j]
        while len(group) < group_size:
            best, best_score = None, None
            for k in range(n):
                if k in used or k in group:
                    continue
                worst = min(sims[k, g] for g in group)
                if worst >= threshold and (best_score is None or worst > best_score):
                    best, best_score = k, worst
            if best is None:
                break
            group.append(best)
        if len(group) == group_size:
            groups.append(tuple(sorted(group)))
            used.update(group)
    return groups


@dataclass
class MixedStep:
    source_index: int  # 0-based into the group
    source_step_index: int  # 0-based into that summary's steps
    text: str
    t_start: float
    t_end: float


@dataclass
class MixedProcedureSpec:
    sources: list[str]  # video ids
    mixed_steps: list[MixedStep]


@dataclass
class MixResult:
    status: str  # accepted | not_possible | rejected
    reason: str = ""
    spec: MixedProcedureSpec | None = None
    sample: GroundTruthSample | None = None
    raw: str = field(default="", repr=False)


def validate_mix(response: str, step_counts: Sequence[int]) -> tuple[str, str]:
    """Status and reason for a mixing response over sources with ``step_counts`` steps."""
    citations, malformed = parse_mix(response)
    if not citations and not malformed:
        if "not possible" in response.lower():
            return "not_possible", "model answered Not Possible"
        return "rejected", "no step lines"
    if malformed:
        return "rejected", f"malformed citation: {malformed[0]!r}"
    for c in citations:
        if not 1 <= c.source <= len(step_counts):
            return "rejected", f"cites missing source {c.source}"
        if not 1 <= c.source_step <= step_counts[c.source - 1]:
            return "rejected", f"cites missing step {c.source_step} of source {c.source}"
    used = {c.source for c in citations}
    missing = sorted(set(range(1, len(step_counts) + 1)) - used)
    if missing:
        return "rejected", f"no step from source(s) {missing}"
    return "accepted", ""


def mix_procedures(
    group: Sequence[Summary], llm: LlmClient, domain: str = "cooking", procedure_id: str = "mix"
) -> MixResult:
    if not 2 <= len(group) <= 4:
        raise ValueError("mixing needs 2-4 procedures")
    raw = llm.complete(mix_prompt(domain, [s.parsed for s in group]))
    status, reason = validate_mix(raw, [len(s.steps) for s in group])
    if status != "accepted":
        return MixResult(status, reason, raw=raw)
    citations, _ = parse_mix(raw)
    mixed, clips, texts, emb = [], [], [], []
    for c in citations:
        src = group[c.source - 1]
        step = src.steps[c.source_step - 1]
        mixed.append(MixedStep(c.source - 1, c.source_step - 1, c.text, step.t_start, step.t_end))
        clips.append(ClipRef(src.video_id, step.t_start, step.t_end))
        texts.append(c.text)
        emb.append(src.step_embeddings[c.source_step - 1])
    spec = MixedProcedureSpec([s.video_id for s in group], mixed)
    proc = Procedure(procedure_id, group[0].task, texts, np.stack(emb))
    return MixResult("accepted", "", spec, GroundTruthSample(proc, clips, "llm-mixed"), raw)


def build_weak_dataset(
    corpus: Corpus,
    llm: LlmClient,
    domain: str = "cooking",
    threshold: float = PAIR_THRESHOLD,
    group_sizes: Sequence[int] = (2, 3, 4),
) -> tuple[list[GroundTruthSample], Counter, list[MixResult]]:
    """Summaries, then groups of similar same-task summaries, then LLM mixes.

    Returns accepted samples, counters, and every rejected or skipped result
    (with its reason) for auditing.
    """
    stats: Counter = Counter()
    summaries = summarize_corpus(corpus, domain, llm, stats)
    by_task: dict[str, list[Summary]] = {}
    for s in summaries:
        by_task.setdefault(s.task, []).append(s)
    samples, audit = [], []
    for task in sorted(by_task):
        members = by_task[task]
        emb = np.stack([s.embedding for s in members])
        for size in group_sizes:
            for group in pair_similar_procedures(emb, threshold, size):
                pid = f"mix-{task}-{size}-{'-'.join(members[g].video_id for g in group)}"
                result = mix_procedures([members[g] for g in group], llm, domain, pid)
                stats[result.status] += 1
                if result.status == "accepted":
                    samples.append(result.sample)
                else:
                    log.info("%s %s: %s", pid, result.status, result.reason)
                    audit.append(result)
    return samples, stats, audit
