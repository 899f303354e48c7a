"""Synthetic instructional-video worlds with planted multi-source ground truths.

Every task owns a set of step concepts in a canonical order. A video performs
a subset of them (occasionally with two neighbours swapped, sometimes
repeating an earlier step later on), and its window
embeddings mix four signals:

* the concept prototype plus a per-video variant of the step (what is done),
* a per-video style vector (the kitchen, the camera, the person),
* a progress code that drifts with time through the video (object state),
* white noise.

Step texts carry the concept prototype and the variant, so text-to-text
similarity groups steps by concept while the variant ties a description to
the clip it came from. Queries are planted from localized pool entries of
2-3 source videos of one task such that a switch between sources is needed
exactly where the query changes source.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .corpus import ClipRef, Corpus, GroundTruthSample, Procedure, Segment, VideoRecord
from .localizer import PoolEntry, localize_corpus
from .mapping import DEFAULT_THRESHOLD, build_mapping
from .setcover import assign_min_switch, build_cover_sets


@dataclass
class SynthConfig:
    n_videos: int = 200
    n_tasks: int = 8
    concepts_per_task: int = 10
    dim: int = 32
    steps_per_video: tuple[int, int] = (4, 7)
    step_windows: tuple[int, int] = (4, 8)
    gap_windows: tuple[int, int] = (0, 2)
    intro_windows: tuple[int, int] = (2, 4)
    variant_scale: float = 0.45
    style_scale: float = 0.5
    state_scale: float = 0.5
    window_noise: float = 0.4
    text_noise: float = 0.2
    asr_noise: float = 0.5
    query_noise: float = 0.1
    swap_prob: float = 0.3
    repeat_prob: float = 0.5  # chance a video does one earlier step again later on
    sources: tuple[int, ...] = (2, 3)
    block_len: tuple[int, int] = (2, 4)
    query_len: tuple[int, int] = (3, 8)
    threshold: float = DEFAULT_THRESHOLD
    seed: int = 0


@dataclass(eq=False)
class SynthWorld:
    config: SynthConfig
    corpus: Corpus
    pool: list[PoolEntry]
    concept_of: dict[tuple[str, int], tuple[str, int]]  # (video, step index) -> (task, concept)
    train: list[GroundTruthSample] = field(default_factory=list)
    test: list[GroundTruthSample] = field(default_factory=list)


def _gauss(rng, scale, *shape):
    return rng.normal(0.0, scale / math.sqrt(shape[-1]), size=shape)


def _unit(x):
    x = np.asarray(x, dtype=np.float64)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def make_corpus(config: SynthConfig, rng: np.random.Generator):
    d = config.dim
    tasks = [f"task{t:02d}" for t in range(config.n_tasks)]
    prototypes = {t: _unit(rng.normal(size=(config.concepts_per_task, d))) for t in tasks}
    progress = {t: _unit(rng.normal(size=(2, d))) for t in tasks}
    videos, concept_of = [], {}
    for v in range(config.n_videos):
        task = tasks[v % config.n_tasks]
        vid = f"v{v:04d}"
        P, U = prototypes[task], progress[task]
        lo, hi = config.steps_per_video
        n_steps = int(rng.integers(lo, min(hi, config.concepts_per_task) + 1))
        concepts = sorted(rng.choice(config.concepts_per_task, size=n_steps, replace=False).tolist())
        if n_steps > 1 and rng.random() < config.swap_prob:
            k = int(rng.integers(n_steps - 1))
            concepts[k], concepts[k + 1] = concepts[k + 1], concepts[k]
        if n_steps > 2 and rng.random() < config.repeat_prob:
            at = int(rng.integers(2, n_steps + 1))
            concepts.insert(at, concepts[int(rng.integers(at - 1))])
            n_steps += 1
        style = _gauss(rng, config.style_scale, d)
        # timeline in 1 s windows: intro, then (step, gap)*, then a short outro
        spans, label = [], []
        t = int(rng.integers(config.intro_windows[0], config.intro_windows[1] + 1))
        label += [-1] * t
        for k in range(n_steps):
            length = int(rng.integers(config.step_windows[0], config.step_windows[1] + 1))
            spans.append((t, t + length))
            label += [k] * length
            t += length
            gap = int(rng.integers(config.gap_windows[0], config.gap_windows[1] + 1))
            label += [-1] * gap
            t += gap
        label += [-1] * 2
        W = len(label)
        variants = _gauss(rng, config.variant_scale, n_steps, d)
        tau = (np.arange(W) + 0.5) / W
        state = config.state_scale * (
            np.cos(0.5 * np.pi * tau)[:, None] * U[0] + np.sin(0.5 * np.pi * tau)[:, None] * U[1]
        )
        emb = style + state + _gauss(rng, config.window_noise, W, d)
        for j, k in enumerate(label):
            if k >= 0:
                emb[j] += P[concepts[k]] + variants[k]
        windows = np.stack([np.arange(W, dtype=np.float64), np.arange(1, W + 1, dtype=np.float64)], axis=1)
        steps, asr = [], [Segment(0.0, float(spans[0][0]) or 1.0, "intro chatter", _gauss(rng, 1.0, d).astype(np.float32))]
        for k, (a, b) in enumerate(spans):
            c = concepts[k]
            text_emb = _unit(P[c] + variants[k] + _gauss(rng, config.text_noise, d))
            steps.append(Segment(float(a), float(b), f"{task} step {c} as done in {vid}", text_emb.astype(np.float32)))
            asr_emb = P[c] + variants[k] + _gauss(rng, config.asr_noise, d)
            asr.append(Segment(float(a), float(b), f"narration of {task} step {c} in {vid}", asr_emb.astype(np.float32)))
            concept_of[(vid, k)] = (task, c)
        videos.append(VideoRecord(vid, float(W), task, windows, emb.astype(np.float32), asr, steps))
    return Corpus(videos), concept_of


def _plant_one(world: SynthWorld, rng, by_video, videos_by_task, pid, top_s) -> GroundTruthSample | None:
    cfg = world.config
    task = sorted(videos_by_task)[int(rng.integers(len(videos_by_task)))]
    candidates = videos_by_task[task]
    n_src = int(rng.choice(cfg.sources))
    if len(candidates) < n_src:
        return None
    sources = [candidates[i] for i in rng.choice(len(candidates), size=n_src, replace=False)]
    entries: list[PoolEntry] = []
    last_concept = -1
    for vid in sources:
        seq = by_video[vid]
        blocks = []
        for start in range(len(seq)):
            for length in range(cfg.block_len[0], cfg.block_len[1] + 1):
                block = seq[start : start + length]
                if len(block) < length:
                    continue
                concepts = [world.concept_of[(vid, e.step_index)][1] for e in block]
                if concepts[0] > last_concept and all(a < b for a, b in zip(concepts, concepts[1:])):
                    blocks.append(block)
        if not blocks:
            return None
        block = blocks[int(rng.integers(len(blocks)))]
        entries += block
        last_concept = world.concept_of[(vid, block[-1].step_index)][1]
    if not cfg.query_len[0] <= len(entries) <= cfg.query_len[1]:
        return None
    texts = [e.step_text for e in entries]
    emb = _unit(np.stack([e.embedding for e in entries]) + _gauss(rng, cfg.query_noise, len(entries), cfg.dim))
    query = Procedure(pid, task, texts, emb.astype(np.float32))
    clips = tuple(e.clip for e in entries)
    # the ground truth must be the least-switching assignment within its own sources
    mapping = build_mapping(query, world.pool, cfg.threshold, top_s)
    for step, clip in enumerate(clips):
        if clip not in mapping.clips_for(step):
            return None
    subset = [s for s in build_cover_sets(mapping) if s.video_id in set(sources)]
    assignment, _, _ = assign_min_switch(subset, len(query))
    if any(m is None for m in assignment) or tuple(m.clip for m in assignment) != clips:
        return None
    return GroundTruthSample(query, clips, "llm-mixed")


def plant_queries(
    world: SynthWorld, n: int, rng: np.random.Generator, prefix: str, top_s: int = 50, exclude=()
) -> list[GroundTruthSample]:
    """``n`` distinct planted samples; clip tuples in ``exclude`` are never reused."""
    by_video: dict[str, list[PoolEntry]] = {}
    for e in world.pool:
        by_video.setdefault(e.video_id, []).append(e)
    for seq in by_video.values():
        seq.sort(key=lambda e: e.clip.t_start)
    videos_by_task: dict[str, list[str]] = {}
    for vid in sorted(by_video):
        videos_by_task.setdefault(world.corpus[vid].task, []).append(vid)
    out, seen = [], set(exclude)
    attempts = 0
    while len(out) < n:
        attempts += 1
        if attempts > 200 * max(n, 1):
            raise RuntimeError(f"could only plant {len(out)} of {n} queries")
        sample = _plant_one(world, rng, by_video, videos_by_task, f"{prefix}{len(out):04d}", top_s)
        if sample is None or sample.clips in seen:
            continue
        seen.add(sample.clips)
        out.append(sample)
    return out


def real_video_samples(world: SynthWorld, rng: np.random.Generator, min_steps: int = 3) -> list[GroundTruthSample]:
    """Unmixed positives: every contiguous run of at least ``min_steps`` localized steps of a video."""
    cfg = world.config
    by_video: dict[str, list[PoolEntry]] = {}
    for e in world.pool:
        by_video.setdefault(e.video_id, []).append(e)
    out = []
    for vid in sorted(by_video):
        seq = sorted(by_video[vid], key=lambda e: e.clip.t_start)
        for a in range(len(seq)):
            for b in range(a + min_steps, len(seq) + 1):
                run = seq[a:b]
                emb = _unit(np.stack([e.embedding for e in run]) + _gauss(rng, cfg.query_noise, len(run), cfg.dim))
                query = Procedure(
                    f"video-{vid}-{a}-{b}", world.corpus[vid].task, [e.step_text for e in run], emb.astype(np.float32)
                )
                out.append(GroundTruthSample(query, tuple(e.clip for e in run), "real-video"))
    return out


def make_world(config: SynthConfig | None = None, n_train: int = 300, n_test: int = 100) -> SynthWorld:
    config = config or SynthConfig()
    rng = np.random.default_rng(config.seed)
    corpus, concept_of = make_corpus(config, rng)
    pool, _ = localize_corpus(corpus)
    world = SynthWorld(config, corpus, pool, concept_of)
    world.train = plant_queries(world, n_train, rng, "train-")
    world.test = plant_queries(world, n_test, rng, "test-", exclude={s.clips for s in world.train})
    return world


def pool_concepts(world: SynthWorld) -> dict[ClipRef, tuple[str, int]]:
    return {e.clip: world.concept_of[(e.video_id, e.step_index)] for e in world.pool}
