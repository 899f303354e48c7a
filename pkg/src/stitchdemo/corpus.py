"""Data model and on-disk formats for videos, embeddings, procedures and samples.

Embeddings are plain ``numpy`` float32 arrays. A corpus directory holds a
``videos.jsonl`` index plus one ``<video_id>.emb`` file of window embeddings
per video and an optional ``<video_id>.temb`` file with the text embeddings
of its ASR segments followed by its annotated steps.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import CorpusError, EmptyClip, ZeroVector

MAGIC = b"SADEMB1\0"
_HEADER = struct.Struct("<8sII")
DEFAULT_DIM = 768

PROVENANCES = ("real-video", "llm-mixed", "detour-derived")


# ---------------------------------------------------------------------------
# binary embedding files


def write_embeddings(path, values: np.ndarray) -> None:
    values = np.asarray(values, dtype="<f4")
    if values.ndim != 2:
        raise ValueError(f"expected a (count, dim) matrix, got shape {values.shape}")
    count, dim = values.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, dim, count))
        fh.write(np.ascontiguousarray(values).tobytes())


def read_embeddings(path) -> np.ndarray:
    """Read a ``SADEMB1`` file into a ``(count, dim)`` float32 array."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise CorpusError(f"{path}: truncated header")
    magic, dim, count = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise CorpusError(f"{path}: bad magic {magic!r}")
    if dim == 0:
        raise CorpusError(f"{path}: dim must be positive")
    expected = _HEADER.size + 4 * dim * count
    if len(raw) != expected:
        raise CorpusError(f"{path}: expected {expected} bytes for {count}x{dim}, found {len(raw)}")
    values = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(count, dim)
    if not np.all(np.isfinite(values)):
        raise CorpusError(f"{path}: non-finite embedding values")
    return values.astype(np.float32)


# ---------------------------------------------------------------------------
# records


@dataclass(frozen=True, order=True)
class ClipRef:
    video_id: str
    t_start: float
    t_end: float

    def to_json(self) -> dict:
        return {"video_id": self.video_id, "t_start": self.t_start, "t_end": self.t_end}

    @classmethod
    def from_json(cls, obj: dict) -> "ClipRef":
        return cls(str(obj["video_id"]), float(obj["t_start"]), float(obj["t_end"]))


@dataclass(eq=False)
class Segment:
    """A timestamped piece of text (ASR line or annotated step)."""

    t_start: float
    t_end: float
    text: str
    embedding: np.ndarray


@dataclass(eq=False)
class VideoRecord:
    video_id: str
    duration_s: float
    task: str
    windows: np.ndarray  # (W, 2) float64 start/end times
    embeddings: np.ndarray  # (W, dim) float32
    asr: list[Segment] | None = None
    steps: list[Segment] | None = None

    @property
    def dim(self) -> int:
        return int(self.embeddings.shape[1])

    @property
    def n_windows(self) -> int:
        return int(self.windows.shape[0])

    def validate(self) -> None:
        w = self.windows
        if w.ndim != 2 or w.shape[1] != 2:
            raise CorpusError(f"{self.video_id}: windows must be (W, 2)")
        if w.shape[0] != self.embeddings.shape[0]:
            raise CorpusError(
                f"{self.video_id}: {w.shape[0]} windows but {self.embeddings.shape[0]} embeddings"
            )
        if self.duration_s < 0:
            raise CorpusError(f"{self.video_id}: negative duration")
        if np.any(w[:, 0] >= w[:, 1]):
            raise CorpusError(f"{self.video_id}: window with t_start >= t_end")
        if np.any(w[1:, 0] < w[:-1, 1]):
            raise CorpusError(f"{self.video_id}: overlapping or unsorted windows")
        if w.size and (w[0, 0] < 0 or w[-1, 1] > self.duration_s):
            raise CorpusError(f"{self.video_id}: window outside [0, duration_s]")
        if not np.all(np.isfinite(self.embeddings)):
            raise CorpusError(f"{self.video_id}: non-finite embedding values")


@dataclass(eq=False)
class Procedure:
    """An ordered list of step texts with their text embeddings."""

    procedure_id: str
    task: str
    texts: list[str]
    embeddings: np.ndarray  # (n_steps, dim)

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float32)
        if len(self.texts) < 1:
            raise CorpusError(f"procedure {self.procedure_id!r} has no steps")
        if self.embeddings.shape[0] != len(self.texts):
            raise CorpusError(f"procedure {self.procedure_id!r}: text/embedding count mismatch")

    def __len__(self) -> int:
        return len(self.texts)

    @property
    def dim(self) -> int:
        return int(self.embeddings.shape[1])


@dataclass(eq=False)
class GroundTruthSample:
    procedure: Procedure
    clips: tuple[ClipRef, ...]
    provenance: str = "real-video"

    def __post_init__(self):
        self.clips = tuple(self.clips)
        if len(self.clips) != len(self.procedure):
            raise CorpusError("one clip per procedure step is required")
        if self.provenance not in PROVENANCES:
            raise CorpusError(f"unknown provenance {self.provenance!r}")


# ---------------------------------------------------------------------------
# similarity and pooling


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ZeroVector("cosine similarity of a zero-norm vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def cosine_matrix(a, b) -> np.ndarray:
    """Pairwise cosine similarities between the rows of ``a`` and ``b``."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    if np.any(na == 0) or np.any(nb == 0):
        raise ZeroVector("cosine similarity of a zero-norm vector")
    return np.clip((a / na[:, None]) @ (b / nb[:, None]).T, -1.0, 1.0)


def window_mask(video: VideoRecord, t_start: float, t_end: float) -> np.ndarray:
    mid = video.windows.mean(axis=1)
    return (mid >= t_start) & (mid < t_end)


def clip_embedding(video: VideoRecord, t_start: float, t_end: float) -> np.ndarray:
    """Mean of the window embeddings whose midpoint lies in ``[t_start, t_end)``.

    The mean is not renormalized.
    """
    mask = window_mask(video, t_start, t_end)
    if not mask.any():
        raise EmptyClip(f"{video.video_id}[{t_start}:{t_end}] covers no window midpoint")
    return video.embeddings[mask].astype(np.float64).mean(axis=0).astype(np.float32)


# ---------------------------------------------------------------------------
# corpus


class Corpus:
    """Immutable collection of videos keyed by id."""

    def __init__(self, videos: Iterable[VideoRecord] = ()):
        self._videos: dict[str, VideoRecord] = {}
        self._dim: int | None = None
        self._clip_cache: dict[ClipRef, np.ndarray] = {}
        for video in videos:
            video.validate()
            if video.video_id in self._videos:
                raise CorpusError(f"duplicate video_id {video.video_id!r}")
            if self._dim is None:
                self._dim = video.dim
            elif video.dim != self._dim:
                raise CorpusError(
                    f"{video.video_id}: dim {video.dim} differs from corpus dim {self._dim}"
                )
            self._videos[video.video_id] = video

    def __len__(self) -> int:
        return len(self._videos)

    def __iter__(self) -> Iterator[VideoRecord]:
        return iter(self._videos.values())

    def __contains__(self, video_id) -> bool:
        return video_id in self._videos

    def __getitem__(self, video_id: str) -> VideoRecord:
        try:
            return self._videos[video_id]
        except KeyError:
            raise CorpusError(f"unknown video_id {video_id!r}") from None

    @property
    def dim(self) -> int | None:
        return self._dim

    def video_ids(self) -> list[str]:
        return list(self._videos)

    def by_task(self, task: str) -> list[VideoRecord]:
        return [v for v in self._videos.values() if v.task == task]

    def check_clip(self, clip: ClipRef) -> None:
        video = self[clip.video_id]
        if not (0 <= clip.t_start < clip.t_end <= video.duration_s):
            raise CorpusError(f"clip {clip} outside video bounds [0, {video.duration_s}]")

    def clip_embedding(self, clip: ClipRef) -> np.ndarray:
        cached = self._clip_cache.get(clip)
        if cached is None:
            self.check_clip(clip)
            cached = clip_embedding(self[clip.video_id], clip.t_start, clip.t_end)
            self._clip_cache[clip] = cached
        return cached


# ---------------------------------------------------------------------------
# reading and writing corpus directories


def _segments_json(segments: Sequence[Segment]) -> list[dict]:
    return [{"t_start": s.t_start, "t_end": s.t_end, "text": s.text} for s in segments]


def write_corpus(corpus: Corpus, corpus_dir) -> None:
    corpus_dir = Path(corpus_dir)
    corpus_dir.mkdir(parents=True, exist_ok=True)
    with open(corpus_dir / "videos.jsonl", "w", encoding="utf-8") as fh:
        for video in corpus:
            record = {
                "video_id": video.video_id,
                "duration_s": video.duration_s,
                "task": video.task,
                "windows": [{"t_start": float(a), "t_end": float(b)} for a, b in video.windows],
            }
            text_embeddings = []
            if video.asr is not None:
                record["asr"] = _segments_json(video.asr)
                text_embeddings += [s.embedding for s in video.asr]
            if video.steps is not None:
                record["steps"] = _segments_json(video.steps)
                text_embeddings += [s.embedding for s in video.steps]
            fh.write(json.dumps(record) + "\n")
            write_embeddings(corpus_dir / f"{video.video_id}.emb", video.embeddings)
            if video.asr is not None or video.steps is not None:
                temb = (
                    np.stack(text_embeddings)
                    if text_embeddings
                    else np.zeros((0, video.dim), dtype=np.float32)
                )
                write_embeddings(corpus_dir / f"{video.video_id}.temb", temb)


def _read_jsonl(path: Path) -> Iterator[tuple[int, dict]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise CorpusError(f"{path}:{lineno}: expected a JSON object")
            yield lineno, obj


def _parse_segments(raw, embeddings: np.ndarray) -> list[Segment]:
    segments = []
    for k, seg in enumerate(raw):
        segments.append(
            Segment(float(seg["t_start"]), float(seg["t_end"]), str(seg["text"]), embeddings[k])
        )
    return segments


def ingest_corpus(corpus_dir) -> Corpus:
    """Load and validate a corpus directory."""
    corpus_dir = Path(corpus_dir)
    index = corpus_dir / "videos.jsonl"
    if not index.exists():
        raise CorpusError(f"{index} not found")
    videos = []
    for lineno, obj in _read_jsonl(index):
        where = f"{index}:{lineno}"
        try:
            video_id = str(obj["video_id"])
            windows = np.array(
                [[float(w["t_start"]), float(w["t_end"])] for w in obj["windows"]],
                dtype=np.float64,
            ).reshape(-1, 2)
            duration = float(obj["duration_s"])
            task = str(obj.get("task", ""))
        except (KeyError, TypeError, ValueError) as exc:
            raise CorpusError(f"{where}: missing or invalid field ({exc})") from None
        emb_path = corpus_dir / f"{video_id}.emb"
        if not emb_path.exists():
            raise CorpusError(f"{where}: missing embedding file {emb_path.name}")
        embeddings = read_embeddings(emb_path)
        if embeddings.shape[0] != windows.shape[0]:
            raise CorpusError(
                f"{where}: {windows.shape[0]} windows declared but {emb_path.name} "
                f"holds {embeddings.shape[0]}"
            )
        asr = steps = None
        raw_asr = obj.get("asr")
        raw_steps = obj.get("steps")
        if raw_asr is not None or raw_steps is not None:
            temb_path = corpus_dir / f"{video_id}.temb"
            if not temb_path.exists():
                raise CorpusError(f"{where}: missing text embedding file {temb_path.name}")
            temb = read_embeddings(temb_path)
            n_asr = len(raw_asr or [])
            n_steps = len(raw_steps or [])
            if temb.shape[0] != n_asr + n_steps:
                raise CorpusError(
                    f"{where}: {temb_path.name} holds {temb.shape[0]} rows, "
                    f"expected {n_asr + n_steps}"
                )
            if temb.shape[0] and temb.shape[1] != embeddings.shape[1]:
                raise CorpusError(f"{where}: text embedding dim differs from window dim")
            try:
                if raw_asr is not None:
                    asr = _parse_segments(raw_asr, temb[:n_asr])
                if raw_steps is not None:
                    steps = _parse_segments(raw_steps, temb[n_asr:])
            except (KeyError, TypeError, ValueError) as exc:
                raise CorpusError(f"{where}: invalid segment ({exc})") from None
        video = VideoRecord(video_id, duration, task, windows, embeddings, asr, steps)
        try:
            video.validate()
        except CorpusError as exc:
            raise CorpusError(f"{where}: {exc}") from None
        videos.append(video)
    return Corpus(videos)


# ---------------------------------------------------------------------------
# procedures and ground-truth samples


def write_procedures(procedures: Sequence[Procedure], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for proc in procedures:
            record = {"procedure_id": proc.procedure_id, "task": proc.task, "steps": list(proc.texts)}
            fh.write(json.dumps(record) + "\n")
            write_embeddings(path.parent / f"{proc.procedure_id}.temb", proc.embeddings)


def _load_procedure(obj: dict, directory: Path, where: str) -> Procedure:
    try:
        pid = str(obj["procedure_id"])
        texts = [str(t) for t in obj["steps"]]
    except (KeyError, TypeError) as exc:
        raise CorpusError(f"{where}: missing or invalid field ({exc})") from None
    temb = directory / f"{pid}.temb"
    if not temb.exists():
        raise CorpusError(f"{where}: missing text embedding file {temb.name}")
    return Procedure(pid, str(obj.get("task", "")), texts, read_embeddings(temb))


def load_procedures(path) -> list[Procedure]:
    path = Path(path)
    return [
        _load_procedure(obj, path.parent, f"{path}:{lineno}") for lineno, obj in _read_jsonl(path)
    ]


def write_samples(samples: Sequence[GroundTruthSample], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for sample in samples:
            proc = sample.procedure
            record = {
                "procedure_id": proc.procedure_id,
                "task": proc.task,
                "steps": list(proc.texts),
                "clips": [c.to_json() for c in sample.clips],
                "provenance": sample.provenance,
            }
            fh.write(json.dumps(record) + "\n")
            write_embeddings(path.parent / f"{proc.procedure_id}.temb", proc.embeddings)


def load_samples(path) -> list[GroundTruthSample]:
    path = Path(path)
    samples = []
    for lineno, obj in _read_jsonl(path):
        where = f"{path}:{lineno}"
        proc = _load_procedure(obj, path.parent, where)
        try:
            clips = [ClipRef.from_json(c) for c in obj["clips"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise CorpusError(f"{where}: invalid clip ({exc})") from None
        samples.append(GroundTruthSample(proc, clips, str(obj.get("provenance", "real-video"))))
    return samples
