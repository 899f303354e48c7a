import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from stitchdemo.corpus import (
    ClipRef,
    Corpus,
    GroundTruthSample,
    Procedure,
    Segment,
    VideoRecord,
    clip_embedding,
    cosine_similarity,
    ingest_corpus,
    load_procedures,
    load_samples,
    read_embeddings,
    write_corpus,
    write_embeddings,
    write_procedures,
    write_samples,
)
from stitchdemo.errors import CorpusError, EmptyClip, ZeroVector


def make_video(vid="a", n=5, dim=4, seed=0, steps=True, asr=True):
    r = np.random.default_rng(seed)
    windows = np.stack([np.arange(n), np.arange(1, n + 1)], axis=1).astype(float)
    emb = r.normal(size=(n, dim)).astype(np.float32)
    seg = lambda a, b, t: Segment(a, b, t, r.normal(size=dim).astype(np.float32))  # noqa: E731
    return VideoRecord(
        vid, float(n), "t", windows, emb,
        [seg(0.0, 2.0, "hello")] if asr else None,
        [seg(0.0, 2.0, "cut"), seg(2.0, 4.0, "fry")] if steps else None,
    )


def corpus_bytes(path):
    return {p.name: p.read_bytes() for p in sorted(path.iterdir())}


def test_write_read_write_is_byte_identical(tmp_path):
    corpus = Corpus([make_video("a", seed=1), make_video("b", seed=2, asr=False), make_video("c", steps=False, asr=False)])
    write_corpus(corpus, tmp_path / "one")
    write_corpus(ingest_corpus(tmp_path / "one"), tmp_path / "two")
    assert corpus_bytes(tmp_path / "one") == corpus_bytes(tmp_path / "two")


def test_ingest_keeps_annotations(tmp_path):
    video = make_video()
    write_corpus(Corpus([video]), tmp_path)
    back = ingest_corpus(tmp_path)["a"]
    assert [s.text for s in back.steps] == ["cut", "fry"]
    np.testing.assert_array_equal(back.steps[1].embedding, video.steps[1].embedding)
    np.testing.assert_array_equal(back.asr[0].embedding, video.asr[0].embedding)


@pytest.mark.parametrize(
    "mutate, message",
    [
        (lambda rec: rec.update(windows=[{"t_start": 0, "t_end": 1}]), "windows declared"),
        (lambda rec: rec.pop("video_id"), "missing or invalid"),
        (lambda rec: rec.update(duration_s=2.0), "outside"),
        (lambda rec: rec["windows"][1].update(t_start=0.5), "overlapping"),
    ],
)
def test_ingest_rejects_bad_records(tmp_path, mutate, message):
    write_corpus(Corpus([make_video()]), tmp_path)
    rec = json.loads((tmp_path / "videos.jsonl").read_text())
    mutate(rec)
    (tmp_path / "videos.jsonl").write_text(json.dumps(rec) + "\n")
    with pytest.raises(CorpusError, match=message):
        ingest_corpus(tmp_path)


def test_ingest_rejects_missing_embedding_file(tmp_path):
    write_corpus(Corpus([make_video()]), tmp_path)
    (tmp_path / "a.emb").unlink()
    with pytest.raises(CorpusError, match="missing embedding file"):
        ingest_corpus(tmp_path)


def test_embedding_file_corruption_detected(tmp_path):
    path = tmp_path / "x.emb"
    write_embeddings(path, np.ones((3, 2)))
    raw = path.read_bytes()
    path.write_bytes(raw[:-4])
    with pytest.raises(CorpusError, match="expected"):
        read_embeddings(path)
    path.write_bytes(b"XXXXXXXX" + raw[8:])
    with pytest.raises(CorpusError, match="magic"):
        read_embeddings(path)


@given(hnp.arrays(np.float32, st.tuples(st.integers(0, 5), st.integers(1, 6)), elements=st.floats(-1e3, 1e3, width=32)))
def test_embedding_roundtrip(tmp_path_factory, values):
    path = tmp_path_factory.mktemp("emb") / "v.emb"
    write_embeddings(path, values)
    np.testing.assert_array_equal(read_embeddings(path), values)


def test_duplicate_video_ids_rejected():
    with pytest.raises(CorpusError, match="duplicate"):
        Corpus([make_video("a"), make_video("a")])


def test_mixed_dims_rejected():
    with pytest.raises(CorpusError, match="dim"):
        Corpus([make_video("a", dim=4), make_video("b", dim=5)])


@given(st.integers(1, 12), st.integers(0, 11), st.integers(1, 12), st.integers(0, 2**31))
def test_clip_embedding_is_mean_of_windows_by_midpoint(n, a, length, seed):
    video = make_video(n=n, seed=seed % 1000, steps=False, asr=False)
    t0, t1 = float(a), float(a + length)
    mids = [k + 0.5 for k in range(n)]
    inside = [k for k, m in enumerate(mids) if t0 <= m < t1]
    if not inside:
        with pytest.raises(EmptyClip):
            clip_embedding(video, t0, t1)
        return
    expected = np.mean([video.embeddings[k].astype(np.float64) for k in inside], axis=0)
    np.testing.assert_allclose(clip_embedding(video, t0, t1), expected, rtol=1e-6, atol=1e-6)


def test_clip_outside_video_rejected():
    corpus = Corpus([make_video(n=5)])
    with pytest.raises(CorpusError, match="outside"):
        corpus.clip_embedding(ClipRef("a", 3.0, 7.0))
    with pytest.raises(CorpusError, match="unknown"):
        corpus.clip_embedding(ClipRef("zz", 0.0, 1.0))


@given(hnp.arrays(np.float64, 6, elements=st.floats(-10, 10)), hnp.arrays(np.float64, 6, elements=st.floats(-10, 10)))
def test_cosine_matches_definition(a, b):
    na, nb = np.sqrt((a * a).sum()), np.sqrt((b * b).sum())
    if na < 1e-6 or nb < 1e-6:
        if na == 0 or nb == 0:
            with pytest.raises(ZeroVector):
                cosine_similarity(a, b)
        return
    c = cosine_similarity(a, b)
    assert -1.0 <= c <= 1.0
    assert c == pytest.approx(float(np.clip(sum(a * b) / (na * nb), -1, 1)), abs=1e-9)


def test_procedures_and_samples_roundtrip(tmp_path):
    emb = np.eye(3, 4, dtype=np.float32)
    proc = Procedure("p1", "t", ["a", "b", "c"], emb)
    write_procedures([proc], tmp_path / "procs" / "procedures.jsonl")
    back = load_procedures(tmp_path / "procs" / "procedures.jsonl")[0]
    assert back.texts == proc.texts
    np.testing.assert_array_equal(back.embeddings, emb)

    clips = [ClipRef("v", 0.0, 1.0), ClipRef("v", 1.0, 2.0), ClipRef("w", 0.0, 3.0)]
    write_samples([GroundTruthSample(proc, clips, "llm-mixed")], tmp_path / "s" / "samples.jsonl")
    sample = load_samples(tmp_path / "s" / "samples.jsonl")[0]
    assert sample.clips == tuple(clips) and sample.provenance == "llm-mixed"


def test_sample_needs_one_clip_per_step():
    proc = Procedure("p", "t", ["a", "b"], np.ones((2, 3)))
    with pytest.raises(CorpusError):
        GroundTruthSample(proc, [ClipRef("v", 0.0, 1.0)])
    with pytest.raises(CorpusError, match="provenance"):
        GroundTruthSample(proc, [ClipRef("v", 0.0, 1.0)] * 2, "made-up")
