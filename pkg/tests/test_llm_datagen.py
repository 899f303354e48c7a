import numpy as np
import pytest
from llm_cases import CASES, oracle

from stitchdemo.corpus import Corpus
from stitchdemo.datagen import build_weak_dataset, pair_similar_procedures, step_text_embedding, validate_mix
from stitchdemo.errors import LlmFormatError, LlmUnavailable
from stitchdemo.llm import (
    HttpLlmClient,
    MockLlmClient,
    ScriptedLlmClient,
    make_client,
    mix_prompt,
    parse_mix,
    parse_summary,
    summarize_prompt,
)


def library_verdict(case):
    if case["kind"] == "summary":
        try:
            parsed = parse_summary(case["text"], case["duration"])
        except LlmFormatError:
            return ("error", 0)
        return ("not_possible", 0) if parsed.not_possible else ("ok", len(parsed.steps))
    return validate_mix(case["text"], case["counts"])[0]


@pytest.mark.parametrize("index", range(len(CASES)))
def test_fixture_case_agrees_with_oracle(index):
    case = CASES[index]
    assert library_verdict(case) == oracle(case)


def test_fixture_covers_every_verdict():
    verdicts = {str(oracle(c)) for c in CASES}
    for needed in ("accepted", "rejected", "not_possible", "('not_possible', 0)", "('error', 0)"):
        assert needed in verdicts


def test_parse_summary_fields():
    parsed = parse_summary("Recipe: Tea\nStep 1: [0-2.5] boil water\nStep 2: [3-9] steep", 10)
    assert parsed.title == "Tea"
    assert [(s.number, s.t_start, s.t_end, s.text) for s in parsed.steps] == [
        (1, 0.0, 2.5, "boil water"),
        (2, 3.0, 9.0, "steep"),
    ]


def test_parse_mix_strips_brackets():
    cites, bad = parse_mix("Step 1 (Step 2 in Recipe 1): [add salt]\nStep 2 (Step 1 in Recipe 2): stir")
    assert [(c.source, c.source_step, c.text) for c in cites] == [(1, 2, "add salt"), (2, 1, "stir")]
    assert bad == []


def test_prompts_are_filled():
    p = summarize_prompt("cooking", [(0.0, 1.5, "hi there")])
    assert "[0-1.5] hi there" in p.user
    assert "{narrations}" not in p.user
    summary = parse_summary("Project: Box\nStep 1: [0-1] cut", None)
    m = mix_prompt("woodworking", [summary, summary])
    assert "Project 1: Box" in m.user and "Project 2: Box" in m.user
    assert "{n}" not in m.user and "{procedures}" not in m.user
    with pytest.raises(ValueError):
        summarize_prompt("knitting", [])


def test_mock_client_round_trip():
    llm = MockLlmClient()
    text = llm.complete(summarize_prompt("cooking", [(0, 2, "chop onions"), (2, 5, "fry them")]))
    parsed = parse_summary(text, 10)
    assert [s.text for s in parsed.steps] == ["chop onions", "fry them"]
    mixed = llm.complete(mix_prompt("cooking", [parsed, parsed]))
    assert validate_mix(mixed, [2, 2]) == ("accepted", "")


def test_scripted_client_runs_dry():
    llm = ScriptedLlmClient(["one"])
    assert llm.complete(summarize_prompt("cooking", [])) == "one"
    with pytest.raises(LlmUnavailable):
        llm.complete(summarize_prompt("cooking", []))


def test_http_client_needs_endpoint(monkeypatch):
    monkeypatch.delenv("SAD_LLM_URL", raising=False)
    with pytest.raises(LlmUnavailable):
        make_client("http")
    with pytest.raises(ValueError):
        make_client("carrier-pigeon")


def test_http_client_retries_then_gives_up(monkeypatch):
    import urllib.error

    sleeps = []
    client = HttpLlmClient("http://127.0.0.1:9", "k", attempts=3, backoff_s=0.5, sleep=sleeps.append)

    def fail(payload):
        raise urllib.error.URLError("refused")

    monkeypatch.setattr(client, "_post", fail)
    with pytest.raises(LlmUnavailable):
        client.complete(summarize_prompt("cooking", []))
    assert sleeps == [0.5, 1.0]


def test_pairing_groups_are_disjoint_and_similar():
    r = np.random.default_rng(0)
    base = r.normal(size=(3, 8))
    emb = np.concatenate([base[k] + 0.05 * r.normal(size=(4, 8)) for k in range(3)])
    groups = pair_similar_procedures(emb, 0.9, 3)
    seen = set()
    for g in groups:
        assert not seen & set(g)
        seen |= set(g)
        unit = emb[list(g)] / np.linalg.norm(emb[list(g)], axis=1, keepdims=True)
        assert (unit @ unit.T).min() >= 0.9
    assert len(groups) == 3
    with pytest.raises(ValueError):
        pair_similar_procedures(emb, 0.9, 5)


def test_step_text_embedding_uses_overlapping_asr(small_world):
    video = next(v for v in small_world.corpus if v.asr)
    seg = video.asr[1]
    got = step_text_embedding(video, seg.t_start, seg.t_end)
    np.testing.assert_allclose(got, seg.embedding, atol=1e-6)


def test_weak_dataset_with_mock_llm(small_world):
    corpus = Corpus(list(small_world.corpus)[:16])
    samples, stats, audit = build_weak_dataset(corpus, MockLlmClient(), "cooking", threshold=0.5, group_sizes=(2, 3))
    assert stats["summaries"] == 16
    assert samples, "mock mixing should accept some groups"
    for s in samples:
        assert s.provenance == "llm-mixed"
        assert len({c.video_id for c in s.clips}) >= 2
        for clip in s.clips:
            corpus.check_clip(clip)
    for r in audit:
        assert r.status in ("rejected", "not_possible") and r.reason
