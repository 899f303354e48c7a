import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from oracles import METRIC_CASES, median

from stitchdemo.corpus import ClipRef
from stitchdemo.evaluator import EvaluatorConfig, EvaluatorModel
from stitchdemo.harness import (
    CAPTURE_STRATEGIES,
    STRATEGIES,
    RetrievalReport,
    build_all_distractors,
    capture_curve,
    capture_svg,
    median_rank,
    pessimistic_rank,
    quotas,
    random_scorer,
    rank_sets,
    recall_at_k,
    run_experiment,
    similarity_scorer,
    text_only_scorer,
    write_capture_curve,
    write_ranks,
    write_report,
)


@pytest.mark.parametrize("ranks, mr, recalls", METRIC_CASES)
def test_metrics_match_hand_computed_values(ranks, mr, recalls):
    assert median_rank(ranks) == mr
    for k, value in recalls.items():
        assert recall_at_k(ranks, k) == value


@given(st.lists(st.integers(1, 500), min_size=1, max_size=40), st.integers(1, 500))
def test_metrics_match_sort_and_count(ranks, k):
    assert median_rank(ranks) == median(ranks)
    assert recall_at_k(ranks, k) == sum(1 for r in ranks if r <= k) / len(ranks)


def test_metric_edge_cases():
    with pytest.raises(ValueError):
        median_rank([])
    with pytest.raises(ValueError):
        recall_at_k([1], 0)
    assert recall_at_k([], 5) == 0.0


@given(st.lists(st.integers(-3, 3), min_size=1, max_size=30), st.data())
def test_pessimistic_rank_counts_ties_above(scores, data):
    i = data.draw(st.integers(0, len(scores) - 1))
    assert pessimistic_rank(scores, i) == 1 + sum(1 for j, s in enumerate(scores) if j != i and s >= scores[i])


def test_quotas_split_evenly():
    q = quotas(499)
    assert sum(q.values()) == 499 and max(q.values()) - min(q.values()) <= 1
    assert list(q) == list(STRATEGIES)


@pytest.fixture(scope="module")
def sets(small_world):
    return build_all_distractors(small_world.test, small_world.corpus, small_world.pool, seed=0, n=99)


def test_distractor_sets_are_valid(small_world, sets):
    assert len(sets) == len(small_world.test)
    for ds in sets:
        keys = [d.key for d in ds.distractors]
        assert len(keys) == 99 == len(set(keys))
        assert ds.ground_truth.key not in set(keys)
        for d in ds.distractors:
            assert len(d.clips) == len(ds.query)
            assert d.strategy in STRATEGIES
            for clip in d.clips:
                small_world.corpus.check_clip(clip)
    # a query whose only cover is its own ground truth contributes no RS distractor
    assert sum(ds.yields()["RS"] for ds in sets) > 0


def test_distractors_are_deterministic(small_world, sets):
    again = build_all_distractors(small_world.test, small_world.corpus, small_world.pool, seed=0, n=99)
    assert [d.to_json() for d in again] == [d.to_json() for d in sets]


def test_baselines_and_random_scorer(small_world, sets):
    sim = rank_sets("similarity", sets, similarity_scorer(small_world.corpus))
    assert set(sim.ranks) == {s.procedure.procedure_id for s in small_world.test}
    assert all(1 <= r <= 100 for r in sim.ranks.values())
    txt = rank_sets("text-only", sets, text_only_scorer(small_world.corpus))
    assert all(1 <= r <= 100 for r in txt.ranks.values())
    a = rank_sets("random", sets, random_scorer(3))
    b = rank_sets("random", sets, random_scorer(3))
    assert a.ranks == b.ranks


def test_similarity_scorer_is_mean_step_cosine(small_world, sets):
    ds = sets[0]
    got = similarity_scorer(small_world.corpus)(ds.query, ds.candidates()[:3])
    for value, cand in zip(got, ds.candidates()[:3]):
        cos = []
        for emb, clip in zip(ds.query.embeddings, cand.clips):
            c = small_world.corpus.clip_embedding(clip).astype(float)
            e = emb.astype(float)
            cos.append(e @ c / np.linalg.norm(e) / np.linalg.norm(c))
        assert value == pytest.approx(np.mean(cos), abs=1e-6)


def test_run_experiment_checks_model_dim(small_world, sets):
    model = EvaluatorModel(EvaluatorConfig(feature_dim=8, model_dim=8, layers=1, heads=2))
    with pytest.raises(ValueError, match="dim"):
        run_experiment(sets, small_world.corpus, model)
    ok = EvaluatorModel(EvaluatorConfig(feature_dim=small_world.corpus.dim, model_dim=8, layers=1, heads=2))
    reports = run_experiment(sets[:2], small_world.corpus, ok)
    assert [r.method for r in reports] == ["evaluator", "similarity", "text-only"]


def test_report_files(tmp_path):
    reports = [RetrievalReport("m", {"a": 1, "b": 60}, 500)]
    write_report(reports, tmp_path / "report.csv")
    assert (tmp_path / "report.csv").read_text() == "method,MR,R@1,R@5,R@50\nm,30.500000,0.500000,0.500000,0.500000\n"
    write_ranks(reports, tmp_path / "ranks.csv")
    assert (tmp_path / "ranks.csv").read_text().splitlines()[1:] == ["m,a,1", "m,b,60"]


def test_capture_curve_monotone_and_written(small_world, tmp_path):
    rows = capture_curve(small_world.test, small_world.pool, [1, 5, 20])
    for s in CAPTURE_STRATEGIES:
        values = [r[s] for r in rows]
        assert all(0 <= v <= 1 for v in values)
    sc = [r["setcover"] for r in rows]
    assert sc == sorted(sc)
    write_capture_curve(rows, tmp_path / "c.csv")
    assert (tmp_path / "c.csv").read_text().startswith("K,setcover,random,edited-nn\n")
    capture_svg(rows, tmp_path / "c.svg")
    assert "<polyline" in (tmp_path / "c.svg").read_text()


def test_ground_truth_keeps_its_own_clips(sets):
    for ds in sets:
        assert all(isinstance(c, ClipRef) for c in ds.ground_truth.clips)
        assert ds.candidates()[0] is ds.ground_truth
