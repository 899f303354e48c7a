import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from oracles import alignment_cost, brute_drop_dtw

from stitchdemo.corpus import Corpus, Segment, VideoRecord
from stitchdemo.errors import EmptyInstance
from stitchdemo.localizer import (
    AlignmentCostMatrix,
    build_cost_matrix,
    drop_dtw,
    localize_corpus,
    read_pool,
    write_pool,
)


def random_instance(seed):
    r = np.random.default_rng(seed)
    S, W = int(r.integers(1, 5)), int(r.integers(1, 8))
    costs = r.uniform(0, 2, size=(S, W))
    drop = r.uniform(0, 1.5, size=W)
    return AlignmentCostMatrix(costs, drop, float(r.uniform(0, 2)))


def check_runs(runs, W):
    prev_stop = 0
    for run in runs:
        if run is None:
            continue
        a, b = run
        assert prev_stop <= a < b <= W
        prev_stop = b


@given(st.integers(0, 2**32 - 1))
def test_dp_matches_exhaustive_enumeration(seed):
    m = random_instance(seed)
    total, loc = drop_dtw(m)
    expected, _ = brute_drop_dtw(m.costs, m.drop_cost, m.step_drop_cost)
    assert abs(total - expected) <= 1e-9
    check_runs(loc.runs, m.shape[1])
    assert alignment_cost(m.costs, m.drop_cost, m.step_drop_cost, loc.runs) == pytest.approx(total, abs=1e-9)


def test_free_drops_align_nothing():
    m = AlignmentCostMatrix(np.full((2, 3), 5.0), np.zeros(3), 0.0)
    total, loc = drop_dtw(m)
    assert total == 0.0
    assert loc.runs == (None, None)


def test_obvious_diagonal():
    costs = np.array([[0.0, 1, 1, 1], [1, 1, 0.0, 0.0]])
    total, loc = drop_dtw(AlignmentCostMatrix(costs, np.full(4, 0.5), 1.0))
    assert loc.runs == ((0, 1), (2, 4))
    assert total == pytest.approx(0.5)


def test_intervals_map_runs_to_times():
    m = AlignmentCostMatrix(np.array([[0.0, 0.0, 9.0]]), np.full(3, 0.5), 9.0)
    _, loc = drop_dtw(m)
    windows = np.array([[0.0, 1.5], [1.5, 3.0], [3.0, 4.0]])
    assert loc.intervals(windows) == [(0.0, 3.0)]


def test_empty_instances_raise():
    with pytest.raises(EmptyInstance):
        drop_dtw(AlignmentCostMatrix(np.zeros((0, 3)), np.zeros(3), 1.0))
    video = VideoRecord("v", 0.0, "t", np.zeros((0, 2)), np.zeros((0, 3), np.float32))
    with pytest.raises(EmptyInstance):
        build_cost_matrix(video, np.ones((1, 3)))


def test_non_finite_costs_rejected():
    with pytest.raises(ValueError, match="finite"):
        AlignmentCostMatrix(np.array([[np.nan]]), np.zeros(1), 1.0)


def test_cost_matrix_default_drop_cost_is_column_percentile():
    r = np.random.default_rng(0)
    video = VideoRecord("v", 6.0, "t", np.stack([np.arange(6), np.arange(1, 7)], 1).astype(float),
                        r.normal(size=(6, 4)).astype(np.float32))
    steps = r.normal(size=(3, 4))
    m = build_cost_matrix(video, steps, drop_percentile=50)
    unit = lambda x: x / np.linalg.norm(x, axis=1, keepdims=True)  # noqa: E731
    expected = 1 - unit(steps) @ unit(video.embeddings.astype(float)).T
    np.testing.assert_allclose(m.costs, expected, atol=1e-6)
    np.testing.assert_allclose(m.drop_cost, np.median(expected, axis=0), atol=1e-6)


def test_localize_recovers_planted_steps(tmp_path):
    r = np.random.default_rng(5)
    protos = np.eye(8)[:3] * 3
    label = [-1, 0, 0, 0, -1, 1, 1, 2, 2, 2, -1]
    emb = r.normal(scale=0.2, size=(len(label), 8))
    for j, k in enumerate(label):
        if k >= 0:
            emb[j] += protos[k]
    steps = [Segment(0, 1, f"s{k}", protos[k].astype(np.float32)) for k in range(3)]
    W = len(label)
    video = VideoRecord("v", float(W), "t", np.stack([np.arange(W), np.arange(1, W + 1)], 1).astype(float),
                        emb.astype(np.float32), None, steps)
    corpus = Corpus([video, VideoRecord("bare", 1.0, "t", np.array([[0.0, 1.0]]), np.ones((1, 8), np.float32))])
    # three steps make the percentile drop cost degenerate, so fix it
    pool, skipped = localize_corpus(corpus, drop_cost=0.5)
    assert skipped == 1
    assert [(e.clip.t_start, e.clip.t_end) for e in pool] == [(1.0, 4.0), (5.0, 7.0), (7.0, 10.0)]
    write_pool(pool, tmp_path / "pool.jsonl")
    back = read_pool(tmp_path / "pool.jsonl", corpus)
    assert [e.clip for e in back] == [e.clip for e in pool]
    np.testing.assert_array_equal(back[2].embedding, pool[2].embedding)
