from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trajprompt.embedding import HashingEmbedder, VectorStore
from trajprompt.retrieval import (
    RetrievalConfig,
    RetrievalResult,
    build_all_retrievals,
    cosine,
    eligible_queries,
    key_id,
    load_retrievals,
    query_id,
    save_retrievals,
    select_history,
)

from .helpers import embed_trajectories, synthetic_trajectories, traj
from .reference import ref_cosine, ref_retrievals


def _oracle_inputs(trajs, store):
    rows = [(t.trajectory_id, t.user_id, t.start_time.timestamp(), t.end_time.timestamp(), len(t)) for t in trajs]
    keys = {t.trajectory_id: store.get(key_id(t.trajectory_id)).tolist() for t in trajs}
    queries = {t.trajectory_id: store.get(query_id(t.trajectory_id)).tolist() for t in trajs}
    return rows, keys, queries


@pytest.fixture(scope="module")
def corpus():
    trajs = synthetic_trajectories(200)
    return trajs, embed_trajectories(trajs, HashingEmbedder(dim=128, seed=4))


def test_eligibility_is_strict():
    key = traj(10, 1, [100, 101])
    before, touching, after = traj(1, 2, [90, 99]), traj(2, 2, [95, 100]), traj(3, 2, [96, 101])
    assert eligible_queries(key, [before, touching, after, key], RetrievalConfig()) == [before]


def test_eligibility_self_only():
    key = traj(10, 1, [100, 101])
    mine, other = traj(1, 1, [1, 2]), traj(2, 2, [1, 2])
    assert eligible_queries(key, [mine, other], RetrievalConfig(self_only=True)) == [mine]


def test_cosine_hand_values():
    assert cosine([1, 0], [1, 0]) == pytest.approx(1.0)
    assert cosine([1, 0], [0, 1]) == pytest.approx(0.0, abs=1e-12)
    assert cosine([1, 0], [1, 1]) == pytest.approx(0.70711, abs=1e-5)
    with pytest.raises(ValueError):
        cosine([0, 0], [1, 0])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=4, max_size=4), st.lists(st.floats(-10, 10), min_size=4, max_size=4))
def test_cosine_symmetric_and_matches_reference(a, b):
    if np.linalg.norm(a) < 1e-6 or np.linalg.norm(b) < 1e-6:
        return
    assert abs(cosine(a, b) - cosine(b, a)) <= 1e-12
    assert cosine(a, b) == pytest.approx(ref_cosine(a, b), abs=1e-9)


def _cands(lengths, sims):
    out = []
    for i, (n, s) in enumerate(zip(lengths, sims)):
        out.append((traj(i, 0, [j * 0.1 for j in range(n)]), s))
    return out


def test_select_greedy_with_stop():
    key = traj(99, 0, [500, 501])
    res = select_history(key, _cands([3, 2, 4], [0.9, 0.8, 0.7]), RetrievalConfig(history_checkin_budget=5))
    assert res.trajectory_ids == [0, 1]
    assert res.total_checkins_selected == 5


def test_select_stops_at_first_misfit():
    # the third candidate (length 1) would fit but the scan already stopped
    key = traj(99, 0, [500, 501])
    res = select_history(key, _cands([3, 4, 2], [0.9, 0.8, 0.7]), RetrievalConfig(history_checkin_budget=5))
    assert res.trajectory_ids == [0]


def test_select_budget_zero():
    key = traj(99, 0, [500, 501])
    res = select_history(key, _cands([2, 2], [0.9, 0.8]), RetrievalConfig(history_checkin_budget=0))
    assert res.selected == [] and res.total_checkins_selected == 0


def test_select_single_oversize_candidate():
    key = traj(99, 0, [500, 501])
    res = select_history(key, _cands([400], [0.5]), RetrievalConfig(history_checkin_budget=300))
    assert res.trajectory_ids == [0] and res.oversize
    assert res.total_checkins_selected == 400


def test_select_top_k_cap():
    key = traj(99, 0, [500, 501])
    res = select_history(key, _cands([2] * 5, [0.9, 0.8, 0.7, 0.6, 0.5]), RetrievalConfig(top_k_cap=2))
    assert res.trajectory_ids == [0, 1]


def test_select_ties_prefer_earlier_end():
    key = traj(99, 0, [500, 501])
    a, b = traj(5, 0, [10, 20]), traj(3, 0, [1, 2])
    res = select_history(key, [(a, 0.5), (b, 0.5)], RetrievalConfig())
    assert res.trajectory_ids == [3, 5]


def test_recency_order_ignores_similarity():
    key = traj(99, 0, [500, 501])
    old, new = traj(1, 0, [1, 2]), traj(2, 0, [50, 60])
    res = select_history(key, [(old, 0.99), (new, 0.01)], RetrievalConfig(order="recency"))
    assert res.trajectory_ids == [2, 1]


@pytest.mark.parametrize("budget,self_only,top_k", [(300, False, None), (20, False, None), (15, True, None), (300, False, 3)])
def test_build_all_matches_exhaustive_oracle(corpus, budget, self_only, top_k):
    trajs, store = corpus
    got = build_all_retrievals(trajs, store, RetrievalConfig(history_checkin_budget=budget, self_only=self_only, top_k_cap=top_k))
    want = ref_retrievals(*_oracle_inputs(trajs, store), budget=budget, self_only=self_only, top_k=top_k)
    assert sorted(got) == sorted(want)
    for tid, res in got.items():
        assert res.trajectory_ids == [q for q, _ in want[tid]]
        assert [s for _, s in res.selected] == pytest.approx([s for _, s in want[tid]], abs=1e-6)


def test_no_retrieved_trajectory_overlaps_key(corpus):
    trajs, store = corpus
    by_id = {t.trajectory_id: t for t in trajs}
    for tid, res in build_all_retrievals(trajs, store, RetrievalConfig()).items():
        for q in res.trajectory_ids:
            assert by_id[q].end_time < by_id[tid].start_time


def test_self_only_draws_from_same_user(corpus):
    trajs, store = corpus
    by_id = {t.trajectory_id: t for t in trajs}
    res = build_all_retrievals(trajs, store, RetrievalConfig(self_only=True))
    assert any(r.selected for r in res.values())
    for tid, r in res.items():
        assert all(by_id[q].user_id == by_id[tid].user_id for q in r.trajectory_ids)


def test_worker_count_does_not_change_results(corpus, monkeypatch):
    import trajprompt.retrieval as mod

    monkeypatch.setattr(mod, "KEY_BLOCK", 16)
    trajs, store = corpus
    one = build_all_retrievals(trajs, store, RetrievalConfig(), workers=1)
    four = build_all_retrievals(trajs, store, RetrievalConfig(), workers=4)
    assert [r.to_dict() for r in one.values()] == [r.to_dict() for r in four.values()]


def test_positive_rescaling_keeps_selection(corpus):
    trajs, store = corpus
    base = build_all_retrievals(trajs, store, RetrievalConfig())
    rng = np.random.default_rng(0)
    scales = rng.uniform(0.1, 10.0, size=(len(store), 1)).astype(np.float32)
    scaled = VectorStore.build(store.ids, store.vectors * scales)
    again = build_all_retrievals(trajs, scaled, RetrievalConfig())
    assert {k: r.trajectory_ids for k, r in base.items()} == {k: r.trajectory_ids for k, r in again.items()}


def test_candidate_pool_train_only(corpus):
    trajs, store = corpus
    train = {t.trajectory_id for t in trajs[::2]}
    res = build_all_retrievals(trajs, store, RetrievalConfig(candidate_pool="train"), train_ids=train)
    assert all(q in train for r in res.values() for q in r.trajectory_ids)
    with pytest.raises(ValueError):
        build_all_retrievals(trajs, store, RetrievalConfig(candidate_pool="train"))


def test_missing_key_vector_is_reported(corpus):
    trajs, store = corpus
    keep = [i for i in store.ids if i != key_id(7)]
    partial = VectorStore.build(keep, np.vstack([store.get(i) for i in keep]))
    res = build_all_retrievals(trajs, partial, RetrievalConfig())
    assert res[7].error == "missing key vector" and res[7].selected == []
    assert all(r.error is None for k, r in res.items() if k != 7)


def test_retrievals_round_trip(tmp_path, corpus):
    trajs, store = corpus
    res = build_all_retrievals(trajs, store, RetrievalConfig(history_checkin_budget=30))
    save_retrievals(res, tmp_path / "r.jsonl")
    back = load_retrievals(tmp_path / "r.jsonl")
    assert [r.to_dict() for r in back.values()] == [r.to_dict() for r in res.values()]
    assert isinstance(next(iter(back.values())), RetrievalResult)


def test_config_validation():
    with pytest.raises(ValueError):
        RetrievalConfig(history_checkin_budget=-1)
    with pytest.raises(ValueError):
        RetrievalConfig(order="random")
