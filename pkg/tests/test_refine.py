import numpy as np
import pytest

from refrec import refine as rf
from refrec.metricspace import EmbeddingTable
from refrec.warmup import PseudoLabelRecord, PseudoLabelState
from oracles import brute_knn_vote, brute_mutual_nn

RNG = np.random.default_rng(7)


def make_state(entries):
    # entries: (id, label, confidence)
    return PseudoLabelState(
        [PseudoLabelRecord(sample_id=i, label=l, confidence=c) for i, l, c in entries]
    )


def table_1d(values, ids):
    return EmbeddingTable(np.array(values, dtype=float).reshape(-1, 1), ids)


# ---------------------------------------------------------------------------
# split

def test_split_sizes_follow_ceil_rule():
    entries = [(f"a{i:02d}", 0, i / 100) for i in range(30)]
    entries += [(f"b{i:02d}", 1, i / 100) for i in range(5)]
    splits, report = rf.split_easy_hard(make_state(entries), 0.10)
    easy_a = {s for s in splits.E if s.startswith("a")}
    easy_b = {s for s in splits.E if s.startswith("b")}
    assert len(easy_a) == 3  # ceil(0.1 * 30)
    assert len(easy_b) == 1  # max(1, ceil(0.1 * 5))
    assert splits.E | splits.H == {e[0] for e in entries}
    assert not report["warnings"]


def test_split_takes_most_confident_with_id_ties():
    entries = [("a", 0, 0.9), ("b", 0, 0.9), ("c", 0, 0.1), ("d", 0, 0.2)]
    splits, _ = rf.split_easy_hard(make_state(entries), 0.25)
    assert splits.E == {"a"}  # tie at 0.9 broken by ascending id


def test_split_records_missing_class_warning():
    entries = [("a", 0, 0.9), ("b", 0, 0.8), ("c", 2, 0.7)]
    _, report = rf.split_easy_hard(make_state(entries), 0.1, num_classes=3)
    assert any("class 1" in w for w in report["warnings"])


def test_split_rejects_bad_fraction():
    state = make_state([("a", 0, 0.5), ("b", 0, 0.4)])
    for g in (0.0, 1.0, -0.1):
        with pytest.raises(ValueError):
            rf.split_easy_hard(state, g)


def test_split_marks_record_tags():
    entries = [("a", 0, 0.9), ("b", 0, 0.1)]
    state = make_state(entries)
    rf.split_easy_hard(state, 0.5)
    tags = {r.sample_id: r.split for r in state.records}
    assert tags == {"a": "E", "b": "H"}


# ---------------------------------------------------------------------------
# reciprocal expansion

def manual_splits(state, easy_ids):
    splits = rf.SplitSets(E=set(easy_ids),
                          H={r.sample_id for r in state.records} - set(easy_ids))
    for r in state.records:
        r.split = "E" if r.sample_id in splits.E else "H"
    return splits


def test_reciprocal_single_match_example():
    # E = {e1 @ 0.0 label A}, H = {h1 @ 0.1, h2 @ 5.0}: h1 is mutual, h2 stays
    state = make_state([("e1", 0, 0.99), ("h1", 1, 0.2), ("h2", 1, 0.1)])
    emb = table_1d([0.0, 0.1, 5.0], ["e1", "h1", "h2"])
    splits = manual_splits(state, ["e1"])
    moved, remaining = rf.reciprocal_expand(splits, state, emb)
    assert moved == [("e1", "h1")]
    assert remaining == {"h2"}
    rec = state.by_id()["h1"]
    assert rec.label == 0 and rec.provenance == "reciprocal" and rec.split == "E_refined"
    assert state.by_id()["h2"].label == 1


def test_reciprocal_nearest_of_two_easy_points():
    # E = {e1 @ 0, e2 @ 10}, H = {h1 @ 4}: NN(h1) = e1 (4 < 6), NN(e1) = h1
    state = make_state([("e1", 0, 0.9), ("e2", 1, 0.9), ("h1", 1, 0.1)])
    emb = table_1d([0.0, 10.0, 4.0], ["e1", "e2", "h1"])
    splits = manual_splits(state, ["e1", "e2"])
    moved, _ = rf.reciprocal_expand(splits, state, emb)
    assert ("e1", "h1") in moved
    assert state.by_id()["h1"].label == 0


def test_reciprocal_matches_brute_force_on_constructed_instance():
    # an instance built to frustrate matching: each hard point's nearest easy
    # point prefers a different hard point; the oracle decides the outcome
    # (the lexicographically closest pair is always reciprocal, so at least
    # one move must happen whenever both sets are non-empty)
    e_pos = np.array([[0.0, 0.0], [7.0, 0.0]])
    h_pos = np.array([[5.0, 0.0], [11.0, 0.0]])
    state = make_state(
        [("e1", 0, 0.9), ("e2", 1, 0.9), ("h1", 2, 0.2), ("h2", 2, 0.1)]
    )
    emb = EmbeddingTable(np.vstack([e_pos, h_pos]), ["e1", "e2", "h1", "h2"])
    splits = manual_splits(state, ["e1", "e2"])
    moved, _ = rf.reciprocal_expand(splits, state, emb)
    expected = brute_mutual_nn(e_pos, ["e1", "e2"], h_pos, ["h1", "h2"])
    assert sorted(moved) == sorted(expected)
    assert len(moved) >= 1


def test_reciprocal_requires_nonempty_sets():
    state = make_state([("e1", 0, 0.9)])
    splits = rf.SplitSets(E={"e1"}, H=set())
    with pytest.raises(ValueError):
        rf.reciprocal_expand(splits, state, table_1d([0.0], ["e1"]))


# ---------------------------------------------------------------------------
# knn voting

def run_vote(e_entries, e_vecs, h_entries, h_vecs, k=3):
    state = make_state(e_entries + h_entries)
    ids = [e[0] for e in e_entries + h_entries]
    emb = EmbeddingTable(np.array(e_vecs + h_vecs, dtype=float), ids)
    splits = rf.SplitSets(
        E=set(), H=set(),
        E_refined={e[0] for e in e_entries},
        H_refined=set(),
    )
    for e in e_entries:
        state.by_id()[e[0]].split = "E_refined"
    report = rf.knn_vote({h[0] for h in h_entries}, splits, state, emb, k)
    return state, report


def test_vote_majority_wins():
    # neighbors labeled (A, A, B) -> A
    state, report = run_vote(
        [("e1", 0, 1.0), ("e2", 0, 1.0), ("e3", 1, 1.0)],
        [[0.0], [1.0], [2.0]],
        [("h1", 9, 0.1)],
        [[0.5]],
    )
    assert state.by_id()["h1"].label == 0
    assert state.by_id()["h1"].provenance == "knn_vote"
    assert report["consensus_rate"] == 1.0


def test_vote_no_consensus_takes_nearest():
    # neighbors labeled (A, B, C) with B nearest -> B
    state, report = run_vote(
        [("e1", 0, 1.0), ("e2", 1, 1.0), ("e3", 2, 1.0)],
        [[1.0], [0.4], [2.0]],
        [("h1", 9, 0.1)],
        [[0.5]],
    )
    assert state.by_id()["h1"].label == 1
    assert report["consensus_rate"] == 0.0


def test_vote_falls_back_when_easy_split_small():
    state, report = run_vote(
        [("e1", 0, 1.0), ("e2", 0, 1.0)],
        [[0.0], [1.0]],
        [("h1", 9, 0.1)],
        [[0.5]],
        k=3,
    )
    assert state.by_id()["h1"].label == 0
    assert any("using k=2" in w for w in report["warnings"])


# ---------------------------------------------------------------------------
# full refinement

def random_instance(rng, n=60, k=4, d=5):
    ids = [f"s{i:03d}" for i in range(n)]
    vecs = rng.standard_normal((n, d))
    labels = rng.integers(0, k, size=n)
    confs = rng.uniform(0.3, 1.0, size=n)
    state = make_state(list(zip(ids, labels.tolist(), confs.tolist())))
    emb = EmbeddingTable(vecs, ids)
    return state, emb


def brute_refine(state, emb, g, k):
    """Independent reimplementation: split + mutual NN + voting."""
    import math

    by_id = {r.sample_id: (r.label, r.confidence) for r in state.records}
    vec = {sid: emb.vectors[i] for i, sid in enumerate(emb.ids)}
    classes = {}
    for sid, (label, conf) in by_id.items():
        classes.setdefault(label, []).append((sid, conf))
    easy, hard = set(), set()
    for label, members in classes.items():
        take = max(1, math.ceil(g * len(members)))
        ranked = sorted(members, key=lambda m: (-m[1], m[0]))
        easy.update(sid for sid, _ in ranked[:take])
        hard.update(sid for sid, _ in ranked[take:])
    labels = {sid: by_id[sid][0] for sid in by_id}
    e_ids = sorted(easy)
    h_ids = sorted(hard)
    moved = brute_mutual_nn(
        np.stack([vec[i] for i in e_ids]), e_ids,
        np.stack([vec[i] for i in h_ids]), h_ids,
    )
    for e_id, h_id in moved:
        labels[h_id] = labels[e_id]
    e_ref = easy | {h for _, h in moved}
    remaining = hard - {h for _, h in moved}
    e_list = sorted(e_ref)
    kk = min(k, len(e_list))
    for h in sorted(remaining):
        labels[h] = brute_knn_vote(
            vec[h], np.stack([vec[i] for i in e_list]), e_list,
            [labels[i] for i in e_list], kk,
        )
    return labels, e_ref, remaining


def test_refine_pipeline_matches_brute_force_oracle():
    for trial in range(30):
        rng = np.random.default_rng(trial)
        n = int(rng.integers(12, 80))
        k = int(rng.integers(2, 6))
        state, emb = random_instance(rng, n=n, k=k)
        refined, report = rf.refine_pipeline(state, emb, 0.2, 3, num_classes=k)
        expected_labels, e_ref, remaining = brute_refine(state, emb, 0.2, 3)
        got = {r.sample_id: r.label for r in refined.records}
        assert got == expected_labels
        assert set(refined.ids_with_split("E_refined")) == e_ref
        assert set(refined.ids_with_split("H_refined")) == remaining
        assert report["easy_refined"] == len(e_ref)


def test_refine_covers_every_id_exactly_once_and_keeps_easy_labels():
    state, emb = random_instance(np.random.default_rng(5), n=50)
    before = {r.sample_id: r.label for r in state.records}
    refined, _ = rf.refine_pipeline(state, emb, 0.1, 3)
    assert sorted(refined.ids()) == sorted(state.ids())
    splits = {r.split for r in refined.records}
    assert splits <= {"E_refined", "H_refined"}
    # samples that entered E never change label
    easy_initial = {r.sample_id for r in state.records if r.split == "E"}
    for r in refined.records:
        if r.sample_id in easy_initial:
            assert r.label == before[r.sample_id]
    # the input state itself is untouched
    assert {r.sample_id: r.label for r in state.records} == before


def test_refine_is_invariant_to_input_order():
    state, emb = random_instance(np.random.default_rng(11), n=40)
    refined, _ = rf.refine_pipeline(state, emb, 0.15, 3)
    perm = np.random.default_rng(1).permutation(len(state.records))
    state2 = PseudoLabelState([state.records[i] for i in perm])
    emb2 = EmbeddingTable(
        emb.vectors[perm], [emb.ids[i] for i in perm]
    )
    refined2, _ = rf.refine_pipeline(state2, emb2, 0.15, 3)
    got1 = {(r.sample_id, r.label, r.split) for r in refined.records}
    got2 = {(r.sample_id, r.label, r.split) for r in refined2.records}
    assert got1 == got2


def test_refine_rejects_mismatched_embedding_table():
    state, emb = random_instance(np.random.default_rng(2), n=10)
    bad = EmbeddingTable(emb.vectors[:5], emb.ids[:5])
    with pytest.raises(ValueError):
        rf.refine_pipeline(state, bad, 0.1, 3)


def test_cosine_metric_flag():
    state, emb = random_instance(np.random.default_rng(3), n=30)
    refined, _ = rf.refine_pipeline(state, emb, 0.2, 3, metric="cosine")
    assert sorted(refined.ids()) == sorted(state.ids())
    with pytest.raises(ValueError):
        rf.refine_pipeline(state, emb, 0.2, 3, metric="manhattan")
