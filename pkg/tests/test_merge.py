import math
import random

import pytest

from parsearch.master import LoserTree, MergeStream, UnsortedStreamError, loser_tree_merge


def stream(slave_id, ranks):
    return MergeStream(slave_id, tuple((f"s{slave_id}d{i}", r) for i, r in enumerate(ranks)))


def test_basic_two_stream_merge():
    merged = loser_tree_merge([stream(0, [9, 7]), stream(1, [8, 6])], 3)
    assert [it.rank for it in merged] == [9, 8, 7]


def test_single_stream_is_identity_prefix():
    merged = loser_tree_merge([stream(0, [5, 4, 3, 2])], 2)
    assert [(it.doc_key, it.rank) for it in merged] == [("s0d0", 5), ("s0d1", 4)]


def test_k_beyond_total_returns_everything():
    merged = loser_tree_merge([stream(0, [3]), stream(1, [2]), stream(2, [])], 100)
    assert [it.rank for it in merged] == [3, 2]


def test_ties_break_by_doc_key_then_slave():
    # docKey before slave id, so partitioned merges equal a global sort
    streams = [
        MergeStream(1, (("a", 5.0), ("z", 5.0))),
        MergeStream(0, (("b", 5.0),)),
    ]
    merged = loser_tree_merge(streams, 3)
    assert [(it.slave_id, it.doc_key) for it in merged] == [(1, "a"), (0, "b"), (1, "z")]


def test_unsorted_stream_raises_contract_violation():
    bad = MergeStream(0, (("a", 1.0), ("b", 2.0)))
    tree = LoserTree([bad, stream(1, [5.0])])
    with pytest.raises(UnsortedStreamError):
        while tree.pop() is not None:
            pass


def flatten_sort_truncate(streams, k):
    rows = []
    for s in streams:
        for doc_key, rank in s.items:
            rows.append((-rank, doc_key, s.slave_id))
    rows.sort()
    return [(doc_key, -neg, sid) for neg, doc_key, sid in rows[:k]]


@pytest.mark.parametrize("n_streams", [2, 5, 300])
def test_merge_matches_flatten_sort_oracle(n_streams):
    rng = random.Random(n_streams)
    for _ in range(100 if n_streams < 300 else 20):
        streams = []
        for sid in range(n_streams):
            n = rng.randint(0, 12)
            ranks = sorted((rng.uniform(0, 100) for _ in range(n)), reverse=True)
            streams.append(stream(sid, ranks))
        k = rng.choice([1, 5, 10, 50])
        merged = loser_tree_merge(streams, k)
        got = [(it.doc_key, it.rank, it.slave_id) for it in merged]
        assert got == flatten_sort_truncate(streams, k)


@pytest.mark.parametrize("n_streams", [2, 3, 5, 17, 300])
def test_emit_comparisons_bounded_by_tree_height(n_streams):
    rng = random.Random(91)
    height = math.ceil(math.log2(n_streams))
    for _ in range(20):
        streams = [
            stream(sid, sorted((rng.uniform(0, 100) for _ in range(rng.randint(1, 30))), reverse=True))
            for sid in range(n_streams)
        ]
        k = rng.choice([1, 10, 64])
        tree = LoserTree(streams)
        emitted = 0
        while emitted < k and tree.pop() is not None:
            emitted += 1
        assert tree.comparisons <= emitted * height
        assert tree.build_comparisons <= n_streams - 1


def test_all_streams_empty():
    assert loser_tree_merge([stream(0, []), stream(1, [])], 5) == []
