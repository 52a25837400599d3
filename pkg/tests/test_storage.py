import random
from collections import OrderedDict

import pytest

from parsearch import ircore, qlang, storage
from conftest import BruteForce, make_corpus, result_keys


@pytest.fixture(scope="module")
def saved(tmp_path_factory, small_index_module):
    path = tmp_path_factory.mktemp("idx") / "seg.idx"
    summary = storage.save_index(small_index_module, str(path))
    return path, summary


@pytest.fixture(scope="module")
def small_corpus_module():
    return make_corpus(300, seed=11)


@pytest.fixture(scope="module")
def small_index_module(small_corpus_module):
    docs = ircore.assign_doc_ids(small_corpus_module)
    return ircore.build_index(docs, embed_spec=("siteId", "domainId"), skip_interval=8)


def test_save_empty_index(tmp_path):
    index = ircore.build_index([])
    summary = storage.save_index(index, str(tmp_path / "empty.idx"))
    assert summary.tokens == 0
    loaded = storage.load_index(summary.path, buffer_bytes=1 << 20)
    assert loaded.content_cursor("anything") is None
    loaded.close()


def test_round_trip_is_byte_identical(tmp_path, small_index_module):
    p1 = tmp_path / "a.idx"
    p2 = tmp_path / "b.idx"
    storage.save_index(small_index_module, str(p1))
    loaded = storage.load_index(str(p1), buffer_bytes=1 << 24)
    storage.save_index(rebuild_via_cursors(loaded), str(p2))
    loaded.close()
    assert p1.read_bytes() == p2.read_bytes()


def rebuild_via_cursors(loaded):
    """Deserialize a stored index back into the in-memory form."""
    rebuilt = ircore.IrIndex(list(loaded.docs), loaded.embed_spec, loaded.skip_interval)
    def drain(cursor):
        plist_postings = []
        posting = cursor.current()
        while posting is not None:
            plist_postings.append(posting)
            posting = cursor.advance()
        return plist_postings
    for token in loaded.dictionary:
        plist = ircore.PostingList(token, drain(loaded.content_cursor(token)))
        ircore._finish_sub_index(plist, loaded.skip_interval)
        rebuilt.dictionary[token] = plist
    for field, table in (("siteIdText", loaded._site), ("domainIdText", loaded._domain)):
        for term in table:
            plist = ircore.PostingList(term, drain(loaded.scope_cursor(field, term)))
            ircore._finish_sub_index(plist, loaded.skip_interval)
            rebuilt.scope_fields[field][term] = plist
    return rebuilt


def test_round_trip_byte_identical_10k_corpus(tmp_path):
    corpus = make_corpus(10000, seed=77, vocab_size=1200)
    index = ircore.build_index(ircore.assign_doc_ids(corpus), embed_spec=("siteId",))
    p1, p2 = tmp_path / "big1.idx", tmp_path / "big2.idx"
    storage.save_index(index, str(p1))
    loaded = storage.load_index(str(p1), buffer_bytes=1 << 28)
    storage.save_index(rebuild_via_cursors(loaded), str(p2))
    loaded.close()
    assert p1.read_bytes() == p2.read_bytes()


def test_save_io_failure_names_path(small_index_module):
    with pytest.raises(storage.IndexFileError) as err:
        storage.save_index(small_index_module, "/nonexistent-dir/x.idx")
    assert "/nonexistent-dir/x.idx" in str(err.value)


def test_corrupted_checksum_rejected(tmp_path, small_index_module):
    path = tmp_path / "corrupt.idx"
    storage.save_index(small_index_module, str(path))
    data = bytearray(path.read_bytes())
    data[len(data) // 2] ^= 0xFF
    path.write_bytes(bytes(data))
    with pytest.raises(storage.IndexFileError) as err:
        storage.load_index(str(path), buffer_bytes=1 << 24)
    assert "corrupt" in str(err.value)


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "junk.idx"
    path.write_bytes(b"NOPE" + b"\0" * 64)
    with pytest.raises(storage.IndexFileError):
        storage.load_index(str(path), buffer_bytes=1 << 20)


def test_buffer_too_small_for_pinned_sections(saved):
    path, _ = saved
    with pytest.raises(storage.BufferConfigError):
        storage.load_index(str(path), buffer_bytes=64)


def test_results_identical_across_buffer_sizes(saved, small_corpus_module):
    path, summary = saved
    oracle = BruteForce(small_corpus_module)
    tiny = storage.load_index(str(path), buffer_bytes=summary.file_bytes - summary.section_bytes["POST"])
    huge = storage.load_index(str(path), buffer_bytes=summary.file_bytes + (1 << 22))
    rng = random.Random(8)
    for _ in range(80):
        kws = rng.sample([f"w{i:04d}" for i in range(150)], rng.choice([1, 1, 2]))
        scope = ("siteId", rng.randrange(12)) if rng.random() < 0.3 else None
        query = qlang.make_query(kws, scope, rng.choice([1, 10, 100]))
        a = result_keys(ircore.search(tiny, query))
        b = result_keys(ircore.search(huge, query))
        assert a == b == oracle.run(list(kws), scope, query.k)
    tiny.close()
    huge.close()


def pinned_bytes_of(path):
    probe = storage.load_index(str(path), buffer_bytes=1 << 30)
    pinned = probe.pinned_bytes
    probe.close()
    return pinned


def test_zero_cache_config_misses_every_posting_touch(saved):
    path, _ = saved
    handle = storage.load_index(str(path), buffer_bytes=pinned_bytes_of(path))
    assert handle.pool.capacity_pages == 0
    query = qlang.make_query(["w0000"], None, 10)
    ircore.search(handle, query)
    first = handle.buffer_stats()
    assert first["misses"] >= 1
    assert first["hits"] == 0
    ircore.search(handle, query)
    second = handle.buffer_stats()
    assert second["hits"] == 0
    assert second["misses"] >= 2 * first["misses"] - 1
    assert second["resident_bytes"] == 0
    handle.close()


def test_full_cache_second_query_zero_misses(saved, small_index_module):
    path, summary = saved
    handle = storage.load_index(str(path), buffer_bytes=summary.file_bytes + (1 << 22))
    query = qlang.make_query(["w0001"], None, 20)
    ircore.search(handle, query)
    before = handle.buffer_stats()
    ircore.search(handle, query)
    after = handle.buffer_stats()
    assert after["misses"] == before["misses"]
    assert after["hits"] > before["hits"]
    handle.close()


def test_fresh_handle_counters_zero(saved):
    path, _ = saved
    handle = storage.load_index(str(path), buffer_bytes=1 << 24)
    stats = handle.buffer_stats()
    assert stats["hits"] == stats["misses"] == stats["evictions"] == 0
    handle.close()


def test_counters_monotone_under_load(saved):
    path, _ = saved
    handle = storage.load_index(str(path), buffer_bytes=1 << 24)
    rng = random.Random(4)
    prev = handle.buffer_stats()
    for _ in range(30):
        ircore.search(handle, qlang.make_query([f"w{rng.randrange(80):04d}"], None, 30))
        cur = handle.buffer_stats()
        assert cur["hits"] >= prev["hits"]
        assert cur["misses"] >= prev["misses"]
        assert cur["evictions"] >= prev["evictions"]
        prev = cur
    handle.close()


def lru_replay(trace, capacity_pages):
    """Reference LRU simulator, independent of BufferPool internals."""
    cache = OrderedDict()
    hits = misses = evictions = 0
    for page in trace:
        if page in cache:
            hits += 1
            cache.move_to_end(page)
            continue
        misses += 1
        if capacity_pages > 0:
            while len(cache) >= capacity_pages:
                cache.popitem(last=False)
                evictions += 1
            cache[page] = True
    return hits, misses, evictions


@pytest.mark.parametrize("pages", [1, 2, 5])
def test_lru_eviction_matches_trace_replay_oracle(saved, pages):
    path, _ = saved
    budget = pinned_bytes_of(path) + pages * storage.PAGE_SIZE
    handle = storage.load_index(str(path), buffer_bytes=budget)
    handle.pool.trace = []
    rng = random.Random(pages)
    for _ in range(120):
        kws = rng.sample([f"w{i:04d}" for i in range(100)], rng.choice([1, 2]))
        query = qlang.make_query(kws, None, rng.choice([5, 50]))
        ircore.search(handle, query)
    stats = handle.buffer_stats()
    hits, misses, evictions = lru_replay(handle.pool.trace, pages)
    assert (stats["hits"], stats["misses"], stats["evictions"]) == (hits, misses, evictions)
    handle.close()


def test_summary_reports_sections_and_counts(saved, small_index_module):
    _, summary = saved
    assert summary.docs == 300
    assert summary.tokens == len(small_index_module.dictionary)
    assert summary.postings == small_index_module.posting_count
    assert set(summary.section_bytes) == {"META", "DICT", "SDIC", "DDIC", "SKIP", "DOCS", "POST"}


def test_paged_results_match_memory_index(saved, small_index_module):
    path, _ = saved
    handle = storage.load_index(str(path), buffer_bytes=1 << 24)
    rng = random.Random(19)
    for _ in range(60):
        kws = rng.sample([f"w{i:04d}" for i in range(120)], rng.choice([1, 2, 3]))
        scope = ("domainId", rng.randrange(6)) if rng.random() < 0.4 else None
        query = qlang.make_query(kws, scope, rng.choice([3, 30, 300]))
        assert result_keys(ircore.search(handle, query)) == result_keys(
            ircore.search(small_index_module, query)
        )
    handle.close()
