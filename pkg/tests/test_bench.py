import math
import statistics

import numpy as np
import pytest

from parsearch import bench, ircore, perfmodel, qlang, storage
from parsearch.master import MasterClient, MasterServer
from parsearch.slave import SlaveServer
from conftest import make_corpus

from test_netproto import StubSlave


def mixed_qmr():
    return {
        ("single", 10): 0.48, ("multi", 10): 0.20, ("limited", 10): 0.12,
        ("single", 50): 0.09, ("multi", 50): 0.0375, ("limited", 50): 0.0225,
        ("single", 1000): 0.03, ("multi", 1000): 0.0125, ("limited", 1000): 0.0075,
    }


def spec_for(n=200, qmr=None, seed=5, lam=0.5, reps=2, vocab=600):
    return bench.WorkloadSpec(
        n_queries=n,
        qmr=qmr or mixed_qmr(),
        keywords=tuple(f"w{i:04d}" for i in range(vocab)),
        site_ids=tuple(range(200)),
        domain_ids=tuple(range(200)),
        lambda_qpms=lam,
        repetitions=reps,
        seed=seed,
    )


# ------------------------------------------------------------- generation


def test_cell_counts_round_to_total():
    counts = bench.cell_counts(mixed_qmr(), 10000)
    assert sum(counts.values()) == 10000
    assert counts[("single", 10)] == 4800
    assert counts[("multi", 50)] == 375
    assert counts[("limited", 1000)] == 75


def test_generate_single_10_only_set():
    spec = spec_for(n=50, qmr={("single", 10): 1.0})
    queries = [qlang.parse_query(t) for t in bench.generate_query_set(spec)]
    assert all(q.condition_type == "single" and q.k == 10 for q in queries)


def test_generate_mix_proportions_match_qmr():
    spec = spec_for(n=400, vocab=1200)
    queries = [qlang.parse_query(t) for t in bench.generate_query_set(spec)]
    counts = {}
    for q in queries:
        counts[(q.condition_type, q.k)] = counts.get((q.condition_type, q.k), 0) + 1
    expected = bench.cell_counts(mixed_qmr(), 400)
    assert counts == {cell: n for cell, n in expected.items() if n}


def test_generate_is_deterministic():
    assert bench.generate_query_set(spec_for()) == bench.generate_query_set(spec_for())
    assert bench.generate_query_set(spec_for(seed=5)) != bench.generate_query_set(spec_for(seed=6))


def test_generate_unique_keywords_sites_domains():
    spec = spec_for(n=300, vocab=900)
    keywords, sites, domains = [], [], []
    for text in bench.generate_query_set(spec):
        q = qlang.parse_query(text)
        keywords.extend(q.keywords)
        if q.scope:
            (sites if q.scope[0] == "siteId" else domains).append(q.scope[1])
    assert len(keywords) == len(set(keywords))
    assert len(sites) == len(set(sites))
    assert len(domains) == len(set(domains))


def test_generate_pool_exhausted():
    spec = spec_for(n=100, vocab=30)
    with pytest.raises(bench.PoolExhaustedError):
        bench.generate_query_set(spec)


def test_workload_file_round_trip(tmp_path):
    spec = spec_for()
    path = tmp_path / "load.kv"
    bench.save_workload(spec, path)
    assert bench.load_workload(path) == spec


# ------------------------------------------------------------- arrivals


def test_interarrival_mean_within_one_percent():
    lam = 0.25
    draws = bench.exponential_interarrivals_ms(lam, 100_000, seed=3)
    assert draws.mean() == pytest.approx(1.0 / lam, rel=0.01)


def test_interarrival_schedule_deterministic():
    a = bench.exponential_interarrivals_ms(0.5, 1000, seed=9)
    b = bench.exponential_interarrivals_ms(0.5, 1000, seed=9)
    assert np.array_equal(a, b)


def test_flag_unstable():
    assert bench.flag_unstable([1, 2, 3, 4])
    assert not bench.flag_unstable([1, 2, 3, 3])
    assert not bench.flag_unstable([5, 4, 3, 2, 1])
    assert not bench.flag_unstable([])
    assert bench.flag_unstable([0, 0, 1, 2, 4, 4])


# ------------------------------------------------------------- decomposition


def test_network_service_decomposition_example():
    assert bench.network_service_from_decomposition(10, 3, 3, 2.5) == pytest.approx(5.0)


def test_network_service_zero_os_overhead():
    assert bench.network_service_from_decomposition(10, 3, 3, 3) == pytest.approx(4.0)
    assert bench.network_service_from_decomposition(6, 3, 3, 3) == pytest.approx(0.0)


def test_network_service_inconsistent_measurements():
    with pytest.raises(bench.MeasurementError):
        bench.network_service_from_decomposition(5, 3, 3, 3)
    with pytest.raises(bench.MeasurementError):
        bench.network_service_from_decomposition(10, 3, 3, 4)


# ------------------------------------------------------------- samples


def fake_run(s_by_query):
    records = [
        bench.QueryRecord(i, "single", 10, 0.0, max(s), tuple([0.0] * len(s)), tuple(s),
                          tuple([0.0] * len(s)), 0.0, 1)
        for i, s in enumerate(s_by_query)
    ]
    return bench.RunMetrics(records=records)


def test_export_samples_orders_by_repetition_then_slave():
    runs = [
        fake_run([[1.0, 2.0], [5.0, 6.0]]),
        fake_run([[3.0, 4.0], [7.0, 8.0]]),
    ]
    samples = bench.export_samples(runs, np_slaves=2, repetitions=2)
    assert samples.per_query == ((1.0, 2.0, 3.0, 4.0), (5.0, 6.0, 7.0, 8.0))
    assert samples.np_slaves == 2
    assert samples.repetitions == 2


def test_export_samples_np5_r60_shape():
    runs = [fake_run([[float(rep * 5 + s + 1) for s in range(5)]]) for rep in range(60)]
    samples = bench.export_samples(runs, np_slaves=5, repetitions=60)
    assert samples.samples_per_query == 300


def test_export_samples_missing_repetition():
    with pytest.raises(bench.WorkloadError):
        bench.export_samples([fake_run([[1.0]])], np_slaves=1, repetitions=2)


def test_export_samples_wrong_slave_count():
    with pytest.raises(bench.WorkloadError):
        bench.export_samples([fake_run([[1.0, 2.0, 3.0]])], np_slaves=2, repetitions=1)


def test_merge_constant_measurement_is_sane():
    t_comparison, t_base = bench.measure_merge_constants(k=300, trials=2)
    assert t_comparison >= 0.0
    assert t_base > 0.0


def test_weights_from_identical_times_all_one():
    weights = perfmodel.weights_from_times({10: 4.2, 50: 4.2, 1000: 4.2})
    assert weights == {10: 1.0, 50: 1.0, 1000: 1.0}


# ------------------------------------------------------------- live cluster


@pytest.fixture(scope="module")
def file_cluster(tmp_path_factory):
    corpus = make_corpus(600, seed=31, vocab_size=500, n_sites=20, n_domains=10)
    tmp = tmp_path_factory.mktemp("cluster")
    ordered = [d for _, d in ircore.assign_doc_ids(corpus)]
    segments = [[] for _ in range(3)]
    for i, doc in enumerate(ordered):
        segments[i % 3].append(doc)
    slaves = []
    handles = []
    for i, segment in enumerate(segments):
        index = ircore.build_index(ircore.assign_doc_ids(segment),
                                   embed_spec=("siteId", "domainId"), skip_interval=16)
        path = tmp / f"part-{i}.idx"
        storage.save_index(index, str(path))
        handle = storage.load_index(str(path), buffer_bytes=1 << 24)
        handles.append(handle)
        server = SlaveServer(handle)
        server.start()
        slaves.append(server)
    master = MasterServer([s.address for s in slaves])
    master.start()
    client = MasterClient(master.address)
    yield corpus, client
    client.close()
    master.shutdown()
    for s in slaves:
        s.shutdown()
    for h in handles:
        h.close()


def test_sequential_benchmark_runs_all_queries(file_cluster):
    _, client = file_cluster
    spec = spec_for(n=30, qmr={("single", 10): 0.7, ("multi", 10): 0.3}, vocab=500)
    texts = bench.generate_query_set(spec)
    metrics = bench.run_benchmark(client, texts, None)
    assert metrics.count == 30
    for record in metrics.records:
        assert record.total_ms >= max(record.s_ms)
        assert len(record.s_ms) == 3
    assert not metrics.unstable


def test_open_loop_benchmark_records_everything(file_cluster):
    _, client = file_cluster
    spec = spec_for(n=60, qmr={("single", 10): 1.0}, seed=8, vocab=500)
    texts = bench.generate_query_set(spec)
    metrics = bench.run_benchmark(client, texts, lam_qpms=2.0, seed=8, window_s=0.05)
    assert metrics.count == 60
    assert [r.index for r in metrics.records] == list(range(60))
    assert metrics.lambda_qpms == 2.0
    for record in metrics.records:
        assert record.total_ms >= max(record.s_ms)


def test_metrics_file_round_trip_summary(file_cluster, tmp_path):
    _, client = file_cluster
    spec = spec_for(n=10, qmr={("single", 10): 1.0}, seed=77, vocab=500)
    metrics = bench.run_benchmark(client, bench.generate_query_set(spec), None)
    path = tmp_path / "metrics.tsv"
    bench.save_metrics(metrics, path)
    text = path.read_text()
    assert text.count("\n") == 10 + 3  # header comment + column row + 10 records + summary
    assert "# summary count=10" in text


def test_warmup_rejects_overlap(file_cluster):
    _, client = file_cluster
    measured = [qlang.format_query(qlang.make_query(["w0001"], None, 10))]
    warm = [qlang.format_query(qlang.make_query(["w0001"], None, 10))]
    with pytest.raises(bench.WarmupOverlapError) as err:
        bench.warmup(client, warm, measured)
    assert "w0001" in str(err.value)


def test_warmup_scope_overlap_detected(file_cluster):
    _, client = file_cluster
    measured = [qlang.format_query(qlang.make_query(["w0001"], ("siteId", 3), 10))]
    warm = [qlang.format_query(qlang.make_query(["w0002"], ("siteId", 3), 10))]
    with pytest.raises(bench.WarmupOverlapError):
        bench.warmup(client, warm, measured)


def test_warmup_empty_requires_flag(file_cluster):
    _, client = file_cluster
    with pytest.raises(bench.WorkloadError):
        bench.warmup(client, [], ["x"])
    bench.warmup(client, [], ["x"], allow_empty=True)


def test_warmup_runs_and_resets_counters(file_cluster):
    _, client = file_cluster
    warm = [qlang.format_query(qlang.make_query([f"w{i:04d}"], None, 10)) for i in range(10, 16)]
    measured = [qlang.format_query(qlang.make_query([f"w{i:04d}"], None, 10)) for i in range(16, 20)]
    bench.warmup(client, warm, measured)
    stats = client.stats()
    assert all(v == 0 for k, v in stats.items() if k.endswith(".queries"))
    # dictionary lookups alone never touch posting pages: an unindexed
    # keyword causes no buffer misses after warmup
    before = client.stats()
    client.query(qlang.make_query(["zzznotindexed"], None, 10))
    after = client.stats()
    miss_keys = [k for k in after if k.endswith(".misses")]
    assert miss_keys
    assert all(after[k] == before[k] for k in miss_keys)


def test_benchmark_failure_preserves_partial_metrics(file_cluster):
    _, client = file_cluster

    class FlakyClient:
        def __init__(self, inner, fail_at):
            self.inner = inner
            self.fail_at = fail_at
            self.sent = 0

        def query(self, q):
            self.sent += 1
            if self.sent >= self.fail_at:
                raise ConnectionError("synthetic failure")
            return self.inner.query(q)

    flaky = FlakyClient(client, fail_at=4)
    texts = [qlang.format_query(qlang.make_query([f"w{i:04d}"], None, 10)) for i in range(30, 40)]
    with pytest.raises(bench.BenchmarkError) as err:
        bench.run_benchmark(flaky, texts, None)
    assert err.value.partial.count == 3


def test_collect_and_export_sojourn_samples(file_cluster, tmp_path):
    _, client = file_cluster
    spec = spec_for(n=12, qmr={("single", 10): 1.0}, seed=90, vocab=500)
    texts = bench.generate_query_set(spec)
    runs = bench.collect_sojourn_samples(client, texts, repetitions=4)
    samples = bench.export_samples(runs, np_slaves=3, repetitions=4)
    assert len(samples.per_query) == 12
    assert samples.samples_per_query == 12
    path = tmp_path / "samples.csv"
    perfmodel.save_samples(samples, path)
    assert perfmodel.load_samples(path) == samples


def test_zero_load_total_decomposes_into_slave_max_plus_master(file_cluster):
    # at lambda -> 0 the mean total is the mean slave-phase max plus the
    # standalone master/network time, within measurement noise
    _, client = file_cluster
    vocab = [f"w{i:04d}" for i in range(200, 230)]
    probes = bench.probe_queries(vocab, ks=(10,), per_k=15)
    st_master = bench.calibrate(client, probes).st_master_ms[10]
    spec = spec_for(n=40, qmr={("single", 10): 1.0}, seed=55, vocab=500)
    run = bench.run_benchmark(client, bench.generate_query_set(spec), None)
    slave_phase = statistics.fmean(
        max(max(s, s + nt) for s, nt in zip(r.s_ms, r.nt_ms)) for r in run.records
    )
    reconstructed = slave_phase + st_master
    assert reconstructed == pytest.approx(run.mean_total_ms, rel=0.35)


def test_calibrate_on_live_cluster_round_trips(file_cluster, tmp_path):
    _, client = file_cluster
    vocab = [f"w{i:04d}" for i in range(100, 160)]
    probes = bench.probe_queries(vocab, ks=(10, 50, 1000), per_k=8)
    result = bench.calibrate(client, probes)
    params = result.params
    assert params.ns == 3
    assert params.w_master[10] == 1.0
    assert params.cost.t_parent_proc_ms >= 0
    # calibrated parameters reproduce the measured master service time
    # exactly at the calibrated cluster size
    modeled = perfmodel.master_service_time_ms(10, 3, params.cost)
    assert modeled == pytest.approx(result.st_master_ms[10], rel=1e-9)
    path = tmp_path / "params.kv"
    perfmodel.save_params(params, path)
    assert perfmodel.load_params(path) == params


def test_calibrate_flags_noisy_measurements():
    import itertools

    calls = itertools.count()
    stub = StubSlave(delay_fn=lambda msg: 0.002 if next(calls) % 2 else 0.030)
    master = MasterServer([stub.endpoint])
    master.start()
    client = MasterClient(master.address)
    try:
        probes = bench.probe_queries([f"n{i}" for i in range(10)], ks=(10,), per_k=10)
        result = bench.calibrate(client, probes)
        assert any("CV" in w for w in result.warnings)
    finally:
        client.close()
        master.shutdown()
        stub.close()


def test_calibrate_recovers_injected_latency_ratios():
    # one retry: the injected sleeps are exact, but a scheduler freeze on
    # this host can distort a single probe batch
    for attempt in range(2):
        delays = {10: 0.060, 50: 0.120, 1000: 0.240}
        stubs = [StubSlave(delay_by_k=delays) for _ in range(2)]
        master = MasterServer([s.endpoint for s in stubs])
        master.start()
        client = MasterClient(master.address)
        try:
            for _ in range(2):  # connection and thread warm-up, not measured
                client.query(qlang.make_query(["warm"], None, 10))
            vocab = [f"probe{i}" for i in range(30)]
            probes = bench.probe_queries(vocab, ks=(10, 50, 1000), per_k=10)
            result = bench.calibrate(client, probes)
            w = result.params.w_network
            assert w[10] == 1.0
            if attempt == 0 and not (
                abs(w[50] - 2.0) <= 0.1 and abs(w[1000] - 4.0) <= 0.2
            ):
                continue
            assert w[50] == pytest.approx(2.0, rel=0.05)
            assert w[1000] == pytest.approx(4.0, rel=0.05)
            return
        finally:
            client.close()
            master.shutdown()
            for s in stubs:
                s.close()
