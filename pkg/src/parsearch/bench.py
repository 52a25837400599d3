"""Workload generation, Poisson load driving, warmup, calibration, and
sojourn-sample export for the capacity model.

Query sets are deterministic given a seed, and every keyword, site id,
and domain id in a set is used at most once (uniqueness is what defeats
caching between queries). The load driver is open loop: it issues
queries on an exponential inter-arrival schedule without waiting for
completions, and flags the run unstable when the in-flight count grows
over consecutive observation windows.
"""

from __future__ import annotations

import math
import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from . import perfmodel, qlang
from .master import LoserTree, MergeStream

NOISE_CV_LIMIT = 0.25


class WorkloadError(ValueError):
    pass


class PoolExhaustedError(WorkloadError):
    def __init__(self, pool: str):
        super().__init__(f"{pool} pool exhausted: not enough unique values for the query set")
        self.pool = pool


class WarmupOverlapError(WorkloadError):
    def __init__(self, kind: str, values):
        shown = ", ".join(str(v) for v in sorted(values)[:5])
        super().__init__(f"warmup set shares {kind} with the measured set: {shown}")
        self.kind = kind
        self.values = values


class BenchmarkError(RuntimeError):
    """A query failed mid-run; partial metrics are preserved."""

    def __init__(self, message, partial):
        super().__init__(message)
        self.partial = partial


class MeasurementError(ValueError):
    pass


@dataclass(frozen=True)
class WorkloadSpec:
    qmr: dict[tuple[str, int], float]
    keywords: tuple[str, ...]
    site_ids: tuple[int, ...]
    domain_ids: tuple[int, ...]
    n_queries: int = 1000
    lambda_qpms: float = 0.05
    repetitions: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.n_queries < 1:
            raise WorkloadError("n_queries must be positive")
        if len(set(self.keywords)) != len(self.keywords):
            raise WorkloadError("keyword pool has duplicates")
        total = sum(self.qmr.values())
        if abs(total - 1.0) > 1e-9:
            raise WorkloadError(f"qmr must sum to 1, got {total}")
        for sct, k in self.qmr:
            if sct not in qlang.CONDITION_TYPES or k < 1:
                raise WorkloadError(f"bad qmr cell ({sct}, {k})")


def cell_counts(qmr: dict[tuple[str, int], float], n: int) -> dict[tuple[str, int], int]:
    """Largest-remainder rounding of qmr * n so counts sum to n exactly."""
    floored = {}
    remainders = []
    for cell in sorted(qmr):
        exact = qmr[cell] * n
        floored[cell] = int(exact)
        remainders.append((-(exact - int(exact)), cell))
    leftover = n - sum(floored.values())
    remainders.sort()
    for _, cell in remainders[:leftover]:
        floored[cell] += 1
    return floored


def generate_query_set(spec: WorkloadSpec) -> list[str]:
    """Deterministic query texts matching the mix ratios within rounding.

    Single and limited queries use one keyword, multi queries two or
    three; every keyword/site/domain value is drawn without replacement.
    """
    rng = np.random.default_rng(spec.seed)
    keywords = list(spec.keywords)
    sites = list(spec.site_ids)
    domains = list(spec.domain_ids)
    for pool in (keywords, sites, domains):
        rng.shuffle(pool)

    def draw(pool, name):
        if not pool:
            raise PoolExhaustedError(name)
        return pool.pop()

    queries = []
    for (sct, k), count in sorted(cell_counts(spec.qmr, spec.n_queries).items()):
        for _ in range(count):
            if sct == qlang.SINGLE:
                query = qlang.make_query([draw(keywords, "keyword")], None, k)
            elif sct == qlang.MULTI:
                n_kw = 2 + int(rng.integers(0, 2))
                query = qlang.make_query([draw(keywords, "keyword") for _ in range(n_kw)], None, k)
            else:
                if rng.integers(0, 2) == 0:
                    scope = ("siteId", draw(sites, "site id"))
                else:
                    scope = ("domainId", draw(domains, "domain id"))
                query = qlang.make_query([draw(keywords, "keyword")], scope, k)
            queries.append(qlang.format_query(query))
    order = rng.permutation(len(queries))
    return [queries[i] for i in order]


def workload_values(texts) -> tuple[set, set, set]:
    """Keywords, site ids, and domain ids referenced by a query set."""
    keywords, sites, domains = set(), set(), set()
    for text in texts:
        query = qlang.parse_query(text)
        keywords.update(query.keywords)
        if query.scope is not None:
            field_name, value = query.scope
            (sites if field_name == "siteId" else domains).add(value)
    return keywords, sites, domains


# ------------------------------------------------------------------
# workload spec files (same key=value dialect as the model params)


def workload_to_text(spec: WorkloadSpec) -> str:
    lines = [
        f"n_queries={spec.n_queries}",
        f"lambda_qpms={spec.lambda_qpms}",
        f"repetitions={spec.repetitions}",
        f"seed={spec.seed}",
        "pool.keywords=" + ",".join(spec.keywords),
        "pool.site_ids=" + ",".join(str(v) for v in spec.site_ids),
        "pool.domain_ids=" + ",".join(str(v) for v in spec.domain_ids),
    ]
    for sct, k in sorted(spec.qmr):
        lines.append(f"qmr.{sct}.k{k}={spec.qmr[(sct, k)]}")
    return "\n".join(lines) + "\n"


def workload_from_text(text: str) -> WorkloadSpec:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise WorkloadError(f"line {lineno}: expected key=value")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    qmr = {}
    for key in [k for k in values if k.startswith("qmr.")]:
        _, sct, ktag = key.split(".")
        qmr[(sct, int(ktag[1:]))] = float(values.pop(key))
    try:
        return WorkloadSpec(
            n_queries=int(values["n_queries"]),
            qmr=qmr,
            keywords=tuple(v for v in values["pool.keywords"].split(",") if v),
            site_ids=tuple(int(v) for v in values["pool.site_ids"].split(",") if v),
            domain_ids=tuple(int(v) for v in values["pool.domain_ids"].split(",") if v),
            lambda_qpms=float(values["lambda_qpms"]),
            repetitions=int(values["repetitions"]),
            seed=int(values["seed"]),
        )
    except KeyError as exc:
        raise WorkloadError(f"missing workload key {exc}") from exc


def save_workload(spec: WorkloadSpec, path):
    with open(path, "w", encoding="utf-8") as f:
        f.write(workload_to_text(spec))


def load_workload(path) -> WorkloadSpec:
    with open(path, encoding="utf-8") as f:
        return workload_from_text(f.read())


# ------------------------------------------------------------------
# warmup


def warmup(client, warmup_texts, measured_texts, allow_empty: bool = False):
    """Run an independent query set to fault index internals in, then
    reset the buffer counters. Rejects any keyword/site/domain overlap
    with the measured set (overlap would pre-warm measured postings)."""
    if not warmup_texts:
        if allow_empty:
            return
        raise WorkloadError("empty warmup set (pass allow_empty=True for a cold run)")
    w_kw, w_site, w_dom = workload_values(warmup_texts)
    m_kw, m_site, m_dom = workload_values(measured_texts)
    for kind, overlap in (
        ("keywords", w_kw & m_kw),
        ("site ids", w_site & m_site),
        ("domain ids", w_dom & m_dom),
    ):
        if overlap:
            raise WarmupOverlapError(kind, overlap)
    for text in warmup_texts:
        client.query(qlang.parse_query(text))
    client.stats(reset=True)


# ------------------------------------------------------------------
# load driving


@dataclass(frozen=True)
class QueryRecord:
    index: int
    condition_type: str
    k: int
    issue_ms: float          # actual send time, relative to run start
    total_ms: float          # master-reported: frame arrival to reply built
    m_ms: tuple[float, ...]
    s_ms: tuple[float, ...]
    nt_ms: tuple[float, ...]
    merge_ms: float
    n_results: int


@dataclass
class RunMetrics:
    records: list[QueryRecord] = field(default_factory=list)
    lambda_qpms: float | None = None
    seed: int | None = None
    unstable: bool = False
    inflight_samples: list[int] = field(default_factory=list)

    @property
    def count(self) -> int:
        return len(self.records)

    @property
    def mean_total_ms(self) -> float:
        return statistics.fmean(r.total_ms for r in self.records)

    def percentile_total_ms(self, pct: float) -> float:
        totals = sorted(r.total_ms for r in self.records)
        idx = min(len(totals) - 1, max(0, math.ceil(pct / 100 * len(totals)) - 1))
        return totals[idx]

    @property
    def duration_ms(self) -> float:
        return max(r.issue_ms + r.total_ms for r in self.records)

    @property
    def throughput_qps(self) -> float:
        return self.count / (self.duration_ms / 1000.0)


def exponential_interarrivals_ms(lam_qpms: float, n: int, seed: int) -> np.ndarray:
    if lam_qpms <= 0:
        raise WorkloadError(f"arrival rate must be positive, got {lam_qpms}")
    rng = np.random.default_rng(seed)
    return rng.exponential(1.0 / lam_qpms, size=n)


def flag_unstable(inflight: list[int], growth_windows: int = 3) -> bool:
    """True when the in-flight count strictly grows across
    growth_windows consecutive windows."""
    streak = 0
    for a, b in zip(inflight, inflight[1:]):
        streak = streak + 1 if b > a else 0
        if streak >= growth_windows:
            return True
    return False


def run_benchmark(
    client,
    texts,
    lam_qpms: float | None,
    seed: int = 0,
    timeout: float = 30.0,
    window_s: float = 10.0,
) -> RunMetrics:
    """Drive one query set against a master.

    ``lam_qpms`` is the Poisson arrival rate in queries per millisecond;
    None issues queries back to back, waiting for each (the zero-load
    regime). Open-loop runs never wait for completions before sending
    the next query. Any query failure aborts the run with the completed
    records preserved on the raised BenchmarkError.
    """
    queries = [qlang.parse_query(t) for t in texts]
    metrics = RunMetrics(lambda_qpms=lam_qpms, seed=seed)

    if lam_qpms is None:
        start = time.perf_counter()
        for i, query in enumerate(queries):
            t0 = time.perf_counter()
            try:
                items, breakdown = client.query(query)
            except Exception as exc:  # noqa: BLE001
                raise BenchmarkError(f"query {i} failed: {exc}", metrics) from exc
            metrics.records.append(
                _record(i, query, (t0 - start) * 1000.0, breakdown.total_ms, items, breakdown)
            )
        return metrics

    schedule = np.cumsum(exponential_interarrivals_ms(lam_qpms, len(queries), seed))
    start = time.perf_counter()
    pending = []
    next_sample = window_s
    for i, query in enumerate(queries):
        target = start + schedule[i] / 1000.0
        now = time.perf_counter()
        if target > now:
            time.sleep(target - now)
        now = time.perf_counter()
        if now - start >= next_sample:
            metrics.inflight_samples.append(sum(1 for _, _, h, _ in pending if not h.done()))
            next_sample += window_s
        send_t = time.perf_counter()
        try:
            handle = client.submit(query)
        except Exception as exc:  # noqa: BLE001
            _drain(pending, metrics, start, timeout)
            raise BenchmarkError(f"query {i} failed to send: {exc}", metrics) from exc
        pending.append((i, query, handle, send_t))
    _drain(pending, metrics, start, timeout)
    metrics.records.sort(key=lambda r: r.index)
    metrics.unstable = flag_unstable(metrics.inflight_samples)
    return metrics


def _drain(pending, metrics, start, timeout):
    failure = None
    for i, query, handle, send_t in pending:
        try:
            items, breakdown = handle.collect(timeout)
        except Exception as exc:  # noqa: BLE001
            if failure is None:
                failure = (i, exc)
            continue
        metrics.records.append(
            _record(i, query, (send_t - start) * 1000.0, breakdown.total_ms, items, breakdown)
        )
    if failure is not None:
        i, exc = failure
        raise BenchmarkError(f"query {i} failed: {exc}", metrics) from exc


def _record(index, query, issue_ms, total_ms, items, breakdown):
    return QueryRecord(
        index=index,
        condition_type=query.condition_type,
        k=query.k,
        issue_ms=issue_ms,
        total_ms=total_ms,
        m_ms=tuple(breakdown.m_ms),
        s_ms=tuple(breakdown.s_ms),
        nt_ms=tuple(breakdown.nt_ms),
        merge_ms=breakdown.merge_ms,
        n_results=len(items),
    )


# ------------------------------------------------------------------
# metrics files


def metrics_to_text(metrics: RunMetrics) -> str:
    """One query per line, tab-separated, trailing summary block."""
    lines = [
        "# run lambda_qpms={} seed={} unstable={}".format(
            metrics.lambda_qpms if metrics.lambda_qpms is not None else "seq",
            metrics.seed,
            int(metrics.unstable),
        ),
        "qid\tsct\tk\tissue_ms\ttotal_ms\tmerge_ms\tn_results\tm_ms\ts_ms\tnt_ms",
    ]
    for r in metrics.records:
        lines.append(
            "\t".join(
                [
                    str(r.index),
                    r.condition_type,
                    str(r.k),
                    f"{r.issue_ms:.3f}",
                    f"{r.total_ms:.3f}",
                    f"{r.merge_ms:.3f}",
                    str(r.n_results),
                    ";".join(f"{v:.3f}" for v in r.m_ms),
                    ";".join(f"{v:.3f}" for v in r.s_ms),
                    ";".join(f"{v:.3f}" for v in r.nt_ms),
                ]
            )
        )
    lines.append(
        "# summary count={} mean_total_ms={:.3f} p50_ms={:.3f} p95_ms={:.3f} "
        "p99_ms={:.3f} throughput_qps={:.2f}".format(
            metrics.count,
            metrics.mean_total_ms,
            metrics.percentile_total_ms(50),
            metrics.percentile_total_ms(95),
            metrics.percentile_total_ms(99),
            metrics.throughput_qps,
        )
    )
    return "\n".join(lines) + "\n"


def save_metrics(metrics: RunMetrics, path):
    with open(path, "w", encoding="utf-8") as f:
        f.write(metrics_to_text(metrics))


# ------------------------------------------------------------------
# sojourn samples for the capacity model


def collect_sojourn_samples(client, texts, repetitions: int) -> list[RunMetrics]:
    """Run the query set sequentially ``repetitions`` times, one
    RunMetrics per repetition (the raw material of export_samples)."""
    if repetitions < 1:
        raise WorkloadError("repetitions must be positive")
    return [run_benchmark(client, texts, None, seed=rep) for rep in range(repetitions)]


def export_samples(runs: list[RunMetrics], np_slaves: int, repetitions: int) -> perfmodel.SojournSampleSet:
    """Assemble per-query slave sojourn times in (repetition, slave)
    order from one RunMetrics per repetition.

    A sample is the full slave-side share of the round trip, s_i plus
    the transfer residual nt_i: everything the master spent waiting on
    that slave beyond its own handling. On hosts where slave work
    interleaves on shared cores, part of the slave-phase serialization
    is only visible in the residual, so s_i alone would undercount the
    sojourn.
    """
    if len(runs) != repetitions:
        raise WorkloadError(f"need {repetitions} runs, got {len(runs)}")
    n_queries = runs[0].count
    per_query = []
    for q in range(n_queries):
        seq = []
        for rep, run in enumerate(runs):
            if run.count != n_queries:
                raise WorkloadError(f"repetition {rep} covers {run.count} queries, expected {n_queries}")
            record = run.records[q]
            if len(record.s_ms) != np_slaves:
                raise WorkloadError(
                    f"query {q} repetition {rep} has {len(record.s_ms)} slave times, expected {np_slaves}"
                )
            # floor at 1 microsecond: the sample-set contract wants > 0
            seq.extend(
                max(s, s + nt, 1e-3) for s, nt in zip(record.s_ms, record.nt_ms)
            )
        per_query.append(tuple(seq))
    return perfmodel.SojournSampleSet(tuple(per_query), np_slaves, repetitions)


# ------------------------------------------------------------------
# calibration


def network_service_from_decomposition(c: float, m: float, s: float, m_minus_o: float) -> float:
    """Network service time from an RPC decomposition: total call time C
    minus the master CPU time M and slave CPU time S, with the OS
    transfer time O = M - (M-O) added back for both ends:

        (C - M - S) + 2 * O
    """
    if m_minus_o < 0 or m < m_minus_o:
        raise MeasurementError(f"need 0 <= M-O <= M, got M={m}, M-O={m_minus_o}")
    if c < m + s:
        raise MeasurementError(f"inconsistent decomposition: C={c} < M+S={m + s}")
    o = m - m_minus_o
    return (c - m - s) + 2.0 * o


def measure_merge_constants(k: int = 1000, trials: int = 5) -> tuple[float, float]:
    """Micro-benchmark the loser tree to estimate the per-comparison and
    per-result base costs (microseconds). Uses stream counts 2 and 64,
    whose tree heights differ by 5."""
    def run(ns: int) -> float:
        items = tuple((f"d{i}", float(k - i)) for i in range(k))
        best = math.inf
        for _ in range(trials):
            streams = [MergeStream(s, items) for s in range(ns)]
            tree = LoserTree(streams)
            t0 = time.perf_counter()
            for _ in range(k):
                tree.pop()
            best = min(best, time.perf_counter() - t0)
        return best * 1e6  # us

    t_h1 = run(2)
    t_h6 = run(64)
    t_comparison = max(0.0, (t_h6 - t_h1) / (5.0 * k))
    t_base = max(0.0, t_h1 / k - t_comparison)
    return t_comparison, t_base


@dataclass
class CalibrationResult:
    params: perfmodel.ModelParams
    st_master_ms: dict[int, float]
    st_network_ms: dict[int, float]
    warnings: list[str] = field(default_factory=list)


def calibrate(
    client,
    probes_by_k: dict[int, list[str]],
    qmr: dict[tuple[str, int], float] | None = None,
    alpha: float = 0.25,
    nm: int = 1,
    ncm: int = 1,
    nh: int = 1,
) -> CalibrationResult:
    """Measure the model's cost constants on an unloaded deployment.

    Each probe query runs standalone. The master service time per k is
    the master-reported total (frame arrival to reply built) minus the
    slowest slave phase, so every master-side cost (dispatch queueing,
    processing, transfer waits) lands in the component the queuing model
    actually charges; weights anchor at k=10. Per-slave master handling
    splits into child and RPC parts, merge constants come from a local
    micro-benchmark, and context-switch costs, which cannot be counted
    honestly in-process, are emitted as zero. Measurement families with
    a coefficient of variation above 25% are flagged.
    """
    if perfmodel.REFERENCE_K not in probes_by_k:
        raise WorkloadError(f"probes must include k={perfmodel.REFERENCE_K}")
    warnings: list[str] = []
    st_master: dict[int, float] = {}
    st_network: dict[int, float] = {}
    m_per_slave: dict[int, float] = {}
    np_slaves = None

    for k, texts in sorted(probes_by_k.items()):
        if not texts:
            raise WorkloadError(f"no probe queries for k={k}")
        master_wall, nts, m_means = [], [], []
        for text in texts:
            _, breakdown = client.query(qlang.parse_query(text))
            np_slaves = len(breakdown.s_ms)
            # the slave phase is what export_samples calls a sojourn:
            # slave time plus transfer residual
            slave_phase = max(
                max(s, s + nt) for s, nt in zip(breakdown.s_ms, breakdown.nt_ms)
            )
            master_wall.append(max(0.0, breakdown.total_ms - slave_phase))
            m_means.append(statistics.fmean(breakdown.m_ms))
            nts.append(max(0.0, statistics.fmean(breakdown.nt_ms)))
        st_master[k] = statistics.fmean(master_wall)
        # per-transfer service time of the shared transfer path: the
        # np slave transfers of one query overlap in the residual we can
        # observe, so one transfer's serial share is the mean residual
        # divided by the number of slaves
        st_network[k] = statistics.fmean(nts) / np_slaves
        m_per_slave[k] = statistics.fmean(m_means)
        for family, values in (("master", master_wall), ("network", nts)):
            mean = statistics.fmean(values)
            if len(values) > 1 and mean > 0:
                cv = statistics.stdev(values) / mean
                if cv > NOISE_CV_LIMIT:
                    warnings.append(f"k={k}: {family} time CV {cv:.2f} exceeds {NOISE_CV_LIMIT}")

    # the model only uses (t_child + t_rpc(k)) * ns, so pin t_rpc(10) = 0
    t_child = m_per_slave[perfmodel.REFERENCE_K]
    t_rpc = {k: max(0.0, m - t_child) for k, m in m_per_slave.items()}
    t_comparison, t_base = measure_merge_constants()
    merge_ref = perfmodel.merge_time_ms(perfmodel.REFERENCE_K, np_slaves,
                                        _merge_only_cost(t_comparison, t_base, t_rpc))
    # make the reconstructed service time match the measured one at the
    # calibrated ns: the parent term absorbs whatever the components
    # missed; when per-slave handling overlapped the slave phase (shared
    # cores) the components can exceed the measurement, so scale them down
    budget = max(0.0, st_master[perfmodel.REFERENCE_K] - merge_ref)
    per_slave_total = t_child * np_slaves
    if budget >= per_slave_total:
        t_parent = budget - per_slave_total
    else:
        scale = budget / per_slave_total if per_slave_total > 0 else 0.0
        t_child *= scale
        t_rpc = {k: v * scale for k, v in t_rpc.items()}
        t_parent = 0.0

    if st_network[perfmodel.REFERENCE_K] > 0:
        w_network = perfmodel.weights_from_times(st_network)
    else:
        w_network = {k: 1.0 for k in st_network}
        warnings.append("network times too small to weight; defaulting to 1.0")

    cost = perfmodel.CostParams(
        t_parent_proc_ms=t_parent,
        t_child_proc_ms=t_child,
        t_master_rpc_ms=t_rpc,
        t_comparison_us=t_comparison,
        t_base_us=t_base,
        t_per_context_switch_us=0.0,
        ncs_base={k: 0.0 for k in probes_by_k},
        ncs_per_slave={k: 0.0 for k in probes_by_k},
        st_network_ms=st_network,
    )
    params = perfmodel.ModelParams(
        nm=nm,
        ncm=ncm,
        ns=np_slaves,
        nh=nh,
        alpha=alpha,
        qmr=qmr or {(qlang.SINGLE, perfmodel.REFERENCE_K): 1.0},
        w_master=perfmodel.weights_from_times(st_master),
        w_network=w_network,
        cost=cost,
    )
    return CalibrationResult(params, st_master, st_network, warnings)


def _merge_only_cost(t_comparison, t_base, t_rpc):
    zeros = {k: 0.0 for k in t_rpc}
    return perfmodel.CostParams(
        t_parent_proc_ms=0.0,
        t_child_proc_ms=0.0,
        t_master_rpc_ms=dict(zeros),
        t_comparison_us=t_comparison,
        t_base_us=t_base,
        t_per_context_switch_us=0.0,
        ncs_base=dict(zeros),
        ncs_per_slave=dict(zeros),
        st_network_ms=dict(zeros),
    )


def probe_queries(vocabulary, ks=(10, 50, 1000), per_k: int = 20) -> dict[int, list[str]]:
    """Single-keyword probe sets per k, all keywords distinct."""
    vocab = list(vocabulary)
    needed = len(ks) * per_k
    if len(vocab) < needed:
        raise PoolExhaustedError("keyword")
    out = {}
    pos = 0
    for k in ks:
        out[k] = [
            qlang.format_query(qlang.make_query([vocab[pos + i]], None, k))
            for i in range(per_k)
        ]
        pos += per_k
    return out
