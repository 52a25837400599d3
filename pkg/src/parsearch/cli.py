"""Command-line entry point.

Subcommands: build-index, slave, master, query, bench, calibrate,
estimate, compare. Corpus input is one document per line, tab-separated:
docKey, url, siteId, domainId, rank, content.
"""

from __future__ import annotations

import argparse
import sys

from . import bench, ircore, perfmodel, qlang, storage


def read_corpus(path) -> list[ircore.Document]:
    docs = []
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 6:
                raise ValueError(f"{path}:{lineno}: expected 6 tab-separated fields, got {len(parts)}")
            key, url, site, domain, rank, content = parts
            docs.append(ircore.Document(key, url, int(site), int(domain), float(rank), content))
    return docs


def write_corpus(docs, path):
    with open(path, "w", encoding="utf-8") as f:
        for d in docs:
            content = d.content.replace("\t", " ").replace("\n", " ")
            f.write(f"{d.doc_key}\t{d.url}\t{d.site_id}\t{d.domain_id}\t{d.rank!r}\t{content}\n")


def partition_round_robin(corpus, n_partitions: int):
    """Round-robin over the rank-sorted corpus so every segment gets a
    similar rank profile."""
    ordered = [d for _, d in ircore.assign_doc_ids(corpus)]
    segments = [[] for _ in range(n_partitions)]
    for i, doc in enumerate(ordered):
        segments[i % n_partitions].append(doc)
    return segments


def cmd_build_index(args) -> int:
    import os

    corpus = read_corpus(args.corpus)
    embed_spec = tuple(s for s in args.embed.split(",") if s)
    os.makedirs(args.out_dir, exist_ok=True)
    manifest = [
        f"partitions={args.partitions}",
        f"embed_spec={args.embed}",
        f"skip_interval={args.skip_interval}",
        f"docs={len(corpus)}",
    ]
    for i, segment in enumerate(partition_round_robin(corpus, args.partitions)):
        index = ircore.build_index(
            ircore.assign_doc_ids(segment), embed_spec=embed_spec, skip_interval=args.skip_interval
        )
        path = os.path.join(args.out_dir, f"part-{i:04d}.idx")
        summary = storage.save_index(index, path)
        manifest.append(f"segment.{i}.file=part-{i:04d}.idx")
        manifest.append(f"segment.{i}.docs={summary.docs}")
        print(f"segment {i}: {summary.docs} docs, {summary.postings} postings, "
              f"{summary.file_bytes} bytes -> {path}")
    with open(os.path.join(args.out_dir, "manifest.kv"), "w", encoding="utf-8") as f:
        f.write("\n".join(manifest) + "\n")
    return 0


def cmd_slave(args) -> int:
    from . import slave

    return slave.serve(args.listen, args.index, args.buffer_bytes, args.concurrency)


def cmd_master(args) -> int:
    import signal
    import threading

    from .master import MasterServer

    host, port = args.listen.rsplit(":", 1)
    try:
        server = MasterServer(args.slaves.split(","), host, int(port), concurrency=args.concurrency)
        server.start()
    except Exception as exc:  # noqa: BLE001
        print(f"master: {exc}", file=sys.stderr)
        return 2
    stop = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: stop.set())
    print(f"master: serving on {server.address[0]}:{server.address[1]} "
          f"over {args.slaves}", flush=True)
    stop.wait()
    server.shutdown()
    return 0


def cmd_query(args) -> int:
    from .master import MasterClient

    try:
        query = qlang.parse_query(args.query)
    except qlang.QuerySyntaxError as exc:
        print(f"query: {exc}", file=sys.stderr)
        return 2
    client = MasterClient(args.master)
    try:
        items, breakdown = client.query(query)
    except (ConnectionError, OSError, RuntimeError, TimeoutError) as exc:
        print(f"query: {exc}", file=sys.stderr)
        return 1
    finally:
        client.close()
    if args.machine:
        for i, item in enumerate(items, start=1):
            print(f"result\t{i}\t{item.doc_key}\t{item.rank!r}")
        print(f"timing\ttotal_ms\t{breakdown.total_ms:.3f}")
        print(f"timing\tmerge_ms\t{breakdown.merge_ms:.3f}")
        for i, (m, s, nt) in enumerate(zip(breakdown.m_ms, breakdown.s_ms, breakdown.nt_ms)):
            print(f"timing\tslave{i}\tm={m:.3f}\ts={s:.3f}\tnt={nt:.3f}")
    else:
        if not items:
            print("no results")
        for i, item in enumerate(items, start=1):
            print(f"{i:4d}. {item.doc_key}  rank={item.rank:g}")
        print(f"-- total {breakdown.total_ms:.3f} ms, merge {breakdown.merge_ms:.3f} ms, "
              f"slaves max {max(breakdown.s_ms, default=0):.3f} ms")
    return 0


def cmd_bench(args) -> int:
    from .master import MasterClient

    spec = bench.load_workload(args.workload)
    texts = bench.generate_query_set(spec)
    client = MasterClient(args.master, timeout=args.timeout)
    try:
        if args.warmup:
            warm_spec = bench.load_workload(args.warmup)
            bench.warmup(client, bench.generate_query_set(warm_spec), texts)
        lam = None if args.sequential else (args.lam if args.lam is not None else spec.lambda_qpms)
        try:
            metrics = bench.run_benchmark(client, texts, lam, seed=spec.seed, window_s=args.window)
        except bench.BenchmarkError as exc:
            if exc.partial.count:
                bench.save_metrics(exc.partial, args.out)
            print(f"bench: {exc} (partial metrics for {exc.partial.count} queries saved)",
                  file=sys.stderr)
            return 1
    finally:
        client.close()
    bench.save_metrics(metrics, args.out)
    print(f"bench: {metrics.count} queries, mean {metrics.mean_total_ms:.3f} ms, "
          f"throughput {metrics.throughput_qps:.1f} q/s"
          + (" [UNSTABLE]" if metrics.unstable else ""))
    if args.summary_out:
        lam_str = "0" if lam is None else repr(lam)
        with open(args.summary_out, "a", encoding="utf-8") as f:
            f.write(f"{lam_str}\t{metrics.mean_total_ms!r}\n")
    return 0


def cmd_calibrate(args) -> int:
    from .master import MasterClient

    with open(args.vocab, encoding="utf-8") as f:
        vocab = [line.strip() for line in f if line.strip()]
    ks = tuple(int(k) for k in args.ks.split(","))
    probes = bench.probe_queries(vocab, ks=ks, per_k=args.probes_per_k)
    client = MasterClient(args.master, timeout=args.timeout)
    try:
        result = bench.calibrate(client, probes, alpha=args.alpha)
    finally:
        client.close()
    perfmodel.save_params(result.params, args.out)
    for warning in result.warnings:
        print(f"calibrate: warning: {warning}", file=sys.stderr)
    for k in sorted(result.st_master_ms):
        print(f"calibrate: k={k}: st_master {result.st_master_ms[k]:.3f} ms, "
              f"st_network {result.st_network_ms[k]:.3f} ms")
    print(f"calibrate: params written to {args.out}")
    return 0


def cmd_estimate(args) -> int:
    from dataclasses import replace

    params = perfmodel.load_params(args.params)
    overrides = {}
    for name in ("ns", "nm", "ncm", "nh"):
        value = getattr(args, name)
        if value is not None:
            overrides[name] = value
    if overrides:
        params = replace(params, **overrides)
    samples = perfmodel.load_samples(args.samples)
    grid = [float(v) for v in args.lambda_grid.split(",")]
    rows = []
    try:
        slave_max = perfmodel.slave_max_partitioning(samples, params.ns)
        for lam in grid:
            total = perfmodel.total_response_time_ms(args.sct, args.k, lam, params, samples)
            rows.append((lam, total, slave_max))
    except perfmodel.SaturationError as exc:
        print(f"estimate: {exc}", file=sys.stderr)
        return 3
    except perfmodel.ModelError as exc:
        print(f"estimate: {exc}", file=sys.stderr)
        return 2
    out = sys.stdout if args.out == "-" else open(args.out, "w", encoding="utf-8")
    try:
        out.write("lambda_qpms\ttotal_est_ms\tslave_max_est_ms\n")
        for lam, total, smax in rows:
            out.write(f"{lam!r}\t{total!r}\t{smax!r}\n")
    finally:
        if out is not sys.stdout:
            out.close()
    return 0


def read_table(path) -> tuple[list[str], list[dict[str, float]]]:
    with open(path, encoding="utf-8") as f:
        lines = [l.rstrip("\n") for l in f if l.strip() and not l.startswith("#")]
    if not lines:
        raise ValueError(f"{path}: empty table")
    header = lines[0].split("\t")
    rows = []
    for line in lines[1:]:
        values = line.split("\t")
        rows.append({name: float(v) for name, v in zip(header, values)})
    return header, rows


def cmd_compare(args) -> int:
    try:
        est_header, est_rows = read_table(args.estimated)
        meas_header, meas_rows = read_table(args.measured)
    except (OSError, ValueError) as exc:
        print(f"compare: {exc}", file=sys.stderr)
        return 2
    est_col = args.est_col if args.est_col in est_header else est_header[1]
    meas_col = args.meas_col if args.meas_col and args.meas_col in meas_header else (
        est_col if est_col in meas_header else meas_header[1]
    )
    measured_by_lam = {row["lambda_qpms"]: row[meas_col] for row in meas_rows}
    print("lambda_qpms\testimated_ms\tmeasured_ms\testimation_error")
    errors = []
    for row in est_rows:
        lam = row["lambda_qpms"]
        if lam not in measured_by_lam:
            print(f"compare: no measured row for lambda={lam!r}", file=sys.stderr)
            return 2
        err = perfmodel.estimation_error(row[est_col], measured_by_lam[lam])
        errors.append(err)
        print(f"{lam!r}\t{row[est_col]!r}\t{measured_by_lam[lam]!r}\t{err:.6f}")
    print(f"# mean_error={sum(errors) / len(errors):.6f} max_error={max(errors):.6f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="parsearch")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-index", help="partition a corpus and build per-segment index files")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--partitions", type=int, default=1)
    p.add_argument("--embed", default="siteId,domainId")
    p.add_argument("--skip-interval", type=int, default=ircore.DEFAULT_SKIP_INTERVAL)
    p.set_defaults(func=cmd_build_index)

    p = sub.add_parser("slave", help="serve one index segment")
    p.add_argument("--listen", required=True, metavar="ADDR:PORT")
    p.add_argument("--index", required=True)
    p.add_argument("--buffer-bytes", type=int, default=1 << 26)
    p.add_argument("--concurrency", type=int, default=8)
    p.set_defaults(func=cmd_slave)

    p = sub.add_parser("master", help="serve queries over a set of slaves")
    p.add_argument("--listen", required=True, metavar="ADDR:PORT")
    p.add_argument("--slaves", required=True, metavar="ADDR:PORT,...")
    p.add_argument("--concurrency", type=int, default=16)
    p.set_defaults(func=cmd_master)

    p = sub.add_parser("query", help="run one query against a master")
    p.add_argument("--master", required=True, metavar="ADDR:PORT")
    p.add_argument("--machine", action="store_true", help="machine-readable output")
    p.add_argument("query")
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("bench", help="drive a workload at a Poisson arrival rate")
    p.add_argument("--master", required=True)
    p.add_argument("--workload", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--summary-out", help="append a lambda/mean row to this table")
    p.add_argument("--warmup", help="workload file for the warmup set")
    p.add_argument("--sequential", action="store_true", help="issue queries back to back")
    p.add_argument("--lam", type=float, help="override the workload arrival rate (queries/ms)")
    p.add_argument("--window", type=float, default=10.0, help="instability window seconds")
    p.add_argument("--timeout", type=float, default=30.0)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("calibrate", help="measure model cost constants on an idle deployment")
    p.add_argument("--master", required=True)
    p.add_argument("--vocab", required=True, help="file with one probe keyword per line")
    p.add_argument("--out", required=True)
    p.add_argument("--ks", default="10,50,1000")
    p.add_argument("--probes-per-k", type=int, default=20)
    p.add_argument("--alpha", type=float, default=0.25)
    p.add_argument("--timeout", type=float, default=30.0)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("estimate", help="project response times for a target cluster size")
    p.add_argument("--params", required=True)
    p.add_argument("--samples", required=True)
    p.add_argument("--lambda-grid", required=True, metavar="L1,L2,...")
    p.add_argument("--ns", type=int, help="target slave count (default: params file)")
    p.add_argument("--nm", type=int)
    p.add_argument("--ncm", type=int)
    p.add_argument("--nh", type=int)
    p.add_argument("--sct", default=qlang.SINGLE, choices=qlang.CONDITION_TYPES)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("compare", help="estimation error between projected and measured tables")
    p.add_argument("--estimated", required=True)
    p.add_argument("--measured", required=True)
    p.add_argument("--est-col", default="total_est_ms")
    p.add_argument("--meas-col")
    p.set_defaults(func=cmd_compare)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"parsearch {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
