import random

import pytest

from parsearch import ircore

# Acceptance criterion results collected by tests/test_acceptance.py and
# printed one line per criterion at the end of the run. Parametrized
# cases AND into their criterion's entry.
ACCEPTANCE_RESULTS: dict[int, tuple[bool, list[str]]] = {}


def pytest_configure(config):
    config.addinivalue_line(
        "markers", "acceptance(n, title): tag a test as acceptance criterion n"
    )


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or report.when != "call":
        return
    n, title = marker.args
    ok, details = ACCEPTANCE_RESULTS.get(n, (True, [title]))
    if report.failed:
        ok = False
        details.append(f"failed: {item.name}")
    ACCEPTANCE_RESULTS[n] = (ok, details)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        ok, details = ACCEPTANCE_RESULTS[n]
        status = "PASS" if ok else "FAIL"
        line = f"criterion {n:2d} [{details[0]}]: {status}"
        if len(details) > 1:
            line += "  (" + "; ".join(details[1:]) + ")"
        terminalreporter.write_line(line)


def make_corpus(
    n_docs: int,
    seed: int,
    vocab_size: int = 400,
    n_sites: int = 12,
    n_domains: int = 6,
    min_tokens: int = 15,
    max_tokens: int = 45,
) -> list[ircore.Document]:
    """Deterministic synthetic corpus with a skewed token distribution so
    multi-keyword intersections are frequently non-empty."""
    rng = random.Random(seed)
    vocab = [f"w{i:04d}" for i in range(vocab_size)]
    weights = [1.0 / (i + 1) for i in range(vocab_size)]
    docs = []
    for i in range(n_docs):
        n_tokens = rng.randint(min_tokens, max_tokens)
        tokens = rng.choices(vocab, weights=weights, k=n_tokens)
        # a handful of equal ranks to exercise docKey tie-breaking
        rank = round(rng.uniform(0.0, 100.0), 2)
        docs.append(
            ircore.Document(
                doc_key=f"d{i:06d}",
                url=f"http://site{i % n_sites}.test/{i}",
                site_id=rng.randrange(n_sites),
                domain_id=rng.randrange(n_domains),
                rank=rank,
                content=" ".join(tokens),
            )
        )
    rng.shuffle(docs)
    return docs


class BruteForce:
    """Independent result oracle: filter the raw corpus, sort by
    (rank desc, docKey asc), truncate to k. Never touches the index."""

    def __init__(self, corpus: list[ircore.Document]):
        self.corpus = sorted(corpus, key=lambda d: (-d.rank, d.doc_key))
        self.token_sets = [set(ircore.tokenize(d.content)) for d in self.corpus]

    def run(self, keywords, scope, k) -> list[tuple[str, float]]:
        out = []
        for doc, tokens in zip(self.corpus, self.token_sets):
            if any(kw not in tokens for kw in keywords):
                continue
            if scope is not None:
                field, value = scope
                attr = doc.site_id if field == "siteId" else doc.domain_id
                if attr != value:
                    continue
            out.append((doc.doc_key, doc.rank))
            if len(out) == k:
                break
        return out


def result_keys(items) -> list[tuple[str, float]]:
    return [(it.doc_key, it.rank) for it in items]


@pytest.fixture(scope="session")
def small_corpus():
    return make_corpus(300, seed=11)


@pytest.fixture(scope="session")
def small_index(small_corpus):
    docs = ircore.assign_doc_ids(small_corpus)
    return ircore.build_index(docs, embed_spec=("siteId", "domainId"), skip_interval=8)


@pytest.fixture(scope="session")
def small_oracle(small_corpus):
    return BruteForce(small_corpus)
