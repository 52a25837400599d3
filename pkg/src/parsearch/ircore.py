"""In-memory IR index: rank-ordered posting lists with skip sub-indexes.

Documents get dense docIds in descending rank order, so posting lists
that are sorted by docId are simultaneously sorted best-rank-first.
Top-k single-keyword search is then a prefix read, and multi-keyword
search is a docId-ordered intersection (zigzag join) that leapfrogs
through the lists via per-list skip sub-indexes.

Two strategies exist for scope-limited search (keyword AND siteId/domainId):
attribute values embedded into each content posting (one sequential
scan), or a join against a dedicated scope posting list keyed by
namespaced terms like ``site:6000``.
"""

from __future__ import annotations

import math
import re
from bisect import bisect_right
from dataclasses import dataclass, field

from . import qlang

DEFAULT_SKIP_INTERVAL = 128

EMBEDDABLE_ATTRS = ("siteId", "domainId")

# query scope field -> (text-typed scope field, term prefix)
SCOPE_TEXT_FIELDS = {
    "siteId": ("siteIdText", "site"),
    "domainId": ("domainIdText", "domain"),
}

_TOKEN_RE = re.compile(r"[0-9a-z]+")


class DuplicateDocKeyError(ValueError):
    def __init__(self, doc_key: str):
        super().__init__(f"duplicate docKey {doc_key!r} in corpus")
        self.doc_key = doc_key


class UnsupportedPredicateError(ValueError):
    """A scope/attribute predicate the index cannot serve."""


@dataclass(frozen=True, slots=True)
class Document:
    doc_key: str
    url: str
    site_id: int
    domain_id: int
    rank: float
    content: str


@dataclass(frozen=True, slots=True)
class DocEntry:
    """Per-document catalog row, addressable by dense docId."""

    doc_key: str
    url: str
    site_id: int
    domain_id: int
    rank: float


@dataclass(frozen=True, slots=True)
class Posting:
    doc_id: int
    offsets: tuple[int, ...]
    embedded: dict[str, int]


@dataclass(slots=True)
class PostingList:
    keyword: str
    postings: list[Posting] = field(default_factory=list)
    # (doc_id, ordinal) every skip_interval postings, starting at ordinal 0
    sub_index: list[tuple[int, int]] = field(default_factory=list)

    @property
    def count(self) -> int:
        return len(self.postings)


@dataclass(frozen=True, slots=True)
class TopKItem:
    doc_id: int
    rank: float
    doc_key: str


def tokenize(text: str) -> list[str]:
    """Lowercase and split on non-alphanumerics. Deterministic on purpose:
    result oracles in the tests rely on re-tokenizing the raw corpus."""
    return _TOKEN_RE.findall(text.lower())


def assign_doc_ids(corpus: list[Document]) -> list[tuple[int, Document]]:
    """Assign dense docIds 0..n-1 in descending rank order, ties by docKey.

    docId order IS rank order afterwards, which is what lets rank-ordered
    posting lists take part in docId-ordered intersections.
    """
    seen = set()
    for doc in corpus:
        if not math.isfinite(doc.rank):
            raise ValueError(f"document {doc.doc_key!r} has non-finite rank {doc.rank!r}")
        if doc.doc_key in seen:
            raise DuplicateDocKeyError(doc.doc_key)
        seen.add(doc.doc_key)
    ordered = sorted(corpus, key=lambda d: (-d.rank, d.doc_key))
    return list(enumerate(ordered))


class PostingCursor:
    """Forward-only cursor over one posting list.

    ``seek_geq`` lands on the smallest posting with docId >= target using
    the skip sub-index, reading at most skip_interval - 1 postings past
    the last skip entry <= target. ``visited`` counts postings read.
    """

    def __init__(self, skip_doc_ids: list[int], count: int):
        self._skip_doc_ids = skip_doc_ids
        self._count = count
        self._ordinal = 0
        self._current: Posting | None = None
        self.visited = 0

    # subclasses: position on an ordinal (sequential step or skip target)
    def _load(self, ordinal: int, skip_slot: int | None) -> Posting | None:
        raise NotImplementedError

    @property
    def count(self) -> int:
        return self._count

    @property
    def exhausted(self) -> bool:
        return self._ordinal >= self._count

    def current(self) -> Posting | None:
        if self.exhausted:
            return None
        return self._current

    def start(self) -> Posting | None:
        if self._count == 0:
            return None
        self._current = self._load(0, 0 if self._skip_doc_ids else None)
        self.visited += 1
        return self._current

    def advance(self) -> Posting | None:
        if self.exhausted:
            return None
        self._ordinal += 1
        if self.exhausted:
            return None
        self._current = self._load(self._ordinal, None)
        self.visited += 1
        return self._current

    def seek_geq(self, target: int) -> Posting | None:
        cur = self.current()
        if cur is None:
            return None
        if cur.doc_id >= target:
            return cur
        # rightmost skip entry with doc_id <= target; jump only forward
        slot = bisect_right(self._skip_doc_ids, target) - 1
        if slot >= 0:
            skip_ordinal = self._skip_ordinal(slot)
            if skip_ordinal > self._ordinal:
                self._ordinal = skip_ordinal
                self._current = self._load(skip_ordinal, slot)
                self.visited += 1
                cur = self._current
        while cur is not None and cur.doc_id < target:
            cur = self.advance()
        return cur

    def _skip_ordinal(self, slot: int) -> int:
        raise NotImplementedError


class MemoryCursor(PostingCursor):
    def __init__(self, plist: PostingList):
        super().__init__([d for d, _ in plist.sub_index], plist.count)
        self._plist = plist

    def _load(self, ordinal, skip_slot):
        return self._plist.postings[ordinal]

    def _skip_ordinal(self, slot):
        return self._plist.sub_index[slot][1]


class IrIndex:
    """Immutable after build: any number of concurrent readers."""

    def __init__(self, docs, embed_spec, skip_interval):
        self.docs: list[DocEntry] = docs
        self.embed_spec: tuple[str, ...] = embed_spec
        self.skip_interval: int = skip_interval
        self.dictionary: dict[str, PostingList] = {}
        self.scope_fields: dict[str, dict[str, PostingList]] = {
            text_field: {} for text_field, _ in SCOPE_TEXT_FIELDS.values()
        }

    def doc_entry(self, doc_id: int) -> DocEntry:
        return self.docs[doc_id]

    def content_cursor(self, token: str) -> MemoryCursor | None:
        plist = self.dictionary.get(token)
        if plist is None:
            return None
        cursor = MemoryCursor(plist)
        cursor.start()
        return cursor

    def scope_cursor(self, text_field: str, term: str) -> MemoryCursor | None:
        terms = self.scope_fields.get(text_field)
        if terms is None:
            raise UnsupportedPredicateError(f"no scope field {text_field!r}")
        plist = terms.get(term)
        if plist is None:
            return None
        cursor = MemoryCursor(plist)
        cursor.start()
        return cursor

    @property
    def posting_count(self) -> int:
        n = sum(p.count for p in self.dictionary.values())
        for terms in self.scope_fields.values():
            n += sum(p.count for p in terms.values())
        return n


def _finish_sub_index(plist: PostingList, skip_interval: int):
    plist.sub_index = [
        (plist.postings[i].doc_id, i)
        for i in range(0, plist.count, skip_interval)
    ]


def build_index(
    docs: list[tuple[int, Document]],
    embed_spec=("siteId",),
    skip_interval: int = DEFAULT_SKIP_INTERVAL,
) -> IrIndex:
    """Build the full index for docId-assigned documents.

    embed_spec names the integer attributes copied into every content
    posting; scope posting lists (siteIdText/domainIdText) are always
    built, one namespaced term per document.
    """
    if skip_interval < 2:
        raise ValueError(f"skip interval must be >= 2, got {skip_interval}")
    embed_spec = tuple(embed_spec)
    for attr in embed_spec:
        if attr not in EMBEDDABLE_ATTRS:
            raise ValueError(f"cannot embed unknown attribute {attr!r}")
    expected_id = 0
    entries = []
    for doc_id, _ in docs:
        if doc_id != expected_id:
            raise ValueError("docs must come from assign_doc_ids (dense docIds)")
        expected_id += 1

    index = IrIndex([], embed_spec, skip_interval)
    for doc_id, doc in docs:
        entries.append(DocEntry(doc.doc_key, doc.url, doc.site_id, doc.domain_id, doc.rank))
        positions: dict[str, list[int]] = {}
        for pos, token in enumerate(tokenize(doc.content)):
            positions.setdefault(token, []).append(pos)
        embedded = {attr: _attr_value(doc, attr) for attr in embed_spec}
        for token, offs in positions.items():
            plist = index.dictionary.get(token)
            if plist is None:
                plist = index.dictionary[token] = PostingList(token)
            plist.postings.append(Posting(doc_id, tuple(offs), dict(embedded)))
        for attr, (text_field, prefix) in SCOPE_TEXT_FIELDS.items():
            term = f"{prefix}:{_attr_value(doc, attr)}"
            terms = index.scope_fields[text_field]
            plist = terms.get(term)
            if plist is None:
                plist = terms[term] = PostingList(term)
            plist.postings.append(Posting(doc_id, (), {}))
    index.docs = entries

    for plist in index.dictionary.values():
        _finish_sub_index(plist, skip_interval)
    for terms in index.scope_fields.values():
        for plist in terms.values():
            _finish_sub_index(plist, skip_interval)
    return index


def _attr_value(doc: Document, attr: str) -> int:
    return doc.site_id if attr == "siteId" else doc.domain_id


def _item(index, doc_id: int) -> TopKItem:
    entry = index.doc_entry(doc_id)
    return TopKItem(doc_id, entry.rank, entry.doc_key)


def search_single(index, keyword: str, k: int) -> list[TopKItem]:
    """First min(k, count) postings of the keyword's list: the list is
    already best-rank-first, so no traversal past the k-th posting."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    cursor = index.content_cursor(keyword)
    if cursor is None:
        return []
    items = []
    posting = cursor.current()
    while posting is not None and len(items) < k:
        items.append(_item(index, posting.doc_id))
        posting = cursor.advance()
    return items


def intersect_ids(cursors, k: int) -> list[int]:
    """Leapfrog intersection: first k docIds present in every list.

    Repeatedly seeks the laggards up to the current maximum; stops after
    k matches without exhausting any list.
    """
    if len(cursors) < 2:
        raise ValueError("intersection needs at least two cursors")
    matches: list[int] = []
    currents = [c.current() for c in cursors]
    if any(p is None for p in currents):
        return matches
    target = max(p.doc_id for p in currents)
    while len(matches) < k:
        aligned = True
        for i, cursor in enumerate(cursors):
            posting = cursor.seek_geq(target)
            if posting is None:
                return matches
            if posting.doc_id > target:
                target = posting.doc_id
                aligned = False
        if aligned:
            matches.append(target)
            target += 1
    return matches


def zigzag_join(index, cursors, k: int) -> list[TopKItem]:
    """Intersection of >= 2 posting lists, truncated to k, in rank order."""
    return [_item(index, doc_id) for doc_id in intersect_ids(cursors, k)]


def search_multi(index, keywords, k: int) -> list[TopKItem]:
    cursors = []
    for kw in keywords:
        cursor = index.content_cursor(kw)
        if cursor is None:
            return []
        cursors.append(cursor)
    return zigzag_join(index, cursors, k)


def search_limited_embedded(index, keyword: str, attr_name: str, attr_value: int, k: int) -> list[TopKItem]:
    """Sequential scan of the keyword's list, filtering on the embedded
    attribute value; first k matches in rank order."""
    if attr_name not in index.embed_spec:
        raise UnsupportedPredicateError(
            f"attribute {attr_name!r} is not embedded (embed spec: {list(index.embed_spec)})"
        )
    cursor = index.content_cursor(keyword)
    if cursor is None:
        return []
    items = []
    posting = cursor.current()
    while posting is not None and len(items) < k:
        if posting.embedded[attr_name] == attr_value:
            items.append(_item(index, posting.doc_id))
        posting = cursor.advance()
    return items


def search_limited_join(index, keyword: str, scope_field: str, scope_value: int, k: int) -> list[TopKItem]:
    """Zigzag join of the keyword's list with the namespaced scope list."""
    prefix = None
    for text_field, pfx in SCOPE_TEXT_FIELDS.values():
        if text_field == scope_field:
            prefix = pfx
    if prefix is None:
        raise UnsupportedPredicateError(f"unknown scope field {scope_field!r}")
    content = index.content_cursor(keyword)
    scope = index.scope_cursor(scope_field, f"{prefix}:{scope_value}")
    if content is None or scope is None:
        return []
    return zigzag_join(index, [content, scope], k)


def search(index, query: qlang.Query) -> list[TopKItem]:
    """Dispatch a parsed query to the matching strategy.

    Limited search uses the embedded-attribute scan when the attribute is
    embedded and there is a single keyword; otherwise it joins the scope
    posting list into the multi-way intersection.
    """
    if query.condition_type == qlang.SINGLE:
        return search_single(index, query.keywords[0], query.k)
    if query.condition_type == qlang.MULTI:
        return search_multi(index, query.keywords, query.k)

    field_name, value = query.scope
    if len(query.keywords) == 1 and field_name in index.embed_spec:
        return search_limited_embedded(index, query.keywords[0], field_name, value, query.k)
    text_field, prefix = SCOPE_TEXT_FIELDS[field_name]
    cursors = []
    for kw in query.keywords:
        cursor = index.content_cursor(kw)
        if cursor is None:
            return []
        cursors.append(cursor)
    scope_cursor = index.scope_cursor(text_field, f"{prefix}:{value}")
    if scope_cursor is None:
        return []
    cursors.append(scope_cursor)
    return zigzag_join(index, cursors, query.k)
