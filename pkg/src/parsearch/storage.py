"""On-disk index format and the buffer pool that serves posting pages.

File layout (little-endian fixed-width integers):

    magic "ODYX" | u32 version | u32 nsections
    nsections * (tag: 4 bytes | u64 offset | u64 length)
    section bytes ...
    u64 checksum (blake2b-64 of everything before it)

Sections:

    META  skip interval, doc count, embed spec
    DICT  content dictionary: token -> posting locator
    SDIC  siteIdText scope dictionary
    DDIC  domainIdText scope dictionary
    SKIP  flat skip-entry array: (docId, ordinal, byte offset in list)
    DOCS  docId-ordered catalog: docKey, url, siteId, domainId, rank
    POST  raw postings: u32 docId | u16 noffsets | u8 nembedded |
          noffsets * u32 | nembedded * i64

On load, every section except POST is pinned in memory (the index's
internal structures); posting bytes are fetched on demand through a
bounded LRU page cache, which is what makes a small-buffer
configuration behave like a cold-posting/warm-internals run.
"""

from __future__ import annotations

import hashlib
import struct
import threading
from collections import OrderedDict
from dataclasses import dataclass

from .ircore import DocEntry, Posting, PostingCursor, UnsupportedPredicateError

MAGIC = b"ODYX"
VERSION = 1
PAGE_SIZE = 8192

_SECTION_ORDER = (b"META", b"DICT", b"SDIC", b"DDIC", b"SKIP", b"DOCS", b"POST")


class IndexFileError(ValueError):
    """Malformed, corrupted, or out-of-contract index file."""


class BufferConfigError(ValueError):
    """bufferBytes too small for the pinned sections."""


def _checksum(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=8).digest()


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise IndexFileError(f"string too long for index file: {len(raw)} bytes")
    return struct.pack("<H", len(raw)) + raw


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def unpack(self, fmt: str):
        values = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += struct.calcsize(fmt)
        return values

    def read_str(self) -> str:
        (n,) = self.unpack("<H")
        raw = self.data[self.pos : self.pos + n]
        self.pos += n
        return raw.decode("utf-8")


@dataclass(frozen=True, slots=True)
class DictEntry:
    offset: int        # into POST section
    length: int        # bytes
    count: int
    embed_count: int
    skip_start: int    # into the flat SKIP array
    skip_count: int


@dataclass(frozen=True, slots=True)
class IndexFileSummary:
    path: str
    file_bytes: int
    section_bytes: dict[str, int]
    tokens: int
    postings: int
    docs: int


def _encode_postings(postings, embed_spec, skip_interval):
    """Serialize one posting list; returns (bytes, skip entries)."""
    chunks = []
    skips = []
    offset = 0
    for ordinal, posting in enumerate(postings):
        if ordinal % skip_interval == 0:
            skips.append((posting.doc_id, ordinal, offset))
        emb = [posting.embedded[a] for a in embed_spec] if embed_spec else []
        chunk = struct.pack(
            f"<IHB{len(posting.offsets)}I{len(emb)}q",
            posting.doc_id,
            len(posting.offsets),
            len(emb),
            *posting.offsets,
            *emb,
        )
        chunks.append(chunk)
        offset += len(chunk)
    return b"".join(chunks), skips


def save_index(index, path: str) -> IndexFileSummary:
    """Write an in-memory index to disk; round-trips through load_index."""
    skip_flat: list[tuple[int, int, int]] = []
    post_chunks: list[bytes] = []
    post_len = 0

    def add_list(plist, embed_spec):
        nonlocal post_len
        data, skips = _encode_postings(plist.postings, embed_spec, index.skip_interval)
        entry = DictEntry(
            offset=post_len,
            length=len(data),
            count=plist.count,
            embed_count=len(embed_spec),
            skip_start=len(skip_flat),
            skip_count=len(skips),
        )
        post_chunks.append(data)
        post_len += len(data)
        skip_flat.extend(skips)
        return entry

    def encode_dict(entries_by_token):
        out = [struct.pack("<I", len(entries_by_token))]
        for token, e in entries_by_token:
            out.append(_pack_str(token))
            out.append(struct.pack("<QQIBQI", e.offset, e.length, e.count,
                                   e.embed_count, e.skip_start, e.skip_count))
        return b"".join(out)

    dict_entries = [(t, add_list(index.dictionary[t], index.embed_spec))
                    for t in sorted(index.dictionary)]
    site_entries = [(t, add_list(index.scope_fields["siteIdText"][t], ()))
                    for t in sorted(index.scope_fields["siteIdText"])]
    domain_entries = [(t, add_list(index.scope_fields["domainIdText"][t], ()))
                      for t in sorted(index.scope_fields["domainIdText"])]

    meta = struct.pack("<IIH", index.skip_interval, len(index.docs), len(index.embed_spec))
    meta += b"".join(_pack_str(a) for a in index.embed_spec)

    skip_sec = struct.pack("<I", len(skip_flat))
    skip_sec += b"".join(struct.pack("<IIQ", d, o, off) for d, o, off in skip_flat)

    docs_sec = [struct.pack("<I", len(index.docs))]
    for e in index.docs:
        docs_sec.append(_pack_str(e.doc_key))
        docs_sec.append(_pack_str(e.url))
        docs_sec.append(struct.pack("<qqd", e.site_id, e.domain_id, e.rank))

    sections = {
        b"META": meta,
        b"DICT": encode_dict(dict_entries),
        b"SDIC": encode_dict(site_entries),
        b"DDIC": encode_dict(domain_entries),
        b"SKIP": skip_sec,
        b"DOCS": b"".join(docs_sec),
        b"POST": b"".join(post_chunks),
    }

    header_len = len(MAGIC) + 4 + 4 + len(_SECTION_ORDER) * (4 + 8 + 8)
    table = []
    offset = header_len
    for tag in _SECTION_ORDER:
        table.append(struct.pack("<4sQQ", tag, offset, len(sections[tag])))
        offset += len(sections[tag])

    body = (
        MAGIC
        + struct.pack("<II", VERSION, len(_SECTION_ORDER))
        + b"".join(table)
        + b"".join(sections[tag] for tag in _SECTION_ORDER)
    )
    try:
        with open(path, "wb") as f:
            f.write(body)
            f.write(_checksum(body))
    except OSError as exc:
        raise IndexFileError(f"cannot write index file {path}: {exc}") from exc

    return IndexFileSummary(
        path=str(path),
        file_bytes=len(body) + 8,
        section_bytes={tag.decode(): len(sections[tag]) for tag in _SECTION_ORDER},
        tokens=len(dict_entries),
        postings=sum(e.count for _, e in dict_entries)
        + sum(e.count for _, e in site_entries)
        + sum(e.count for _, e in domain_entries),
        docs=len(index.docs),
    )


class BufferPool:
    """Bounded LRU page cache over the posting section of one index file.

    Pages are fetched through ``fetch(page_index)``; ``capacity_bytes``
    counts cached page bytes only (pinned sections live outside the pool).
    Counter updates and eviction are serialized by a lock so concurrent
    readers observe a linearizable hit/miss/eviction history.
    """

    def __init__(self, fetch, capacity_bytes: int, page_size: int = PAGE_SIZE):
        self._fetch = fetch
        self.page_size = page_size
        self.capacity_pages = max(0, capacity_bytes // page_size)
        self._pages: OrderedDict[int, bytes] = OrderedDict()
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0
        self.evictions = 0
        self.trace: list[int] | None = None  # page access log when enabled

    def get_page(self, page_index: int) -> bytes:
        with self._lock:
            if self.trace is not None:
                self.trace.append(page_index)
            page = self._pages.get(page_index)
            if page is not None:
                self.hits += 1
                self._pages.move_to_end(page_index)
                return page
            self.misses += 1
            page = self._fetch(page_index)
            if self.capacity_pages > 0:
                while len(self._pages) >= self.capacity_pages:
                    self._pages.popitem(last=False)
                    self.evictions += 1
                self._pages[page_index] = page
            return page

    def read(self, offset: int, size: int) -> bytes:
        """Read a byte range of the posting section through the cache."""
        if size == 0:
            return b""
        first = offset // self.page_size
        last = (offset + size - 1) // self.page_size
        parts = []
        for page_index in range(first, last + 1):
            page = self.get_page(page_index)
            start = offset - page_index * self.page_size if page_index == first else 0
            end = min(len(page), offset + size - page_index * self.page_size)
            parts.append(page[start:end])
        return b"".join(parts)

    @property
    def resident_bytes(self) -> int:
        with self._lock:
            return sum(len(p) for p in self._pages.values())

    def counters(self) -> dict[str, int]:
        with self._lock:
            return {"hits": self.hits, "misses": self.misses, "evictions": self.evictions}

    def reset_counters(self):
        with self._lock:
            self.hits = self.misses = self.evictions = 0


_POSTING_HEADER = struct.Struct("<IHB")


class PagedCursor(PostingCursor):
    """Posting cursor that decodes postings straight off buffer-pool pages."""

    def __init__(self, pool: BufferPool, entry: DictEntry, skips, embed_spec):
        super().__init__([d for d, _, _ in skips], entry.count)
        self._pool = pool
        self._entry = entry
        self._skips = skips
        self._embed_spec = embed_spec
        self._byte = 0  # next decode position, relative to the list start

    def _decode_at(self, rel: int) -> tuple[Posting, int]:
        base = self._entry.offset + rel
        doc_id, noff, nemb = _POSTING_HEADER.unpack(self._pool.read(base, _POSTING_HEADER.size))
        body_size = 4 * noff + 8 * nemb
        body = self._pool.read(base + _POSTING_HEADER.size, body_size)
        values = struct.unpack(f"<{noff}I{nemb}q", body)
        offsets = values[:noff]
        embedded = dict(zip(self._embed_spec, values[noff:]))
        return Posting(doc_id, tuple(offsets), embedded), rel + _POSTING_HEADER.size + body_size

    def _load(self, ordinal, skip_slot):
        if skip_slot is not None:
            self._byte = self._skips[skip_slot][2]
        posting, self._byte = self._decode_at(self._byte)
        return posting

    def _skip_ordinal(self, slot):
        return self._skips[slot][1]


class StoredIndex:
    """Queryable handle over an index file: pinned internal structures plus
    a buffer pool for posting pages. Duck-type compatible with IrIndex for
    every search operation."""

    def __init__(self, path, buffer_bytes: int):
        try:
            with open(path, "rb") as f:
                raw = f.read()
        except OSError as exc:
            raise IndexFileError(f"cannot read index file {path}: {exc}") from exc
        if len(raw) < len(MAGIC) + 16 or raw[:4] != MAGIC:
            raise IndexFileError(f"{path}: not an index file (bad magic)")
        if _checksum(raw[:-8]) != raw[-8:]:
            raise IndexFileError(f"{path}: checksum mismatch, file corrupted")
        version, nsections = struct.unpack_from("<II", raw, 4)
        if version != VERSION:
            raise IndexFileError(f"{path}: unsupported version {version}")

        sections = {}
        pos = 12
        for _ in range(nsections):
            tag, off, length = struct.unpack_from("<4sQQ", raw, pos)
            pos += 20
            if off + length > len(raw) - 8:
                raise IndexFileError(f"{path}: section {tag!r} out of bounds")
            sections[tag] = (off, length)
        for tag in _SECTION_ORDER:
            if tag not in sections:
                raise IndexFileError(f"{path}: missing section {tag!r}")

        self.path = str(path)
        post_off, post_len = sections[b"POST"]

        meta = _Reader(raw[slice(*_span(sections[b"META"]))])
        self.skip_interval, doc_count, n_embed = meta.unpack("<IIH")
        self.embed_spec = tuple(meta.read_str() for _ in range(n_embed))

        self._dict = self._parse_dict(raw, sections[b"DICT"], post_len, path)
        self._site = self._parse_dict(raw, sections[b"SDIC"], post_len, path)
        self._domain = self._parse_dict(raw, sections[b"DDIC"], post_len, path)

        skip = _Reader(raw[slice(*_span(sections[b"SKIP"]))])
        (n_skips,) = skip.unpack("<I")
        self._skips = [skip.unpack("<IIQ") for _ in range(n_skips)]

        docs = _Reader(raw[slice(*_span(sections[b"DOCS"]))])
        (n_docs,) = docs.unpack("<I")
        if n_docs != doc_count:
            raise IndexFileError(f"{path}: DOCS count disagrees with META")
        self.docs = []
        for _ in range(n_docs):
            key = docs.read_str()
            url = docs.read_str()
            site, domain, rank = docs.unpack("<qqd")
            self.docs.append(DocEntry(key, url, site, domain, rank))

        # pinned: every byte that is not the posting section
        self.pinned_bytes = (len(raw) - 8) - post_len
        if buffer_bytes < self.pinned_bytes:
            raise BufferConfigError(
                f"bufferBytes={buffer_bytes} cannot hold the pinned sections "
                f"({self.pinned_bytes} bytes) of {path}"
            )
        self.buffer_bytes = buffer_bytes
        self._file = open(path, "rb")
        self._file_lock = threading.Lock()
        self._post_off = post_off
        self._post_len = post_len
        self.pool = BufferPool(self._fetch_page, buffer_bytes - self.pinned_bytes)

    @staticmethod
    def _parse_dict(raw, span, post_len, path):
        r = _Reader(raw[slice(*_span(span))])
        (n,) = r.unpack("<I")
        out = {}
        for _ in range(n):
            token = r.read_str()
            off, length, count, emb, skip_start, skip_count = r.unpack("<QQIBQI")
            if off + length > post_len:
                raise IndexFileError(f"{path}: dictionary entry {token!r} outside POST section")
            out[token] = DictEntry(off, length, count, emb, skip_start, skip_count)
        return out

    def _fetch_page(self, page_index: int) -> bytes:
        start = page_index * self.pool.page_size
        size = min(self.pool.page_size, self._post_len - start)
        with self._file_lock:
            self._file.seek(self._post_off + start)
            return self._file.read(size)

    def close(self):
        self._file.close()

    # -- query surface, mirroring IrIndex ------------------------------

    @property
    def dictionary(self):
        return self._dict

    def doc_entry(self, doc_id: int) -> DocEntry:
        return self.docs[doc_id]

    def _cursor(self, entry: DictEntry, embed_spec) -> PagedCursor:
        skips = self._skips[entry.skip_start : entry.skip_start + entry.skip_count]
        cursor = PagedCursor(self.pool, entry, skips, embed_spec)
        cursor.start()
        return cursor

    def content_cursor(self, token: str) -> PagedCursor | None:
        entry = self._dict.get(token)
        if entry is None:
            return None
        return self._cursor(entry, self.embed_spec)

    def scope_cursor(self, text_field: str, term: str) -> PagedCursor | None:
        table = {"siteIdText": self._site, "domainIdText": self._domain}.get(text_field)
        if table is None:
            raise UnsupportedPredicateError(f"no scope field {text_field!r}")
        entry = table.get(term)
        if entry is None:
            return None
        return self._cursor(entry, ())

    def buffer_stats(self) -> dict[str, int]:
        stats = self.pool.counters()
        stats["pinned_bytes"] = self.pinned_bytes
        stats["resident_bytes"] = self.pool.resident_bytes
        return stats


def _span(section) -> tuple[int, int]:
    off, length = section
    return off, off + length


def load_index(path, buffer_bytes: int) -> StoredIndex:
    """Open an index file with a total memory budget of buffer_bytes
    (pinned sections plus posting page cache)."""
    return StoredIndex(path, buffer_bytes)
