"""Mini SQL-like query language for top-k keyword search.

Grammar (SQL words are case-insensitive, keywords are lowercased):

    SELECT TOP <k> WHERE MATCH(content, "<kw>" [AND "<kw>"]...)
                   [AND siteId = <int> | AND domainId = <int>]

Every query resolves to one of three search condition types:
``single`` (one keyword, no scope), ``multi`` (several keywords, no
scope) and ``limited`` (any number of keywords plus a siteId or
domainId scope predicate).
"""

from __future__ import annotations

import re
from dataclasses import dataclass

SINGLE = "single"
MULTI = "multi"
LIMITED = "limited"

CONDITION_TYPES = (SINGLE, MULTI, LIMITED)
SCOPE_FIELDS = ("siteId", "domainId")

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<string>"[^"]*")
  | (?P<int>-?\d+)
  | (?P<word>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<punct>[(),=])
    """,
    re.VERBOSE,
)

_KEYWORD_RE = re.compile(r"[0-9a-z]+\Z")


class QuerySyntaxError(ValueError):
    """Raised when a query text does not match the grammar.

    ``position`` is the 0-based character offset of the offending token.
    """

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at position {position})")
        self.position = position


@dataclass(frozen=True)
class Query:
    """A canonical parsed query."""

    condition_type: str
    keywords: tuple[str, ...]
    scope: tuple[str, int] | None
    k: int

    def __post_init__(self):
        if self.condition_type not in CONDITION_TYPES:
            raise ValueError(f"unknown condition type {self.condition_type!r}")
        if not self.keywords:
            raise ValueError("query needs at least one keyword")
        for kw in self.keywords:
            if not _KEYWORD_RE.match(kw):
                raise ValueError(f"keyword {kw!r} is not a single lowercase token")
        if self.k < 1:
            raise ValueError(f"k must be positive, got {self.k}")
        if self.scope is not None and self.scope[0] not in SCOPE_FIELDS:
            raise ValueError(f"unknown scope field {self.scope[0]!r}")
        expected = _condition_type(self.keywords, self.scope)
        if self.condition_type != expected:
            raise ValueError(
                f"condition type {self.condition_type!r} inconsistent with "
                f"{len(self.keywords)} keyword(s), scope={self.scope!r}"
            )


def _condition_type(keywords, scope) -> str:
    if scope is not None:
        return LIMITED
    return SINGLE if len(keywords) == 1 else MULTI


def make_query(keywords, scope=None, k: int = 10) -> Query:
    """Build a canonical Query, deriving the condition type."""
    kws = tuple(keywords)
    return Query(_condition_type(kws, scope), kws, scope, k)


class _Token:
    __slots__ = ("kind", "text", "pos")

    def __init__(self, kind, text, pos):
        self.kind = kind
        self.text = text
        self.pos = pos


def _scan(text: str) -> list[_Token]:
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise QuerySyntaxError(f"unexpected character {text[pos]!r}", pos)
        if m.lastgroup != "ws":
            tokens.append(_Token(m.lastgroup, m.group(), pos))
        pos = m.end()
    tokens.append(_Token("eof", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens = _scan(text)
        self.i = 0

    def peek(self) -> _Token:
        return self.tokens[self.i]

    def next(self) -> _Token:
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def fail(self, message: str, tok: _Token | None = None):
        tok = tok or self.peek()
        raise QuerySyntaxError(message, tok.pos)

    def expect_word(self, word: str) -> _Token:
        tok = self.next()
        if tok.kind != "word" or tok.text.lower() != word.lower():
            self.fail(f"expected {word!r}", tok)
        return tok

    def expect_punct(self, ch: str) -> _Token:
        tok = self.next()
        if tok.kind != "punct" or tok.text != ch:
            self.fail(f"expected {ch!r}", tok)
        return tok

    def expect_int(self) -> tuple[int, _Token]:
        tok = self.next()
        if tok.kind != "int":
            self.fail("expected an integer", tok)
        return int(tok.text), tok

    def at_word(self, word: str) -> bool:
        tok = self.peek()
        return tok.kind == "word" and tok.text.lower() == word.lower()


def parse_query(text: str) -> Query:
    """Parse a query text into a canonical Query.

    Raises QuerySyntaxError (with character position) on malformed input,
    non-positive k, an empty MATCH list, or a quoted string that is not a
    single indexable token.
    """
    p = _Parser(text)
    p.expect_word("SELECT")
    p.expect_word("TOP")
    k, ktok = p.expect_int()
    if k < 1:
        p.fail(f"TOP must be positive, got {k}", ktok)
    p.expect_word("WHERE")
    p.expect_word("MATCH")
    p.expect_punct("(")
    col = p.next()
    if col.kind != "word" or col.text.lower() != "content":
        p.fail("MATCH column must be 'content'", col)
    p.expect_punct(",")

    keywords = [_parse_keyword(p)]
    while p.at_word("AND"):
        p.next()
        keywords.append(_parse_keyword(p))
    p.expect_punct(")")

    scope = None
    if p.at_word("AND"):
        p.next()
        field_tok = p.next()
        field = _scope_field(field_tok)
        if field is None:
            p.fail("expected siteId or domainId", field_tok)
        p.expect_punct("=")
        value, _ = p.expect_int()
        scope = (field, value)

    tok = p.peek()
    if tok.kind != "eof":
        p.fail(f"unexpected trailing input {tok.text!r}", tok)
    return make_query(keywords, scope, k)


def _parse_keyword(p: _Parser) -> str:
    tok = p.next()
    if tok.kind != "string":
        p.fail("expected a quoted keyword", tok)
    raw = tok.text[1:-1].lower()
    if not _KEYWORD_RE.match(raw):
        p.fail(f"keyword {raw!r} is not a single indexable token", tok)
    return raw


def _scope_field(tok: _Token) -> str | None:
    if tok.kind != "word":
        return None
    lowered = tok.text.lower()
    for field in SCOPE_FIELDS:
        if field.lower() == lowered:
            return field
    return None


def format_query(query: Query) -> str:
    """Render a Query as canonical text; parse_query(format_query(q)) == q."""
    match = " AND ".join(f'"{kw}"' for kw in query.keywords)
    text = f"SELECT TOP {query.k} WHERE MATCH(content, {match})"
    if query.scope is not None:
        field, value = query.scope
        text += f" AND {field} = {value}"
    return text
