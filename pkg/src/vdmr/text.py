"""Query parsing: tokenization, noun-chunk extraction and static/dynamic masking.

A query sentence is split into its noun chunks (entities) and everything
else (dynamics).  The static query keeps the chunks and masks the rest;
the dynamic query masks the chunks and keeps the rest.  The two masked
views always partition the token positions.
"""

from __future__ import annotations

import string
from dataclasses import dataclass, field
from importlib import resources
from typing import Protocol, Sequence

from .errors import EmptyContent

MASK_TOKEN = "[MASK]"

# Word classes that may participate in a noun chunk.
CHUNK_CLASSES = frozenset({"NOUN", "ADJ", "DET", "POSS"})

_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


def tokenize(raw: str) -> list[str]:
    """Lowercase, strip punctuation and split on whitespace."""
    out = []
    for piece in raw.lower().split():
        word = piece.translate(_PUNCT_TABLE)
        if word:
            out.append(word)
    return out


@dataclass(frozen=True)
class QuerySentence:
    raw: str
    tokens: tuple[str, ...]

    def __post_init__(self):
        if not self.tokens:
            raise ValueError("query sentence has no tokens")

    @classmethod
    def from_raw(cls, raw: str) -> "QuerySentence":
        return cls(raw=raw, tokens=tuple(tokenize(raw)))


@dataclass(frozen=True, order=True)
class NounChunkSpan:
    """Half-open token span [start_token, end_token)."""

    start_token: int
    end_token: int

    def __post_init__(self):
        if not 0 <= self.start_token < self.end_token:
            raise ValueError(f"bad span ({self.start_token}, {self.end_token})")

    def __contains__(self, position: int) -> bool:
        return self.start_token <= position < self.end_token


@dataclass
class MaskedQueryPair:
    original: QuerySentence
    static_query: list[str]
    dynamic_query: list[str]
    chunk_spans: list[NounChunkSpan] = field(default_factory=list)


class Chunker(Protocol):
    """Backend contract for noun-chunk extraction.

    An external parser (e.g. a full NLP pipeline) can be plugged in by
    wrapping it in an object with this method; it must return disjoint,
    sorted half-open token spans.
    """

    def chunks(self, tokens: Sequence[str]) -> list[NounChunkSpan]: ...


def load_lexicon(path=None) -> dict[str, str]:
    """Read a word-class lexicon: one ``word<TAB>class`` per line."""
    if path is None:
        text = resources.files("vdmr").joinpath("lexicon.tsv").read_text("utf-8")
    else:
        with open(path, encoding="utf-8") as f:
            text = f.read()
    lexicon = {}
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        word, cls = line.split("\t")
        lexicon[word] = cls
    return lexicon


class RuleBasedChunker:
    """Deterministic shallow chunker over a closed word-class lexicon.

    A chunk is a maximal run of {DET, POSS, ADJ, NOUN} tokens, truncated
    after its last NOUN.  Runs with no noun produce no chunk.
    """

    def __init__(self, lexicon: dict[str, str] | None = None):
        self.lexicon = lexicon if lexicon is not None else load_lexicon()

    def word_class(self, token: str) -> str | None:
        return self.lexicon.get(token)

    def chunks(self, tokens: Sequence[str]) -> list[NounChunkSpan]:
        spans: list[NounChunkSpan] = []
        i = 0
        n = len(tokens)
        while i < n:
            if self.lexicon.get(tokens[i]) in CHUNK_CLASSES:
                j = i
                while j < n and self.lexicon.get(tokens[j]) in CHUNK_CLASSES:
                    j += 1
                last_noun = None
                for k in range(i, j):
                    if self.lexicon.get(tokens[k]) == "NOUN":
                        last_noun = k
                if last_noun is not None:
                    spans.append(NounChunkSpan(i, last_noun + 1))
                i = j
            else:
                i += 1
        return spans


_default_chunker: RuleBasedChunker | None = None


def default_chunker() -> RuleBasedChunker:
    global _default_chunker
    if _default_chunker is None:
        _default_chunker = RuleBasedChunker()
    return _default_chunker


def extract_noun_chunks(q: QuerySentence,
                        chunker: Chunker | None = None) -> list[NounChunkSpan]:
    """Noun-chunk spans of a sentence; empty when no noun is present."""
    backend = chunker if chunker is not None else default_chunker()
    return backend.chunks(q.tokens)


def _validate_spans(spans: Sequence[NounChunkSpan], num_tokens: int) -> None:
    prev_end = 0
    for span in spans:
        if span.start_token < prev_end:
            raise ValueError("chunk spans overlap or are unsorted")
        if span.end_token > num_tokens:
            raise ValueError("chunk span exceeds sentence length")
        prev_end = span.end_token


def make_masked_pair(q: QuerySentence,
                     spans: Sequence[NounChunkSpan],
                     mask_token: str = MASK_TOKEN) -> MaskedQueryPair:
    """Build the static (chunks kept) and dynamic (chunks masked) queries.

    Raises EmptyContent when either view would be all-mask, i.e. the
    spans cover every token or none.
    """
    spans = sorted(spans)
    _validate_spans(spans, len(q.tokens))
    in_chunk = [False] * len(q.tokens)
    for span in spans:
        for p in range(span.start_token, span.end_token):
            in_chunk[p] = True
    covered = sum(in_chunk)
    if covered == len(q.tokens):
        raise EmptyContent(f"chunks cover all tokens of {q.raw!r}")
    if covered == 0:
        raise EmptyContent(f"no chunk in {q.raw!r}")
    static_query = [t if c else mask_token for t, c in zip(q.tokens, in_chunk)]
    dynamic_query = [mask_token if c else t for t, c in zip(q.tokens, in_chunk)]
    return MaskedQueryPair(original=q, static_query=static_query,
                           dynamic_query=dynamic_query, chunk_spans=list(spans))


def unmask(pair: MaskedQueryPair, mask_token: str = MASK_TOKEN) -> list[str]:
    """Reconstruct the original tokens from the two masked views."""
    return [s if d == mask_token else d
            for s, d in zip(pair.static_query, pair.dynamic_query)]


def parse_query(raw: str, chunker: Chunker | None = None,
                mask_token: str = MASK_TOKEN) -> MaskedQueryPair:
    """Tokenize, chunk and mask in one step."""
    q = QuerySentence.from_raw(raw)
    spans = extract_noun_chunks(q, chunker)
    return make_masked_pair(q, spans, mask_token)
