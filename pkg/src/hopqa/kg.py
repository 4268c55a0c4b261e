"""Per-question knowledge graph construction and "Row n:" linearization.

Entities are found by longest-match lookup in a lexicon and relations by
lookup in a ground-truth relation table.  Both extractors can be swapped out
through :func:`build_graph`'s keyword arguments.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

from .data import Source
from .vocab import CLS, detokenize, word_tokens


class ParseError(ValueError):
    def __init__(self, row: int, message: str):
        self.row = row
        super().__init__(f"row {row}: {message}")


@dataclass(frozen=True)
class EntityMention:
    surface: str
    entity_id: str
    source_id: str
    location: str  # title | body | caption
    span: tuple[int, int]


@dataclass(frozen=True)
class Triplet:
    head: str
    relation: str
    tail: str


@dataclass
class KnowledgeGraph:
    heads: list[str] = field(default_factory=list)
    edges: dict[str, list[tuple[str, str]]] = field(default_factory=dict)  # head -> [(relation, tail)]
    provenance: dict[str, list[str]] = field(default_factory=dict, compare=False)
    triplet_sources: dict[Triplet, list[str]] = field(default_factory=dict, compare=False)
    source_entities: dict[str, list[str]] = field(default_factory=dict, compare=False)

    def triplets(self) -> list[Triplet]:
        return [Triplet(h, r, t) for h in self.heads for r, t in self.edges.get(h, [])]

    def prefix(self, rows: int) -> "KnowledgeGraph":
        heads = self.heads[:rows]
        return KnowledgeGraph(heads=list(heads), edges={h: list(self.edges.get(h, [])) for h in heads})

    def __len__(self) -> int:
        return len(self.heads)


@dataclass
class EntitySpan:
    entity_id: str
    role: str  # head | tail
    row: int  # 1-based
    start: int
    end: int


@dataclass
class LinearizedKG:
    tokens: list[str]
    spans: list[EntitySpan]
    rows: dict[str, int]  # head entity -> row number
    truncated: bool
    graph: KnowledgeGraph

    @property
    def text(self) -> str:
        return detokenize(self.tokens)

    @property
    def head_spans(self) -> list[tuple[int, int]]:
        """Token span of each surviving head entity, in row order."""
        return [(s.start, s.end) for s in self.spans if s.role == "head"]

    def __len__(self) -> int:
        return len(self.tokens)


# ---------------------------------------------------------------- extraction


def _lexicon_index(lexicon: Mapping[str, str]) -> tuple[dict[tuple[str, ...], str], int]:
    index = {tuple(word_tokens(surface)): eid for surface, eid in lexicon.items()}
    longest = max((len(k) for k in index), default=0)
    return index, longest


def match_entities(tokens: list[str], lexicon: Mapping[str, str]) -> list[tuple[int, int, str]]:
    """Leftmost-longest, non-overlapping lexicon matches as (start, end, entity id)."""
    index, longest = _lexicon_index(lexicon)
    out = []
    i = 0
    while i < len(tokens):
        for n in range(min(longest, len(tokens) - i), 0, -1):
            eid = index.get(tuple(tokens[i:i + n]))
            if eid is not None:
                out.append((i, i + n, eid))
                i += n
                break
        else:
            i += 1
    return out


def extract_entities(source: Source, lexicon: Mapping[str, str]) -> list[EntityMention]:
    fields = ("title", "body") if source.kind == "text" else ("caption",)
    mentions = []
    for loc in fields:
        toks = word_tokens(getattr(source, loc))
        for start, end, eid in match_entities(toks, lexicon):
            mentions.append(EntityMention(" ".join(toks[start:end]), eid, source.id, loc, (start, end)))
    return mentions


def assign_roles(mentions: list[EntityMention], source_kind: str) -> tuple[list[EntityMention], list[EntityMention]]:
    """Title entities are heads, body entities tails; caption entities are both."""
    if source_kind == "image":
        caps = [m for m in mentions if m.location == "caption"]
        return caps, list(caps)
    if source_kind != "text":
        raise ValueError(f"unknown source kind {source_kind!r}")
    heads = [m for m in mentions if m.location == "title"]
    tails = [m for m in mentions if m.location == "body"]
    return heads, tails


def index_relations(triplets: Iterable) -> dict[tuple[str, str], list[str]]:
    """(head, tail) -> sorted relation ids."""
    table: dict[tuple[str, str], set[str]] = defaultdict(set)
    for t in triplets:
        h, r, tl = (t.head, t.relation, t.tail) if isinstance(t, Triplet) else t
        table[(h, tl)].add(r)
    return {k: sorted(v) for k, v in table.items()}


def extract_relations(heads: list[str], tails: list[str], relation_table) -> list[Triplet]:
    if not isinstance(relation_table, dict):
        relation_table = index_relations(relation_table)
    out = []
    seen = set()
    for h in heads:
        for t in tails:
            if h == t:
                continue
            for r in relation_table.get((h, t), ()):
                trip = Triplet(h, r, t)
                if trip not in seen:
                    seen.add(trip)
                    out.append(trip)
    return out


def build_graph(
    sources: list[Source],
    lexicon: Mapping[str, str],
    relation_table,
    *,
    entity_extractor: Callable[[Source, Mapping[str, str]], list[EntityMention]] = extract_entities,
    relation_extractor: Callable[[list[str], list[str], dict], list[Triplet]] = extract_relations,
) -> KnowledgeGraph:
    """One graph for all sources; heads in first-mention order over the source list."""
    if not isinstance(relation_table, dict):
        relation_table = index_relations(relation_table)
    graph = KnowledgeGraph()
    for src in sources:
        mentions = entity_extractor(src, lexicon)
        graph.source_entities[src.id] = _unique(m.entity_id for m in mentions)
        head_m, tail_m = assign_roles(mentions, src.kind)
        heads = _unique(m.entity_id for m in head_m)
        tails = _unique(m.entity_id for m in tail_m)
        for eid in _unique([*heads, *tails]):
            srcs = graph.provenance.setdefault(eid, [])
            if src.id not in srcs:
                srcs.append(src.id)
        for h in heads:
            if h not in graph.edges:
                graph.heads.append(h)
                graph.edges[h] = []
        for trip in relation_extractor(heads, tails, relation_table):
            srcs = graph.triplet_sources.get(trip)
            if srcs is None:
                graph.triplet_sources[trip] = [src.id]
                graph.edges[trip.head].append((trip.relation, trip.tail))
            elif src.id not in srcs:
                srcs.append(src.id)
    return graph


def _unique(items: Iterable[str]) -> list[str]:
    seen = set()
    out = []
    for x in items:
        if x not in seen:
            seen.add(x)
            out.append(x)
    return out


# ---------------------------------------------------------------- linearize / parse


def _row_tokens(row: int, head: str, pairs, names, relation_names):
    """Tokens for one row plus (entity, role, offset, length) span records."""
    toks = ["Row", str(row), ":"]
    spans = []
    htoks = word_tokens(names[head])
    spans.append((head, "head", len(toks), len(htoks)))
    toks += htoks
    if not pairs:
        toks.append(".")
        return toks, spans
    toks.append(":")
    for j, (rel, tail) in enumerate(pairs):
        toks += word_tokens(relation_names[rel])
        toks.append(",")
        ttoks = word_tokens(names[tail])
        spans.append((tail, "tail", len(toks), len(ttoks)))
        toks += ttoks
        toks.append(";" if j < len(pairs) - 1 else ".")
    return toks, spans


def linearize(
    graph: KnowledgeGraph,
    names: Mapping[str, str],
    relation_names: Mapping[str, str],
    max_length: int = 256,
) -> LinearizedKG:
    """Flatten to ``[CLS] Row 1: head: rel, tail; rel, tail. Row 2: ...``.

    Rows that do not fit in ``max_length`` tokens are dropped whole, from the end.
    """
    if max_length < 1:
        raise ValueError("max_length must be >= 1")
    tokens = [CLS]
    spans: list[EntitySpan] = []
    rows: dict[str, int] = {}
    truncated = False
    kept = 0
    for k, head in enumerate(graph.heads, start=1):
        row_toks, row_spans = _row_tokens(k, head, graph.edges.get(head, []), names, relation_names)
        if len(tokens) + len(row_toks) > max_length:
            truncated = True
            break
        base = len(tokens)
        for eid, role, off, n in row_spans:
            spans.append(EntitySpan(eid, role, k, base + off, base + off + n))
        tokens += row_toks
        rows[head] = k
        kept = k
    return LinearizedKG(tokens, spans, rows, truncated, graph.prefix(kept))


def parse_linearized(
    tokens: list[str],
    lexicon: Mapping[str, str],
    relation_lexicon: Mapping[str, str],
) -> KnowledgeGraph:
    """Inverse of :func:`linearize` (on whatever rows survived truncation)."""
    if isinstance(tokens, str):
        tokens = word_tokens(tokens)
    if not tokens or tokens[0] != CLS:
        raise ParseError(0, "sequence must start with [CLS]")
    graph = KnowledgeGraph()
    pos = 1
    row = 0

    def take_until(stops, row):
        nonlocal pos
        start = pos
        while pos < len(tokens) and tokens[pos] not in stops:
            if tokens[pos] == "Row" and pos + 2 < len(tokens) and tokens[pos + 2] == ":" and tokens[pos + 1].isdigit():
                raise ParseError(row, "row ended without '.'")
            pos += 1
        if pos >= len(tokens):
            raise ParseError(row, "unexpected end of sequence")
        if pos == start:
            raise ParseError(row, f"empty field before {tokens[pos]!r}")
        return " ".join(tokens[start:pos])

    def entity(surface, row):
        try:
            return lexicon[surface]
        except KeyError:
            raise ParseError(row, f"unknown entity {surface!r}") from None

    while pos < len(tokens):
        row += 1
        if tokens[pos:pos + 3] != ["Row", str(row), ":"]:
            raise ParseError(row, f"expected 'Row {row}:' at token {pos}")
        pos += 3
        head = entity(take_until({":", "."}, row), row)
        if head in graph.edges:
            raise ParseError(row, f"duplicate head {head!r}")
        graph.heads.append(head)
        graph.edges[head] = []
        if tokens[pos] == ".":
            pos += 1
            continue
        pos += 1
        while True:
            rel_surface = take_until({","}, row)
            if rel_surface not in relation_lexicon:
                raise ParseError(row, f"unknown relation {rel_surface!r}")
            pos += 1
            tail = entity(take_until({";", "."}, row), row)
            graph.edges[head].append((relation_lexicon[rel_surface], tail))
            end = tokens[pos]
            pos += 1
            if end == ".":
                break
    return graph
