"""Map utterance text to knowledge-graph entities."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .kg_store import KnowledgeGraph
from .text import token_spans


class LinkingError(LookupError):
    def __init__(self, marker: str):
        self.marker = marker
        super().__init__(f"unresolvable mention marker @{marker}")


@dataclass
class EntitySequence:
    entity_ids: list[int] = field(default_factory=list)
    # (message index, (char start, char end)) per entity
    source_spans: list[tuple[int, tuple[int, int]]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entity_ids)

    def unique(self) -> list[int]:
        return list(dict.fromkeys(self.entity_ids))


class EntityLinker:
    """Longest-match surface-name lookup over token sequences.

    Names are tokenized exactly like utterances, so a match always starts and
    ends on a token boundary ("thrillerx" never matches "thriller"). When one
    surface form names several entities the lowest id wins.
    """

    def __init__(self, graph: KnowledgeGraph):
        self.graph = graph
        names: dict[tuple[str, ...], int] = {}
        for ent in graph.entities:
            key = tuple(tok for tok, _, _ in token_spans(ent.name))
            if key and key not in names:
                names[key] = ent.id
        self.names = names
        self.max_len = max((len(k) for k in names), default=0)
        by_first: dict[str, list[int]] = defaultdict(list)
        for key in names:
            by_first[key[0]].append(len(key))
        self._lengths = {k: sorted(set(v), reverse=True) for k, v in by_first.items()}

    def link_text(self, text: str, markers: Mapping[str, int | None] | None = None) -> list[tuple[int, int, int]]:
        """Return ``(entity, start, end)`` character spans in text order."""
        toks = token_spans(text)
        table = {m.casefold(): e for m, e in markers.items()} if markers is not None else None
        found: list[tuple[int, int, int, int]] = []  # (start_tok, end_tok, entity, is_marker)
        for i, (tok, _, _) in enumerate(toks):
            if tok.startswith("@") and len(tok) > 1:
                key = tok[1:]
                if table is not None:
                    ent = table.get(key)
                    if ent is None:
                        raise LinkingError(key)
                    found.append((i, i + 1, ent, 1))
                continue
            for n in self._lengths.get(tok, ()):
                cand = tuple(t for t, _, _ in toks[i : i + n])
                if len(cand) == n and cand in self.names:
                    found.append((i, i + n, self.names[cand], 0))
        # longest first, then leftmost; markers always win their own token
        found.sort(key=lambda f: (-f[3], -(f[1] - f[0]), f[0]))
        taken = [False] * len(toks)
        kept = []
        for s, e, ent, _ in found:
            if any(taken[s:e]):
                continue
            for k in range(s, e):
                taken[k] = True
            kept.append((s, e, ent))
        kept.sort()
        return [(ent, toks[s][1], toks[e - 1][2]) for s, e, ent in kept]


def _linker(graph: KnowledgeGraph) -> EntityLinker:
    cached = getattr(graph, "_linker", None)
    if cached is None:
        cached = EntityLinker(graph)
        graph._linker = cached
    return cached


def link_entities(context: Sequence, graph: KnowledgeGraph, markers: Mapping[str, int | None] | None = None) -> EntitySequence:
    """Link every message left to right.

    ``context`` holds plain strings or message objects with ``text`` and
    ``mention_markers``; a message's own markers take precedence over the
    shared ``markers`` table.
    """
    linker = _linker(graph)
    seq = EntitySequence()
    for idx, msg in enumerate(context):
        if isinstance(msg, str):
            text, table = msg, markers
        else:
            text = msg.text
            own = dict(getattr(msg, "mention_markers", None) or {})
            table = {**(markers or {}), **own} if (own or markers is not None) else None
        for ent, start, end in linker.link_text(text, table):
            seq.entity_ids.append(ent)
            seq.source_spans.append((idx, (start, end)))
    return seq
