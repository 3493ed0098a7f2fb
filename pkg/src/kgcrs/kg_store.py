"""Knowledge graph storage, neighbor indexing and movie-domain graph construction."""

from __future__ import annotations

import json
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import IO, Iterable, Mapping, Sequence

NODE_TYPES = ("genre", "movie", "cast", "crew", "keyword", "production", "generic")

# crew department -> relation name; "generic crew" is the plain crew relation
CREW_DEPARTMENTS = {
    "production": "production",
    "sound": "sound",
    "editing": "editing",
    "directing": "directing",
    "writing": "writing",
    "art": "art",
    "costume & make-up": "costume_make_up",
    "camera": "camera",
    "visual effect": "visual_effect",
    "lighting": "lighting",
    "generic crew": "crew",
}

DEFAULT_THRESHOLDS = {"keyword": 4, "cast": 4, "company": 4, "crew": 10, "genre": 1}


class KgParseError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class KgReferenceError(KeyError):
    pass


@dataclass(frozen=True)
class Triple:
    head: int
    relation: int
    tail: int


@dataclass(frozen=True)
class Entity:
    id: int
    node_type: str
    name: str


@dataclass
class KgStats:
    node_counts: dict[str, int]
    edge_counts: dict[str, int]
    total_nodes: int
    total_edges: int


@dataclass
class DomainRecord:
    title: str
    year: int | None = None
    genres: list[str] = field(default_factory=list)
    cast: list[str] = field(default_factory=list)
    crew: list[tuple[str, str]] = field(default_factory=list)
    keywords: list[str] = field(default_factory=list)
    companies: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.title:
            raise ValueError("record title must be nonempty")
        for _, dept in self.crew:
            if dept.lower() not in CREW_DEPARTMENTS:
                raise ValueError(f"unknown crew department {dept!r}")

    @classmethod
    def from_json(cls, obj: Mapping) -> "DomainRecord":
        def names(key):
            vals = obj.get(key, [])
            if not isinstance(vals, list) or not all(isinstance(v, str) for v in vals):
                raise ValueError(f"{key!r} must be a list of strings in record {obj.get('title')!r}")
            return list(vals)

        crew_raw = obj.get("crew", [])
        if not isinstance(crew_raw, list):
            raise ValueError(f"'crew' must be a list in record {obj.get('title')!r}")
        crew = [(c["name"], c["department"]) for c in crew_raw]
        return cls(
            title=obj["title"],
            year=obj.get("year"),
            genres=names("genres"),
            cast=names("cast"),
            crew=crew,
            keywords=names("keywords"),
            companies=names("companies"),
        )


class KnowledgeGraph:
    """Immutable typed graph with bidirectional per-relation neighbor lists.

    Entity ids are dense integers ``0..n-1``. Each distinct triple adds its
    tail to the head's list and its head to the tail's list under the same
    relation; every list is sorted by entity id.
    """

    def __init__(
        self,
        entities: Sequence[Entity],
        relations: Sequence[str],
        triples: Iterable[Triple],
    ):
        for i, ent in enumerate(entities):
            if ent.id != i:
                raise KgReferenceError(f"entity ids must be dense, got {ent.id} at position {i}")
            if ent.node_type not in NODE_TYPES:
                raise ValueError(f"unknown node type {ent.node_type!r}")
        self.entities: tuple[Entity, ...] = tuple(entities)
        self.relations: tuple[str, ...] = tuple(relations)
        self.relation_ids = {name: i for i, name in enumerate(self.relations)}

        seen: dict[Triple, None] = {}
        n = len(self.entities)
        for t in triples:
            if not (0 <= t.head < n and 0 <= t.tail < n):
                raise KgReferenceError(f"dangling entity in triple {t}")
            if not 0 <= t.relation < len(self.relations):
                raise KgReferenceError(f"unknown relation in triple {t}")
            seen.setdefault(t, None)
        self.triples: tuple[Triple, ...] = tuple(seen)

        index: dict[tuple[int, int], list[int]] = defaultdict(list)
        for t in self.triples:
            index[(t.head, t.relation)].append(t.tail)
            index[(t.tail, t.relation)].append(t.head)
        self._index = {k: tuple(sorted(v)) for k, v in index.items()}
        self.item_ids: tuple[int, ...] = tuple(e.id for e in self.entities if e.node_type == "movie")
        self._item_pos = {e: i for i, e in enumerate(self.item_ids)}

    @property
    def num_entities(self) -> int:
        return len(self.entities)

    @property
    def num_relations(self) -> int:
        return len(self.relations)

    def neighbor_index(self, entity: int, relation: int) -> tuple[int, ...]:
        return self._index.get((entity, relation), ())

    def neighbor_lists(self):
        """Yield ``(entity, relation, neighbors)`` for every nonempty list."""
        for (e, r), nbrs in sorted(self._index.items()):
            yield e, r, nbrs

    def item_position(self, item: int) -> int:
        return self._item_pos[item]

    def is_item(self, entity: int) -> bool:
        return entity in self._item_pos

    def entity_by_name(self, name: str, node_type: str | None = None) -> int | None:
        if not hasattr(self, "_by_name"):
            by_name: dict[str, list[int]] = defaultdict(list)
            for ent in self.entities:
                by_name[ent.name.casefold()].append(ent.id)
            self._by_name = by_name
        for eid in self._by_name.get(name.casefold(), ()):
            if node_type is None or self.entities[eid].node_type == node_type:
                return eid
        return None

    def relabel(self, perm: Sequence[int]) -> "KnowledgeGraph":
        """Return a copy where old entity ``i`` becomes ``perm[i]``."""
        inv = [0] * len(perm)
        for old, new in enumerate(perm):
            inv[new] = old
        ents = [Entity(new, self.entities[inv[new]].node_type, self.entities[inv[new]].name) for new in range(len(perm))]
        triples = [Triple(perm[t.head], t.relation, perm[t.tail]) for t in self.triples]
        return KnowledgeGraph(ents, self.relations, triples)


def _fields(line: str, expected: int, lineno: int) -> list[str]:
    parts = line.rstrip("\n").rstrip("\r").split("\t")
    if len(parts) != expected:
        raise KgParseError(f"expected {expected} tab-separated fields, got {len(parts)}", lineno)
    return parts


def load_triples(triple_file: IO[str], entity_file: IO[str]) -> KnowledgeGraph:
    entities: list[Entity] = []
    for lineno, line in enumerate(entity_file, 1):
        if not line.strip() or line.startswith("#"):
            continue
        raw_id, node_type, name = _fields(line, 3, lineno)
        try:
            eid = int(raw_id)
        except ValueError:
            raise KgParseError(f"bad entity id {raw_id!r}", lineno) from None
        if eid != len(entities):
            raise KgParseError(f"entity ids must be dense and in file order, got {eid}", lineno)
        if node_type not in NODE_TYPES:
            raise KgParseError(f"unknown node type {node_type!r}", lineno)
        entities.append(Entity(eid, node_type, name))

    relations: dict[str, int] = {}
    triples: list[Triple] = []
    for lineno, line in enumerate(triple_file, 1):
        if line.startswith("#relations\t"):
            for name in line.rstrip("\r\n").split("\t")[1:]:
                relations.setdefault(name, len(relations))
            continue
        if not line.strip() or line.startswith("#"):
            continue
        h, rel, t = _fields(line, 3, lineno)
        try:
            head, tail = int(h), int(t)
        except ValueError:
            raise KgParseError("entity ids must be integers", lineno) from None
        for e in (head, tail):
            if not 0 <= e < len(entities):
                raise KgReferenceError(f"line {lineno}: dangling entity id {e}")
        rid = relations.setdefault(rel, len(relations))
        triples.append(Triple(head, rid, tail))
    return KnowledgeGraph(entities, list(relations), triples)


def write_triples(graph: KnowledgeGraph, triple_file: IO[str], entity_file: IO[str]) -> None:
    for ent in graph.entities:
        entity_file.write(f"{ent.id}\t{ent.node_type}\t{ent.name}\n")
    # relations without triples would vanish on reload, so declare them up front
    triple_file.write("#relations\t" + "\t".join(graph.relations) + "\n")
    for t in graph.triples:
        triple_file.write(f"{t.head}\t{graph.relations[t.relation]}\t{t.tail}\n")


def save_graph(graph: KnowledgeGraph, directory) -> None:
    from pathlib import Path

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "triples.tsv", "w", encoding="utf-8") as tf, open(d / "entities.tsv", "w", encoding="utf-8") as ef:
        write_triples(graph, tf, ef)


def load_graph(directory) -> KnowledgeGraph:
    from pathlib import Path

    d = Path(directory)
    with open(d / "triples.tsv", encoding="utf-8") as tf, open(d / "entities.tsv", encoding="utf-8") as ef:
        return load_triples(tf, ef)


def one_hop_neighbors(graph: KnowledgeGraph, item: int) -> list[int]:
    if not graph.is_item(item):
        raise KeyError(f"unknown item {item}")
    out: set[int] = set()
    for r in range(graph.num_relations):
        out.update(graph.neighbor_index(item, r))
    out.discard(item)
    return sorted(out)


def graph_stats(graph: KnowledgeGraph) -> KgStats:
    nodes = Counter(e.node_type for e in graph.entities)
    edges = Counter(graph.relations[t.relation] for t in graph.triples)
    return KgStats(
        node_counts={t: nodes.get(t, 0) for t in NODE_TYPES},
        edge_counts={name: edges.get(name, 0) for name in graph.relations},
        total_nodes=sum(nodes.values()),
        total_edges=sum(edges.values()),
    )


def load_records(stream: IO[str]) -> list[DomainRecord]:
    records = []
    for lineno, line in enumerate(stream, 1):
        if not line.strip():
            continue
        try:
            records.append(DomainRecord.from_json(json.loads(line)))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise KgParseError(str(exc), lineno) from exc
    return records


def _record_values(rec: DomainRecord) -> dict[str, list[tuple[str, str]]]:
    """Per-record deduplicated (value, relation) pairs keyed by attribute family."""

    def uniq(pairs):
        return list(dict.fromkeys(pairs))

    return {
        "genre": uniq((g, "genre") for g in rec.genres),
        "keyword": uniq((k, "keyword") for k in rec.keywords),
        "cast": uniq((c, "cast") for c in rec.cast),
        "company": uniq((c, "company") for c in rec.companies),
        "crew": uniq((name, CREW_DEPARTMENTS[dept.lower()]) for name, dept in rec.crew),
    }


_FAMILY_NODE_TYPE = {"genre": "genre", "keyword": "keyword", "cast": "cast", "company": "production", "crew": "crew"}


def build_domain_kg(records: Sequence[DomainRecord], thresholds: Mapping[str, int] | None = None) -> KnowledgeGraph:
    """Build a movie graph, keeping attribute values that occur often enough.

    Occurrences are counted over all records before any node is created; a
    crew member's count spans all departments.
    """
    th = dict(DEFAULT_THRESHOLDS)
    if thresholds:
        th.update(thresholds)

    per_record = [_record_values(r) for r in records]
    counts: dict[str, Counter] = {fam: Counter() for fam in _FAMILY_NODE_TYPE}
    for vals in per_record:
        for fam, pairs in vals.items():
            for value, _ in pairs:
                counts[fam][value.casefold()] += 1

    relations = ["genre", "keyword", "cast", "company", *CREW_DEPARTMENTS.values()]
    rel_id = {name: i for i, name in enumerate(relations)}
    entities: list[Entity] = []
    node_of: dict[tuple[str, str], int] = {}
    movie_names: Counter = Counter()
    triples: list[Triple] = []

    for rec, vals in zip(records, per_record):
        name = f"{rec.title} ({rec.year})" if rec.year is not None else rec.title
        movie_names[name.casefold()] += 1
        if movie_names[name.casefold()] > 1:
            name = f"{name} #{movie_names[name.casefold()]}"
        movie = len(entities)
        entities.append(Entity(movie, "movie", name))
        for fam, pairs in vals.items():
            for value, rel in pairs:
                key = value.casefold()
                if counts[fam][key] < th[fam]:
                    continue
                node = node_of.get((fam, key))
                if node is None:
                    node = len(entities)
                    node_of[(fam, key)] = node
                    entities.append(Entity(node, _FAMILY_NODE_TYPE[fam], value))
                triples.append(Triple(movie, rel_id[rel], node))
    return KnowledgeGraph(entities, relations, triples)
