"""REDIAL-style conversation ingestion, splits, vocabulary and training examples."""

from __future__ import annotations

import itertools
import json
import random
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import IO, Iterable, Mapping, Sequence

from .kg_store import Entity, KnowledgeGraph, Triple
from .linking import EntitySequence, link_entities
from .text import MARKER_RE, tokenize

SEEKER, RECOMMENDER = "seeker", "recommender"

PAD, UNK, BOS, EOS, SPLIT = "__null__", "__unk__", "__start__", "__end__", "_split_"
RESERVED = (PAD, UNK, BOS, EOS, SPLIT)


class IngestionError(ValueError):
    pass


@dataclass(frozen=True)
class MentionFlags:
    suggested: bool
    seen: bool
    liked: bool


@dataclass
class Message:
    speaker: str
    text: str
    # marker id -> item entity id (None when the title could not be resolved)
    mention_markers: dict[str, int | None] = field(default_factory=dict)

    def markers_in_text(self) -> list[str]:
        return list(dict.fromkeys(MARKER_RE.findall(self.text)))


@dataclass
class Conversation:
    id: str
    messages: list[Message]
    mention_flags: dict[str, MentionFlags]
    movie_titles: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if not self.messages:
            raise IngestionError(f"conversation {self.id} has no messages")


@dataclass
class DatasetSplit:
    train: list[Conversation]
    valid: list[Conversation]
    test: list[Conversation]


@dataclass
class RecTrainingExample:
    history: EntitySequence
    label: int
    is_new: bool
    is_liked: bool
    conversation_id: str = ""
    turn: int = 0
    mentioned: frozenset[int] = frozenset()

    @property
    def eligible(self) -> bool:
        return self.is_new and self.is_liked


@dataclass
class GenExample:
    context: list[Message]
    response: Message
    items: list[int]
    conversation_id: str = ""
    turn: int = 0


# ---------------------------------------------------------------- ingestion


def _flag(value, unknown_liked: bool) -> bool:
    # REDIAL answers: 0 = no, 1 = yes, 2 = did not say
    if value == 2:
        return unknown_liked
    return bool(value)


def _resolve_title(title: str, graph: KnowledgeGraph) -> int | None:
    ent = graph.entity_by_name(title, "movie")
    if ent is None:
        bare = re.sub(r"\s*\(\d{4}\)\s*$", "", title)
        ent = graph.entity_by_name(bare, "movie")
    return ent


def parse_conversation(obj: Mapping, graph: KnowledgeGraph | None = None, unknown_liked: bool = True) -> Conversation:
    cid = str(obj["conversationId"])
    titles = {str(k): v for k, v in (obj.get("movieMentions") or {}).items()}
    seeker_q = {str(k): v for k, v in (obj.get("initiatorQuestions") or {}).items()}
    rec_q = {str(k): v for k, v in (obj.get("respondentQuestions") or {}).items()}

    flags: dict[str, MentionFlags] = {}
    for marker in set(seeker_q) | set(rec_q):
        # the seeker's own answers decide; the recommender's fill gaps
        q = {**rec_q.get(marker, {}), **seeker_q.get(marker, {})}
        flags[marker] = MentionFlags(
            suggested=_flag(q.get("suggested", 0), False),
            seen=_flag(q.get("seen", 2), False),
            liked=_flag(q.get("liked", 2), unknown_liked),
        )

    entity_of = {}
    if graph is not None:
        entity_of = {m: _resolve_title(t, graph) for m, t in titles.items()}

    initiator = obj.get("initiatorWorkerId")
    raw = sorted(enumerate(obj["messages"]), key=lambda p: (p[1].get("timeOffset", 0), p[0]))
    messages = []
    for _, m in raw:
        text = m["text"]
        markers = {}
        for marker in dict.fromkeys(MARKER_RE.findall(text)):
            if marker not in titles:
                raise IngestionError(f"conversation {cid}: marker @{marker} has no movieMentions entry")
            if marker not in flags:
                raise IngestionError(f"conversation {cid}: marker @{marker} has no flag record")
            markers[marker] = entity_of.get(marker)
        speaker = SEEKER if m.get("senderWorkerId") == initiator else RECOMMENDER
        messages.append(Message(speaker, text, markers))
    return Conversation(cid, messages, flags, titles)


def load_conversations(stream: IO[str], graph: KnowledgeGraph | None = None, unknown_liked: bool = True) -> list[Conversation]:
    convs = []
    for lineno, line in enumerate(stream, 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise IngestionError(f"line {lineno}: {exc}") from exc
        convs.append(parse_conversation(obj, graph, unknown_liked))
    return convs


def conversation_to_redial(conv: Conversation) -> dict:
    seeker_id, rec_id = 1, 2

    def enc(b: bool) -> int:
        return 1 if b else 0

    questions = {m: {"suggested": enc(f.suggested), "seen": enc(f.seen), "liked": enc(f.liked)} for m, f in conv.mention_flags.items()}
    return {
        "conversationId": conv.id,
        "messages": [
            {"timeOffset": i, "senderWorkerId": seeker_id if m.speaker == SEEKER else rec_id, "text": m.text}
            for i, m in enumerate(conv.messages)
        ],
        "movieMentions": dict(conv.movie_titles),
        "initiatorQuestions": questions,
        "respondentQuestions": questions,
        "initiatorWorkerId": seeker_id,
        "respondentWorkerId": rec_id,
    }


def dump_conversations(convs: Iterable[Conversation], stream: IO[str]) -> None:
    for c in convs:
        stream.write(json.dumps(conversation_to_redial(c), sort_keys=True) + "\n")


def split_dataset(convs: Sequence[Conversation], seed: int = 0) -> DatasetSplit:
    """Seeded shuffle, then floor(80%) train, floor(10%) valid, remainder test."""
    order = list(convs)
    random.Random(seed).shuffle(order)
    n = len(order)
    n_train, n_valid = n * 8 // 10, n // 10
    return DatasetSplit(order[:n_train], order[n_train : n_train + n_valid], order[n_train + n_valid :])


# ---------------------------------------------------------------- vocabulary


class Vocabulary:
    def __init__(self, tokens: Sequence[str], entity_token_map: Mapping[int, int] | None = None):
        if tuple(tokens[: len(RESERVED)]) != RESERVED:
            raise ValueError("vocabulary must start with the reserved tokens")
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate vocabulary tokens")
        self.entity_token_map = dict(entity_token_map or {})
        for tid in self.entity_token_map:
            if not 0 <= tid < len(self.tokens):
                raise ValueError(f"entity token id {tid} out of range")

    pad, unk, bos, eos, split = range(5)

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.index.get(t, self.unk) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    def markers(self) -> dict[str, int]:
        """Marker id -> entity for every ``@marker`` token bound to an entity."""
        return {self.tokens[t][1:]: e for t, e in self.entity_token_map.items() if self.tokens[t].startswith("@")}

    def to_json(self) -> dict:
        return {"tokens": self.tokens, "entity_token_map": {str(k): v for k, v in self.entity_token_map.items()}}

    @classmethod
    def from_json(cls, obj: Mapping) -> "Vocabulary":
        return cls(obj["tokens"], {int(k): v for k, v in obj["entity_token_map"].items()})


def context_tokens(messages: Sequence[Message]) -> list[str]:
    out: list[str] = []
    for i, m in enumerate(messages):
        if i:
            out.append(SPLIT)
        out.extend(tokenize(m.text))
    return out


def build_vocab(train: Sequence[Conversation], min_freq: int = 2, graph: KnowledgeGraph | None = None) -> Vocabulary:
    counts = Counter(tok for conv in train for m in conv.messages for tok in tokenize(m.text))
    words = sorted((t for t, c in counts.items() if c >= min_freq and t not in RESERVED), key=lambda t: (-counts[t], t))
    vocab_tokens = [*RESERVED, *words]
    index = {t: i for i, t in enumerate(vocab_tokens)}

    entity_map: dict[int, int] = {}
    if graph is not None:
        # single-token surface names only
        for ent in graph.entities:
            toks = tokenize(ent.name)
            if len(toks) == 1 and toks[0] in index and index[toks[0]] not in entity_map:
                entity_map[index[toks[0]]] = ent.id
    for conv in train:
        for m in conv.messages:
            for marker, ent in m.mention_markers.items():
                tid = index.get("@" + marker.lower())
                if tid is not None and ent is not None:
                    entity_map.setdefault(tid, ent)
    return Vocabulary(vocab_tokens, entity_map)


# ---------------------------------------------------------------- examples


def make_rec_examples(conv: Conversation, graph: KnowledgeGraph) -> list[RecTrainingExample]:
    out = []
    mentioned: set[int] = set()
    for turn, msg in enumerate(conv.messages):
        items = [e for e in msg.mention_markers.values() if e is not None]
        if msg.speaker == RECOMMENDER:
            history = None
            for marker, item in msg.mention_markers.items():
                flags = conv.mention_flags[marker]
                if item is None or not flags.suggested:
                    continue
                if history is None:
                    history = link_entities(conv.messages[:turn], graph)
                out.append(
                    RecTrainingExample(
                        history=history,
                        label=item,
                        is_new=item not in mentioned,
                        is_liked=flags.liked,
                        conversation_id=conv.id,
                        turn=turn,
                        mentioned=frozenset(mentioned),
                    )
                )
        mentioned.update(items)
    return out


def make_gen_examples(conv: Conversation) -> list[GenExample]:
    out = []
    for turn, msg in enumerate(conv.messages):
        if msg.speaker != RECOMMENDER:
            continue
        items = [e for e in msg.mention_markers.values() if e is not None]
        out.append(GenExample(list(conv.messages[:turn]), msg, items, conv.id, turn))
    return out


# ---------------------------------------------------------------- synthetic corpus

_ATTR_WORDS = (
    "thriller", "comedy", "horror", "drama", "romance", "western", "musical", "mystery",
    "fantasy", "animation", "documentary", "crime", "war", "sports", "noir", "adventure",
)


@dataclass(frozen=True)
class SynthConfig:
    num_convs: int = 50
    num_items: int = 10
    num_attrs: int = 6
    vocab_size: int = 60
    seed: int = 0


def synth_attribute_sets(cfg: SynthConfig) -> list[tuple[int, ...]]:
    """Distinct attribute-index subsets, one per item, smallest sizes first."""
    subsets = [s for k in (2, 1, 3, 4, 5, 6) for s in itertools.combinations(range(cfg.num_attrs), k)]
    if cfg.num_items > len(subsets):
        raise ValueError("too many items for the attribute pool")
    rng = random.Random(cfg.seed)
    pool = [s for s in subsets if len(s) == 2] if cfg.num_attrs >= 2 else []
    if len(pool) < cfg.num_items:
        pool = subsets[: max(cfg.num_items, len(pool))]
    chosen = rng.sample(pool, cfg.num_items)
    return [tuple(sorted(s)) for s in chosen]


def _attr_names(n: int) -> list[str]:
    return [_ATTR_WORDS[i] if i < len(_ATTR_WORDS) else f"genre{i}" for i in range(n)]


def synth_graph(cfg: SynthConfig) -> KnowledgeGraph:
    attrs = _attr_names(cfg.num_attrs)
    entities = [Entity(i, "movie", f"film{i}") for i in range(cfg.num_items)]
    entities += [Entity(cfg.num_items + a, "genre", name) for a, name in enumerate(attrs)]
    triples = [
        Triple(item, 0, cfg.num_items + a) for item, subset in enumerate(synth_attribute_sets(cfg)) for a in subset
    ]
    return KnowledgeGraph(entities, ["genre"], triples)


def _and(words: Sequence[str]) -> str:
    return words[0] if len(words) == 1 else " ".join(words[:-1]) + " and " + words[-1]


def synth_corpus(cfg: SynthConfig | None = None, **overrides) -> tuple[list[Conversation], KnowledgeGraph]:
    """Template conversations over a toy graph.

    The seeker names every attribute of one item, so the gold item is a
    function of the mentioned attribute set; the recommender's reply names
    the item and its attributes.
    """
    cfg = cfg or SynthConfig(**overrides)
    if min(cfg.num_convs, cfg.num_items, cfg.num_attrs, cfg.vocab_size) < 1:
        raise ValueError("all synthetic corpus counts must be >= 1")
    graph = synth_graph(cfg)
    attrs = _attr_names(cfg.num_attrs)
    subsets = synth_attribute_sets(cfg)
    fillers = [f"w{i}" for i in range(cfg.vocab_size)]
    rng = random.Random(cfg.seed + 1)

    convs = []
    for c in range(cfg.num_convs):
        item = rng.randrange(cfg.num_items)
        names = [attrs[a] for a in subsets[item]]
        marker = str(item)
        liked = rng.random() < 0.9
        chatter = " ".join(rng.sample(fillers, min(2, len(fillers))))
        messages = [
            Message(RECOMMENDER, "hi ! what kind of movies do you like ?"),
            Message(SEEKER, f"hello {chatter} i like {_and(names)} movies"),
            Message(RECOMMENDER, f"you should watch @{marker} it is a {' '.join(names)} movie", {marker: item}),
            Message(SEEKER, "thanks i will check it out" if liked else "no i did not like that one", {}),
        ]
        flags = {marker: MentionFlags(suggested=True, seen=False, liked=liked)}
        convs.append(Conversation(f"synth-{cfg.seed}-{c}", messages, flags, {marker: graph.entities[item].name}))
    return convs, graph
