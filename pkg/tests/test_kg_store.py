import io
import json
from collections import Counter, defaultdict

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kgcrs.kg_store import (
    CREW_DEPARTMENTS,
    DomainRecord,
    Entity,
    KgParseError,
    KgReferenceError,
    KnowledgeGraph,
    Triple,
    build_domain_kg,
    graph_stats,
    load_records,
    load_triples,
    one_hop_neighbors,
    write_triples,
)

from conftest import DATA, random_graph


def load_fixture():
    with open(DATA / "kg30" / "triples.tsv") as tf, open(DATA / "kg30" / "entities.tsv") as ef:
        return load_triples(tf, ef)


def recount_fixture():
    """Independent tally straight from the fixture text."""
    node_counts = Counter(line.split("\t")[1] for line in (DATA / "kg30" / "entities.tsv").read_text().splitlines() if line)
    unique = {line for line in (DATA / "kg30" / "triples.tsv").read_text().splitlines() if line and not line.startswith("#")}
    edge_counts = Counter(line.split("\t")[1] for line in unique)
    return node_counts, edge_counts


def test_single_edge_is_indexed_both_ways():
    g = load_triples(io.StringIO("0\tlikes\t1\n"), io.StringIO("0\tgeneric\ta\n1\tgeneric\tb\n"))
    r = g.relation_ids["likes"]
    assert g.neighbor_index(0, r) == (1,)
    assert g.neighbor_index(1, r) == (0,)


def test_empty_triple_file_gives_isolated_nodes():
    g = load_triples(io.StringIO(""), io.StringIO("0\tgenre\ta\n1\tgenre\tb\n2\tmovie\tc\n"))
    s = graph_stats(g)
    assert s.total_nodes == 3 and s.total_edges == 0


def test_fixture_stats_match_recount():
    g = load_fixture()
    nodes, edges = recount_fixture()
    s = graph_stats(g)
    assert s.total_nodes == 30 and s.total_edges == 55
    assert {k: v for k, v in s.node_counts.items() if v} == dict(nodes)
    assert s.edge_counts == dict(edges)
    assert s.total_nodes == sum(s.node_counts.values())
    assert s.total_edges == sum(s.edge_counts.values())


def test_parse_errors_carry_line_numbers():
    with pytest.raises(KgParseError) as exc:
        load_triples(io.StringIO("# c\n0\tr\t1\n0\tr\n"), io.StringIO("0\tgeneric\ta\n1\tgeneric\tb\n"))
    assert exc.value.line == 3
    with pytest.raises(KgReferenceError):
        load_triples(io.StringIO("0\tr\t7\n"), io.StringIO("0\tgeneric\ta\n"))


def test_one_hop_neighbors():
    g = load_fixture()
    # brute force over the triple list
    expected = sorted({t.tail for t in g.triples if t.head == 0} | {t.head for t in g.triples if t.tail == 0})
    assert one_hop_neighbors(g, 0) == expected
    assert len(expected) == 6
    with pytest.raises(KeyError):
        one_hop_neighbors(g, 12)  # a genre, not an item


def test_isolated_item_has_no_neighbors():
    g = KnowledgeGraph([Entity(0, "movie", "m"), Entity(1, "genre", "thriller"), Entity(2, "cast", "x")], ["genre"], [])
    assert one_hop_neighbors(g, 0) == []
    g = KnowledgeGraph(g.entities, ["genre", "cast"], [Triple(0, 0, 1), Triple(0, 1, 2)])
    assert one_hop_neighbors(g, 0) == [1, 2]


def test_item_ids_are_movies():
    g = load_fixture()
    assert list(g.item_ids) == [e.id for e in g.entities if e.node_type == "movie"]


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_neighbor_index_matches_incidence_count(seed):
    g = random_graph(np.random.default_rng(seed), max_nodes=200)
    incident = defaultdict(int)
    for t in g.triples:
        incident[(t.head, t.relation)] += 1
        incident[(t.tail, t.relation)] += 1
    for e in range(g.num_entities):
        for r in range(g.num_relations):
            assert len(g.neighbor_index(e, r)) == incident[(e, r)]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_serialize_round_trip(seed):
    g = random_graph(np.random.default_rng(seed))
    tf, ef = io.StringIO(), io.StringIO()
    write_triples(g, tf, ef)
    tf.seek(0)
    ef.seek(0)
    g2 = load_triples(tf, ef)
    assert graph_stats(g2) == graph_stats(g)
    for e in range(g.num_entities):
        for r in range(g.num_relations):
            assert g2.neighbor_index(e, r) == g.neighbor_index(e, r)


# ---------------------------------------------------------------- domain graph


def load_domain_records():
    with open(DATA / "domain_records.jsonl") as fh:
        return load_records(fh)


def tally(lines, thresholds):
    """Frequency-count oracle over raw JSON lines."""
    fam_keys = {"genre": "genres", "keyword": "keywords", "cast": "cast", "company": "companies"}
    counts = {f: Counter() for f in [*fam_keys, "crew"]}
    recs = [json.loads(line) for line in lines if line.strip()]
    for r in recs:
        for fam, key in fam_keys.items():
            for v in set(r[key]):
                counts[fam][v.lower()] += 1
        for c in {(c["name"], c["department"]) for c in r["crew"]}:
            counts["crew"][c[0].lower()] += 1
    nodes, edges = len(recs), 0
    for fam in counts:
        kept = {v for v, c in counts[fam].items() if c >= thresholds[fam]}
        nodes += len(kept)
        for r in recs:
            if fam == "crew":
                edges += len({(c["name"], c["department"]) for c in r["crew"] if c["name"].lower() in kept})
            else:
                edges += len({v for v in r[fam_keys[fam]] if v.lower() in kept})
    return nodes, edges


DEFAULTS = {"keyword": 4, "cast": 4, "company": 4, "crew": 10, "genre": 1}


def test_domain_fixture_matches_tally():
    lines = (DATA / "domain_records.jsonl").read_text().splitlines()
    s = graph_stats(build_domain_kg(load_domain_records()))
    assert (s.total_nodes, s.total_edges) == tally(lines, DEFAULTS)
    # frozen from the tally script
    assert (s.total_nodes, s.total_edges) == (49, 200)
    assert len(build_domain_kg(load_domain_records()).relations) == 15


def test_single_record_keeps_only_movie_and_genres():
    rec = DomainRecord("Solo", 2000, ["Drama", "Crime"], ["a"], [("b", "sound")], ["k"], ["c"])
    g = build_domain_kg([rec])
    assert [e.node_type for e in g.entities] == ["movie", "genre", "genre"]


def test_threshold_one_keeps_everything():
    recs = load_domain_records()
    g = build_domain_kg(recs, {k: 1 for k in DEFAULTS})
    occurrences = sum(
        len(set(r.genres)) + len(set(r.keywords)) + len(set(r.cast)) + len(set(r.companies)) + len(set(r.crew)) for r in recs
    )
    assert graph_stats(g).total_edges == occurrences


def test_threshold_monotone_on_grid():
    recs = load_domain_records()
    grid = [1, 4, 10]
    prev_row = None
    for a in grid:
        row = []
        for b in grid:
            s = graph_stats(build_domain_kg(recs, {"keyword": a, "cast": a, "company": a, "crew": b, "genre": 1}))
            row.append((s.total_nodes, s.total_edges))
        for x, y in zip(row, row[1:]):
            assert y[0] <= x[0] and y[1] <= x[1]
        if prev_row:
            for x, y in zip(prev_row, row):
                assert y[0] <= x[0] and y[1] <= x[1]
        prev_row = row


def test_crew_departments_become_relations():
    recs = [DomainRecord(f"m{i}", 2000, crew=[("Ann", "Sound"), ("Ann", "Generic Crew")]) for i in range(10)]
    g = build_domain_kg(recs)
    s = graph_stats(g)
    assert s.node_counts["crew"] == 1
    assert s.edge_counts["sound"] == 10 and s.edge_counts["crew"] == 10
    assert len(CREW_DEPARTMENTS) == 11


def test_bad_department_rejected():
    with pytest.raises(ValueError):
        DomainRecord("x", 2000, crew=[("a", "catering")])


def test_empty_records_give_empty_graph():
    assert graph_stats(build_domain_kg([])).total_nodes == 0


def test_record_lists_must_be_lists():
    with pytest.raises(KgParseError) as err:
        load_records(io.StringIO('{"title": "a"}\n{"title": "x", "genres": "drama"}\n'))
    assert err.value.line == 2
