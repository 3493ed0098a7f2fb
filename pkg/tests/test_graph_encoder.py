import numpy as np
import pytest
import torch

from kgcrs.graph_encoder import RgcnEncoder, RgcnLayer, encode_graph, rgcn_layer_forward
from kgcrs.kg_store import Entity, KnowledgeGraph, Triple
from kgcrs.numerics import DTYPE
from kgcrs.trainer import finite_difference_check

from conftest import assert_fd_coverage, random_graph, six_node_graph


def naive_encode(graph, enc):
    """Loop over triples directly; no index structures."""
    h = enc.base_embeddings.detach().numpy()
    outs = [h]
    for w_rel, w0 in zip(enc.w_rel, enc.w_self):
        w_rel, w0 = w_rel.detach().numpy(), w0.detach().numpy()
        new = np.zeros_like(h)
        for i in range(graph.num_entities):
            acc = w0 @ h[i]
            for r in range(graph.num_relations):
                nbrs = [t.tail for t in graph.triples if t.head == i and t.relation == r]
                nbrs += [t.head for t in graph.triples if t.tail == i and t.relation == r]
                for j in nbrs:
                    acc = acc + (w_rel[r] @ h[j]) / len(nbrs)
            new[i] = np.maximum(acc, 0.0)
        h = new
        outs.append(h)
    return np.concatenate(outs, axis=1) @ enc.w_h.detach().numpy().T + enc.b_h.detach().numpy()


def two_node(rel_count=1):
    return KnowledgeGraph([Entity(0, "generic", "a"), Entity(1, "generic", "b")], [f"r{i}" for i in range(rel_count)], [Triple(0, 0, 1)])


def test_isolated_entity_relu():
    g = KnowledgeGraph([Entity(0, "generic", "a")], ["r"], [])
    layer = RgcnLayer(torch.zeros(1, 2, 2, dtype=DTYPE), torch.eye(2, dtype=DTYPE))
    out = rgcn_layer_forward(torch.tensor([[1.0, -2.0]], dtype=DTYPE), g, layer)
    assert out.tolist() == [[1.0, 0.0]]


def test_two_entities_identity_weights():
    layer = RgcnLayer(torch.eye(2, dtype=DTYPE)[None], torch.eye(2, dtype=DTYPE))
    out = rgcn_layer_forward(torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=DTYPE), two_node(), layer)
    assert out[0].tolist() == [1.0, 1.0]


def test_zero_weights_zero_output():
    layer = RgcnLayer(torch.zeros(1, 3, 3, dtype=DTYPE), torch.zeros(3, 3, dtype=DTYPE))
    out = rgcn_layer_forward(torch.randn(2, 3, dtype=DTYPE), two_node(), layer)
    assert not out.any()


def test_shape_mismatch():
    layer = RgcnLayer(torch.zeros(1, 3, 3, dtype=DTYPE), torch.zeros(3, 3, dtype=DTYPE))
    with pytest.raises(ValueError):
        rgcn_layer_forward(torch.zeros(2, 4, dtype=DTYPE), two_node(), layer)


def test_single_layer_selection():
    g = six_node_graph()
    enc = RgcnEncoder(g.num_entities, g.num_relations, 4, 4, num_layers=1, seed=3)
    with torch.no_grad():
        enc.w_h.zero_()
        enc.w_h[:, 4:] = torch.eye(4, dtype=DTYPE)
    H = encode_graph(g, enc).H
    layer1 = rgcn_layer_forward(enc.base_embeddings, g, enc.layers()[0])
    assert torch.equal(H, layer1)


def test_constant_bias_only():
    g = six_node_graph()
    enc = RgcnEncoder(g.num_entities, g.num_relations, 4, 3, seed=1)
    with torch.no_grad():
        for p in enc.parameters():
            p.zero_()
        enc.b_h.fill_(2.5)
    assert torch.equal(encode_graph(g, enc).H, torch.full((6, 3), 2.5, dtype=DTYPE))


def test_path_graph_matches_naive():
    ents = [Entity(i, "generic", f"n{i}") for i in range(5)]
    g = KnowledgeGraph(ents, ["next"], [Triple(i, 0, i + 1) for i in range(4)])
    enc = RgcnEncoder(5, 1, 8, 8, 2, seed=11)
    H = encode_graph(g, enc).H.detach().numpy()
    assert np.abs(H - naive_encode(g, enc)).max() < 1e-10


def test_oracle_equivalence_random_graphs():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for trial in range(100):
        g = random_graph(rng, max_nodes=50, max_rel=4)
        enc = RgcnEncoder(g.num_entities, g.num_relations, 8, 8, 2, seed=trial)
        H = encode_graph(g, enc).H.detach().numpy()
        worst = max(worst, float(np.abs(H - naive_encode(g, enc)).max()))
    assert worst < 1e-10


def test_item_view_selects_movies(toy_graph):
    enc = RgcnEncoder(6, 3, 4, 4, seed=0)
    table = encode_graph(toy_graph, enc)
    assert torch.equal(table.item_view, table.H[[0, 1]])


def test_permutation_equivariance():
    rng = np.random.default_rng(5)
    g = random_graph(rng, max_nodes=30, min_nodes=10)
    perm = [int(x) for x in rng.permutation(g.num_entities)]
    g2 = g.relabel(perm)
    enc = RgcnEncoder(g.num_entities, g.num_relations, 6, 6, 2, seed=4)
    enc2 = RgcnEncoder(g.num_entities, g.num_relations, 6, 6, 2, seed=4)
    with torch.no_grad():
        enc2.base_embeddings[perm] = enc.base_embeddings
    H = encode_graph(g, enc).H
    H2 = encode_graph(g2, enc2).H
    assert torch.allclose(H2[perm], H, atol=1e-12, rtol=0)


def test_gradients_match_finite_differences():
    g = six_node_graph()
    enc = RgcnEncoder(g.num_entities, g.num_relations, 8, 8, 2, seed=9)
    target = torch.randn(6, 8, dtype=DTYPE, generator=torch.Generator().manual_seed(1))

    def loss():
        return ((encode_graph(g, enc).H - target) ** 2).sum()

    report = finite_difference_check(loss, dict(enc.named_parameters()))
    assert report.worst < 1e-4, report.max_rel_err
    assert_fd_coverage(report, dict(enc.named_parameters()))
