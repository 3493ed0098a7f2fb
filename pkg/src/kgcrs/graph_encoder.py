"""Relation-aware graph convolution over the knowledge graph plus layer aggregation."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .kg_store import KnowledgeGraph
from .numerics import DTYPE, relu, uniform_, xavier_


def relation_adjacency(graph: KnowledgeGraph) -> torch.Tensor:
    """Sparse ``|V| x (R*|V|)`` matrix with entry ``1/|N_i^r|`` at ``(i, r*|V|+j)``.

    Entities with an empty neighbor list under ``r`` simply have no entries
    for that relation.
    """
    n = graph.num_entities
    rows, cols, vals = [], [], []
    for e, r, nbrs in graph.neighbor_lists():
        w = 1.0 / len(nbrs)
        for j in nbrs:
            rows.append(e)
            cols.append(r * n + j)
            vals.append(w)
    idx = torch.tensor([rows, cols], dtype=torch.long).reshape(2, -1)
    adj = torch.sparse_coo_tensor(idx, torch.tensor(vals, dtype=DTYPE), (n, graph.num_relations * n), check_invariants=True)
    return adj.coalesce()


@dataclass
class RgcnLayer:
    w_rel: torch.Tensor  # (R, d_k, d_k)
    w_self: torch.Tensor  # (d_k, d_k)


def rgcn_layer_forward(h: torch.Tensor, graph: KnowledgeGraph, layer: RgcnLayer, adj: torch.Tensor | None = None) -> torch.Tensor:
    n, d = graph.num_entities, layer.w_self.shape[1]
    if h.shape != (n, d):
        raise ValueError(f"expected hidden states of shape {(n, d)}, got {tuple(h.shape)}")
    if layer.w_rel.shape != (graph.num_relations, d, d):
        raise ValueError(f"relation weights must be {(graph.num_relations, d, d)}, got {tuple(layer.w_rel.shape)}")
    if adj is None:
        adj = relation_adjacency(graph)
    # (R, n, d) -> (R*n, d): row r*n+j holds W_r h_j
    msgs = torch.einsum("rkd,nd->rnk", layer.w_rel, h).reshape(-1, d)
    agg = torch.sparse.mm(adj, msgs) if graph.num_relations else torch.zeros_like(h)
    return relu(agg + h @ layer.w_self.T)


@dataclass
class EntityEmbeddingTable:
    H: torch.Tensor
    item_ids: tuple[int, ...]

    @property
    def item_view(self) -> torch.Tensor:
        return self.H[list(self.item_ids)]


class RgcnEncoder(nn.Module):
    """Learnable base table, ``num_layers`` relational layers and a concat projection."""

    def __init__(self, num_entities: int, num_relations: int, d_k: int = 200, d_f: int = 200, num_layers: int = 2, seed: int = 0):
        super().__init__()
        if num_layers < 1 or d_k <= 0 or d_f <= 0:
            raise ValueError("need num_layers >= 1 and positive dimensions")
        gen = torch.Generator().manual_seed(seed)
        self.num_layers = num_layers
        self.base_embeddings = nn.Parameter(uniform_(torch.empty(num_entities, d_k, dtype=DTYPE), 0.1, gen))
        self.w_rel = nn.ParameterList(
            nn.Parameter(xavier_(torch.empty(num_relations, d_k, d_k, dtype=DTYPE), gen)) for _ in range(num_layers)
        )
        self.w_self = nn.ParameterList(nn.Parameter(xavier_(torch.empty(d_k, d_k, dtype=DTYPE), gen)) for _ in range(num_layers))
        self.w_h = nn.Parameter(xavier_(torch.empty(d_f, (num_layers + 1) * d_k, dtype=DTYPE), gen))
        self.b_h = nn.Parameter(torch.zeros(d_f, dtype=DTYPE))

    def layers(self) -> list[RgcnLayer]:
        return [RgcnLayer(w, w0) for w, w0 in zip(self.w_rel, self.w_self)]

    def forward(self, graph: KnowledgeGraph, adj: torch.Tensor | None = None) -> torch.Tensor:
        return encode_graph(graph, self, adj).H


def encode_graph(graph: KnowledgeGraph, params: RgcnEncoder, adj: torch.Tensor | None = None) -> EntityEmbeddingTable:
    if adj is None:
        adj = relation_adjacency(graph)
    h = params.base_embeddings
    outs = [h]
    for layer in params.layers():
        h = rgcn_layer_forward(h, graph, layer, adj)
        outs.append(h)
    H = torch.cat(outs, dim=1) @ params.w_h.T + params.b_h
    return EntityEmbeddingTable(H, graph.item_ids)
