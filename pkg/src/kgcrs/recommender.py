"""Self-attentive history pooling, item scoring and novelty-constrained ranking."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import torch
from torch import nn

from .corpus import Conversation, RecTrainingExample, make_rec_examples
from .graph_encoder import RgcnEncoder, relation_adjacency
from .kg_store import KnowledgeGraph
from .linking import EntitySequence, LinkingError, link_entities  # noqa: F401  (re-exported)
from .numerics import DTYPE, masked_softmax, softmax, xavier_


class EmptyHistory(ValueError):
    pass


class EmptyBatch(ValueError):
    """Nothing left to train on after the new-and-liked filter."""


@dataclass
class RecPrediction:
    probs: torch.Tensor
    pooled: torch.Tensor
    attention: torch.Tensor


class Ranking(NamedTuple):
    items: list[int]
    truncated: bool


def attentive_pool(h_e: torch.Tensor, w_q: torch.Tensor, w_k: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    if h_e.shape[0] == 0:
        raise EmptyHistory("cannot pool an empty entity sequence")
    alpha = softmax(w_k @ torch.tanh(w_q @ h_e.T))
    return alpha @ h_e, alpha


def score_items(c_e: torch.Tensor, h_items: torch.Tensor) -> torch.Tensor:
    return softmax(h_items @ c_e)


def recommend_topk(probs, k: int, mentioned: Iterable[int], item_ids: Sequence[int] | None = None) -> Ranking:
    """Best ``k`` items never mentioned before, ties broken by smaller id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if isinstance(probs, torch.Tensor):
        probs = probs.detach().tolist()
    ids = list(item_ids) if item_ids is not None else list(range(len(probs)))
    banned = set(mentioned)
    ranked = sorted((i for i in range(len(ids)) if ids[i] not in banned), key=lambda i: (-probs[i], ids[i]))
    chosen = [ids[i] for i in ranked[:k]]
    return Ranking(chosen, len(chosen) < k)


class Recommender(nn.Module):
    """Graph encoder plus attention pooling; ``d_q`` defaults to ``d_f``."""

    def __init__(self, graph: KnowledgeGraph, d_k: int = 200, d_f: int = 200, num_layers: int = 2, d_q: int | None = None, seed: int = 0):
        super().__init__()
        d_q = d_q or d_f
        self.config = {"d_k": d_k, "d_f": d_f, "num_layers": num_layers, "d_q": d_q, "seed": seed}
        self.graph = graph
        self.encoder = RgcnEncoder(graph.num_entities, graph.num_relations, d_k, d_f, num_layers, seed)
        gen = torch.Generator().manual_seed(seed + 7919)
        self.w_q = nn.Parameter(xavier_(torch.empty(d_q, d_f, dtype=DTYPE), gen))
        self.w_k = nn.Parameter(xavier_(torch.empty(1, d_q, dtype=DTYPE), gen)[0])
        self._adj = relation_adjacency(graph)

    def entity_table(self) -> torch.Tensor:
        return self.encoder(self.graph, self._adj)

    def pool(self, H: torch.Tensor, history: Sequence[int]) -> tuple[torch.Tensor, torch.Tensor]:
        if len(history) == 0:
            # cold open: zero vector gives uniform item scores
            return torch.zeros(H.shape[1], dtype=H.dtype), torch.zeros(0, dtype=H.dtype)
        return attentive_pool(H[list(history)], self.w_q, self.w_k)

    def pool_batch(self, H: torch.Tensor, histories: Sequence[Sequence[int]]) -> torch.Tensor:
        """Row-wise pooled vectors for several histories, zeros for empty ones."""
        width = max((len(h) for h in histories), default=0)
        if width == 0:
            return torch.zeros(len(histories), H.shape[1], dtype=H.dtype)
        idx = torch.zeros(len(histories), width, dtype=torch.long)
        mask = torch.zeros(len(histories), width, dtype=torch.bool)
        for b, hist in enumerate(histories):
            idx[b, : len(hist)] = torch.tensor(list(hist), dtype=torch.long)
            mask[b, : len(hist)] = True
        h_e = H[idx]  # (B, W, d_f)
        scores = torch.tanh(h_e @ self.w_q.T) @ self.w_k
        alpha = masked_softmax(scores, mask)
        return torch.einsum("bw,bwd->bd", alpha, h_e)

    def predict(self, history: Sequence[int], H: torch.Tensor | None = None) -> RecPrediction:
        if H is None:
            H = self.entity_table()
        c_e, alpha = self.pool(H, history)
        probs = score_items(c_e, H[list(self.graph.item_ids)])
        return RecPrediction(probs, c_e, alpha)


def training_batch(examples: Iterable[RecTrainingExample]) -> list[RecTrainingExample]:
    return [ex for ex in examples if ex.eligible]


def rec_loss_tensor(batch: Sequence[RecTrainingExample], model: Recommender) -> torch.Tensor:
    batch = training_batch(batch)
    if not batch:
        raise EmptyBatch("no new-and-liked examples in batch")
    H = model.entity_table()
    c = model.pool_batch(H, [ex.history.unique() for ex in batch])
    logits = c @ H[list(model.graph.item_ids)].T
    logp = logits - torch.logsumexp(logits, dim=1, keepdim=True)
    labels = torch.tensor([model.graph.item_position(ex.label) for ex in batch])
    return -logp[torch.arange(len(batch)), labels].mean()


def rec_loss(batch: Sequence[RecTrainingExample], model: Recommender) -> tuple[float, dict[str, torch.Tensor]]:
    loss = rec_loss_tensor(batch, model)
    names, params = zip(*[(n, p) for n, p in model.named_parameters() if p.requires_grad])
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    return loss.item(), {n: torch.zeros_like(p) if g is None else g for n, p, g in zip(names, params, grads)}


def prediction_events(model: Recommender, conversations: Sequence[Conversation], k: int = 50) -> list[dict]:
    """One log event per recommender turn that suggests at least one item."""
    graph = model.graph
    with torch.no_grad():
        H = model.entity_table()
        events = []
        for conv in conversations:
            by_turn: dict[int, list[RecTrainingExample]] = {}
            for ex in make_rec_examples(conv, graph):
                by_turn.setdefault(ex.turn, []).append(ex)
            for turn, exs in sorted(by_turn.items()):
                pred = model.predict(exs[0].history.unique(), H)
                ranking = recommend_topk(pred.probs, k, exs[0].mentioned, graph.item_ids)
                events.append(
                    {
                        "conversation_id": conv.id,
                        "turn": turn,
                        "ranked_item_ids": ranking.items,
                        "mentioned_item_ids": sorted(exs[0].mentioned),
                        "gold_item_ids": [ex.label for ex in exs],
                        "gold_liked_flags": [ex.is_liked for ex in exs],
                    }
                )
    return events


def human_recommendation_events(conversations: Sequence[Conversation], graph: KnowledgeGraph) -> list[dict]:
    """Log events whose top-1 is what the human recommender actually suggested."""
    events = []
    for conv in conversations:
        for ex in make_rec_examples(conv, graph):
            events.append(
                {
                    "conversation_id": conv.id,
                    "turn": ex.turn,
                    "ranked_item_ids": [ex.label],
                    "mentioned_item_ids": sorted(ex.mentioned),
                    "gold_item_ids": [ex.label],
                    "gold_liked_flags": [ex.is_liked],
                }
            )
    return events
