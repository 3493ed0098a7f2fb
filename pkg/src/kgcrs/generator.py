"""Transformer response generator with entity-aware auxiliary objectives.

Besides the usual teacher-forced token loss the generator carries two extra
heads: a per-step distribution over graph entities that is summed across the
response into a bag-of-entity probability, and a projection of the pooled
history vector into word space that is pulled toward the indicator of the
history's entity words.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .corpus import EOS, GenExample, Message, Vocabulary, context_tokens
from .kg_store import KnowledgeGraph, one_hop_neighbors
from .linking import EntitySequence
from .numerics import DTYPE, masked_softmax, relu, softmax, xavier_
from .text import tokenize

MAX_CONTEXT = 256
MAX_RESPONSE = 20


class ResponseTooLong(ValueError):
    pass


def sinusoidal_positions(n: int, d: int) -> torch.Tensor:
    pos = torch.arange(n, dtype=DTYPE)[:, None]
    rate = torch.exp(torch.arange(0, d, 2, dtype=DTYPE) * (-math.log(10000.0) / d))
    pe = torch.zeros(n, d, dtype=DTYPE)
    pe[:, 0::2] = torch.sin(pos * rate)
    pe[:, 1::2] = torch.cos(pos * rate[: d // 2])
    return pe


def _linear(d_in: int, d_out: int, gen: torch.Generator) -> nn.Linear:
    lin = nn.Linear(d_in, d_out, dtype=DTYPE)
    xavier_(lin.weight.data, gen)
    lin.bias.data.zero_()
    return lin


class MultiHeadAttention(nn.Module):
    def __init__(self, d: int, heads: int, gen: torch.Generator):
        super().__init__()
        if d % heads:
            raise ValueError("model width must divide evenly into heads")
        self.heads = heads
        self.q, self.k, self.v, self.o = (_linear(d, d, gen) for _ in range(4))

    def forward(self, x: torch.Tensor, mem: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """``mask`` is ``(B, Tq, Tk)``, True where attending is allowed."""
        B, Tq, d = x.shape
        Tk = mem.shape[1]
        dh = d // self.heads

        def split(t, T):
            return t.view(B, T, self.heads, dh).transpose(1, 2)

        q, k, v = split(self.q(x), Tq), split(self.k(mem), Tk), split(self.v(mem), Tk)
        weights = masked_softmax(q @ k.transpose(-1, -2) / math.sqrt(dh), mask[:, None])
        out = (weights @ v).transpose(1, 2).reshape(B, Tq, d)
        return self.o(out)


class FeedForward(nn.Module):
    def __init__(self, d: int, gen: torch.Generator):
        super().__init__()
        self.inner = _linear(d, 4 * d, gen)
        self.outer = _linear(4 * d, d, gen)

    def forward(self, x):
        return self.outer(relu(self.inner(x)))


class EncoderLayer(nn.Module):
    def __init__(self, d: int, heads: int, gen: torch.Generator):
        super().__init__()
        self.attn = MultiHeadAttention(d, heads, gen)
        self.ffn = FeedForward(d, gen)
        self.norm1 = nn.LayerNorm(d, dtype=DTYPE)
        self.norm2 = nn.LayerNorm(d, dtype=DTYPE)

    def forward(self, x, mask):
        x = self.norm1(x + self.attn(x, x, mask))
        return self.norm2(x + self.ffn(x))


class DecoderLayer(nn.Module):
    def __init__(self, d: int, heads: int, gen: torch.Generator):
        super().__init__()
        self.self_attn = MultiHeadAttention(d, heads, gen)
        self.cross_attn = MultiHeadAttention(d, heads, gen)
        self.ffn = FeedForward(d, gen)
        self.norms = nn.ModuleList(nn.LayerNorm(d, dtype=DTYPE) for _ in range(3))

    def forward(self, y, self_mask, mem, cross_mask):
        y = self.norms[0](y + self.self_attn(y, y, self_mask))
        y = self.norms[1](y + self.cross_attn(y, mem, cross_mask))
        return self.norms[2](y + self.ffn(y))


def _with_context(s: torch.Tensor, c_e: torch.Tensor) -> torch.Tensor:
    """``[s; c_E]`` with ``c_E`` broadcast over the step axis of ``s``."""
    lead = c_e.shape[:-1] + (1,) * (s.dim() - c_e.dim())
    c = c_e.reshape(*lead, c_e.shape[-1]).expand(*s.shape[:-1], c_e.shape[-1])
    return torch.cat([s, c], dim=-1)


class ResponseGenerator(nn.Module):
    """Encoder-decoder with a tied output layer conditioned on the pooled history.

    ``entity_table`` is the frozen entity matrix from the recommender and is
    stored as a buffer so checkpoints are self-contained.
    """

    def __init__(
        self,
        vocab_size: int,
        entity_table: torch.Tensor,
        d: int = 300,
        n_enc: int = 2,
        n_dec: int = 2,
        heads: int = 2,
        max_context: int = MAX_CONTEXT,
        max_response: int = MAX_RESPONSE,
        seed: int = 0,
    ):
        super().__init__()
        n_ent, d_f = entity_table.shape
        self.config = {
            "vocab_size": vocab_size, "d": d, "n_enc": n_enc, "n_dec": n_dec, "heads": heads,
            "max_context": max_context, "max_response": max_response, "seed": seed,
            "num_entities": n_ent, "d_f": d_f,
        }
        self.max_context, self.max_response = max_context, max_response
        gen = torch.Generator().manual_seed(seed)
        self.embeddings = nn.Parameter(torch.randn(vocab_size, d, generator=gen, dtype=DTYPE) * d**-0.5)
        self.encoder = nn.ModuleList(EncoderLayer(d, heads, gen) for _ in range(n_enc))
        self.decoder = nn.ModuleList(DecoderLayer(d, heads, gen) for _ in range(n_dec))
        self.phi = _linear(d + d_f, d, gen)
        self.b_res = nn.Parameter(torch.zeros(vocab_size, dtype=DTYPE))
        self.w_align = nn.Parameter(xavier_(torch.empty(d + d_f, d_f, dtype=DTYPE), gen))
        self.b_boe = nn.Parameter(torch.zeros(n_ent, dtype=DTYPE))
        self.phi_prime = _linear(d_f, d, gen)
        self.b_ce = nn.Parameter(torch.zeros(vocab_size, dtype=DTYPE))
        self.register_buffer("entity_table", entity_table.detach().clone().to(DTYPE))
        self.register_buffer("positions", sinusoidal_positions(max(max_context, max_response + 1), d))

    def embed(self, ids: torch.Tensor) -> torch.Tensor:
        return self.embeddings[ids] + self.positions[: ids.shape[1]]

    def encode(self, ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        x = self.embed(ids)
        attn_mask = mask[:, None, :].expand(-1, ids.shape[1], -1)
        for layer in self.encoder:
            x = layer(x, attn_mask)
        return x

    def decode(self, prefix: torch.Tensor, prefix_mask: torch.Tensor, mem: torch.Tensor, mem_mask: torch.Tensor) -> torch.Tensor:
        T = prefix.shape[1]
        causal = torch.tril(torch.ones(T, T, dtype=torch.bool))
        self_mask = causal[None] & prefix_mask[:, None, :]
        cross_mask = mem_mask[:, None, :].expand(-1, T, -1)
        y = self.embed(prefix)
        for layer in self.decoder:
            y = layer(y, self_mask, mem, cross_mask)
        return y

    def vocab_logits(self, s: torch.Tensor, c_e: torch.Tensor) -> torch.Tensor:
        return self.phi(_with_context(s, c_e)) @ self.embeddings.T + self.b_res

    def entity_logits(self, s: torch.Tensor, c_e: torch.Tensor) -> torch.Tensor:
        return _with_context(s, c_e) @ self.w_align @ self.entity_table.T + self.b_boe

    def similarity(self, c_e: torch.Tensor) -> torch.Tensor:
        return self.phi_prime(c_e) @ self.embeddings.T + self.b_ce


# ---------------------------------------------------------------- batches


@dataclass
class GenBatch:
    ctx: torch.Tensor  # (B, n) context ids
    ctx_mask: torch.Tensor
    dec_in: torch.Tensor  # (B, T) BOS + response tokens
    targets: torch.Tensor  # (B, T) response tokens + EOS
    target_mask: torch.Tensor
    word_mask: torch.Tensor  # target positions holding response words (no EOS)
    c_e: torch.Tensor  # (B, d_f)
    boe_targets: torch.Tensor  # (B, |V|) multi-hot one-hop neighbors
    has_boe: torch.Tensor  # (B,) bool
    d_e: torch.Tensor  # (B, |V_oc|) entity-word indicator

    def __len__(self):
        return self.ctx.shape[0]


def context_ids(messages: Sequence[Message], vocab: Vocabulary, max_context: int = MAX_CONTEXT) -> list[int]:
    toks = context_tokens(messages)[-max_context:]
    return vocab.encode(toks) if toks else [vocab.bos]


def response_ids(text: str, vocab: Vocabulary, max_response: int = MAX_RESPONSE) -> list[int]:
    return vocab.encode(tokenize(text)[:max_response])


def entity_word_indicator(entity_seq: EntitySequence | Sequence[int], vocab: Vocabulary) -> torch.Tensor:
    ents = set(entity_seq.entity_ids if isinstance(entity_seq, EntitySequence) else entity_seq)
    d = torch.zeros(len(vocab), dtype=DTYPE)
    for tid, ent in vocab.entity_token_map.items():
        if ent in ents:
            d[tid] = 1.0
    return d


def _pad(rows: Sequence[Sequence[int]], fill: int = 0) -> tuple[torch.Tensor, torch.Tensor]:
    width = max(len(r) for r in rows)
    ids = torch.full((len(rows), width), fill, dtype=torch.long)
    mask = torch.zeros(len(rows), width, dtype=torch.bool)
    for i, r in enumerate(rows):
        ids[i, : len(r)] = torch.tensor(list(r), dtype=torch.long)
        mask[i, : len(r)] = True
    return ids, mask


def make_gen_batch(
    examples: Sequence[GenExample],
    vocab: Vocabulary,
    graph: KnowledgeGraph,
    c_e: torch.Tensor,
    histories: Sequence[Sequence[int]],
    max_context: int = MAX_CONTEXT,
    max_response: int = MAX_RESPONSE,
) -> GenBatch:
    ctx, ctx_mask = _pad([context_ids(ex.context, vocab, max_context) for ex in examples], vocab.pad)
    resp = [response_ids(ex.response.text, vocab, max_response) for ex in examples]
    if any(len(r) == 0 for r in resp):
        raise ValueError("every response needs at least one token")
    dec_in, _ = _pad([[vocab.bos, *r] for r in resp], vocab.pad)
    targets, target_mask = _pad([[*r, vocab.eos] for r in resp], vocab.pad)
    word_mask = target_mask & (targets != vocab.eos)
    for i, r in enumerate(resp):
        word_mask[i, len(r) :] = False
    boe = torch.zeros(len(examples), graph.num_entities, dtype=DTYPE)
    has = torch.zeros(len(examples), dtype=torch.bool)
    for i, ex in enumerate(examples):
        for item in ex.items:
            if graph.is_item(item):
                boe[i, one_hop_neighbors(graph, item)] = 1.0
                has[i] = True
    d_e = torch.stack([entity_word_indicator(h, vocab) for h in histories]) if examples else torch.zeros(0, len(vocab))
    return GenBatch(ctx, ctx_mask, dec_in, targets, target_mask, word_mask, c_e.detach().to(DTYPE), boe, has, d_e)


# ---------------------------------------------------------------- losses


@dataclass
class LossBreakdown:
    l_gen: torch.Tensor
    l_boe: torch.Tensor
    l_infuse: torch.Tensor
    lambda1: float
    lambda2: float
    l_total: torch.Tensor = field(init=False)

    def __post_init__(self):
        self.l_total = self.l_gen + self.lambda1 * self.l_boe + self.lambda2 * self.l_infuse

    def floats(self) -> dict[str, float]:
        return {k: float(getattr(self, k)) for k in ("l_gen", "l_boe", "l_infuse", "l_total")}


def teacher_forced_states(batch: GenBatch, model: ResponseGenerator) -> torch.Tensor:
    mem = model.encode(batch.ctx, batch.ctx_mask)
    return model.decode(batch.dec_in, batch.target_mask, mem, batch.ctx_mask)


def generation_loss(batch: GenBatch, model: ResponseGenerator, states: torch.Tensor | None = None) -> torch.Tensor:
    """Mean over examples of the per-token negative log-likelihood."""
    s = teacher_forced_states(batch, model) if states is None else states
    logits = model.vocab_logits(s, batch.c_e)
    logp = logits - torch.logsumexp(logits, dim=-1, keepdim=True)
    nll = -logp.gather(-1, batch.targets[..., None])[..., 0] * batch.target_mask
    per_example = nll.sum(1) / batch.target_mask.sum(1)
    return per_example.mean()


def boe_accumulator(states: torch.Tensor, c_e: torch.Tensor, step_mask: torch.Tensor, model: ResponseGenerator) -> torch.Tensor:
    """Per-example sum over response steps of the entity softmax."""
    p = softmax(model.entity_logits(states, c_e))
    return (p * step_mask[..., None]).sum(-2)


def boe_sentence_probability(states: torch.Tensor, c_e: torch.Tensor, model: ResponseGenerator, step_mask: torch.Tensor | None = None) -> torch.Tensor:
    """Sigmoid of the summed per-step entity distributions.

    ``states`` is ``(L, d)`` for one response or ``(B, T, d)`` with a mask.
    """
    if step_mask is None:
        if states.shape[-2] == 0:
            raise ValueError("no response steps to sum over")
        step_mask = torch.ones(states.shape[:-1], dtype=torch.bool)
    elif not bool(step_mask.any(-1).all()):
        raise ValueError("no response steps to sum over")
    return torch.sigmoid(boe_accumulator(states, c_e, step_mask, model))


def boe_loss_from_logits(acc: torch.Tensor, targets: torch.Tensor, has: torch.Tensor) -> torch.Tensor:
    # log sigmoid on the accumulator is the stable form of log P_boe
    nll = -(targets * F.logsigmoid(acc)).sum(-1)
    if not bool(has.any()):
        return nll.sum() * 0.0
    return nll[has].mean()


def boe_loss(p_boe: torch.Tensor, targets: torch.Tensor, has: torch.Tensor | None = None) -> torch.Tensor:
    if p_boe.dim() == 1:
        p_boe, targets = p_boe[None], targets[None]
    if has is None:
        has = targets.sum(-1) > 0
    nll = -(targets * torch.log(p_boe)).sum(-1)
    if not bool(has.any()):
        return nll.sum() * 0.0
    return nll[has].mean()


def infusion_loss(c_e: torch.Tensor, d_e: torch.Tensor, model: ResponseGenerator) -> torch.Tensor:
    """Squared distance between projected history and its entity-word indicator, per word."""
    s = model.similarity(c_e)
    return ((s - d_e) ** 2).sum(-1).div(d_e.shape[-1]).mean()


def total_generation_loss(batch: GenBatch, model: ResponseGenerator, lambda1: float = 1.5, lambda2: float = 0.025) -> LossBreakdown:
    if lambda1 < 0 or lambda2 < 0:
        raise ValueError("loss weights must be nonnegative")
    states = teacher_forced_states(batch, model)
    l_gen = generation_loss(batch, model, states)
    acc = boe_accumulator(states, batch.c_e, batch.word_mask, model)
    l_boe = boe_loss_from_logits(acc, batch.boe_targets, batch.has_boe)
    l_inf = infusion_loss(batch.c_e, batch.d_e, model)
    return LossBreakdown(l_gen, l_boe, l_inf, lambda1, lambda2)


def param_grads(loss: torch.Tensor, model: nn.Module) -> dict[str, torch.Tensor]:
    named = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    grads = torch.autograd.grad(loss, [p for _, p in named], retain_graph=True, allow_unused=True)
    return {n: (g if g is not None else torch.zeros_like(p)) for (n, p), g in zip(named, grads)}


# ---------------------------------------------------------------- decoding


@dataclass
class DecoderState:
    memory: torch.Tensor  # (1, n, d)
    memory_mask: torch.Tensor  # (1, n)
    prefix: list[int]
    step_hiddens: list[torch.Tensor] = field(default_factory=list)
    boe_acc: torch.Tensor | None = None

    @property
    def length(self) -> int:
        return len(self.prefix) - 1


def encode_context(context: Sequence[Message], vocab: Vocabulary, model: ResponseGenerator) -> tuple[torch.Tensor, torch.Tensor]:
    ids = torch.tensor([context_ids(context, vocab, model.max_context)], dtype=torch.long)
    mask = torch.ones_like(ids, dtype=torch.bool)
    return model.encode(ids, mask), mask


def start_state(context: Sequence[Message], vocab: Vocabulary, model: ResponseGenerator) -> DecoderState:
    mem, mask = encode_context(context, vocab, model)
    return DecoderState(mem, mask, [vocab.bos])


def decode_step(state: DecoderState, c_e: torch.Tensor, model: ResponseGenerator, vocab: Vocabulary) -> tuple[torch.Tensor, DecoderState]:
    if not state.prefix or state.prefix[0] != vocab.bos:
        raise ValueError("prefix must start with BOS")
    if state.length > model.max_response:
        raise ResponseTooLong(f"prefix holds {state.length} tokens, limit {model.max_response}")
    prefix = torch.tensor([state.prefix], dtype=torch.long)
    s = model.decode(prefix, torch.ones_like(prefix, dtype=torch.bool), state.memory, state.memory_mask)[0, -1]
    p_res = softmax(model.vocab_logits(s, c_e))
    step = softmax(model.entity_logits(s, c_e))
    acc = step if state.boe_acc is None else state.boe_acc + step
    new = DecoderState(state.memory, state.memory_mask, list(state.prefix), [*state.step_hiddens, s], acc)
    return p_res, new


def combined_scores(p_res: torch.Tensor, boe_acc: torch.Tensor, vocab: Vocabulary, lambda3: float) -> torch.Tensor:
    """Token distribution plus weighted bag-of-entity probability at entity words."""
    bonus = torch.zeros_like(p_res)
    if vocab.entity_token_map and lambda3:
        tids = torch.tensor(list(vocab.entity_token_map), dtype=torch.long)
        ents = torch.tensor(list(vocab.entity_token_map.values()), dtype=torch.long)
        bonus[tids] = torch.sigmoid(boe_acc[ents])
    return p_res + lambda3 * bonus


@torch.no_grad()
def generate_response(
    context: Sequence[Message], c_e: torch.Tensor, model: ResponseGenerator, vocab: Vocabulary, lambda3: float = 0.1
) -> list[str]:
    """Greedy decoding; the bag-of-entity term is summed over the predicted prefix."""
    if lambda3 < 0:
        raise ValueError("lambda3 must be nonnegative")
    state = start_state(context, vocab, model)
    out: list[int] = []
    for _ in range(model.max_response):
        p_res, state = decode_step(state, c_e, model, vocab)
        tok = int(torch.argmax(combined_scores(p_res, state.boe_acc, vocab, lambda3)))
        if tok == vocab.eos:
            break
        out.append(tok)
        state.prefix.append(tok)
    return vocab.decode(out)


def detokenize(tokens: Sequence[str]) -> str:
    return " ".join(t for t in tokens if t != EOS)
