"""Optimization, checkpointing and gradient verification."""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
import random
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from .corpus import Conversation, GenExample, Vocabulary, build_vocab, make_gen_examples, make_rec_examples
from .generator import ResponseGenerator, make_gen_batch, param_grads, response_ids, total_generation_loss
from .kg_store import KnowledgeGraph
from .numerics import DTYPE, record_preactivations
from .recommender import EmptyBatch, Recommender, rec_loss

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr_rec: float = 3e-3
    lr_gen: float = 1e-1
    batch_rec: int = 128
    batch_gen: int = 32
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    clip_threshold: float = 0.1
    l2_coeff: float = 1e-5
    lambda1: float = 1.5
    lambda2: float = 0.025
    lambda3: float = 0.1
    epochs: int = 100
    patience: int | None = 5
    seed: int = 0
    # model shape
    d_k: int = 200
    d_f: int = 200
    rgcn_layers: int = 2
    d_model: int = 300
    n_enc: int = 2
    n_dec: int = 2
    heads: int = 2
    max_context: int = 256
    max_response: int = 20
    min_freq: int = 2

    def __post_init__(self):
        if self.lr_rec < 0 or self.lr_gen < 0:
            raise ValueError("learning rates must be nonnegative")

    @classmethod
    def from_json(cls, obj: Mapping) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**obj)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


class NonFiniteGradient(FloatingPointError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"non-finite gradient in {name}")


class TrainingDiverged(FloatingPointError):
    pass


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)
    step: int = 0


def clip_grads(grads: Mapping[str, torch.Tensor], threshold: float) -> tuple[dict[str, torch.Tensor], float]:
    """Scale all gradients together so their global L2 norm is at most ``threshold``."""
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    scale = threshold / norm if norm > threshold else 1.0
    return {k: g * scale for k, g in grads.items()}, norm


@torch.no_grad()
def clip_and_step(
    params: Mapping[str, torch.Tensor],
    grads: Mapping[str, torch.Tensor],
    state: AdamState,
    cfg: TrainConfig,
    lr: float,
) -> float:
    """One L2-regularized, norm-clipped Adam update in place; returns the pre-clip norm.

    "Gradients within [0, 0.1]" is read as a bound on the global norm: a
    value clamp to [0, 0.1] would forbid negative gradients entirely.
    """
    for name, g in grads.items():
        if not bool(torch.isfinite(g).all()):
            raise NonFiniteGradient(name)
    full = {k: g + cfg.l2_coeff * params[k] for k, g in grads.items()}
    clipped, norm = clip_grads(full, cfg.clip_threshold)
    state.step += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1, c2 = 1 - b1**state.step, 1 - b2**state.step
    for k, g in clipped.items():
        m = state.m.setdefault(k, torch.zeros_like(g))
        v = state.v.setdefault(k, torch.zeros_like(g))
        m.mul_(b1).add_(g, alpha=1 - b1)
        v.mul_(b2).addcmul_(g, g, value=1 - b2)
        params[k].sub_(lr * (m / c1) / ((v / c2).sqrt() + cfg.eps))
    return norm


# ---------------------------------------------------------------- gradient check


@dataclass
class FdReport:
    max_rel_err: dict[str, float]
    checked: dict[str, int]
    skipped_kinks: dict[str, int]
    # both gradients below what central differences can resolve at this step
    unresolved: dict[str, int] = field(default_factory=dict)

    @property
    def worst(self) -> float:
        return max(self.max_rel_err.values(), default=0.0)


def _near_kink(base: list[torch.Tensor], moved: list[torch.Tensor], margin: float) -> bool:
    """True when a pre-activation the perturbation touches lies within ``margin`` of zero or flips sign."""
    if len(base) != len(moved):
        return True
    for a, b in zip(base, moved):
        touched = a != b
        if bool((touched & (a.abs() < margin)).any()) or bool(((a > 0) != (b > 0)).any()):
            return True
    return False


def finite_difference_check(
    loss_fn: Callable[[], torch.Tensor],
    params: Mapping[str, torch.Tensor],
    step: float = 1e-5,
    coords_per_tensor: int = 20,
    seed: int = 0,
    margin: float = 1e-3,
) -> FdReport:
    """Compare autograd gradients with central differences on sampled coordinates.

    A coordinate is skipped when perturbing it moves a ReLU pre-activation
    that sits within ``margin`` of zero, since the difference quotient may
    then straddle a kink. Relative error is ``|a-n| / max(|a|, |n|, 1e-8)``.
    Coordinates where both gradients are below the difference resolution (a
    few ulps of the loss over ``2*step``) carry no signal and are counted as
    unresolved instead.
    """
    names = list(params)
    with record_preactivations() as base:
        loss = loss_fn()
    analytic = torch.autograd.grad(loss, [params[n] for n in names], allow_unused=True)
    rng = np.random.default_rng(seed)
    errs, counts, skipped, unresolved = {}, {}, {}, {}
    for name, grad in zip(names, analytic):
        p = params[name]
        flat_grad = grad.reshape(-1) if grad is not None else torch.zeros(p.numel(), dtype=p.dtype)
        order = rng.permutation(p.numel())
        worst, n_ok, n_skip, n_flat = 0.0, 0, 0, 0
        for idx in order:
            if n_ok >= coords_per_tensor:
                break
            idx = int(idx)
            vals = []
            kink = False
            for sgn in (1.0, -1.0):
                with torch.no_grad():
                    p.view(-1)[idx] += sgn * step
                with record_preactivations() as rec, torch.no_grad():
                    vals.append(float(loss_fn()))
                with torch.no_grad():
                    p.view(-1)[idx] -= sgn * step
                kink = kink or _near_kink(base, rec, margin)
            if kink:
                n_skip += 1
                continue
            num = (vals[0] - vals[1]) / (2 * step)
            ana = float(flat_grad[idx])
            resolution = 8 * np.finfo(np.float64).eps * max(abs(v) for v in vals) / (2 * step)
            if max(abs(ana), abs(num)) < resolution:
                n_flat += 1
                continue
            worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), 1e-8))
            n_ok += 1
        errs[name], counts[name], skipped[name], unresolved[name] = worst, n_ok, n_skip, n_flat
    return FdReport(errs, counts, skipped, unresolved)


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(directory, state: Mapping[str, torch.Tensor], meta: Mapping | None = None) -> None:
    """Flat little-endian float64 blob plus a JSON manifest of offsets and shapes."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    manifest, chunks, offset = {}, [], 0
    for name, t in state.items():
        arr = np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f8")
        manifest[name] = {"offset": offset, "shape": list(arr.shape)}
        chunks.append(arr.tobytes())
        offset += arr.size
    (d / "params.bin").write_bytes(b"".join(chunks))
    (d / "manifest.json").write_text(json.dumps({"params": manifest, "meta": dict(meta or {})}, indent=1, sort_keys=True))


def load_checkpoint(directory) -> tuple[dict[str, torch.Tensor], dict]:
    d = Path(directory)
    man = json.loads((d / "manifest.json").read_text())
    flat = np.frombuffer((d / "params.bin").read_bytes(), dtype="<f8")
    state = {}
    for name, entry in man["params"].items():
        size = int(np.prod(entry["shape"])) if entry["shape"] else 1
        chunk = flat[entry["offset"] : entry["offset"] + size]
        state[name] = torch.tensor(chunk.reshape(entry["shape"]), dtype=DTYPE)
    return state, man["meta"]


def write_loss_curve(path, curve: Sequence[tuple[int, float, float]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_loss"])
        for row in curve:
            w.writerow([row[0], repr(row[1]), repr(row[2])])


def float_state(model: torch.nn.Module) -> dict[str, torch.Tensor]:
    return {k: v for k, v in model.state_dict().items() if v.is_floating_point()}


def load_recommender(directory, graph: KnowledgeGraph) -> Recommender:
    state, meta = load_checkpoint(directory)
    model = Recommender(graph, **meta["config"])
    model.load_state_dict(state)
    return model


def load_generator(directory) -> tuple[ResponseGenerator, Vocabulary]:
    state, meta = load_checkpoint(directory)
    cfg = dict(meta["config"])
    n_ent, d_f = cfg.pop("num_entities"), cfg.pop("d_f")
    model = ResponseGenerator(entity_table=torch.zeros(n_ent, d_f, dtype=DTYPE), **cfg)
    model.load_state_dict(state)
    return model, Vocabulary.from_json(meta["vocab"])


# ---------------------------------------------------------------- training


@dataclass
class TrainResult:
    model: torch.nn.Module
    curve: list[tuple[int, float, float]]
    best_epoch: int
    best_state: dict[str, torch.Tensor]
    vocab: Vocabulary | None = None


def _batches(items: Sequence, size: int, rng: random.Random) -> list[list]:
    order = list(items)
    rng.shuffle(order)
    return [order[i : i + size] for i in range(0, len(order), size)]


def _run(model, cfg: TrainConfig, lr: float, train_items, batch_size: int, loss_and_grads, val_loss) -> TrainResult:
    rng = random.Random(cfg.seed)
    params = {n: p for n, p in model.named_parameters() if p.requires_grad}
    state = AdamState()
    curve: list[tuple[int, float, float]] = []
    best = (math.inf, 0, copy.deepcopy(model.state_dict()))
    stale = 0
    for epoch in range(1, cfg.epochs + 1):
        losses, weights = [], []
        for batch in _batches(train_items, batch_size, rng):
            try:
                loss, grads = loss_and_grads(batch)
            except EmptyBatch:
                continue
            if not math.isfinite(loss):
                model.load_state_dict(best[2])
                raise TrainingDiverged(f"loss became {loss} in epoch {epoch}")
            clip_and_step(params, grads, state, cfg, lr)
            losses.append(loss)
            weights.append(len(batch))
        train_loss = float(np.average(losses, weights=weights)) if losses else float("nan")
        val = val_loss()
        score = val if math.isfinite(val) else train_loss
        curve.append((epoch, train_loss, val))
        log.info("epoch %d train %.6f val %.6f", epoch, train_loss, val)
        if score < best[0]:
            best, stale = (score, epoch, copy.deepcopy(model.state_dict())), 0
        else:
            stale += 1
            if cfg.patience is not None and stale >= cfg.patience:
                break
    return TrainResult(model, curve, best[1], best[2])


def build_recommender(graph: KnowledgeGraph, cfg: TrainConfig) -> Recommender:
    return Recommender(graph, d_k=cfg.d_k, d_f=cfg.d_f, num_layers=cfg.rgcn_layers, seed=cfg.seed)


def train_recommender(
    train: Sequence[Conversation], valid: Sequence[Conversation], graph: KnowledgeGraph, cfg: TrainConfig, model: Recommender | None = None
) -> TrainResult:
    torch.manual_seed(cfg.seed)
    model = model or build_recommender(graph, cfg)
    train_ex = [ex for c in train for ex in make_rec_examples(c, graph) if ex.eligible]
    valid_ex = [ex for c in valid for ex in make_rec_examples(c, graph) if ex.eligible]
    if not train_ex:
        raise EmptyBatch("training split has no new-and-liked recommendations")

    def val_loss():
        if not valid_ex:
            return float("nan")
        from .recommender import rec_loss_tensor

        with torch.no_grad():
            return float(rec_loss_tensor(valid_ex, model))

    return _run(model, cfg, cfg.lr_rec, train_ex, cfg.batch_rec, lambda b: rec_loss(b, model), val_loss)


@dataclass
class PreparedGen:
    example: GenExample
    history: list[int]
    c_e: torch.Tensor


def prepare_gen_examples(convs: Sequence[Conversation], rec: Recommender, vocab: Vocabulary, max_response: int = 20) -> list[PreparedGen]:
    from .linking import link_entities

    out = []
    with torch.no_grad():
        H = rec.entity_table()
        for conv in convs:
            for ex in make_gen_examples(conv):
                if not response_ids(ex.response.text, vocab, max_response):
                    continue
                hist = link_entities(ex.context, rec.graph).unique()
                c_e, _ = rec.pool(H, hist)
                out.append(PreparedGen(ex, hist, c_e))
    return out


def gen_batch(items: Sequence[PreparedGen], vocab: Vocabulary, graph: KnowledgeGraph, cfg: TrainConfig):
    return make_gen_batch(
        [p.example for p in items], vocab, graph, torch.stack([p.c_e for p in items]), [p.history for p in items],
        cfg.max_context, cfg.max_response,
    )


def build_generator(vocab: Vocabulary, rec: Recommender, cfg: TrainConfig) -> ResponseGenerator:
    with torch.no_grad():
        H = rec.entity_table()
    return ResponseGenerator(
        len(vocab), H, d=cfg.d_model, n_enc=cfg.n_enc, n_dec=cfg.n_dec, heads=cfg.heads,
        max_context=cfg.max_context, max_response=cfg.max_response, seed=cfg.seed,
    )


def train_generator(
    train: Sequence[Conversation],
    valid: Sequence[Conversation],
    graph: KnowledgeGraph,
    rec: Recommender,
    cfg: TrainConfig,
    vocab: Vocabulary | None = None,
    model: ResponseGenerator | None = None,
) -> TrainResult:
    """Second training phase: the recommender is frozen and supplies H and pooled histories."""
    torch.manual_seed(cfg.seed)
    vocab = vocab or build_vocab(train, cfg.min_freq, graph)
    model = model or build_generator(vocab, rec, cfg)
    train_items = prepare_gen_examples(train, rec, vocab, cfg.max_response)
    valid_items = prepare_gen_examples(valid, rec, vocab, cfg.max_response)
    if not train_items:
        raise EmptyBatch("training split has no recommender responses")

    def loss_and_grads(batch):
        br = total_generation_loss(gen_batch(batch, vocab, graph, cfg), model, cfg.lambda1, cfg.lambda2)
        return br.l_total.item(), param_grads(br.l_total, model)

    def val_loss():
        if not valid_items:
            return float("nan")
        with torch.no_grad():
            return float(total_generation_loss(gen_batch(valid_items, vocab, graph, cfg), model, cfg.lambda1, cfg.lambda2).l_total)

    result = _run(model, cfg, cfg.lr_gen, train_items, cfg.batch_gen, loss_and_grads, val_loss)
    result.vocab = vocab
    return result


def train_model(kind: str, split, graph: KnowledgeGraph, cfg: TrainConfig, rec: Recommender | None = None) -> TrainResult:
    if kind == "recommender":
        return train_recommender(split.train, split.valid, graph, cfg)
    if kind == "generator":
        if rec is None:
            raise ValueError("generator training needs a trained recommender")
        return train_generator(split.train, split.valid, graph, rec, cfg)
    raise ValueError(f"unknown module {kind!r}")


def recommender_meta(model: Recommender, cfg: TrainConfig, result: TrainResult) -> dict:
    return {"kind": "recommender", "config": model.config, "train_config": asdict(cfg), "best_epoch": result.best_epoch}


def generator_meta(model: ResponseGenerator, vocab: Vocabulary, cfg: TrainConfig, result: TrainResult) -> dict:
    return {"kind": "generator", "config": model.config, "vocab": vocab.to_json(), "train_config": asdict(cfg), "best_epoch": result.best_epoch}
