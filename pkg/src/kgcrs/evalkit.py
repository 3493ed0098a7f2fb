"""Ranking, diversity and informativeness metrics, the repetition audit and 2-D projection."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from typing import IO, Iterable, Mapping, Sequence

import numpy as np

from .kg_store import KnowledgeGraph
from .linking import link_entities

DEFAULT_KS = (1, 5, 10, 50)


class MetricError(ValueError):
    pass


@dataclass
class RankReport:
    recall: dict[int, float]
    precision: dict[int, float]
    ndcg: dict[int, float]
    count: int


@dataclass
class GenReport:
    distinct: dict[int, float]
    aen: float
    count: int


@dataclass
class RepetitionReport:
    new_fraction: float
    repetitive_fraction: float
    count: int


def gold_items(event: Mapping) -> list[int]:
    """Gold for an event: liked items that were not mentioned before the turn."""
    seen = set(event.get("mentioned_item_ids", ()))
    liked = event.get("gold_liked_flags") or [True] * len(event["gold_item_ids"])
    return list(dict.fromkeys(g for g, ok in zip(event["gold_item_ids"], liked) if ok and g not in seen))


def event_metrics(ranked: Sequence[int], gold: Iterable[int], k: int) -> tuple[float, float, float]:
    gold = set(gold)
    top = ranked[:k]
    hits = [1.0 if item in gold else 0.0 for item in top]
    dcg = sum(h / math.log2(rank + 2) for rank, h in enumerate(hits))
    # ideal DCG over the whole gold set, not cut at k, so the score never drops as k grows
    idcg = sum(1.0 / math.log2(rank + 2) for rank in range(len(gold)))
    n_hit = sum(hits)
    return n_hit / len(gold), n_hit / k, dcg / idcg


def rank_metrics(events: Iterable[Mapping], ks: Sequence[int] = DEFAULT_KS) -> RankReport:
    """Average Recall/Precision/NDCG@K over events with a nonempty gold set."""
    ks = tuple(ks)
    sums = {name: {k: 0.0 for k in ks} for name in ("recall", "precision", "ndcg")}
    n = 0
    for ev in events:
        gold = gold_items(ev)
        if not gold:
            continue
        ranked = list(ev["ranked_item_ids"])
        if len(ranked) < max(ks):
            raise MetricError(
                f"event {ev.get('conversation_id')}/{ev.get('turn')}: ranked list has {len(ranked)} items, need {max(ks)}"
            )
        for k in ks:
            r, p, g = event_metrics(ranked, gold, k)
            sums["recall"][k] += r
            sums["precision"][k] += p
            sums["ndcg"][k] += g
        n += 1
    avg = {name: {k: (v / n if n else 0.0) for k, v in d.items()} for name, d in sums.items()}
    return RankReport(avg["recall"], avg["precision"], avg["ndcg"], n)


def distinct_n(responses: Sequence[Sequence[str]], n: int, per_ngram: bool = False) -> float:
    """Distinct n-grams across all responses divided by the response count.

    With ``per_ngram`` the denominator is the total n-gram count instead.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if not responses:
        raise MetricError("distinct-n is undefined for zero responses")
    grams = set()
    total = 0
    for toks in responses:
        for i in range(len(toks) - n + 1):
            grams.add(tuple(toks[i : i + n]))
            total += 1
    if per_ngram:
        return len(grams) / total if total else 0.0
    return len(grams) / len(responses)


def avg_entity_number(responses: Sequence[str | Sequence[str]], graph: KnowledgeGraph, markers: Mapping[str, int] | None = None) -> float:
    if not responses:
        raise MetricError("AEN is undefined for zero responses")
    counts = []
    for r in responses:
        text = r if isinstance(r, str) else " ".join(r)
        counts.append(len(link_entities([text], graph, markers)))
    return sum(counts) / len(counts)


def gen_report(responses: Sequence[Sequence[str]], graph: KnowledgeGraph, markers: Mapping[str, int] | None = None, per_ngram: bool = False) -> GenReport:
    return GenReport(
        {n: distinct_n(responses, n, per_ngram) for n in (2, 3, 4)},
        avg_entity_number(responses, graph, markers),
        len(responses),
    )


def repetition_stats(events: Sequence[Mapping]) -> RepetitionReport:
    events = [ev for ev in events if ev["ranked_item_ids"]]
    if not events:
        raise MetricError("no recommendation events")
    rep = sum(1 for ev in events if ev["ranked_item_ids"][0] in set(ev["mentioned_item_ids"]))
    return RepetitionReport(1 - rep / len(events), rep / len(events), len(events))


def pca_project(rows, labels: Sequence[str] | None = None) -> np.ndarray:
    """Mean-center and project onto the top two principal directions.

    Each direction's sign is fixed so its first nonzero loading is positive.
    Collinear data is accepted (its second coordinate comes out ~0); data with
    no spread at all is rejected.
    """
    x = np.asarray(rows, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise MetricError("need at least two rows to project")
    if labels is not None and len(labels) != x.shape[0]:
        raise ValueError("one label per row")
    xc = x - x.mean(axis=0)
    _, s, vt = np.linalg.svd(xc, full_matrices=False)
    if s[0] <= max(x.shape) * np.finfo(np.float64).eps * max(1.0, np.abs(x).max()):
        raise MetricError("all rows coincide; projection is degenerate")
    comps = np.zeros((2, x.shape[1]))
    comps[: min(2, vt.shape[0])] = vt[:2]
    for c in comps:
        nz = np.flatnonzero(np.abs(c) > 1e-12)
        if nz.size and c[nz[0]] < 0:
            c *= -1
    return xc @ comps.T


def write_points(stream: IO[str], points: np.ndarray, labels: Sequence[str]) -> None:
    w = csv.writer(stream)
    w.writerow(["x", "y", "label"])
    for (px, py), lab in zip(points, labels):
        w.writerow([repr(float(px)), repr(float(py)), lab])


def read_jsonl(stream: IO[str]) -> list[dict]:
    return [json.loads(line) for line in stream if line.strip()]


def write_jsonl(stream: IO[str], rows: Iterable[Mapping]) -> None:
    for row in rows:
        stream.write(json.dumps(row, sort_keys=True) + "\n")


def metric_report(events, responses, graph, markers=None, ks=DEFAULT_KS) -> dict:
    out: dict = {}
    if events:
        rr = rank_metrics(events, ks)
        out["rank"] = {
            "recall": {str(k): v for k, v in rr.recall.items()},
            "precision": {str(k): v for k, v in rr.precision.items()},
            "ndcg": {str(k): v for k, v in rr.ndcg.items()},
            "count": rr.count,
        }
        rep = repetition_stats(events)
        out["repetition"] = {"new": rep.new_fraction, "repetitive": rep.repetitive_fraction, "count": rep.count}
    if responses:
        gr = gen_report(responses, graph, markers)
        out["generation"] = {"distinct": {str(n): v for n, v in gr.distinct.items()}, "aen": gr.aen, "count": gr.count}
    return out
