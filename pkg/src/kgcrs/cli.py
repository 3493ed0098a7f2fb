"""Command line entry point: ``kgcrs <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch

from . import corpus, evalkit, kg_store, trainer
from .corpus import RECOMMENDER, SEEKER, Message, Vocabulary
from .generator import ResponseGenerator, generate_response
from .kg_store import KnowledgeGraph
from .linking import LinkingError, link_entities
from .recommender import Recommender, prediction_events, recommend_topk
from .text import MARKER_RE

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("kgcrs")


# ---------------------------------------------------------------- chat


@dataclass
class ChatSession:
    graph: KnowledgeGraph
    rec: Recommender
    gen: ResponseGenerator
    vocab: Vocabulary
    k: int = 10
    lambda3: float = 0.1
    messages: list[Message] = field(default_factory=list)
    mentioned: set[int] = field(default_factory=set)

    def __post_init__(self):
        self.markers = self.vocab.markers()
        self.marker_of = {e: m for m, e in self.markers.items()}
        with torch.no_grad():
            self.H = self.rec.entity_table()


def _item_token(session: ChatSession, item: int) -> str:
    marker = session.marker_of.get(item)
    return f"@{marker}" if marker is not None else session.graph.entities[item].name


def chat_turn(session: ChatSession, user_text: str) -> tuple[str, list[int], ChatSession]:
    """Append the user turn, recommend unseen items and answer.

    Item mentions in the generated reply are rewritten to the top novel
    recommendation so the reply itself never repeats an item.
    """
    user_markers = {}
    for m in dict.fromkeys(MARKER_RE.findall(user_text)):
        if m.casefold() not in {k.casefold() for k in session.markers}:
            raise LinkingError(m)
        user_markers[m] = next(e for k, e in session.markers.items() if k.casefold() == m.casefold())
    session.messages.append(Message(SEEKER, user_text, user_markers))

    with torch.no_grad():
        history = link_entities(session.messages, session.graph).unique()
        pred = session.rec.predict(history, session.H)
    session.mentioned.update(e for e in history if session.graph.is_item(e))
    ranking = recommend_topk(pred.probs, session.k, session.mentioned, session.graph.item_ids)
    tokens = generate_response(session.messages, pred.pooled, session.gen, session.vocab, session.lambda3)

    reply_markers = {}
    out = []
    for tok in tokens:
        if tok.startswith("@"):
            ent = session.markers.get(tok[1:])
        else:
            ent = session.vocab.entity_token_map.get(session.vocab.index.get(tok, -1))
        if ent is not None and session.graph.is_item(ent):
            if not ranking.items:
                continue
            tok = _item_token(session, ranking.items[0])
            ent = ranking.items[0]
            if tok.startswith("@"):
                reply_markers[tok[1:]] = ent
        out.append(tok)
    text = " ".join(out)
    session.messages.append(Message(RECOMMENDER, text, reply_markers))
    session.mentioned.update(reply_markers.values())
    if ranking.items:
        session.mentioned.add(ranking.items[0])
    return text, ranking.items, session


def open_session(rec_ckpt, gen_ckpt, kg_dir, k: int = 10, lambda3: float = 0.1) -> ChatSession:
    for p in (rec_ckpt, gen_ckpt, kg_dir):
        if not Path(p).exists():
            raise FileNotFoundError(f"missing {p}")
    graph = kg_store.load_graph(kg_dir)
    rec = trainer.load_recommender(rec_ckpt, graph)
    gen, vocab = trainer.load_generator(gen_ckpt)
    return ChatSession(graph, rec, gen, vocab, k, lambda3)


# ---------------------------------------------------------------- commands


def _load_data(data_dir, graph):
    with open(Path(data_dir) / "conversations.jsonl", encoding="utf-8") as fh:
        return corpus.load_conversations(fh, graph)


def _config(path) -> trainer.TrainConfig:
    return trainer.TrainConfig.load(path) if path else trainer.TrainConfig()


def cmd_synth(args):
    convs, graph = corpus.synth_corpus(
        corpus.SynthConfig(args.num_convs, args.num_items, args.num_attrs, args.vocab_size, args.seed)
    )
    out = Path(args.out)
    kg_store.save_graph(graph, out / "kg")
    with open(out / "conversations.jsonl", "w", encoding="utf-8") as fh:
        corpus.dump_conversations(convs, fh)
    print(json.dumps({"conversations": len(convs), "entities": graph.num_entities, "triples": len(graph.triples)}))


def cmd_build_kg(args):
    with open(args.records, encoding="utf-8") as fh:
        records = kg_store.load_records(fh)
    thresholds = json.loads(args.thresholds) if args.thresholds else None
    graph = kg_store.build_domain_kg(records, thresholds)
    kg_store.save_graph(graph, args.out)
    print(json.dumps(asdict(kg_store.graph_stats(graph)), sort_keys=True))


def cmd_stats(args):
    print(json.dumps(asdict(kg_store.graph_stats(kg_store.load_graph(args.kg))), indent=1, sort_keys=True))


def cmd_train_rec(args):
    cfg = _config(args.config)
    graph = kg_store.load_graph(args.kg)
    split = corpus.split_dataset(_load_data(args.data, graph), cfg.seed)
    result = trainer.train_recommender(split.train, split.valid, graph, cfg)
    out = Path(args.out)
    trainer.save_checkpoint(out, result.best_state, trainer.recommender_meta(result.model, cfg, result))
    trainer.write_loss_curve(out / "loss_curve.csv", result.curve)
    print(json.dumps({"best_epoch": result.best_epoch, "epochs": len(result.curve)}))


def cmd_train_gen(args):
    cfg = _config(args.config)
    graph = kg_store.load_graph(args.kg)
    split = corpus.split_dataset(_load_data(args.data, graph), cfg.seed)
    rec = trainer.load_recommender(args.rec_ckpt, graph)
    result = trainer.train_generator(split.train, split.valid, graph, rec, cfg)
    out = Path(args.out)
    trainer.save_checkpoint(out, result.best_state, trainer.generator_meta(result.model, result.vocab, cfg, result))
    trainer.write_loss_curve(out / "loss_curve.csv", result.curve)
    print(json.dumps({"best_epoch": result.best_epoch, "epochs": len(result.curve)}))


def cmd_predict(args):
    cfg = _config(args.config)
    graph = kg_store.load_graph(args.kg)
    convs = getattr(corpus.split_dataset(_load_data(args.data, graph), cfg.seed), args.split)
    rec = trainer.load_recommender(args.rec_ckpt, graph)
    with open(args.pred, "w", encoding="utf-8") as fh:
        evalkit.write_jsonl(fh, prediction_events(rec, convs, args.k))
    if args.gen_ckpt and args.resp:
        gen, vocab = trainer.load_generator(args.gen_ckpt)
        rows = []
        with torch.no_grad():
            H = rec.entity_table()
            for conv in convs:
                for ex in corpus.make_gen_examples(conv):
                    c_e, _ = rec.pool(H, link_entities(ex.context, graph).unique())
                    toks = generate_response(ex.context, c_e, gen, vocab, cfg.lambda3)
                    ids = vocab.encode(toks)
                    rows.append({
                        "conversation_id": ex.conversation_id, "turn": ex.turn, "tokens": toks,
                        "text": " ".join(toks), "entity_token_ids": [t for t in ids if t in vocab.entity_token_map],
                    })
        with open(args.resp, "w", encoding="utf-8") as fh:
            evalkit.write_jsonl(fh, rows)


def cmd_evaluate(args):
    graph = kg_store.load_graph(args.kg)
    events, responses = [], []
    if args.pred:
        with open(args.pred, encoding="utf-8") as fh:
            events = evalkit.read_jsonl(fh)
    if args.resp:
        with open(args.resp, encoding="utf-8") as fh:
            responses = [r["tokens"] for r in evalkit.read_jsonl(fh)]
    markers = trainer.load_generator(args.gen_ckpt)[1].markers() if args.gen_ckpt else None
    ks = [int(k) for k in args.ks.split(",")]
    report = evalkit.metric_report(events, responses, graph, markers, ks)
    Path(args.out).write_text(json.dumps(report, indent=1, sort_keys=True))
    print(json.dumps(report, sort_keys=True))


def cmd_project(args):
    gen, vocab = trainer.load_generator(args.checkpoint)
    rows, labels = [], []
    with torch.no_grad():
        for tid, ent in sorted(vocab.entity_token_map.items()):
            rows.append(gen.embeddings[tid].numpy())
            labels.append(f"word:{vocab.tokens[tid]}")
            rows.append(gen.phi_prime(gen.entity_table[ent]).numpy())
            labels.append(f"entity:{vocab.tokens[tid]}")
    points = evalkit.pca_project(rows, labels)
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        evalkit.write_points(fh, points, labels)


def cmd_chat(args):
    session = open_session(args.rec_ckpt, args.gen_ckpt, args.kg, args.k, args.lambda3)
    print("type a message, empty line to send nothing, Ctrl-D to quit")
    for line in sys.stdin:
        try:
            text, items, _ = chat_turn(session, line.rstrip("\n"))
        except LinkingError as exc:
            print(f"! {exc}")
            continue
        names = ", ".join(session.graph.entities[i].name for i in items[:3])
        print(f"bot: {text}\n     [top: {names}]")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="kgcrs", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write the synthetic toy corpus and graph")
    s.add_argument("--out", required=True)
    s.add_argument("--num-convs", type=int, default=50)
    s.add_argument("--num-items", type=int, default=10)
    s.add_argument("--num-attrs", type=int, default=6)
    s.add_argument("--vocab-size", type=int, default=60)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("build-kg", help="build a movie graph from a record dump")
    s.add_argument("--records", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--thresholds", help='JSON, e.g. {"cast": 2}')
    s.set_defaults(func=cmd_build_kg)

    s = sub.add_parser("stats", help="node and edge counts")
    s.add_argument("--kg", required=True)
    s.set_defaults(func=cmd_stats)

    for name, func in (("train-rec", cmd_train_rec), ("train-gen", cmd_train_gen)):
        s = sub.add_parser(name)
        s.add_argument("--config")
        s.add_argument("--kg", required=True)
        s.add_argument("--data", required=True)
        s.add_argument("--out", required=True)
        if name == "train-gen":
            s.add_argument("--rec-ckpt", required=True)
        s.set_defaults(func=func)

    s = sub.add_parser("predict", help="write prediction and response logs for a split")
    s.add_argument("--config")
    s.add_argument("--kg", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--rec-ckpt", required=True)
    s.add_argument("--gen-ckpt")
    s.add_argument("--split", choices=("train", "valid", "test"), default="test")
    s.add_argument("--k", type=int, default=50)
    s.add_argument("--pred", required=True)
    s.add_argument("--resp")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("evaluate", help="metric report from logs")
    s.add_argument("--pred")
    s.add_argument("--resp")
    s.add_argument("--kg", required=True)
    s.add_argument("--gen-ckpt", help="resolves @marker tokens when counting entities")
    s.add_argument("--ks", default="1,5,10,50")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("project", help="2-D PCA of entity words vs projected entities")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_project)

    s = sub.add_parser("chat", help="interactive terminal session")
    s.add_argument("--rec-ckpt", required=True)
    s.add_argument("--gen-ckpt", required=True)
    s.add_argument("--kg", required=True)
    s.add_argument("--k", type=int, default=10)
    s.add_argument("--lambda3", type=float, default=0.1)
    s.set_defaults(func=cmd_chat)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except FloatingPointError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError, LookupError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
