import io
import json

import pytest

from kgcrs import corpus, kg_store
from kgcrs.cli import chat_turn, main, open_session
from kgcrs.linking import LinkingError

from conftest import DATA


def run(*args):
    return main([str(a) for a in args])


def test_synth_and_stats(tmp_path, capsys):
    assert run("synth", "--out", tmp_path, "--num-convs", 12) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["conversations"] == 12
    with open(tmp_path / "conversations.jsonl") as fh:
        assert len(corpus.load_conversations(fh)) == 12
    assert run("stats", "--kg", tmp_path / "kg") == 0
    stats = json.loads(capsys.readouterr().out)
    assert stats["total_nodes"] == summary["entities"] and stats["total_edges"] == summary["triples"]


def test_build_kg(tmp_path, capsys):
    assert run("build-kg", "--records", DATA / "domain_records.jsonl", "--out", tmp_path / "kg") == 0
    stats = json.loads(capsys.readouterr().out)
    assert (stats["total_nodes"], stats["total_edges"]) == (49, 200)
    g = kg_store.load_graph(tmp_path / "kg")
    assert (g.num_entities, len(g.triples)) == (49, 200)


def test_usage_errors(capsys):
    with pytest.raises(SystemExit) as err:
        main(["train-rec", "--kg", "x"])
    assert err.value.code == 1
    with pytest.raises(SystemExit) as err:
        main(["no-such-command"])
    assert err.value.code == 1


def test_data_errors(tmp_path):
    assert run("stats", "--kg", tmp_path / "missing") == 2
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"title": "x", "year": 2000, "genres": "oops"}\n')
    assert run("build-kg", "--records", bad, "--out", tmp_path / "kg") == 2
    cfg = tmp_path / "c.json"
    cfg.write_text('{"learning_rate": 1}')
    assert run("train-rec", "--config", cfg, "--kg", tmp_path, "--data", tmp_path, "--out", tmp_path / "o") == 2


def test_numeric_failure(tmp_path, pipeline):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"d_k": 4, "d_f": 4, "lr_rec": 1e300, "batch_rec": 8, "epochs": 5, "patience": None}))
    code = run("train-rec", "--config", cfg, "--kg", pipeline["kg"], "--data", pipeline["data"], "--out", tmp_path / "o")
    assert code == 3


def test_predict_evaluate_project(tmp_path, pipeline, capsys):
    p = pipeline
    pred, resp = tmp_path / "pred.jsonl", tmp_path / "resp.jsonl"
    assert run(
        "predict", "--config", p["root"] / "gen.json", "--kg", p["kg"], "--data", p["data"], "--rec-ckpt", p["rec"],
        "--gen-ckpt", p["gen"], "--split", "train", "--k", 10, "--pred", pred, "--resp", resp,
    ) == 0
    events = [json.loads(l) for l in pred.read_text().splitlines()]
    assert events and all(not set(e["ranked_item_ids"]) & set(e["mentioned_item_ids"]) for e in events)
    rows = [json.loads(l) for l in resp.read_text().splitlines()]
    assert set(rows[0]) == {"conversation_id", "turn", "tokens", "text", "entity_token_ids"}
    out = tmp_path / "report.json"
    assert run("evaluate", "--pred", pred, "--resp", resp, "--kg", p["kg"], "--gen-ckpt", p["gen"], "--ks", "1,5,10", "--out", out) == 0
    report = json.loads(out.read_text())
    assert report["rank"]["recall"]["1"] >= 0.9
    assert abs(report["repetition"]["new"] + report["repetition"]["repetitive"] - 1) < 1e-12
    assert report["generation"]["aen"] > 0
    # default Ks need 50-long lists, which a 10-item toy cannot supply
    assert run("evaluate", "--pred", pred, "--kg", p["kg"], "--out", out) == 2
    pts = tmp_path / "points.csv"
    assert run("project", "--checkpoint", p["gen"], "--out", pts) == 0
    lines = pts.read_text().splitlines()
    assert lines[0] == "x,y,label" and len(lines) > 3


def session(pipeline):
    return open_session(pipeline["rec"], pipeline["gen"], pipeline["kg"], k=5)


def test_missing_checkpoint(pipeline, tmp_path):
    with pytest.raises(FileNotFoundError):
        open_session(tmp_path / "nope", pipeline["gen"], pipeline["kg"])
    assert run("chat", "--rec-ckpt", tmp_path / "nope", "--gen-ckpt", pipeline["gen"], "--kg", pipeline["kg"]) == 2


def test_cold_open(pipeline):
    s = session(pipeline)
    text, items, s = chat_turn(s, "")
    assert isinstance(text, str) and len(items) == 5
    assert len(s.messages) == 2


def test_attribute_mention_recovers_item(pipeline):
    s = session(pipeline)
    g = s.graph
    hits = 0
    for item in g.item_ids:
        attrs = [g.entities[a].name for a in kg_store.one_hop_neighbors(g, item)]
        s = session(pipeline)
        _, items, _ = chat_turn(s, f"hello i like {attrs[0]} and {attrs[1]} movies")
        hits += items[0] == item
    assert hits == len(g.item_ids)


def test_repeated_turn_never_repeats(pipeline):
    s = session(pipeline)
    seen = []
    for _ in range(8):
        before = set(s.mentioned)
        _, items, s = chat_turn(s, "i like drama movies")
        assert not set(items) & before
        if items:
            seen.append(items[0])
    assert len(seen) == len(set(seen))


def test_replay_is_deterministic(pipeline):
    script = ["", "i like drama and noir movies", "hmm something else", "thanks"]
    a, b = session(pipeline), session(pipeline)
    out_a = [chat_turn(a, t)[:2] for t in script]
    out_b = [chat_turn(b, t)[:2] for t in script]
    assert out_a == out_b


def test_unknown_marker_in_chat(pipeline):
    with pytest.raises(LinkingError):
        chat_turn(session(pipeline), "what about @nosuchmovie")


def test_chat_command(pipeline, monkeypatch, capsys):
    monkeypatch.setattr("sys.stdin", io.StringIO("hello\ni like drama movies\n"))
    assert run("chat", "--rec-ckpt", pipeline["rec"], "--gen-ckpt", pipeline["gen"], "--kg", pipeline["kg"]) == 0
    assert capsys.readouterr().out.count("bot:") == 2
