import json
import os
import tempfile

import numpy as np
import pytest

import memlong


def tiny(**extra):
    cfg = dict(
        n_layers=4,
        n_heads=2,
        d_model=16,
        chunk_size=8,
        local_window=16,
        memory_layer=2,
        retrieval_layers=[3, 4],
        retrieval_k=2,
        d_ret=8,
        memory_capacity=64,
    )
    cfg.update(extra)
    return memlong.new_model(**cfg)


def test_tokenizer_round_trip():
    ids = memlong.encode("héllo")
    assert all(0 <= i < 256 for i in ids)
    assert memlong.decode(ids).decode("utf-8") == "héllo"
    with pytest.raises(memlong.TokenError):
        memlong.decode([258])


def test_bad_config_raises():
    with pytest.raises(memlong.ConfigError):
        memlong.new_model(d_model=15)


def test_zero_gate_document_forward_equals_baseline():
    m = tiny()
    toks = memlong.encode("the quick brown fox jumps over the lazy dog " * 2)
    base = m.forward_baseline(toks)
    doc = m.forward_document(toks, memory=16)
    assert base.shape == (len(toks), memlong.VOCAB_SIZE)
    assert doc["retrieved_chunks"] > 0
    np.testing.assert_allclose(doc["logits"], base, atol=1e-6)


def test_session_streams_like_document_forward():
    m = tiny()
    m.set_gates(0.5)
    toks = memlong.encode("a b c d e f g h i j k l m n o p q r s t u v w x y z 0123456789")
    doc = m.forward_document(toks, memory=16)["logits"]
    s = memlong.Session(m, memory=16)
    out = np.concatenate([s.feed(toks[:13]), s.feed(toks[13:])])
    np.testing.assert_allclose(out, doc, atol=1e-5)
    assert s.position == len(toks)
    assert len(s.generate(5)) == 5
    assert s.stats["chunks_completed"] >= len(toks) // 8


def test_checkpoint_round_trip():
    m = tiny()
    tmp = os.environ.get("MEMLONG_TEST_TMP") or tempfile.gettempdir()
    os.makedirs(tmp, exist_ok=True)
    path = os.path.join(tmp, "py_smoke.ckpt")
    m.save(path)
    back = memlong.Model.load(path)
    assert memlong.config_of(back) == memlong.config_of(m)
    for name in m.parameter_names():
        np.testing.assert_array_equal(back.parameter(name), m.parameter(name))
    with open(path, "r+b") as f:
        f.write(b"XX")
    with pytest.raises(memlong.FormatError):
        memlong.Model.load(path)
    os.remove(path)


def test_top_k_matches_numpy():
    rng = np.random.default_rng(0)
    rows = rng.normal(size=(200, 12)).astype(np.float32)
    rows /= np.linalg.norm(rows, axis=1, keepdims=True)
    q = rows[17] + 0.01 * rng.normal(size=12).astype(np.float32)
    ids = list(range(0, 400, 2))
    hits = memlong.top_k(q, rows, ids, 5, 1000)
    cos = rows @ q / np.linalg.norm(q)
    want = [ids[i] for i in np.argsort(-cos, kind="stable")[:5]]
    assert [h[0] for h in hits] == want


def test_eval_perplexity_report():
    m = tiny()
    docs = [memlong.encode(("lorem ipsum dolor sit amet " * 10)[:96])]
    rep = memlong.eval_perplexity(m, docs, [64], 8, 16)
    row = rep["lengths"][0]
    assert row["documents"] == 1 and row["scored_tokens"] == 16
    assert 200 < row["perplexity"] < 320
