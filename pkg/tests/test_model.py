"""Encoder/predictor/decoder component contracts."""

import numpy as np
import pytest

from jepadesk import numcore as nc
from jepadesk.errors import (EmptyBank, EmptyTarget, QueryTooLong,
                             ShapeMismatch)
from jepadesk.model import (ModelConfig, TargetEmbedding, decode_embedding,
                            encode_target, encode_visual, init_model, predict,
                            sinusoidal_positions)
from jepadesk.textdata import FrameSeq, TokenSeq, Vocab, tokenize


def build(seed=0, **kw):
    vocab = Vocab.from_texts(["the person opens the door",
                              "someone closes a box",
                              "describe the video"])
    kw.setdefault("d_frame", 6)
    kw.setdefault("d_model", 16)
    kw.setdefault("d_embed", 8)
    kw.setdefault("heads", 2)
    kw.setdefault("max_query_tokens", 8)
    kw.setdefault("ffn_multiplier", 2)
    cfg = ModelConfig(vocab_size=len(vocab), **kw)
    return cfg, vocab, init_model(cfg, vocab, seed=seed)


def video(cfg, t=3, seed=0):
    rng = np.random.default_rng(seed)
    return FrameSeq(rng.standard_normal((t, cfg.d_frame)), fps=2.0)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=10, d_model=10, heads=4)
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=10, attention_mode="diagonal")


def test_encode_visual_length_preserved():
    cfg, _, w = build()
    sv = encode_visual(video(cfg, t=5), w)
    assert sv.values.shape == (5, cfg.d_model)


def test_encode_visual_single_image_duplicated():
    cfg, _, w = build()
    sv = encode_visual(video(cfg, t=1), w)
    assert sv.values.shape == (2, cfg.d_model)
    assert np.allclose(sv.values[0] - sinusoidal_positions(2, cfg.d_model)[0],
                       sv.values[1] - sinusoidal_positions(2, cfg.d_model)[1])


def test_encode_visual_zero_frames_give_bias_rows():
    cfg, _, w = build(positional_encoding=False)
    frames = FrameSeq(np.zeros((3, cfg.d_frame)), fps=1.0)
    sv = encode_visual(frames, w)
    assert np.allclose(sv.values, np.repeat(w["x_encoder.b"].value, 3, axis=0))


def test_encode_visual_deterministic():
    cfg, _, w = build()
    v = video(cfg)
    assert np.array_equal(encode_visual(v, w).values,
                          encode_visual(v, w).values)


def test_encode_visual_shape_mismatch():
    cfg, _, w = build()
    with pytest.raises(ShapeMismatch):
        encode_visual(FrameSeq(np.zeros((2, cfg.d_frame + 1)), 1.0), w)


def test_predict_unit_norm_and_query_too_long():
    cfg, vocab, w = build()
    sv = encode_visual(video(cfg), w)
    q = tokenize("describe the video", vocab, cfg.max_query_tokens)
    e = predict(sv, q, w)
    assert abs(np.linalg.norm(e.vec) - 1.0) < 1e-6
    with pytest.raises(QueryTooLong):
        predict(sv, TokenSeq([1] * (cfg.max_query_tokens + 1)), w)


def test_predict_pad_suffix_invariance():
    cfg, vocab, w = build()
    sv = encode_visual(video(cfg), w)
    short = tokenize("describe", vocab, 4)
    long = tokenize("describe", vocab, cfg.max_query_tokens)
    assert np.abs(predict(sv, short, w).vec -
                  predict(sv, long, w).vec).max() < 1e-6


def test_predict_layers0_identity_head_is_normalized_mean():
    cfg, vocab, w = build(predictor_layers=0, d_model=8, d_embed=8,
                          positional_encoding=False)
    w["predictor.head.w"].value[:] = np.eye(8)
    w["predictor.head.b"].value[:] = 0.0
    sv = encode_visual(video(cfg), w)
    q = tokenize("describe", vocab, cfg.max_query_tokens)
    out = predict(sv, q, w).vec
    tok = w["predictor.token_emb"].value[np.array(q.ids)]
    stacked = np.vstack([sv.values, tok[np.array(q.ids) != 0]])
    mean = stacked.mean(axis=0)
    assert np.allclose(out, mean / np.linalg.norm(mean), atol=1e-9)


def test_predict_causal_vs_bidirectional_differ():
    cfg_b, vocab, w_b = build(attention_mode="bidirectional")
    cfg_c, _, w_c = build(attention_mode="causal")
    v = video(cfg_b)
    q = tokenize("describe the video", vocab, cfg_b.max_query_tokens)
    out_b = predict(encode_visual(v, w_b), q, w_b).vec
    out_c = predict(encode_visual(v, w_c), q, w_c).vec
    assert np.abs(out_b - out_c).max() > 1e-8


def test_predict_query_conditioning_matters():
    cfg, vocab, w = build()
    sv = encode_visual(video(cfg), w)
    with_q = predict(sv, tokenize("describe the video", vocab, 8), w).vec
    without_q = predict(sv, tokenize("", vocab, 8), w).vec
    assert np.abs(with_q - without_q).max() > 1e-8


def test_encode_target_contracts():
    cfg, _, w = build()
    e1 = encode_target("the person opens the door", w)
    e2 = encode_target("the person opens the door", w)
    assert np.array_equal(e1.vec, e2.vec)
    assert abs(np.linalg.norm(e1.vec) - 1.0) < 1e-6
    other = encode_target("someone closes a box", w)
    assert float(e1.vec @ other.vec.T) < 1.0 - 1e-9
    with pytest.raises(EmptyTarget):
        encode_target("   ", w)


def test_decode_embedding_exact_and_ties():
    cfg, _, w = build()
    e1 = encode_target("the person opens the door", w)
    e2 = encode_target("someone closes a box", w)
    bank = [("open", e1), ("close", e2)]
    assert decode_embedding(e1, bank) == "open"
    assert decode_embedding(e2, bank) == "close"
    # exact tie -> lowest index
    tie_bank = [("a", e1), ("b", e2), ("c", e1)]
    assert decode_embedding(e1, tie_bank) == "a"
    with pytest.raises(EmptyBank):
        decode_embedding(e1, [])


def test_decode_embedding_scale_invariant():
    cfg, _, w = build()
    e = encode_target("the person opens the door", w)
    bank = [("x", e), ("y", encode_target("someone closes a box", w))]
    assert decode_embedding(3.5 * e.vec, bank) == "x"


def test_grad_check_composed_predict_infonce():
    from jepadesk.objectives import Temperature, infonce_bidirectional
    from jepadesk.textdata import tokenize as tok
    cfg, vocab, w = build(predictor_layers=1, y_encoder_layers=1)
    vids = [video(cfg, t=2, seed=s) for s in range(2)]
    q = tok("describe", vocab, cfg.max_query_tokens)
    texts = ["the person opens the door", "someone closes a box"]
    params = [p for _, p in sorted(w.params.items())]

    def loss():
        preds = nc.concat_rows(
            [predict(encode_visual(v, w), q, w).node for v in vids])
        tgts = nc.concat_rows([encode_target(t, w).node for t in texts])
        out = infonce_bidirectional(preds, tgts, Temperature(param=w["log_tau"]))
        return out.value

    report = nc.grad_check(loss, params, max_entries=6)
    assert report.passed, report.per_param


def test_state_dict_roundtrip():
    cfg, vocab, w = build()
    state = {n: v.copy() for n, v in w.state_dict().items()}
    w2 = init_model(cfg, vocab, seed=99)
    w2.load_state_dict(state)
    v = video(cfg)
    assert np.array_equal(encode_visual(v, w).values,
                          encode_visual(v, w2).values)
