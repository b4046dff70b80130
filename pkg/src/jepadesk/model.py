"""Toy four-component architecture sharing one normalized embedding space.

Components: a (by default frozen) linear visual projection, a
query-conditioned transformer predictor, a transformer text encoder for
targets, and a nearest-neighbor retrieval-bank readout.  All forwards
build an autograd graph from `numcore`; inference simply never calls
backward on it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .errors import EmptyBank, EmptyTarget, QueryTooLong, ShapeMismatch
from .textdata import BOS_ID, EOS_ID, FrameSeq, TokenSeq, Vocab, normalize_text, tokenize

MANIFEST = {
    "x_encoder": "x_encoder.",
    "predictor": "predictor.",
    "y_encoder": "y_encoder.",
    "loss": "log_tau",
}


@dataclass
class ModelConfig:
    vocab_size: int
    d_frame: int = 16
    d_model: int = 64
    d_embed: int = 64
    predictor_layers: int = 2
    y_encoder_layers: int = 2
    heads: int = 4
    max_query_tokens: int = 32
    attention_mode: str = "bidirectional"  # or "causal"
    ffn_multiplier: int = 4
    pool_visual: bool = True
    positional_encoding: bool = True
    trainable_x_encoder: bool = False

    def __post_init__(self):
        if self.d_model % self.heads != 0:
            raise ValueError("d_model must be divisible by heads")
        if self.predictor_layers < 0 or self.y_encoder_layers < 0:
            raise ValueError("layer counts must be >= 0")
        if self.attention_mode not in ("bidirectional", "causal"):
            raise ValueError("attention_mode must be bidirectional or causal")


@dataclass
class VisualEmbedding:
    seq: nc.Node  # (T, d_model)

    @property
    def values(self):
        return self.seq.value


@dataclass
class TargetEmbedding:
    node: nc.Node  # (1, d_embed), unit norm

    @property
    def vec(self):
        return self.node.value


class ModelWeights:
    """Named parameters for all components plus the shared vocab."""

    def __init__(self, cfg: ModelConfig, vocab: Vocab, params: dict):
        self.cfg = cfg
        self.vocab = vocab
        self.params = params

    def __getitem__(self, name):
        return self.params[name]

    def named(self, prefix=""):
        return [p for n, p in sorted(self.params.items()) if n.startswith(prefix)]

    def state_dict(self):
        return {n: p.value for n, p in self.params.items()}

    def load_state_dict(self, tensors):
        for n, p in self.params.items():
            a = np.asarray(tensors[n], dtype=np.float64)
            if a.shape != p.value.shape:
                raise ShapeMismatch(f"{n}: {a.shape} vs {p.value.shape}")
            p.value[:] = a


def _init_block(params, prefix, d, ffn_mult, rng):
    h = d * ffn_mult
    params[prefix + "ln1.gain"] = nc.Parameter(prefix + "ln1.gain", np.ones((1, d)))
    params[prefix + "ln1.bias"] = nc.Parameter(prefix + "ln1.bias", np.zeros((1, d)))
    for w in ("wq", "wk", "wv", "wo"):
        params[prefix + "attn." + w] = nc.Parameter(
            prefix + "attn." + w, rng.standard_normal((d, d)) / math.sqrt(d))
    params[prefix + "ln2.gain"] = nc.Parameter(prefix + "ln2.gain", np.ones((1, d)))
    params[prefix + "ln2.bias"] = nc.Parameter(prefix + "ln2.bias", np.zeros((1, d)))
    params[prefix + "ffn.w1"] = nc.Parameter(
        prefix + "ffn.w1", rng.standard_normal((d, h)) / math.sqrt(d))
    params[prefix + "ffn.b1"] = nc.Parameter(prefix + "ffn.b1", np.zeros((1, h)))
    params[prefix + "ffn.w2"] = nc.Parameter(
        prefix + "ffn.w2", rng.standard_normal((h, d)) / math.sqrt(h))
    params[prefix + "ffn.b2"] = nc.Parameter(prefix + "ffn.b2", np.zeros((1, d)))


def init_model(cfg: ModelConfig, vocab: Vocab, seed=0):
    if len(vocab) != cfg.vocab_size:
        raise ValueError("vocab size does not match config")
    rng = np.random.default_rng(seed)
    p = {}
    # the visual projection stays frozen, so it is scaled up at init to
    # keep the frame signal from drowning under the positional encoding
    p["x_encoder.w"] = nc.Parameter(
        "x_encoder.w", 3.0 * rng.standard_normal((cfg.d_frame, cfg.d_model))
        / math.sqrt(cfg.d_frame))
    p["x_encoder.b"] = nc.Parameter("x_encoder.b", np.zeros((1, cfg.d_model)))
    for comp, layers in (("predictor", cfg.predictor_layers),
                         ("y_encoder", cfg.y_encoder_layers)):
        p[f"{comp}.token_emb"] = nc.Parameter(
            f"{comp}.token_emb",
            0.5 * rng.standard_normal((cfg.vocab_size, cfg.d_model)))
        for i in range(layers):
            _init_block(p, f"{comp}.block{i}.", cfg.d_model, cfg.ffn_multiplier, rng)
        p[f"{comp}.head.w"] = nc.Parameter(
            f"{comp}.head.w",
            rng.standard_normal((cfg.d_model, cfg.d_embed)) / math.sqrt(cfg.d_model))
        p[f"{comp}.head.b"] = nc.Parameter(f"{comp}.head.b", np.zeros((1, cfg.d_embed)))
    p["log_tau"] = nc.Parameter("log_tau", np.array([[math.log(0.07)]]))
    return ModelWeights(cfg, vocab, p)


def sinusoidal_positions(n, d):
    pos = np.arange(n)[:, None].astype(np.float64)
    i = np.arange(d // 2)[None, :].astype(np.float64)
    angles = pos / np.power(10000.0, 2.0 * i / d)
    pe = np.zeros((n, d))
    pe[:, 0::2] = np.sin(angles)
    pe[:, 1::2] = np.cos(angles[:, : d - d // 2])
    return pe


def _attention_bias(key_mask, causal):
    """(T,T) additive bias: -1e9 where the key is PAD (or future, when
    causal)."""
    t = key_mask.shape[0]
    bias = np.where(key_mask[None, :] > 0, 0.0, -1e9) * np.ones((t, 1))
    if causal:
        bias = bias + np.where(np.tril(np.ones((t, t))) > 0, 0.0, -1e9)
    return bias


def _mha(h, w, prefix, bias, heads):
    d = h.shape[1]
    dh = d // heads
    q = nc.matmul(h, w[prefix + "attn.wq"].node())
    k = nc.matmul(h, w[prefix + "attn.wk"].node())
    v = nc.matmul(h, w[prefix + "attn.wv"].node())
    outs = []
    bias_node = nc.constant(bias)
    for hd in range(heads):
        lo, hi = hd * dh, (hd + 1) * dh
        scores = nc.scale(
            nc.matmul(nc.slice_cols(q, lo, hi), nc.transpose(nc.slice_cols(k, lo, hi))),
            1.0 / math.sqrt(dh))
        probs = nc.softmax(nc.add(scores, bias_node))
        outs.append(nc.matmul(probs, nc.slice_cols(v, lo, hi)))
    return nc.matmul(nc.concat_cols(outs), w[prefix + "attn.wo"].node())


def _transformer(x, w, comp, layers, key_mask, heads, causal=False):
    bias = _attention_bias(key_mask, causal)
    for i in range(layers):
        prefix = f"{comp}.block{i}."
        h = nc.layer_norm(x, w[prefix + "ln1.gain"].node(), w[prefix + "ln1.bias"].node())
        x = nc.add(x, _mha(h, w, prefix, bias, heads))
        h = nc.layer_norm(x, w[prefix + "ln2.gain"].node(), w[prefix + "ln2.bias"].node())
        ff = nc.add_bias(
            nc.matmul(nc.gelu(nc.add_bias(nc.matmul(h, w[prefix + "ffn.w1"].node()),
                                          w[prefix + "ffn.b1"].node())),
                      w[prefix + "ffn.w2"].node()),
            w[prefix + "ffn.b2"].node())
        x = nc.add(x, ff)
    return x


def encode_visual(video: FrameSeq, w: ModelWeights) -> VisualEmbedding:
    cfg = w.cfg
    frames = video.frames
    if frames.shape[1] != cfg.d_frame:
        raise ShapeMismatch(f"frame dim {frames.shape[1]} != d_frame {cfg.d_frame}")
    if frames.shape[0] == 1:
        # single images are duplicated to a 2-frame clip
        frames = np.vstack([frames, frames])
    x = nc.add_bias(nc.matmul(nc.constant(frames), w["x_encoder.w"].node()),
                    w["x_encoder.b"].node())
    if cfg.positional_encoding:
        x = nc.add(x, nc.constant(sinusoidal_positions(frames.shape[0], cfg.d_model)))
    return VisualEmbedding(x)


def _token_nodes(comp, ids, w):
    cfg = w.cfg
    tok = nc.gather_rows(w[f"{comp}.token_emb"].node(), ids)
    if cfg.positional_encoding:
        tok = nc.add(tok, nc.constant(sinusoidal_positions(len(ids), cfg.d_model)))
    return tok


def predict(sv: VisualEmbedding, query: TokenSeq, w: ModelWeights,
            cfg: ModelConfig = None) -> TargetEmbedding:
    """Query-conditioned prediction of the target embedding."""
    cfg = cfg or w.cfg
    if len(query.ids) > cfg.max_query_tokens:
        raise QueryTooLong(f"{len(query.ids)} > {cfg.max_query_tokens}")
    t_v = sv.seq.shape[0]
    tok = _token_nodes("predictor", query.ids, w)
    seq = nc.concat_rows([sv.seq, tok])
    q_mask = query.non_pad_mask()
    key_mask = np.concatenate([np.ones(t_v), q_mask])
    out = _transformer(seq, w, "predictor", cfg.predictor_layers, key_mask,
                       cfg.heads, causal=(cfg.attention_mode == "causal"))
    pool = np.concatenate([(np.ones(t_v) if cfg.pool_visual else np.zeros(t_v)),
                           q_mask])
    if pool.sum() <= 0:
        pool = np.concatenate([np.ones(t_v), q_mask])
    pooled = nc.weighted_mean_rows(out, pool)
    head = nc.add_bias(nc.matmul(pooled, w["predictor.head.w"].node()),
                       w["predictor.head.b"].node())
    return TargetEmbedding(nc.normalize(head))


def encode_target(text: str, w: ModelWeights, cfg: ModelConfig = None) -> TargetEmbedding:
    cfg = cfg or w.cfg
    if not normalize_text(text):
        raise EmptyTarget("target text has no tokens")
    seq = tokenize(text, w.vocab, cfg.max_query_tokens)
    tok = _token_nodes("y_encoder", seq.ids, w)
    mask = seq.non_pad_mask()
    out = _transformer(tok, w, "y_encoder", cfg.y_encoder_layers, mask, cfg.heads)
    pooled = nc.weighted_mean_rows(out, mask)
    head = nc.add_bias(nc.matmul(pooled, w["y_encoder.head.w"].node()),
                       w["y_encoder.head.b"].node())
    return TargetEmbedding(nc.normalize(head))


def decode_embedding(e, bank):
    """Nearest-neighbor readout: the bank text whose embedding has
    maximum cosine similarity (ties -> lowest bank index)."""
    if len(bank) == 0:
        raise EmptyBank("empty decoder bank")
    vec = e.vec if isinstance(e, TargetEmbedding) else np.asarray(e, dtype=np.float64)
    vec = vec.reshape(-1)
    vec = vec / max(np.linalg.norm(vec), 1e-12)
    best_i, best_s = 0, -np.inf
    for i, (text, emb) in enumerate(bank):
        bv = emb.vec if isinstance(emb, TargetEmbedding) else np.asarray(emb)
        s = float(vec @ bv.reshape(-1))
        if s > best_s:
            best_i, best_s = i, s
    return bank[best_i][0]
