"""Optimization loop: two-stage recipe, per-component learning rates,
EMA / frozen target-encoder modes, checkpointing, and the token-
generative baseline used for the embedding-vs-token comparison.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numcore as nc
from .errors import NonFiniteLoss, ShapeMismatch
from .model import (ModelWeights, TargetEmbedding, _token_nodes, _transformer,
                    encode_target, encode_visual, init_model, predict)
from .objectives import Temperature, collapse_metric, infonce_bidirectional, regression_loss
from .textdata import PAD_ID, BOS_ID, EOS_ID, TokenSeq, detokenize, tokenize

ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    stage: str = "pretrain_query_free"  # or "sft_query_conditioned"
    loss: str = "infonce"  # infonce | cosine | l1 | l2
    base_lr: float = 3e-3
    y_encoder_lr_multiplier: float = 0.05
    y_encoder_mode: str = "trainable"  # trainable | frozen | ema
    ema_momentum: float = 0.99
    batch_size: int = 32
    steps: int = 1000
    seed: int = 0
    lr_schedule: str = "constant"  # constant | cosine
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.95)
    grad_clip: float = 1.0
    learnable_tau: bool = True
    sft_query_free_fraction: float = 0.2
    checkpoint_every: int = 0  # 0 -> final checkpoint only
    eval_every: int = 0

    def __post_init__(self):
        if self.y_encoder_lr_multiplier < 0:
            raise ValueError("lr multiplier must be >= 0")
        if not (0.0 <= self.ema_momentum <= 1.0):
            raise ValueError("ema_momentum must lie in [0,1]")
        if self.stage not in ("pretrain_query_free", "sft_query_conditioned"):
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.y_encoder_mode not in ("trainable", "frozen", "ema"):
            raise ValueError(f"unknown y_encoder_mode {self.y_encoder_mode!r}")


@dataclass
class OptimState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    def slot(self, param):
        if param.name not in self.m:
            self.m[param.name] = np.zeros_like(param.value)
            self.v[param.name] = np.zeros_like(param.value)
        return self.m[param.name], self.v[param.name]


def config_hash(cfg):
    blob = json.dumps(asdict(cfg), sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def lr_for_step(cfg: TrainConfig, step):
    if cfg.lr_schedule == "cosine" and cfg.steps > 0:
        return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * step / cfg.steps))
    return cfg.base_lr


def component_multiplier(name, cfg: TrainConfig, model_cfg):
    """Per-component learning-rate factor; 0 disables the update."""
    if name.startswith("x_encoder."):
        return 1.0 if model_cfg.trainable_x_encoder else 0.0
    if name.startswith("y_encoder."):
        if cfg.y_encoder_mode == "frozen":
            return 0.0
        return cfg.y_encoder_lr_multiplier
    if name == "log_tau":
        return 1.0 if (cfg.loss == "infonce" and cfg.learnable_tau) else 0.0
    return 1.0


def _wants_decay(name):
    return not (name.endswith(".gain") or name.endswith(".bias")
                or name.endswith(".b") or name.endswith(".b1")
                or name.endswith(".b2") or name == "log_tau")


def adamw_step(params, opt: OptimState, lr, cfg: TrainConfig, multipliers):
    """Adaptive-moment update with decoupled weight decay and global
    gradient-norm clipping."""
    active = [(p, m) for p, m in zip(params, multipliers) if m > 0.0]
    if not active:
        opt.step += 1
        return
    if cfg.grad_clip > 0:
        total = math.sqrt(sum(float((p.grad ** 2).sum()) for p, _ in active))
        if total > cfg.grad_clip:
            factor = cfg.grad_clip / total
            for p, _ in active:
                p.grad *= factor
    opt.step += 1
    b1, b2 = cfg.betas
    bc1 = 1.0 - b1 ** opt.step
    bc2 = 1.0 - b2 ** opt.step
    for p, mult in active:
        m, v = opt.slot(p)
        m[:] = b1 * m + (1 - b1) * p.grad
        v[:] = b2 * v + (1 - b2) * p.grad ** 2
        step_lr = lr * mult
        update = (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
        if cfg.weight_decay > 0 and _wants_decay(p.name):
            update = update + cfg.weight_decay * p.value
        p.value -= step_lr * update


def ema_update(shadow, live, momentum):
    """shadow' = m * shadow + (1 - m) * live, elementwise per tensor."""
    out = {}
    for name, s in shadow.items():
        l = live[name]
        if s.shape != l.shape:
            raise ShapeMismatch(f"ema_update: {name} {s.shape} vs {l.shape}")
        out[name] = momentum * s + (1.0 - momentum) * l
    return out


def empty_query(w: ModelWeights):
    return tokenize("", w.vocab, w.cfg.max_query_tokens)


def _batch_embeddings(batch, w, queries=None):
    """Forward the batch; identical target strings share one graph node
    (gradients still accumulate once per use)."""
    cache = {}
    preds, tgts = [], []
    for i, tr in enumerate(batch):
        q = queries[i] if queries is not None else tr.query
        preds.append(predict(encode_visual(tr.video, w), q, w).node)
        if tr.target_text not in cache:
            cache[tr.target_text] = encode_target(tr.target_text, w).node
        tgts.append(cache[tr.target_text])
    return nc.concat_rows(preds), nc.concat_rows(tgts)


def compute_loss(preds, targets, w, cfg: TrainConfig):
    if cfg.loss == "infonce":
        temp = Temperature(param=w["log_tau"]) if cfg.learnable_tau \
            else Temperature(0.07)
        return infonce_bidirectional(preds, targets, temp)
    return regression_loss(cfg.loss, preds, targets)


def train_step(batch, w: ModelWeights, opt: OptimState, cfg: TrainConfig,
               queries=None, ema_shadow=None, lr=None):
    """One optimization step.  Raises NonFiniteLoss (and leaves the
    weights untouched) when the forward produces a non-finite loss."""
    if len(batch) < 2 and cfg.loss == "infonce":
        from .errors import BatchTooSmall
        raise BatchTooSmall("InfoNCE needs batch size >= 2")
    params = [p for _, p in sorted(w.params.items())]
    for p in params:
        p.zero_grad()
    preds, targets = _batch_embeddings(batch, w, queries)
    out = compute_loss(preds, targets, w, cfg)
    if not math.isfinite(out.scalar):
        for p in params:
            p.zero_grad()
        raise NonFiniteLoss(f"loss is {out.scalar}")
    nc.backward(out.value)
    multipliers = [component_multiplier(p.name, cfg, w.cfg) for p in params]
    adamw_step(params, opt, lr if lr is not None else lr_for_step(cfg, opt.step),
               cfg, multipliers)
    for p in params:
        p.zero_grad()
    if ema_shadow is not None:
        live = {n: p.value for n, p in w.params.items()
                if n.startswith("y_encoder.")}
        new = ema_update(ema_shadow, live, cfg.ema_momentum)
        for n in ema_shadow:
            ema_shadow[n][:] = new[n]
    out.diagnostics.setdefault("batch_target_variance",
                               collapse_metric(targets.value))
    return out


def text_warmup_y_encoder(concepts, w: ModelWeights, steps=400, batch_size=16,
                          lr=3e-3, seed=0):
    """Text-only contrastive warmup of the y-encoder on paraphrase pairs.

    Stand-in for initializing the target encoder from a pretrained
    sentence embedder: after warmup, paraphrases of one concept embed
    close together and different concepts spread apart.  Touches only
    y_encoder.* tensors; no visual data is consumed.
    """
    yparams = [p for n, p in sorted(w.params.items())
               if n.startswith("y_encoder.")]
    eligible = [c for c in concepts if len(c) >= 2]
    if not eligible:
        raise ValueError("text warmup needs concepts with >= 2 paraphrases")
    opt = OptimState()
    rng = np.random.default_rng(seed)
    cfg = TrainConfig(steps=steps, batch_size=batch_size, base_lr=lr, seed=seed)
    losses = []
    for _ in range(steps):
        for p in yparams:
            p.zero_grad()
        picks = rng.choice(len(eligible), size=min(batch_size, len(eligible)),
                           replace=False)
        a_nodes, b_nodes = [], []
        for ci in picks:
            i, j = rng.choice(len(eligible[ci]), size=2, replace=False)
            a_nodes.append(encode_target(eligible[ci][i], w).node)
            b_nodes.append(encode_target(eligible[ci][j], w).node)
        out = infonce_bidirectional(nc.concat_rows(a_nodes),
                                    nc.concat_rows(b_nodes), Temperature(0.07))
        nc.backward(out.value)
        adamw_step(yparams, opt, lr, cfg, [1.0] * len(yparams))
        for p in yparams:
            p.zero_grad()
        losses.append(out.scalar)
    return losses


def text_warmup_baseline(texts, bw, model_w: ModelWeights, steps=400,
                         batch_size=16, lr=3e-3, seed=0, max_len=16):
    """Unconditional language-model warmup of the baseline decoder: next-
    token prediction on the caption corpus with an all-zero video, the
    counterpart of text_warmup_y_encoder for the token baseline."""
    from .textdata import FrameSeq, Triplet
    zero = FrameSeq(np.zeros((2, model_w.cfg.d_frame)), 1.0)
    blank = empty_query(model_w)
    corpus = [Triplet(zero, blank, t) for t in texts]
    opt = OptimState()
    rng = np.random.default_rng(seed)
    cfg = TrainConfig(steps=steps, batch_size=batch_size, base_lr=lr, seed=seed)
    losses = []
    for _ in range(steps):
        idx = rng.integers(len(corpus), size=batch_size)
        losses.append(token_baseline_step([corpus[i] for i in idx], bw,
                                          model_w, opt, cfg, max_len=max_len))
    return losses


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    tensors: dict
    step: int
    config_hash: str

    def model_tensors(self):
        return {n[len("model."):]: a for n, a in self.tensors.items()
                if n.startswith("model.")}


def save_checkpoint(path, w: ModelWeights, opt: OptimState, cfg: TrainConfig,
                    ema_shadow=None):
    tensors = {"model." + n: p.value for n, p in w.params.items()}
    for n, a in opt.m.items():
        tensors["opt.m." + n] = a
    for n, a in opt.v.items():
        tensors["opt.v." + n] = a
    if ema_shadow:
        for n, a in ema_shadow.items():
            tensors["ema." + n] = a
    tensors["meta.step"] = np.array([[float(opt.step)]])
    nc.write_tensors(path, tensors)
    manifest = {
        "config_hash": config_hash(cfg),
        "step": opt.step,
        "components": {"x_encoder": "x_encoder.", "predictor": "predictor.",
                       "y_encoder": "y_encoder.", "loss": "log_tau"},
    }
    with open(str(path) + ".json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, sort_keys=True, indent=1)
        f.write("\n")


def load_checkpoint(path, w: ModelWeights, opt: OptimState = None):
    tensors = nc.read_tensors(path)
    with open(str(path) + ".json", encoding="utf-8") as f:
        manifest = json.load(f)
    step = int(tensors.pop("meta.step")[0, 0])
    w.load_state_dict({n[len("model."):]: a for n, a in tensors.items()
                       if n.startswith("model.")})
    if opt is not None:
        opt.step = step
        for n, a in tensors.items():
            if n.startswith("opt.m."):
                opt.m[n[len("opt.m."):]] = a.copy()
            elif n.startswith("opt.v."):
                opt.v[n[len("opt.v."):]] = a.copy()
    ema = {n[len("ema."):]: a.copy() for n, a in tensors.items()
           if n.startswith("ema.")}
    return Checkpoint(tensors, step, manifest["config_hash"]), ema or None


# ---------------------------------------------------------------------------
# stage runner
# ---------------------------------------------------------------------------

def run_stage(data, w: ModelWeights, cfg: TrainConfig, opt: OptimState = None,
              out_dir=None, eval_fn=None, log_name="run_log.jsonl"):
    """Run cfg.steps optimization steps over `data` (a triplet list).

    The pretrain stage replaces every query with the empty query; the
    SFT stage mixes query-conditioned samples with a query-free replay
    fraction.  Returns (Checkpoint, history, metrics).
    """
    opt = opt or OptimState()
    rng = np.random.default_rng(cfg.seed)
    eq = empty_query(w)
    ema_shadow = None
    if cfg.y_encoder_mode == "ema":
        ema_shadow = {n: p.value.copy() for n, p in w.params.items()
                      if n.startswith("y_encoder.")}
    history, metrics = [], []
    log_f = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        log_f = open(os.path.join(out_dir, log_name), "a", encoding="utf-8")
    try:
        for step in range(cfg.steps):
            idx = rng.integers(len(data), size=cfg.batch_size)
            batch = [data[int(i)] for i in idx]
            if cfg.stage == "pretrain_query_free":
                queries = [eq] * len(batch)
            else:
                keep = rng.random(len(batch)) >= cfg.sft_query_free_fraction
                queries = [b.query if k else eq for b, k in zip(batch, keep)]
            out = train_step(batch, w, opt, cfg, queries=queries,
                             ema_shadow=ema_shadow)
            rec = {"step": opt.step, "loss": out.scalar,
                   "alignment": out.diagnostics.get("alignment"),
                   "uniformity": out.diagnostics.get("uniformity"),
                   "target_variance": out.diagnostics.get("batch_target_variance"),
                   "tau": out.diagnostics.get("tau")}
            history.append(rec)
            if log_f is not None:
                log_f.write(json.dumps(rec, sort_keys=True) + "\n")
            if eval_fn is not None and cfg.eval_every > 0 \
                    and (step + 1) % cfg.eval_every == 0:
                m = eval_fn(w, opt.step)
                m.update(step=opt.step,
                         samples_seen=opt.step * cfg.batch_size)
                metrics.append(m)
                if out_dir is not None:
                    with open(os.path.join(out_dir, "metrics.jsonl"), "a",
                              encoding="utf-8") as mf:
                        mf.write(json.dumps(m, sort_keys=True) + "\n")
            if out_dir is not None and cfg.checkpoint_every > 0 \
                    and (step + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(os.path.join(out_dir, f"ckpt_{opt.step}.bin"),
                                w, opt, cfg, ema_shadow)
    finally:
        if log_f is not None:
            log_f.close()
    if out_dir is not None:
        save_checkpoint(os.path.join(out_dir, "ckpt_final.bin"), w, opt, cfg,
                        ema_shadow)
    ckpt_tensors = {"model." + n: p.value.copy() for n, p in w.params.items()}
    ckpt = Checkpoint(ckpt_tensors, opt.step, config_hash(cfg))
    return ckpt, history, metrics


# ---------------------------------------------------------------------------
# token-generative baseline
# ---------------------------------------------------------------------------

class BaselineWeights:
    """Causal token decoder over the shared frozen visual features."""

    def __init__(self, cfg, vocab, params):
        self.cfg = cfg
        self.vocab = vocab
        self.params = params

    def __getitem__(self, name):
        return self.params[name]


def init_baseline(model_cfg, vocab, seed=0, layers=None):
    from .model import _init_block
    rng = np.random.default_rng(seed)
    layers = model_cfg.predictor_layers if layers is None else layers
    d = model_cfg.d_model
    p = {}
    p["decoder.token_emb"] = nc.Parameter(
        "decoder.token_emb", 0.5 * rng.standard_normal((model_cfg.vocab_size, d)))
    for i in range(layers):
        _init_block(p, f"decoder.block{i}.", d, model_cfg.ffn_multiplier, rng)
    p["decoder.out.w"] = nc.Parameter(
        "decoder.out.w", rng.standard_normal((d, model_cfg.vocab_size)) / math.sqrt(d))
    p["decoder.out.b"] = nc.Parameter(
        "decoder.out.b", np.zeros((1, model_cfg.vocab_size)))
    bw = BaselineWeights(model_cfg, vocab, p)
    bw.layers = layers
    return bw


def _baseline_logits(sv, input_ids, bw):
    cfg = bw.cfg
    tok = _token_nodes("decoder", input_ids, bw)
    seq = nc.concat_rows([sv.seq, tok])
    t_v = sv.seq.shape[0]
    key_mask = np.concatenate(
        [np.ones(t_v), np.array([1.0 if i != PAD_ID else 0.0 for i in input_ids])])
    out = _transformer(seq, bw, "decoder", bw.layers, key_mask, cfg.heads,
                       causal=True)
    text_out = nc.slice_rows(out, t_v, t_v + len(input_ids))
    return nc.add_bias(nc.matmul(text_out, bw["decoder.out.w"].node()),
                       bw["decoder.out.b"].node())


def token_baseline_step(batch, bw: BaselineWeights, model_w: ModelWeights,
                        opt: OptimState, cfg: TrainConfig, max_len=16, lr=None):
    """Next-token cross-entropy over non-PAD target positions, teacher
    forced, shared frozen visual features."""
    params = [p for _, p in sorted(bw.params.items())]
    for p in params:
        p.zero_grad()
    logit_nodes, labels, weights = [], [], []
    for tr in batch:
        ids = tokenize(tr.target_text, bw.vocab, max_len).ids
        sv = encode_visual(tr.video, model_w)
        logit_nodes.append(_baseline_logits(sv, ids[:-1], bw))
        labels.extend(ids[1:])
        weights.extend(1.0 if i != PAD_ID else 0.0 for i in ids[1:])
    loss = nc.cross_entropy_rows(nc.concat_rows(logit_nodes), labels, weights)
    val = float(loss.value[0, 0])
    if not math.isfinite(val):
        for p in params:
            p.zero_grad()
        raise NonFiniteLoss(f"baseline loss is {val}")
    nc.backward(loss)
    adamw_step(params, opt, lr if lr is not None else lr_for_step(cfg, opt.step),
               cfg, [1.0] * len(params))
    for p in params:
        p.zero_grad()
    return val


def greedy_decode(video, bw: BaselineWeights, model_w: ModelWeights, max_len=16):
    """Argmax autoregressive decode until EOS (no KV cache; desk scale)."""
    sv = encode_visual(video, model_w)
    ids = [BOS_ID]
    for _ in range(max_len - 1):
        logits = _baseline_logits(sv, ids, bw).value
        nxt = int(np.argmax(logits[-1]))
        if nxt == EOS_ID:
            break
        ids.append(nxt)
    return detokenize(ids + [EOS_ID], bw.vocab)
