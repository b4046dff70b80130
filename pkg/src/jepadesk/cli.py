"""Command-line surface: dataset generation, training, evaluation,
stream building, selective-decoding sweeps, oracle checks, and
plot-data emission.

Every run writes its resolved configuration next to its outputs, and
all randomness derives from the seed, so reruns are byte-identical.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, dataclass, field

import numpy as np
import tomli

from . import numcore as nc
from .errors import JepaError
from .metrics import build_ngram_index, cider
from .model import ModelConfig, encode_target, encode_visual, init_model, predict
from .streamdecode import (EmbeddingStream, TriggerConfig, build_stream,
                           dp_segment_oracle, pareto_sweep, smooth_stream,
                           sweep_rows_to_csv, ward_segment)
from .tasks import (RETRIEVAL_PROMPT, CandidateSet, rank_videos, recall_at_k,
                    select_nearest, triplet_accuracy)
from .textdata import (TimedAnnotation, WorldSpec, default_concept_bank,
                       generate_annotated_stream, generate_triplets,
                       load_annotated_stream, load_triplets,
                       save_annotated_stream, save_triplets, tokenize,
                       world_vocab)
from .training import (OptimState, TrainConfig, load_checkpoint, run_stage,
                       save_checkpoint)

QUERY_PROMPT = "describe the video"
EXTRA_TEXTS = (QUERY_PROMPT, RETRIEVAL_PROMPT, "what action explains this change")


@dataclass
class RunConfig:
    seed: int = 0
    world: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    sft: dict = field(default_factory=dict)
    trigger: dict = field(default_factory=dict)
    sweep: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path):
        with open(path, "rb") as f:
            raw = tomli.load(f)
        known = {"seed", "world", "model", "train", "sft", "trigger", "sweep"}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**raw)

    def world_spec(self, seed=None):
        w = dict(self.world)
        n_concepts = w.pop("concepts", 8)
        n_paraphrases = w.pop("paraphrases", 4)
        return WorldSpec(default_concept_bank(n_concepts, n_paraphrases),
                         seed=self.seed if seed is None else seed, **w)

    def model_config(self, vocab):
        return ModelConfig(vocab_size=len(vocab), **self.model)

    def train_config(self, stage):
        overrides = dict(self.train)
        if stage == "sft_query_conditioned":
            overrides.update(self.sft)
        overrides["stage"] = stage
        overrides.setdefault("seed", self.seed)
        if stage == "sft_query_conditioned":
            overrides.setdefault("lr_schedule", "cosine")
        return TrainConfig(**overrides)

    def trigger_config(self):
        return TriggerConfig(**self.trigger)


def _toml_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise ValueError(f"cannot serialize {type(v)}")


def write_resolved_config(path, cfg: RunConfig):
    lines = [f"seed = {cfg.seed}"]
    for section in ("world", "model", "train", "sft", "trigger", "sweep"):
        d = getattr(cfg, section)
        if not d:
            continue
        lines.append(f"\n[{section}]")
        for k in sorted(d):
            lines.append(f"{k} = {_toml_value(d[k])}")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def _build_world(cfg: RunConfig, seed=None):
    spec = cfg.world_spec(seed)
    vocab = world_vocab(spec, EXTRA_TEXTS)
    return spec, vocab


def _load_model(cfg: RunConfig, ckpt_path):
    spec, vocab = _build_world(cfg)
    w = init_model(cfg.model_config(vocab), vocab, seed=cfg.seed)
    if ckpt_path:
        load_checkpoint(ckpt_path, w)
    return spec, vocab, w


def _write(path, text):
    if path:
        with open(path, "w", encoding="utf-8") as f:
            f.write(text)
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args):
    cfg = RunConfig.load(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    os.makedirs(args.out, exist_ok=True)
    spec, vocab = _build_world(cfg)
    mcfg = cfg.model_config(vocab)
    n_train = args.n_train
    triplets = generate_triplets(spec, n_train, vocab,
                                 max_len=mcfg.max_query_tokens,
                                 query_text=QUERY_PROMPT)
    save_triplets(os.path.join(args.out, "triplets.jsonl"), triplets)
    save_triplets(os.path.join(args.out, "triplets_eval.jsonl"),
                  generate_triplets(spec, args.n_eval, vocab,
                                    max_len=mcfg.max_query_tokens,
                                    query_text=QUERY_PROMPT,
                                    seed=cfg.seed + 1))
    video, anns = generate_annotated_stream(spec)
    save_annotated_stream(os.path.join(args.out, "stream.jsonl"), video, anns)
    with open(os.path.join(args.out, "anns.jsonl"), "w", encoding="utf-8") as f:
        for a in anns:
            f.write(json.dumps({"t": a.t, "text": a.text, "concept": a.concept})
                    + "\n")
    write_resolved_config(os.path.join(args.out, "resolved.toml"), cfg)
    return 0


def _eval_suite(cfg: RunConfig, spec, vocab, w, eval_triplets):
    """Classification, retrieval and text-triplet metrics on held-out
    samples."""
    mcfg = w.cfg
    labels = [bank[0] for bank in spec.concepts]
    cands = CandidateSet.from_texts(labels, w)
    prompt = tokenize(QUERY_PROMPT, vocab, mcfg.max_query_tokens)
    correct = 0
    for tr in eval_triplets:
        pred = predict(encode_visual(tr.video, w), prompt, w)
        correct += int(select_nearest(pred, cands) == tr.concept)
    cls_acc = correct / len(eval_triplets)

    per_concept = {}
    for tr in eval_triplets:
        per_concept.setdefault(tr.concept, tr)
    items = sorted(per_concept.items())[:64]
    videos = [tr.video for _, tr in items]
    rankings = []
    for gold, (_, tr) in enumerate(items):
        rankings.append((rank_videos(tr.target_text, videos, w), gold))
    r_at_1 = recall_at_k(rankings, 1)

    rng = np.random.default_rng(cfg.seed + 17)
    trips = []
    for _ in range(100):
        c = int(rng.integers(len(spec.concepts)))
        other = int(rng.integers(len(spec.concepts) - 1))
        other = other + 1 if other >= c else other
        p1, p2 = rng.choice(len(spec.concepts[c]), size=2, replace=False)
        trips.append((spec.concepts[c][int(p1)], spec.concepts[c][int(p2)],
                      spec.concepts[other][int(rng.integers(len(spec.concepts[other])))]))
    tri_acc = triplet_accuracy(trips, w)
    return {"cls_acc": cls_acc, "recall_at_1": r_at_1, "triplet_acc": tri_acc}


def cmd_train(args):
    cfg = RunConfig.load(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    os.makedirs(args.out, exist_ok=True)
    spec, vocab = _build_world(cfg)
    mcfg = cfg.model_config(vocab)
    data = load_triplets(os.path.join(args.data, "triplets.jsonl"), vocab,
                         max_len=mcfg.max_query_tokens)
    w = init_model(mcfg, vocab, seed=cfg.seed)
    opt = OptimState()
    if args.resume:
        load_checkpoint(args.resume, w, opt)
    stages = {"pretrain": ["pretrain_query_free"],
              "sft": ["sft_query_conditioned"],
              "both": ["pretrain_query_free", "sft_query_conditioned"]}[args.stage]
    for stage in stages:
        tcfg = cfg.train_config(stage)
        run_stage(data, w, tcfg, opt=opt,
                  out_dir=os.path.join(args.out, stage.split("_")[0]))
    write_resolved_config(os.path.join(args.out, "resolved.toml"), cfg)
    save_checkpoint(os.path.join(args.out, "ckpt_final.bin"), w, opt,
                    cfg.train_config(stages[-1]))
    return 0


def cmd_eval(args):
    cfg = RunConfig.load(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    spec, vocab, w = _load_model(cfg, args.ckpt)
    eval_triplets = load_triplets(
        os.path.join(args.data, "triplets_eval.jsonl"), vocab,
        max_len=w.cfg.max_query_tokens)
    res = _eval_suite(cfg, spec, vocab, w, eval_triplets)
    lines = []
    for task, metric in (("classification", "cls_acc"),
                         ("retrieval", "recall_at_1"),
                         ("text_triplets", "triplet_acc")):
        lines.append(json.dumps({"task": task, "dataset": "synthetic",
                                 "metric": metric, "value": res[metric],
                                 "step": 0}, sort_keys=True))
    _write(args.out, "\n".join(lines) + "\n")
    return 0


def cmd_stream(args):
    cfg = RunConfig.load(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    spec, vocab, w = _load_model(cfg, args.ckpt)
    video, anns = load_annotated_stream(args.data)
    prompt = tokenize(QUERY_PROMPT, vocab, w.cfg.max_query_tokens)
    s = build_stream(video, prompt, w, window_len=args.window,
                     stride=args.stride)
    if args.smooth > 1:
        s = smooth_stream(s, args.smooth)
    s.save(args.out)
    return 0


def _load_anns(path):
    anns = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            rec = json.loads(line)
            anns.append(TimedAnnotation(rec["t"], rec["text"],
                                        rec.get("concept", -1)))
    return anns


def cmd_sweep(args):
    cfg = RunConfig.load(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    spec, vocab, w = _load_model(cfg, args.ckpt)
    stream = EmbeddingStream.load(args.stream)
    anns = _load_anns(args.anns)
    texts = [p for bank in spec.concepts for p in bank]
    bank = [(t, encode_target(t, w)) for t in texts]
    freqs = [float(x) for x in args.freqs.split(",")]
    rows = pareto_sweep(stream, anns, bank, freqs)
    _write(args.out, sweep_rows_to_csv(rows))
    return 0


def cmd_oracle_check(args):
    stream = EmbeddingStream.load(args.stream)
    ward_sse = ward_segment(stream, args.segments).total_sse
    dp_sse = dp_segment_oracle(stream, args.segments).total_sse
    ratio = ward_sse / dp_sse if dp_sse > 0 else 1.0
    print(f"ward_sse={ward_sse:.6f} dp_sse={dp_sse:.6f} ratio={ratio:.4f}")
    return 0 if ratio <= args.bound else 1


def cmd_plot_data(args):
    lines = []
    if args.sweep:
        with open(args.sweep, encoding="utf-8") as f:
            rows = f.read().strip().split("\n")[1:]
        lines.append("series,freq_hz,mean_cider")
        for row in rows:
            strategy, pooling, freq, _, score = row.split(",")
            lines.append(f"{strategy}_{pooling},{freq},{score}")
    elif args.metrics:
        lines.append("samples_seen,cls_acc")
        with open(args.metrics, encoding="utf-8") as f:
            for line in f:
                rec = json.loads(line)
                lines.append(f'{rec["samples_seen"]},{rec.get("cls_acc", "")}')
    else:
        raise ValueError("plot-data needs --sweep or --metrics")
    _write(args.out, "\n".join(lines) + "\n")
    return 0


# ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="jepadesk")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate synthetic datasets")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--n-train", type=int, default=512)
    g.add_argument("--n-eval", type=int, default=128)
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="run a training stage")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--stage", choices=["pretrain", "sft", "both"],
                   default="both")
    t.add_argument("--resume", default=None)
    t.add_argument("--seed", type=int, default=None)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--config", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--out", default=None)
    e.add_argument("--seed", type=int, default=None)
    e.set_defaults(fn=cmd_eval)

    s = sub.add_parser("stream", help="build an embedding stream")
    s.add_argument("--config", required=True)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True, help="annotated stream jsonl")
    s.add_argument("--out", required=True, help="output .jstr path")
    s.add_argument("--window", type=int, default=4)
    s.add_argument("--stride", type=int, default=2)
    s.add_argument("--smooth", type=int, default=1)
    s.add_argument("--seed", type=int, default=None)
    s.set_defaults(fn=cmd_stream)

    w = sub.add_parser("sweep", help="selective-decoding frequency sweep")
    w.add_argument("--config", required=True)
    w.add_argument("--ckpt", required=True)
    w.add_argument("--stream", required=True)
    w.add_argument("--anns", required=True)
    w.add_argument("--freqs", default="2.0,1.0,0.5,0.1,0.01")
    w.add_argument("--out", default=None)
    w.add_argument("--seed", type=int, default=None)
    w.set_defaults(fn=cmd_sweep)

    o = sub.add_parser("oracle-check", help="ward vs DP oracle ratio")
    o.add_argument("--stream", required=True)
    o.add_argument("--segments", type=int, required=True)
    o.add_argument("--bound", type=float, default=1.10)
    o.set_defaults(fn=cmd_oracle_check)

    d = sub.add_parser("plot-data", help="emit derived plot tables")
    d.add_argument("--sweep", default=None)
    d.add_argument("--metrics", default=None)
    d.add_argument("--out", default=None)
    d.set_defaults(fn=cmd_plot_data)
    return p


def dispatch(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 1 if e.code not in (0, None) else 0
    try:
        return args.fn(args)
    except (JepaError, ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # runtime failure
        print(f"runtime error: {e}", file=sys.stderr)
        return 2


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
