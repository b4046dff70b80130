"""Embedding-space task heads: nearest-match classification, text-to-
video retrieval, triplet text-encoder evaluation, and world-state
action selection.  All heads are pure evaluation over read-only
weights."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyCandidates
from .model import TargetEmbedding, encode_target, encode_visual, predict
from .textdata import FrameSeq, tokenize

RETRIEVAL_PROMPT = "describe the video"
WORLD_STATE_PROMPT = "what action explains this change"


@dataclass
class CandidateSet:
    texts: list
    embeddings: np.ndarray  # (K, D) unit-norm rows

    @classmethod
    def from_texts(cls, texts, w, cfg=None):
        if len(texts) < 1:
            raise EmptyCandidates("no candidate texts")
        embs = np.vstack([encode_target(t, w, cfg).vec for t in texts])
        return cls(list(texts), embs)


@dataclass
class Ranking:
    indices: list  # candidate indices, best first
    scores: list  # cosine similarities, descending


def _as_vec(e):
    v = e.vec if isinstance(e, TargetEmbedding) else np.asarray(e, dtype=np.float64)
    return v.reshape(-1)


def select_nearest(pred, cands: CandidateSet):
    """Argmax cosine similarity; exact ties go to the lowest index."""
    if len(cands.texts) == 0:
        raise EmptyCandidates("empty candidate set")
    scores = cands.embeddings @ _as_vec(pred)
    return int(np.argmax(scores))  # argmax returns the first maximum


def rank_candidates(query_emb, embeddings):
    scores = embeddings @ _as_vec(query_emb)
    order = np.argsort(-scores, kind="stable")
    return Ranking([int(i) for i in order], [float(scores[i]) for i in order])


def rank_videos(query_text, videos, w, cfg=None,
                retrieval_prompt=RETRIEVAL_PROMPT):
    """Rank candidate videos by cosine between their predicted target
    embeddings (under a fixed captioning prompt) and the encoded query."""
    if len(videos) < 1:
        raise EmptyCandidates("no candidate videos")
    cfg = cfg or w.cfg
    prompt = tokenize(retrieval_prompt, w.vocab, cfg.max_query_tokens)
    embs = np.vstack([predict(encode_visual(v, w), prompt, w, cfg).vec
                      for v in videos])
    return rank_candidates(encode_target(query_text, w, cfg), embs)


def recall_at_k(rankings, k):
    """Fraction of (Ranking, gold index) pairs with gold in the top k."""
    if k < 1:
        raise ValueError("k must be >= 1")
    hits = sum(1 for r, gold in rankings if gold in r.indices[:k])
    return hits / len(rankings)


def triplet_accuracy(triplets, w, cfg=None):
    """Fraction of (p1, p2, n) string triplets where sim(p1,p2) strictly
    exceeds both sim(p1,n) and sim(p2,n)."""
    if len(triplets) < 1:
        raise ValueError("need at least one triplet")
    cache = {}

    def emb(text):
        if text not in cache:
            cache[text] = encode_target(text, w, cfg).vec.reshape(-1)
        return cache[text]

    correct = 0
    for p1, p2, n in triplets:
        e1, e2, en = emb(p1), emb(p2), emb(n)
        pos = float(e1 @ e2)
        if pos > float(e1 @ en) and pos > float(e2 @ en):
            correct += 1
    return correct / len(triplets)


def world_state_select(initial: FrameSeq, final: FrameSeq, action_texts,
                       w, cfg=None, prompt=WORLD_STATE_PROMPT):
    """Duplicate both state frames, concatenate in time, predict a state
    embedding under a fixed prompt, and pick the nearest action text."""
    if len(action_texts) < 2:
        raise EmptyCandidates("need at least 2 candidate actions")
    cfg = cfg or w.cfg

    def dup(fs):
        f = fs.frames
        return np.vstack([f, f]) if f.shape[0] == 1 else f

    combined = FrameSeq(np.vstack([dup(initial), dup(final)]), initial.fps)
    q = tokenize(prompt, w.vocab, cfg.max_query_tokens)
    state = predict(encode_visual(combined, w), q, w, cfg)
    return select_nearest(state, CandidateSet.from_texts(action_texts, w, cfg))
