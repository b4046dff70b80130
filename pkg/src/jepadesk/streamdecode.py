"""Selective-decoding engine over embedding streams.

A stream of predicted target embeddings is partitioned into contiguous
temporal segments (greedy adjacent Ward merges, with an exact dynamic-
programming oracle for verification), decode points are chosen per
segment or on a uniform grid, and decoded text is scored against timed
annotations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import BadSegmentCount, EmptyPlan, EmptyVideo
from .metrics import build_ngram_index, cider
from .model import decode_embedding, encode_visual, predict
from .textdata import (FrameSeq, read_embedding_stream, write_embedding_stream)


@dataclass
class EmbeddingStream:
    timestamps: np.ndarray  # (T,) strictly increasing seconds
    embeddings: np.ndarray  # (T, D)
    window_len: int = 0
    stride: int = 0

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64).reshape(-1)
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        if self.embeddings.ndim == 1:
            self.embeddings = self.embeddings[:, None]
        if self.embeddings.shape[0] != self.timestamps.shape[0]:
            raise ValueError("timestamps/embeddings length mismatch")
        if self.timestamps.shape[0] < 1:
            raise ValueError("stream needs at least one entry")
        if np.any(np.diff(self.timestamps) <= 0):
            raise ValueError("timestamps must strictly increase")

    def __len__(self):
        return self.timestamps.shape[0]

    @property
    def duration(self):
        """Span covered by the stream; a trailing sample period is added
        so a 1 Hz stream of 10 samples spans 10 s."""
        t = self.timestamps
        if len(t) == 1:
            return 1.0
        dt = float(np.median(np.diff(t)))
        return float(t[-1] - t[0] + dt)

    def save(self, path):
        write_embedding_stream(path, self.timestamps, self.embeddings)

    @classmethod
    def load(cls, path):
        ts, emb = read_embedding_stream(path)
        return cls(ts, emb)


@dataclass
class Segment:
    start: int
    end: int  # exclusive
    mean: np.ndarray
    sse: float


@dataclass
class Segmentation:
    segments: list

    @property
    def boundaries(self):
        return [s.start for s in self.segments]

    @property
    def total_sse(self):
        return float(sum(s.sse for s in self.segments))


@dataclass
class DecodePoint:
    index: int
    timestamp: float
    embedding: np.ndarray
    text: str = ""


@dataclass
class DecodePlan:
    points: list
    pooling: str = "exact"  # exact | segment_mean


@dataclass
class TriggerConfig:
    window: int = 4
    threshold: float = 0.01
    refractory: int = 0

    def __post_init__(self):
        if self.window < 2:
            raise ValueError("window must be >= 2")
        if self.threshold <= 0:
            raise ValueError("threshold must be > 0")
        if self.refractory < 0:
            raise ValueError("refractory must be >= 0")


def _renorm(v):
    n = np.linalg.norm(v)
    return v / n if n > 1e-12 else v


# ---------------------------------------------------------------------------
# stream construction and smoothing
# ---------------------------------------------------------------------------

def build_stream(video: FrameSeq, prompt, w, cfg=None, window_len=4, stride=2):
    """Sliding-window prediction: one embedding per window position,
    timestamped at the window end."""
    if window_len < 1 or stride < 1:
        raise ValueError("window_len and stride must be >= 1")
    t_frames = video.frames.shape[0]
    if t_frames < 1:
        raise EmptyVideo("video has no frames")
    window_len = min(window_len, t_frames)
    starts = list(range(0, t_frames - window_len + 1, stride)) or [0]
    ts, embs = [], []
    for s in starts:
        chunk = FrameSeq(video.frames[s:s + window_len], video.fps)
        emb = predict(encode_visual(chunk, w), prompt, w, cfg).vec.reshape(-1)
        ts.append((s + window_len) / video.fps)
        embs.append(emb)
    return EmbeddingStream(np.array(ts), np.vstack(embs),
                           window_len=window_len, stride=stride)


def smooth_stream(s: EmbeddingStream, w: int, renormalize=True):
    """Centered moving average with window shrink at the edges."""
    if w < 1 or w % 2 == 0:
        raise ValueError("w must be odd and >= 1")
    if w == 1:
        return s
    k = w // 2
    t = len(s)
    out = np.empty_like(s.embeddings)
    for i in range(t):
        lo, hi = max(0, i - k), min(t, i + k + 1)
        out[i] = s.embeddings[lo:hi].mean(axis=0)
    if renormalize:
        norms = np.linalg.norm(out, axis=1, keepdims=True)
        safe = norms > 1e-12
        out = np.where(safe, out / np.where(safe, norms, 1.0), out)
    return EmbeddingStream(s.timestamps.copy(), out,
                           window_len=s.window_len, stride=s.stride)


# ---------------------------------------------------------------------------
# decode-point selection
# ---------------------------------------------------------------------------

def uniform_decode_points(s: EmbeddingStream, freq):
    """Fixed-interval targets t_k = (k + 0.5) / freq mapped to nearest
    stream indices (ties -> earlier), duplicates collapsed."""
    if freq <= 0:
        raise ValueError("freq must be > 0")
    k = max(1, math.ceil(s.duration * freq))
    targets = (np.arange(k) + 0.5) / freq
    points, seen = [], set()
    for t in targets:
        dist = np.abs(s.timestamps - t)
        idx = int(np.argmin(dist))  # first minimum -> earlier on ties
        if idx not in seen:
            seen.add(idx)
            points.append(DecodePoint(idx, float(s.timestamps[idx]),
                                      s.embeddings[idx].copy()))
    return DecodePlan(points, pooling="exact")


def _segment_stats(x, lo, hi):
    chunk = x[lo:hi]
    mean = chunk.mean(axis=0)
    sse = float(((chunk - mean) ** 2).sum())
    return mean, sse


def ward_segment(s: EmbeddingStream, n_segments):
    """Greedy agglomerative segmentation: repeatedly merge the adjacent
    pair with the lowest Ward cost (n_a n_b / (n_a + n_b)) ||mu_a -
    mu_b||^2, earliest pair on ties."""
    t = len(s)
    if not (1 <= n_segments <= t):
        raise BadSegmentCount(f"n_segments {n_segments} not in [1, {t}]")
    x = s.embeddings
    starts = list(range(t))
    counts = [1] * t
    means = [x[i].astype(np.float64).copy() for i in range(t)]
    sses = [0.0] * t
    while len(starts) > n_segments:
        deltas = np.array([
            counts[i] * counts[i + 1] / (counts[i] + counts[i + 1])
            * float(((means[i] - means[i + 1]) ** 2).sum())
            for i in range(len(starts) - 1)])
        i = int(np.argmin(deltas))
        na, nb = counts[i], counts[i + 1]
        merged_mean = (na * means[i] + nb * means[i + 1]) / (na + nb)
        sses[i] = sses[i] + sses[i + 1] + float(deltas[i])
        means[i] = merged_mean
        counts[i] = na + nb
        del starts[i + 1], counts[i + 1], means[i + 1], sses[i + 1]
    segs = []
    for j, st in enumerate(starts):
        end = starts[j + 1] if j + 1 < len(starts) else t
        mean, sse = _segment_stats(x, st, end)
        segs.append(Segment(st, end, mean, sse))
    return Segmentation(segs)


def dp_segment_oracle(s: EmbeddingStream, n_segments):
    """Exact minimum total within-segment SSE contiguous partition via
    dynamic programming on prefix sums; ties resolved to the
    lexicographically smallest boundary list."""
    t = len(s)
    if not (1 <= n_segments <= t):
        raise BadSegmentCount(f"n_segments {n_segments} not in [1, {t}]")
    x = s.embeddings
    psx = np.vstack([np.zeros((1, x.shape[1])), np.cumsum(x, axis=0)])
    ps2 = np.concatenate([[0.0], np.cumsum((x ** 2).sum(axis=1))])

    def cost_row(i, js):
        """SSE of [i, j) for an array of j > i."""
        lens = js - i
        sq = ((psx[js] - psx[i]) ** 2).sum(axis=1)
        return (ps2[js] - ps2[i]) - sq / lens

    n = n_segments
    # suffix[k][i]: minimal cost of splitting [i, t) into k segments
    suffix = np.full((n + 1, t + 1), np.inf)
    suffix[0, t] = 0.0
    for k in range(1, n + 1):
        # segment [i, j) then k-1 segments on [j, t)
        for i in range(t - k, -1, -1):
            js = np.arange(i + 1, t - k + 2)
            vals = cost_row(i, js) + suffix[k - 1, js]
            suffix[k, i] = vals.min()

    segs = []
    i = 0
    for k in range(n, 0, -1):
        js = np.arange(i + 1, t - k + 2)
        vals = cost_row(i, js) + suffix[k - 1, js]
        # smallest j attaining the optimum -> lexicographically
        # smallest boundary list
        j = int(js[np.flatnonzero(vals == suffix[k, i])[0]])
        mean, sse = _segment_stats(x, i, j)
        segs.append(Segment(i, j, mean, sse))
        i = j
    return Segmentation(segs)


def select_decode_points(seg: Segmentation, s: EmbeddingStream, pooling="exact"):
    """One decode point per segment at floor((start + end - 1) / 2)."""
    if pooling not in ("exact", "segment_mean"):
        raise ValueError(f"unknown pooling {pooling!r}")
    points = []
    for sg in seg.segments:
        idx = (sg.start + sg.end - 1) // 2
        emb = _renorm(sg.mean.copy()) if pooling == "segment_mean" \
            else s.embeddings[idx].copy()
        points.append(DecodePoint(idx, float(s.timestamps[idx]), emb))
    return DecodePlan(points, pooling=pooling)


def online_trigger(s: EmbeddingStream, cfg: TriggerConfig):
    """Causal variance trigger: at index i, the trailing window of
    `window` rows fires when its mean per-dimension population variance
    exceeds the threshold and the refractory period has elapsed."""
    points = []
    last = None
    for i in range(cfg.window - 1, len(s)):
        window = s.embeddings[i - cfg.window + 1: i + 1]
        var = float(window.var(axis=0).mean())
        if var > cfg.threshold and (last is None or i - last >= cfg.refractory):
            points.append(DecodePoint(i, float(s.timestamps[i]),
                                      _renorm(window.mean(axis=0))))
            last = i
    return DecodePlan(points, pooling="segment_mean")


def align_annotations(decoded, anns):
    """Pair each annotation with the decode output closest in time
    (ties -> earlier decode point); many-to-one is allowed.

    `decoded` is a list of (timestamp, text); returns a list of
    (annotation, (timestamp, text)) pairs.
    """
    if len(decoded) == 0:
        raise EmptyPlan("no decoded outputs to align to")
    times = np.array([t for t, _ in decoded])
    out = []
    for ann in anns:
        idx = int(np.argmin(np.abs(times - ann.t)))
        out.append((ann, decoded[idx]))
    return out


# ---------------------------------------------------------------------------
# frequency sweep
# ---------------------------------------------------------------------------

def _segmentation_from_points(indices, s):
    """Contiguous partition splitting halfway between decode indices."""
    bounds = [0]
    for a, b in zip(indices, indices[1:]):
        bounds.append((a + b) // 2 + 1)
    bounds.append(len(s))
    segs = []
    for lo, hi in zip(bounds, bounds[1:]):
        mean, sse = _segment_stats(s.embeddings, lo, hi)
        segs.append(Segment(lo, hi, mean, sse))
    return Segmentation(segs)


def plan_for(s: EmbeddingStream, strategy, pooling, freq):
    if strategy == "uniform":
        plan = uniform_decode_points(s, freq)
        if pooling == "segment_mean":
            seg = _segmentation_from_points([p.index for p in plan.points], s)
            pooled = [DecodePoint(p.index, p.timestamp, _renorm(sg.mean.copy()))
                      for p, sg in zip(plan.points, seg.segments)]
            plan = DecodePlan(pooled, pooling="segment_mean")
        return plan
    if strategy == "adaptive":
        n = max(1, min(len(s), int(round(s.duration * freq))))
        return select_decode_points(ward_segment(s, n), s, pooling)
    raise ValueError(f"unknown strategy {strategy!r}")


def score_plan(plan: DecodePlan, anns, bank, idx):
    """Decode every point through the bank, align annotations, and
    return the mean caption score over annotations."""
    decoded = [(p.timestamp, decode_embedding(p.embedding, bank))
               for p in plan.points]
    pairs = align_annotations(decoded, anns)
    scores = [cider(text, [ann.text], idx) for ann, (_, text) in pairs]
    return float(np.mean(scores))


def pareto_sweep(stream: EmbeddingStream, anns, bank, freqs, idx=None):
    """Rows of (strategy, pooling, freq_hz, decode_count, mean_cider)
    over the full strategy x pooling x frequency grid."""
    if len(freqs) == 0:
        raise ValueError("frequency grid must be non-empty")
    if idx is None:
        idx = build_ngram_index([[a.text] for a in anns])
    rows = []
    for strategy in ("uniform", "adaptive"):
        for pooling in ("exact", "segment_mean"):
            for freq in freqs:
                plan = plan_for(stream, strategy, pooling, freq)
                rows.append({
                    "strategy": strategy,
                    "pooling": pooling,
                    "freq_hz": float(freq),
                    "decode_count": len(plan.points),
                    "mean_cider": score_plan(plan, anns, bank, idx),
                })
    rows.sort(key=lambda r: (r["strategy"], r["pooling"], r["freq_hz"]))
    return rows


def sweep_rows_to_csv(rows):
    lines = ["strategy,pooling,freq_hz,decode_count,mean_cider"]
    for r in rows:
        lines.append(f'{r["strategy"]},{r["pooling"]},{r["freq_hz"]:g},'
                     f'{r["decode_count"]},{r["mean_cider"]:.6f}')
    return "\n".join(lines) + "\n"
