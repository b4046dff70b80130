"""Toy tokenizer, synthetic vision-language world, and dataset formats.

"Frames" are low-dimensional feature vectors (a stand-in for the output
of a frozen vision backbone), not pixels.  A world is a bank of
concepts, each with several paraphrase strings; videos are concept
prototype vectors plus Gaussian noise, which makes datasets linearly
separable at sigma=0 and controllably noisy otherwise.
"""

from __future__ import annotations

import json
import re
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyBank, ShapeMismatch

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
UNK_ID = 3
RESERVED = ["[PAD]", "[BOS]", "[EOS]", "[UNK]"]

STREAM_MAGIC = b"JSTR"
STREAM_VERSION = 1

_WORD_RE = re.compile(r"[a-z0-9]+")

_VERBS = ["open", "close", "lift", "drop", "push", "pull", "turn", "shake",
          "wipe", "cut", "fold", "spin", "pour", "stack", "slide", "tap"]
_NOUNS = ["door", "box", "cup", "lamp", "book", "chair", "bottle", "pan",
          "towel", "plate", "drawer", "jar", "switch", "bag", "knife", "board"]

# paraphrase surface forms share scaffolding words across concepts while
# the verb/noun inflections differ between paraphrases of one concept
_TEMPLATES = [
    "the person {v}s the {n}",
    "someone {v}s a {n}",
    "a {n} is being {v}ed",
    "now the {n} gets {v}ed",
    "the {n} is {v}ed by the person",
    "watch someone {v} the {n}",
    "someone is {v}ing a {n}",
    "the person has {v}ed that {n}",
]


def normalize_text(text):
    return _WORD_RE.findall(text.lower())


@dataclass
class Vocab:
    """Bidirectional id<->token map with fixed reserved ids."""

    id_to_token: list

    def __post_init__(self):
        if self.id_to_token[:4] != RESERVED:
            raise ValueError("vocab must start with the reserved tokens")
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ValueError("duplicate tokens in vocab")

    def __len__(self):
        return len(self.id_to_token)

    @classmethod
    def from_texts(cls, texts):
        words = sorted({w for t in texts for w in normalize_text(t)})
        return cls(RESERVED + words)


@dataclass
class TokenSeq:
    ids: list

    @property
    def length(self):
        """Count of non-PAD positions."""
        return sum(1 for i in self.ids if i != PAD_ID)

    def non_pad_mask(self):
        return np.array([1.0 if i != PAD_ID else 0.0 for i in self.ids])


@dataclass
class FrameSeq:
    frames: np.ndarray  # (T, d_frame)
    fps: float

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ShapeMismatch("FrameSeq needs a (T, d) array with T >= 1")

    @property
    def duration(self):
        return self.frames.shape[0] / self.fps


@dataclass
class Triplet:
    video: FrameSeq
    query: TokenSeq
    target_text: str
    query_text: str = ""
    concept: int = -1  # provenance for evaluation; -1 when unknown


@dataclass
class TimedAnnotation:
    t: float
    text: str
    concept: int = -1


@dataclass
class WorldSpec:
    """Generator configuration for the synthetic world."""

    concepts: list  # list of paraphrase-string lists
    events: int = 8
    noise_sigma: float = 0.1
    fps: float = 2.0
    mean_event_duration: float = 5.0
    seed: int = 0
    d_frame: int = 16

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        for bank in self.concepts:
            if len(bank) == 0:
                raise EmptyBank("concept with no paraphrases")
            if len(set(bank)) != len(bank):
                raise ValueError("paraphrases within a concept must be distinct")


def default_concept_bank(n_concepts, n_paraphrases=4):
    """Concepts are unique (verb, noun) pairs; paraphrases reuse the
    scaffolding words across concepts so surface overlap between
    different concepts is high while the concept itself stays unique."""
    if n_concepts > len(_VERBS) * len(_NOUNS):
        raise ValueError("not enough verb/noun pairs")
    if not (1 <= n_paraphrases <= len(_TEMPLATES)):
        raise ValueError("n_paraphrases out of range")
    bank = []
    for i in range(n_concepts):
        v = _VERBS[i % len(_VERBS)]
        n = _NOUNS[i // len(_VERBS)]
        bank.append([t.format(v=v, n=n) for t in _TEMPLATES[:n_paraphrases]])
    return bank


def world_vocab(spec, extra_texts=()):
    texts = [p for bank in spec.concepts for p in bank]
    return Vocab.from_texts(list(texts) + list(extra_texts))


def concept_prototypes(spec):
    """Deterministic unit-norm prototype per concept."""
    rng = np.random.default_rng(spec.seed ^ 0x5EED)
    protos = rng.standard_normal((len(spec.concepts), spec.d_frame))
    return protos / np.linalg.norm(protos, axis=1, keepdims=True)


def tokenize(text, vocab, max_len):
    """Lowercase + alphanumeric split, BOS/EOS framing, PAD suffix."""
    if max_len < 2:
        raise ValueError("max_len must be >= 2")
    words = normalize_text(text)
    ids = [BOS_ID] + [vocab.token_to_id.get(w, UNK_ID) for w in words] + [EOS_ID]
    ids = ids[: max_len - 1] + [EOS_ID] if len(ids) > max_len else ids
    ids = ids + [PAD_ID] * (max_len - len(ids))
    return TokenSeq(ids)


def detokenize(ids, vocab):
    words = []
    for i in ids:
        if i in (PAD_ID, BOS_ID):
            continue
        if i == EOS_ID:
            break
        words.append(vocab.id_to_token[i])
    return " ".join(words)


def generate_triplets(spec, n, vocab, max_len=32, frames_per_video=2,
                      query_text="describe the video", seed=None):
    """Sample n triplets: video = concept prototype + Gaussian noise,
    target = uniformly drawn paraphrase of that concept.

    Prototypes always derive from spec.seed; `seed` varies only the
    sampling, so held-out sets live in the same world.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    protos = concept_prototypes(spec)
    query = tokenize(query_text, vocab, max_len)
    out = []
    for _ in range(n):
        c = int(rng.integers(len(spec.concepts)))
        noise = rng.standard_normal((frames_per_video, spec.d_frame))
        frames = protos[c][None, :] + spec.noise_sigma * noise
        text = spec.concepts[c][int(rng.integers(len(spec.concepts[c])))]
        out.append(Triplet(FrameSeq(frames, spec.fps), query, text,
                           query_text=query_text, concept=c))
    return out


def generate_annotated_stream(spec, durations=None, seed=None):
    """Piecewise-constant frame stream with one annotation per event at
    the event's start time.  Consecutive events use different concepts
    so every boundary is a real change point."""
    if spec.events < 1:
        raise ValueError("events must be >= 1")
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    protos = concept_prototypes(spec)
    if durations is None:
        durations = spec.mean_event_duration * rng.uniform(0.5, 1.5, spec.events)
    durations = np.asarray(durations, dtype=np.float64)
    if durations.shape[0] != spec.events:
        raise ValueError("durations length must equal event count")

    frames, anns = [], []
    t = 0.0
    prev = -1
    for _ in range(spec.events):
        c = int(rng.integers(len(spec.concepts)))
        if c == prev and len(spec.concepts) > 1:
            c = (c + 1) % len(spec.concepts)
        prev = c
        dur = float(durations[len(anns)])
        n_frames = max(1, int(round(dur * spec.fps)))
        noise = rng.standard_normal((n_frames, spec.d_frame))
        frames.append(protos[c][None, :] + spec.noise_sigma * noise)
        text = spec.concepts[c][int(rng.integers(len(spec.concepts[c])))]
        anns.append(TimedAnnotation(t, text, concept=c))
        t += dur
    return FrameSeq(np.vstack(frames), spec.fps), anns


# ---------------------------------------------------------------------------
# dataset files
# ---------------------------------------------------------------------------

def save_triplets(path, triplets):
    with open(path, "w", encoding="utf-8") as f:
        for tr in triplets:
            rec = {
                "video": tr.video.frames.tolist(),
                "fps": tr.video.fps,
                "query": tr.query_text,
                "target": tr.target_text,
                "concept": tr.concept,
            }
            f.write(json.dumps(rec) + "\n")


def load_triplets(path, vocab, max_len=32):
    out = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            rec = json.loads(line)
            out.append(Triplet(
                FrameSeq(np.array(rec["video"]), rec["fps"]),
                tokenize(rec["query"], vocab, max_len),
                rec["target"],
                query_text=rec["query"],
                concept=rec.get("concept", -1),
            ))
    return out


def save_annotated_stream(path, video, anns):
    rec = {
        "video": video.frames.tolist(),
        "fps": video.fps,
        "annotations": [{"t": a.t, "text": a.text, "concept": a.concept}
                        for a in anns],
    }
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps(rec) + "\n")


def load_annotated_stream(path):
    with open(path, encoding="utf-8") as f:
        rec = json.loads(f.readline())
    anns = [TimedAnnotation(a["t"], a["text"], a.get("concept", -1))
            for a in rec["annotations"]]
    return FrameSeq(np.array(rec["video"]), rec["fps"]), anns


# ---------------------------------------------------------------------------
# embedding stream binary format ("JSTR")
# ---------------------------------------------------------------------------

def write_embedding_stream(path, timestamps, embeddings):
    ts = np.asarray(timestamps, dtype=np.float64).reshape(-1)
    emb = np.asarray(embeddings, dtype=np.float64)
    if emb.ndim != 2 or emb.shape[0] != ts.shape[0]:
        raise ShapeMismatch("timestamps/embeddings length mismatch")
    with open(path, "wb") as f:
        f.write(STREAM_MAGIC)
        f.write(struct.pack("<III", STREAM_VERSION, emb.shape[0], emb.shape[1]))
        f.write(ts.astype("<f8").tobytes())
        f.write(emb.astype("<f4").tobytes(order="C"))


def read_embedding_stream(path):
    with open(path, "rb") as f:
        if f.read(4) != STREAM_MAGIC:
            raise ValueError("bad stream magic")
        version, t, d = struct.unpack("<III", f.read(12))
        if version != STREAM_VERSION:
            raise ValueError(f"unsupported stream version {version}")
        ts = np.frombuffer(f.read(8 * t), dtype="<f8").copy()
        emb = np.frombuffer(f.read(4 * t * d), dtype="<f4").reshape(t, d)
        return ts, emb.astype(np.float64)
