"""Tokenizer, synthetic world generators, and dataset file formats."""

import numpy as np
import pytest

from jepadesk import textdata as td
from jepadesk.errors import EmptyBank, ShapeMismatch


def small_vocab():
    return td.Vocab.from_texts(["a man"])


def test_tokenize_direct_mapping():
    vocab = small_vocab()
    seq = td.tokenize("a man", vocab, 6)
    a, man = vocab.token_to_id["a"], vocab.token_to_id["man"]
    assert seq.ids == [td.BOS_ID, a, man, td.EOS_ID, td.PAD_ID, td.PAD_ID]


def test_tokenize_unknown_word():
    seq = td.tokenize("zzz", small_vocab(), 4)
    assert seq.ids == [td.BOS_ID, td.UNK_ID, td.EOS_ID, td.PAD_ID]


def test_tokenize_empty_text():
    seq = td.tokenize("", small_vocab(), 4)
    assert seq.ids == [td.BOS_ID, td.EOS_ID, td.PAD_ID, td.PAD_ID]


def test_tokenize_truncates_and_keeps_eos():
    vocab = small_vocab()
    seq = td.tokenize("a man a man a man", vocab, 4)
    assert len(seq.ids) == 4
    assert seq.ids[0] == td.BOS_ID
    assert seq.ids[-1] == td.EOS_ID


def test_tokenize_detokenize_roundtrip():
    vocab = td.Vocab.from_texts(["the person opens the door"])
    text = "the person opens the door"
    seq = td.tokenize(text, vocab, 12)
    assert td.detokenize(seq.ids, vocab) == text


def test_token_seq_non_pad_mask():
    seq = td.TokenSeq([1, 5, 2, 0, 0])
    assert seq.length == 3
    assert np.array_equal(seq.non_pad_mask(), [1, 1, 1, 0, 0])


def test_vocab_reserved_ids_fixed():
    vocab = small_vocab()
    assert vocab.id_to_token[:4] == ["[PAD]", "[BOS]", "[EOS]", "[UNK]"]
    with pytest.raises(ValueError):
        td.Vocab(["a", "b"])


def test_default_concept_bank_unique_pairs():
    bank = td.default_concept_bank(32)
    assert len(bank) == 32
    assert len({tuple(b) for b in map(tuple, bank)}) == 32
    for concept in bank:
        assert len(concept) == 4
        assert len(set(concept)) == 4


def test_world_spec_validates():
    with pytest.raises(EmptyBank):
        td.WorldSpec([[]])
    with pytest.raises(ValueError):
        td.WorldSpec([["a", "a"]])
    with pytest.raises(ValueError):
        td.WorldSpec([["a"]], noise_sigma=-1.0)


def test_generate_triplets_zero_noise_matches_prototype():
    spec = td.WorldSpec(td.default_concept_bank(1), noise_sigma=0.0, seed=3)
    vocab = td.world_vocab(spec)
    protos = td.concept_prototypes(spec)
    for tr in td.generate_triplets(spec, 3, vocab):
        assert np.allclose(tr.video.frames, protos[0][None, :])


def test_generate_triplets_deterministic():
    spec = td.WorldSpec(td.default_concept_bank(4), seed=7)
    vocab = td.world_vocab(spec)
    a = td.generate_triplets(spec, 16, vocab)
    b = td.generate_triplets(spec, 16, vocab)
    for x, y in zip(a, b):
        assert np.array_equal(x.video.frames, y.video.frames)
        assert x.target_text == y.target_text


def test_generate_triplets_concept_counts_binomial():
    spec = td.WorldSpec(td.default_concept_bank(8), seed=0)
    vocab = td.world_vocab(spec)
    trips = td.generate_triplets(spec, 800, vocab)
    counts = np.bincount([t.concept for t in trips], minlength=8)
    assert counts.min() >= 60 and counts.max() <= 140


def test_generate_triplets_sampling_seed_shares_prototypes():
    spec = td.WorldSpec(td.default_concept_bank(4), noise_sigma=0.0, seed=0)
    vocab = td.world_vocab(spec)
    protos = td.concept_prototypes(spec)
    held_out = td.generate_triplets(spec, 8, vocab, seed=99)
    for tr in held_out:
        assert np.allclose(tr.video.frames[0], protos[tr.concept])


def test_zero_noise_triplets_linearly_separable():
    spec = td.WorldSpec(td.default_concept_bank(8), noise_sigma=0.0, seed=1)
    vocab = td.world_vocab(spec)
    protos = td.concept_prototypes(spec)
    for tr in td.generate_triplets(spec, 64, vocab):
        sims = protos @ tr.video.frames[0]
        assert int(np.argmax(sims)) == tr.concept


def test_generate_stream_zero_noise_two_events():
    spec = td.WorldSpec(td.default_concept_bank(4), events=2, noise_sigma=0.0,
                        fps=2.0, seed=0)
    video, anns = td.generate_annotated_stream(spec, durations=[5.0, 5.0])
    assert video.frames.shape[0] == 20
    assert len({tuple(row) for row in map(tuple, np.round(video.frames, 9))}) == 2
    assert len(anns) == 2


def test_generate_stream_annotation_times():
    spec = td.WorldSpec(td.default_concept_bank(4), events=2, seed=0)
    _, anns = td.generate_annotated_stream(spec, durations=[3.0, 7.0])
    assert [a.t for a in anns] == [0.0, 3.0]


def test_generate_stream_deterministic_and_sorted():
    spec = td.WorldSpec(td.default_concept_bank(6), events=5, seed=11)
    v1, a1 = td.generate_annotated_stream(spec)
    v2, a2 = td.generate_annotated_stream(spec)
    assert np.array_equal(v1.frames, v2.frames)
    times = [a.t for a in a1]
    assert times == sorted(times)
    assert all(x.text == y.text for x, y in zip(a1, a2))
    assert all(0.0 <= a.t < v1.duration for a in a1)


def test_consecutive_events_change_concept():
    spec = td.WorldSpec(td.default_concept_bank(4), events=12, seed=5)
    _, anns = td.generate_annotated_stream(spec)
    for prev, cur in zip(anns, anns[1:]):
        assert prev.concept != cur.concept


def test_frame_seq_validation():
    with pytest.raises(ShapeMismatch):
        td.FrameSeq(np.zeros(4), 2.0)


def test_triplet_jsonl_roundtrip(tmp_path):
    spec = td.WorldSpec(td.default_concept_bank(4), seed=2)
    vocab = td.world_vocab(spec)
    trips = td.generate_triplets(spec, 6, vocab, max_len=10)
    path = tmp_path / "trips.jsonl"
    td.save_triplets(path, trips)
    back = td.load_triplets(path, vocab, max_len=10)
    for x, y in zip(trips, back):
        assert np.allclose(x.video.frames, y.video.frames)
        assert x.target_text == y.target_text
        assert x.concept == y.concept
        assert x.query.ids == y.query.ids


def test_annotated_stream_jsonl_roundtrip(tmp_path):
    spec = td.WorldSpec(td.default_concept_bank(4), events=3, seed=2)
    video, anns = td.generate_annotated_stream(spec)
    path = tmp_path / "stream.jsonl"
    td.save_annotated_stream(path, video, anns)
    v2, a2 = td.load_annotated_stream(path)
    assert np.allclose(video.frames, v2.frames)
    assert [(a.t, a.text, a.concept) for a in anns] == \
        [(a.t, a.text, a.concept) for a in a2]


def test_embedding_stream_binary_roundtrip(tmp_path):
    rng = np.random.default_rng(4)
    ts = np.cumsum(rng.uniform(0.1, 1.0, 12))
    emb = rng.standard_normal((12, 5)).astype(np.float32).astype(np.float64)
    path = tmp_path / "s.jstr"
    td.write_embedding_stream(path, ts, emb)
    ts2, emb2 = td.read_embedding_stream(path)
    assert np.array_equal(ts, ts2)
    assert np.array_equal(emb, emb2)
    assert path.read_bytes()[:4] == b"JSTR"


def test_embedding_stream_shape_mismatch(tmp_path):
    with pytest.raises(ShapeMismatch):
        td.write_embedding_stream(tmp_path / "s.jstr", [0.0, 1.0],
                                  np.zeros((3, 2)))
