import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from diffpost.seq import (T_EPS, DomainError, InvalidInputError, RngStream, Vocab, corrupt, corrupt_block,
                          default_vocab, masked_positions, normalize_response, sample_time, schedule_alpha,
                          scored_length, LINEAR)

V = default_vocab()
CONTENT = "".join(V.glyphs[4:])


def test_default_vocab_layout():
    assert V.size == 64
    assert (V.pad_id, V.mask_id, V.eos_id, V.bos_id) == (0, 1, 2, 3)
    assert V.role(V.mask_id) == "mask"
    assert V.role(10) == "content"
    assert set("abcdefghijklmnopqrstuvwxyz") <= set(CONTENT)


@given(st.text(alphabet=CONTENT, max_size=40))
def test_encode_decode_roundtrip(text):
    assert V.decode(V.encode(text)) == text


def test_decode_stops_at_eos_and_skips_reserved():
    ids = np.concatenate([V.encode("ab"), [V.pad_id, V.mask_id], V.encode("c"), [V.eos_id], V.encode("zz")])
    assert V.decode(ids) == "abc"
    assert V.decode(ids, stop_at_eos=False) == "abczz"


def test_vocab_table_roundtrip(tmp_path):
    path = tmp_path / "vocab.tsv"
    V.save(path)
    assert Vocab.load(path) == V
    text = path.read_text()
    assert text.startswith("# vocab v1\n")
    assert "1\t<mask>\tmask" in text


def test_vocab_table_rejects_other_versions():
    with pytest.raises(ValueError):
        Vocab.loads(V.dumps().replace("# vocab v1", "# vocab v9"))


def test_vocab_rejects_duplicate_reserved_ids():
    with pytest.raises(ValueError):
        Vocab(V.glyphs, pad_id=1)


# -- random streams ------------------------------------------------------------


@given(st.integers(0, 2**32), st.lists(st.integers(0, 100), max_size=3))
def test_stream_is_a_function_of_its_key(seed, labels):
    a, b = RngStream(seed, *labels), RngStream(seed, *labels)
    assert np.array_equal(a.uniform(8), b.uniform(8))


def test_streams_with_different_labels_differ():
    a = RngStream(0, "rollout", 1).uniform(16)
    b = RngStream(0, "rollout", 2).uniform(16)
    c = RngStream(1, "rollout", 1).uniform(16)
    assert not np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_child_matches_direct_construction_and_fresh_rewinds():
    s = RngStream(3, "a")
    assert np.array_equal(s.child("b", 2).uniform(5), RngStream(3, "a", "b", 2).uniform(5))
    first = s.uniform(4)
    assert s.counter == 4
    assert np.array_equal(s.fresh().uniform(4), first)


def test_permutation_is_a_permutation():
    p = RngStream(0, "p").permutation(50)
    assert sorted(p.tolist()) == list(range(50))


# -- forward process -----------------------------------------------------------


def test_linear_schedule():
    assert schedule_alpha(LINEAR, 0.25) == 0.75
    assert schedule_alpha(LINEAR, 1.0) == 0.0
    for bad in (0.0, -0.1, 1.5):
        with pytest.raises(DomainError):
            schedule_alpha(LINEAR, bad)


@given(st.integers(0, 10_000))
def test_sample_time_range(seed):
    t = sample_time(RngStream(seed, "t"))
    assert T_EPS <= t <= 1.0


def test_corrupt_extremes():
    x = V.encode("hello")
    assert np.all(corrupt(x, 1.0, RngStream(0, "c"), V) == V.mask_id)
    tiny = corrupt(x, 1e-12, RngStream(0, "c"), V)
    assert np.array_equal(tiny, x)


@given(st.text(alphabet=CONTENT, min_size=1, max_size=30), st.floats(1e-3, 1.0), st.integers(0, 1000))
def test_corrupt_only_masks(text, t, seed):
    x = V.encode(text)
    y = corrupt(x, t, RngStream(seed), V)
    keep = y != V.mask_id
    assert np.array_equal(y[keep], x[keep])


def test_corrupt_uses_one_uniform_per_position_in_order():
    x = V.encode("abcdefgh")
    rng = RngStream(5, "c")
    y = corrupt(x, 0.5, rng, V)
    assert rng.counter == len(x)
    u = RngStream(5, "c").uniform(len(x))
    assert np.array_equal(y == V.mask_id, u < 0.5)


def test_corrupt_rejects_masked_input():
    with pytest.raises(InvalidInputError):
        corrupt(np.array([V.mask_id, 5]), 0.5, RngStream(0), V)


def test_corrupt_block_touches_only_its_block():
    x = V.encode("abcdefghijkl")
    y = corrupt_block(x, 2, 4, 1.0, RngStream(0), V)
    assert np.array_equal(y[:4], x[:4]) and np.array_equal(y[8:], x[8:])
    assert masked_positions(y, V) == [4, 5, 6, 7]
    with pytest.raises(DomainError):
        corrupt_block(x, 4, 4, 0.5, RngStream(0), V)
    with pytest.raises(DomainError):
        corrupt_block(x, 1, 5, 0.5, RngStream(0), V)


def test_scored_length_and_normalize():
    r = np.concatenate([V.encode("ab"), [V.eos_id], V.encode("cd"), [V.eos_id]])
    assert scored_length(r, V) == 3
    assert scored_length(V.encode("abc"), V) == 3
    n = normalize_response(r, V)
    assert np.array_equal(n[:3], r[:3]) and np.all(n[3:] == V.pad_id)
