import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from simthres.dataset import (
    DataError,
    Interaction,
    build_dataset,
    candidate_set,
    load_interactions,
    make_batches,
    num_batches,
    pad_left,
    split,
    training_rows,
)


def write(tmp_path, text, name="data.txt"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


def test_ml1m_line(tmp_path):
    rows = load_interactions(write(tmp_path, "1::1193::5::978300760\n"), "ml1m")
    assert rows == [Interaction("1", "1193", 978300760, 5.0)]


def test_tsv_line_without_rating(tmp_path):
    rows = load_interactions(write(tmp_path, "u1\ti9\t100\n"), "tsv")
    assert rows == [Interaction("u1", "i9", 100, None)]


def test_tsv_with_rating(tmp_path):
    rows = load_interactions(write(tmp_path, "u1\ti9\t100\t4.5\n"), "tsv")
    assert rows[0].rating == 4.5


def test_empty_file_warns(tmp_path, caplog):
    with caplog.at_level(logging.WARNING):
        assert load_interactions(write(tmp_path, ""), "tsv") == []
    assert "no interactions" in caplog.text


def test_missing_file_is_fatal(tmp_path):
    with pytest.raises(DataError):
        load_interactions(tmp_path / "nope.dat", "ml1m")


def test_unknown_format(tmp_path):
    with pytest.raises(DataError):
        load_interactions(write(tmp_path, "a\tb\t1\n"), "csv")


def test_few_malformed_rows_skipped(tmp_path, caplog):
    good = "".join(f"{u}::{i}::3::{t}\n" for u in range(20) for i, t in zip(range(10), range(10)))
    text = good + "garbage line\n"
    with caplog.at_level(logging.WARNING):
        rows = load_interactions(write(tmp_path, text), "ml1m")
    assert len(rows) == 200
    assert "malformed" in caplog.text


def test_many_malformed_rows_fatal(tmp_path):
    text = "1::2::3::4\n" * 10 + "bad\n" + "1::x::3::oops\n"
    with pytest.raises(DataError, match="lines 11, 12"):
        load_interactions(write(tmp_path, text), "ml1m")


def _ix(user, items, stamps):
    return [Interaction(user, i, t) for i, t in zip(items, stamps)]


def test_build_keeps_chronological_order():
    ds = build_dataset(_ix("u", "abc", [1, 2, 3]))
    assert ds.decode(0) == ["a", "b", "c"]


def test_build_sorts_by_timestamp():
    ds = build_dataset(_ix("u", "abc", [3, 2, 1]))
    assert ds.decode(0) == ["c", "b", "a"]


def test_ties_keep_input_order():
    ds = build_dataset(_ix("u", "xyz", [5, 5, 5]))
    assert ds.decode(0) == ["x", "y", "z"]


def test_short_users_dropped():
    ds = build_dataset(_ix("short", "ab", [1, 2]) + _ix("long", "abc", [1, 2, 3]), min_seq_len=3)
    assert ds.users == ("long",)


def test_no_surviving_users_fatal():
    with pytest.raises(DataError):
        build_dataset(_ix("u", "ab", [1, 2]))


def test_min_seq_len_below_three_rejected():
    with pytest.raises(DataError):
        build_dataset(_ix("u", "abc", [1, 2, 3]), min_seq_len=2)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 9), st.integers(0, 20)), min_size=1, max_size=60))
def test_vocab_round_trip(triples):
    rows = [Interaction(f"u{u}", f"i{i}", t) for u, i, t in triples]
    counts = {}
    for r in rows:
        counts[r.user_id] = counts.get(r.user_id, 0) + 1
    if max(counts.values()) < 3:
        with pytest.raises(DataError):
            build_dataset(rows)
        return
    ds = build_dataset(rows)
    for pos, user in enumerate(ds.users):
        expected = [r.item_id for _, r in sorted(
            ((r.timestamp, k), r) for k, r in enumerate(rows) if r.user_id == user)]
        assert ds.decode(pos) == expected
        assert all(0 <= i < ds.num_items for i in ds.sequences[pos])


def _dataset(seqs, max_len=50):
    rows = []
    for u, seq in enumerate(seqs):
        rows += [Interaction(f"u{u}", f"i{i}", t) for t, i in enumerate(seq)]
    return build_dataset(rows, max_len=max_len)


def test_split_example():
    ds = _dataset([[5, 7, 9, 2]])
    sv = split(ds)
    idx = ds.item_index
    assert sv.train_prefix[0] == (idx["i5"], idx["i7"])
    assert sv.valid_target[0] == idx["i9"]
    assert sv.test_target[0] == idx["i2"]


def test_split_minimum_length_and_independence():
    ds = _dataset([[1, 2, 3], [4, 5, 6, 7]])
    sv = split(ds)
    idx = ds.item_index
    assert sv.train_prefix[0] == (idx["i1"],)
    assert (sv.valid_target[0], sv.test_target[0]) == (idx["i2"], idx["i3"])
    assert sv.train_prefix[1] == (idx["i4"], idx["i5"])


def test_pad_left():
    assert pad_left([4, 6], 4).tolist() == [0, 0, 5, 7]


def test_truncation_keeps_suffix():
    raw = list(range(10))
    row = pad_left(raw, 4)
    assert (row - 1).tolist() == raw[-4:]


def test_batch_rows_and_targets():
    ds = _dataset([[1, 2, 3, 4, 5], [6, 7, 8, 9]], max_len=4)
    sv = split(ds)
    (batch,) = list(make_batches(sv, 2, shuffle_seed=None))
    idx = ds.item_index
    assert batch.items[0].tolist() == [0, 0, idx["i1"] + 1, idx["i2"] + 1]
    assert batch.targets[0] == idx["i3"]
    assert batch.lengths.tolist() == [2, 1]


def test_batch_size_below_two_fatal():
    sv = split(_dataset([[1, 2, 3, 4]] * 3))
    with pytest.raises(DataError):
        list(make_batches(sv, 1))


def test_batches_deterministic():
    sv = split(_dataset([[i, i + 1, i + 2, i + 3] for i in range(20)]))
    a = [b.users.tolist() for b in make_batches(sv, 4, shuffle_seed=7)]
    b = [b.users.tolist() for b in make_batches(sv, 4, shuffle_seed=7)]
    c = [b.users.tolist() for b in make_batches(sv, 4, shuffle_seed=8)]
    assert a == b
    assert a != c


@pytest.mark.parametrize("n_users,bs", [(20, 4), (21, 4), (9, 4), (2, 2), (5, 8)])
def test_epoch_covers_every_training_user_once(n_users, bs):
    sv = split(_dataset([[i, i + 1, i + 2, i + 3] for i in range(n_users)]))
    users = np.concatenate([b.users for b in make_batches(sv, bs, shuffle_seed=1)])
    assert sorted(users.tolist()) == sv.training_users()
    assert num_batches(sv, bs) == len(list(make_batches(sv, bs, 1)))
    assert all(len(b) >= 2 for b in make_batches(sv, bs, 1))


def test_training_rows_skip_single_item_prefixes():
    sv = split(_dataset([[1, 2, 3], [4, 5, 6, 7]]))
    assert [u for u, _, _ in training_rows(sv)] == [1]


# candidate sets ---------------------------------------------------------


def _vocab_split(num_items, prefix, valid, test):
    """Users: one with the given prefix, plus filler users covering the vocabulary."""
    seqs = [prefix + [valid, test]]
    filler = list(range(num_items))
    for k in range(0, num_items, 3):
        chunk = filler[k:k + 3]
        while len(chunk) < 3:
            chunk = chunk + [filler[0]]
        seqs.append(chunk)
    ds = _dataset(seqs)
    assert ds.num_items == num_items
    return ds, split(ds)


def test_whole_count():
    ds, sv = _vocab_split(100, list(range(10)), 50, 60)
    cand = candidate_set(sv, 0, "whole", stage="valid")
    # set-arithmetic oracle: (V minus prefix) plus target
    expected = (set(range(100)) - set(sv.train_prefix[0])) | {sv.valid_target[0]}
    assert len(cand) == len(expected) == 90
    assert set(cand) == expected
    assert cand.count(sv.valid_target[0]) == 1


def test_whole_count_repeat_target():
    # target already in the prefix is put back exactly once
    ds, sv = _vocab_split(100, list(range(10)), 3, 60)
    cand = candidate_set(sv, 0, "whole", stage="valid")
    assert len(cand) == 100 - 10 + 1 == 91


def test_random_deterministic():
    ds, sv = _vocab_split(100, list(range(10)), 50, 60)
    a = candidate_set(sv, 0, "random", 100 - 11, rng_seed=3)
    assert a == candidate_set(sv, 0, "random", 100 - 11, rng_seed=3)
    assert a.count(sv.test_target[0]) == 1
    assert len(a) == len(set(a)) == 89


def test_popular_brute_force():
    rows = []
    users = [["a", "b", "t1", "v", "w"], ["a", "b", "t2", "v", "w"], ["a", "b", "t3", "v", "w"],
             ["a", "z1", "v", "w"], ["a", "c", "v", "w"], ["d", "c", "v", "w"]]
    for u, seq in enumerate(users):
        rows += [Interaction(f"u{u}", it, t) for t, it in enumerate(seq)]
    ds = build_dataset(rows)
    sv = split(ds)
    idx = ds.item_index
    freq = dict(zip(ds.item_ids, sv.item_frequency.tolist()))
    assert freq["a"] == 5 and freq["b"] == 3 and freq["c"] == 2
    cand = candidate_set(sv, 3, "popular", size=2, stage="valid")
    assert cand[0] == sv.valid_target[3]
    # brute force: most frequent eligible item
    seen = set(sv.history(3, "valid")) | {sv.valid_target[3]}
    ranked = sorted((i for i in range(ds.num_items) if i not in seen), key=lambda i: (-sv.item_frequency[i], i))
    assert cand[1:] == ranked[:1]
    assert cand[1] == idx["b"]


def test_popular_spec_example():
    rows = []
    # c appears once, b three times, a five times in training prefixes
    users = [["a", "b", "v", "w"], ["a", "b", "v", "w"], ["a", "b", "v", "w"], ["a", "q", "v", "w"],
             ["a", "r", "v", "w"], ["s", "c", "c", "w"]]
    for u, seq in enumerate(users):
        rows += [Interaction(f"u{u}", it, t) for t, it in enumerate(seq)]
    ds = build_dataset(rows)
    sv = split(ds)
    idx = ds.item_index
    # user 5: prefix [s, c], valid target c
    cand = candidate_set(sv, 5, "popular", size=2, stage="valid", exclude_history=False)
    assert cand == [idx["c"], idx["a"]]


def test_candidate_size_too_large():
    ds, sv = _vocab_split(30, [1, 2], 5, 6)
    with pytest.raises(DataError):
        candidate_set(sv, 0, "random", size=31)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["whole", "random", "popular"]), st.integers(2, 20))
def test_target_exactly_once(seed, setting, size):
    ds, sv = _vocab_split(40, [1, 2, 3], 7, 9)
    for stage in ("valid", "test"):
        cand = candidate_set(sv, 0, setting, size, seed, stage)
        assert cand.count(sv.target(0, stage)) == 1
        assert len(cand) == len(set(cand))
        if setting != "whole":
            assert len(cand) == size
