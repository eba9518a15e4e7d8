"""Key-value memory: exact retrieval, tie-breaking, disk roundtrip."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from epmem.data import Example
from epmem.errors import (
    CapacityError,
    DataError,
    InputError,
    RetrievalUnavailableError,
)
from epmem.memory import EpisodicMemory

from oracles import knn_full_scan


def ex(i: int) -> Example:
    return Example(kind="classification", text=f"doc {i}", label=i % 3)


def filled(n: int, d: int = 4, seed: int = 0) -> tuple[EpisodicMemory, np.ndarray]:
    rng = np.random.default_rng(seed)
    keys = rng.normal(size=(n, d)).astype(np.float32)
    mem = EpisodicMemory(d_key=d)
    for i in range(n):
        mem.write(keys[i], ex(i))
    return mem, keys


def test_write_and_len():
    mem, _ = filled(10)
    assert len(mem) == 10
    assert mem.value(3).text == "doc 3"
    assert mem.keys.shape == (10, 4)


def test_write_validates_key():
    mem = EpisodicMemory(d_key=4)
    with pytest.raises(InputError):
        mem.write(np.zeros(3), ex(0))
    with pytest.raises(InputError):
        mem.write(np.array([1.0, np.nan, 0.0, 0.0]), ex(0))


def test_capacity_refuses_writes_when_full():
    mem = EpisodicMemory(d_key=2, capacity=2)
    mem.write(np.zeros(2), ex(0))
    mem.write(np.ones(2), ex(1))
    with pytest.raises(CapacityError):
        mem.write(np.ones(2), ex(2))
    assert len(mem) == 2


def test_neighbors_empty_memory_raises():
    mem = EpisodicMemory(d_key=2)
    with pytest.raises(RetrievalUnavailableError):
        mem.neighbors(np.zeros(2), 1)


def test_neighbors_match_full_scan():
    mem, keys = filled(500, d=6, seed=1)
    rng = np.random.default_rng(2)
    for _ in range(50):
        q = rng.normal(size=6)
        k = int(rng.integers(1, 40))
        got = [n.text for n, _ in mem.neighbors(q, k)]
        want = [f"doc {i}" for i in knn_full_scan(keys, q, k)]
        assert got == want


def test_neighbors_distances_sorted_and_exact():
    mem, keys = filled(100, d=3, seed=3)
    q = np.array([0.5, -0.5, 0.25])
    pairs = mem.neighbors(q, 10)
    dists = [d for _, d in pairs]
    assert dists == sorted(dists)
    nearest, d0 = pairs[0]
    i = int(nearest.text.split()[1])
    assert d0 == float(np.dot(keys[i].astype(np.float64) - q, keys[i].astype(np.float64) - q))


def test_neighbors_tie_break_by_insertion_order():
    mem = EpisodicMemory(d_key=2)
    # three identical keys, then one farther away
    for i in range(3):
        mem.write(np.array([1.0, 1.0]), ex(i))
    mem.write(np.array([5.0, 5.0]), ex(3))
    got = [n.text for n, _ in mem.neighbors(np.array([1.0, 1.0]), 2)]
    assert got == ["doc 0", "doc 1"]
    # duplicates straddling the cut keep insertion order
    got = [n.text for n, _ in mem.neighbors(np.array([0.0, 0.0]), 3)]
    assert got == ["doc 0", "doc 1", "doc 2"]


def test_neighbors_k_larger_than_memory_returns_all():
    mem, keys = filled(5)
    got = mem.neighbors(np.zeros(4), 32)
    assert len(got) == 5
    want = [f"doc {i}" for i in knn_full_scan(keys, np.zeros(4), 5)]
    assert [n.text for n, _ in got] == want


def test_sample_is_seeded_and_capped():
    mem, _ = filled(10)
    a = [e.text for e in mem.sample(4, np.random.default_rng(7))]
    b = [e.text for e in mem.sample(4, np.random.default_rng(7))]
    assert a == b
    assert len(set(a)) == 4  # without replacement
    assert len(mem.sample(99, np.random.default_rng(0))) == 10
    assert EpisodicMemory(d_key=2).sample(5, np.random.default_rng(0)) == []


def test_clone_is_independent():
    mem, _ = filled(5)
    other = mem.clone()
    other.write(np.zeros(4), ex(99))
    assert len(mem) == 5
    assert len(other) == 6
    got = [n.text for n, _ in mem.neighbors(np.zeros(4), 5)]
    assert "doc 99" not in got


def test_snapshot_roundtrip_bitwise(tmp_path):
    mem, _ = filled(37, d=5, seed=9)
    path = tmp_path / "mem.bin"
    mem.save(path)
    back = EpisodicMemory.load(path)
    assert len(back) == 37
    assert np.array_equal(back.keys, mem.keys)
    assert [back.value(i).to_dict() for i in range(37)] == [
        mem.value(i).to_dict() for i in range(37)
    ]
    # identical retrieval, including tie behavior
    q = np.arange(5, dtype=float)
    assert [(n.text, d) for n, d in back.neighbors(q, 7)] == [
        (n.text, d) for n, d in mem.neighbors(q, 7)
    ]
    # and a second save produces identical bytes
    path2 = tmp_path / "mem2.bin"
    back.save(path2)
    assert path.read_bytes() == path2.read_bytes()


def test_snapshot_roundtrip_preserves_insertion_counter(tmp_path):
    mem, _ = filled(3)
    path = tmp_path / "m.bin"
    mem.save(path)
    back = EpisodicMemory.load(path)
    back.write(np.zeros(4), ex(50))
    assert back._indices[-1] == 3


def test_load_rejects_garbage(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"not a snapshot at all")
    with pytest.raises(DataError):
        EpisodicMemory.load(path)
    mem, _ = filled(4)
    good = tmp_path / "good.bin"
    mem.save(good)
    blob = good.read_bytes()
    truncated = tmp_path / "trunc.bin"
    truncated.write_bytes(blob[: len(blob) - 7])
    with pytest.raises(DataError):
        EpisodicMemory.load(truncated)
    padded = tmp_path / "padded.bin"
    padded.write_bytes(blob + b"xx")
    with pytest.raises(DataError):
        EpisodicMemory.load(padded)


def test_empty_memory_roundtrip(tmp_path):
    mem = EpisodicMemory(d_key=8)
    path = tmp_path / "empty.bin"
    mem.save(path)
    back = EpisodicMemory.load(path)
    assert len(back) == 0
    back.write(np.zeros(8), ex(0))
    assert len(back) == 1


@settings(max_examples=30, deadline=None)
@given(
    st.integers(min_value=1, max_value=60),
    st.integers(min_value=1, max_value=70),
    st.integers(min_value=0, max_value=2**31 - 1),
)
def test_neighbors_always_match_oracle(n, k, seed):
    rng = np.random.default_rng(seed)
    d = 3
    # draw from a tiny integer grid so exact ties happen often
    keys = rng.integers(-2, 3, size=(n, d)).astype(np.float32)
    mem = EpisodicMemory(d_key=d)
    for i in range(n):
        mem.write(keys[i], ex(i))
    q = rng.integers(-2, 3, size=d).astype(np.float64)
    got = [int(e.text.split()[1]) for e, _ in mem.neighbors(q, k)]
    assert got == knn_full_scan(keys, q, k)
