import gzip
import struct
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from persist_sgd.data import (
    Dataset,
    PersistencyPolicy,
    blob_centers,
    epoch_permutation,
    generate_blobs,
    load_csv,
    load_idx,
    make_epoch_schedule,
    minibatches,
    split,
    write_csv,
)
from persist_sgd.errors import ConfigError, DataError


def nearest_center_accuracy(ds: Dataset) -> float:
    centers = blob_centers(ds.num_classes, ds.input_shape[0])
    correct = 0
    for x, y in zip(ds.features, ds.labels):
        dists = [float(np.sum((x - c) ** 2)) for c in centers]
        correct += int(np.argmin(dists) == y)
    return correct / len(ds)


def write_idx(path, array, magic):
    header = struct.pack(">I", magic) + b"".join(struct.pack(">I", d) for d in array.shape)
    data = header + array.astype(np.uint8).tobytes()
    if str(path).endswith(".gz"):
        with gzip.open(path, "wb") as f:
            f.write(data)
    else:
        path.write_bytes(data)


class TestSchedule:
    def test_standard_rule(self):
        sched = make_epoch_schedule(4, PersistencyPolicy(1, 2), epoch=1, seed=0)
        assert [(e.minibatch_id, e.reuse_index) for e in sched] == [(0, 1), (1, 1)]
        assert sorted(np.concatenate([e.indices for e in sched])) == [0, 1, 2, 3]

    def test_three_uses_each(self):
        sched = make_epoch_schedule(4, PersistencyPolicy(3, 2), epoch=1, seed=0)
        assert [(e.minibatch_id, e.reuse_index) for e in sched] == [
            (0, 1), (0, 2), (0, 3), (1, 1), (1, 2), (1, 3),
        ]
        assert all(np.array_equal(e.indices, sched[0].indices) for e in sched[:3])

    def test_remainder_batch_kept(self):
        sched = make_epoch_schedule(5, PersistencyPolicy(2, 2), epoch=1, seed=0)
        assert len(sched) == 6
        sizes = [len(e.indices) for e in sched if e.reuse_index == 1]
        assert sizes == [2, 2, 1]
        seen = Counter(int(i) for e in sched if e.reuse_index == 1 for i in e.indices)
        assert seen == Counter(range(5))

    def test_batch_larger_than_dataset(self):
        sched = make_epoch_schedule(3, PersistencyPolicy(2, 10), epoch=1, seed=0)
        assert len(sched) == 2 and sorted(sched[0].indices) == [0, 1, 2]

    def test_reshuffle_flag(self):
        a = make_epoch_schedule(50, PersistencyPolicy(1, 10), 1, 3)
        b = make_epoch_schedule(50, PersistencyPolicy(1, 10), 2, 3)
        assert a != b
        fixed = PersistencyPolicy(1, 10, reshuffle_each_epoch=False)
        assert make_epoch_schedule(50, fixed, 1, 3) == make_epoch_schedule(50, fixed, 2, 3)

    def test_pure_function(self):
        pol = PersistencyPolicy(3, 7)
        assert make_epoch_schedule(30, pol, 4, 11) == make_epoch_schedule(30, pol, 4, 11)

    def test_k1_equals_plain_minibatches(self):
        sched = make_epoch_schedule(23, PersistencyPolicy(1, 5), 2, 9)
        plain = minibatches(23, 5, 2, 9)
        assert len(sched) == len(plain)
        assert all(np.array_equal(e.indices, b) for e, b in zip(sched, plain))

    def test_permutation_is_a_permutation(self):
        assert sorted(epoch_permutation(100, 1, 5)) == list(range(100))

    @pytest.mark.parametrize("k,m", [(0, 4), (2, 0), (1.5, 4)])
    def test_invalid_policy(self, k, m):
        with pytest.raises(ConfigError):
            PersistencyPolicy(k, m)

    @settings(max_examples=100, deadline=None)
    @given(
        n=st.integers(1, 300),
        m=st.integers(1, 64),
        k=st.integers(1, 6),
        epoch=st.integers(0, 5),
        seed=st.integers(-(2**63), 2**63 - 1),
    )
    def test_schedule_laws(self, n, m, k, epoch, seed):
        policy = PersistencyPolicy(k, m)
        sched = make_epoch_schedule(n, policy, epoch, seed)
        batches = -(-n // m)
        assert len(sched) == k * batches == policy.updates_per_epoch(n)
        counts = Counter(int(i) for e in sched for i in e.indices)
        assert counts == Counter({i: k for i in range(n)})
        for b in range(batches):
            block = sched[b * k : (b + 1) * k]
            assert [e.minibatch_id for e in block] == [b] * k
            assert [e.reuse_index for e in block] == list(range(1, k + 1))
            assert 1 <= len(block[0].indices) <= m


class TestBlobs:
    def test_degenerate_spread_is_separable(self):
        ds = generate_blobs(10, 20, 8, 1e-9, seed=1)
        assert nearest_center_accuracy(ds) == 1.0

    def test_deterministic(self):
        a = generate_blobs(10, 100, 20, 1.0, seed=4)
        b = generate_blobs(10, 100, 20, 1.0, seed=4)
        assert a.features.tobytes() == b.features.tobytes()
        assert a.labels.tobytes() == b.labels.tobytes()

    def test_large_spread_is_hard(self):
        # centers +e0 and -e0 are 2 apart; spread 20 is 10x that
        ds = generate_blobs(2, 200, 4, 20.0, seed=0)
        assert nearest_center_accuracy(ds) < 0.9

    def test_many_classes_still_unit_centers(self):
        centers = blob_centers(12, 3)
        np.testing.assert_allclose(np.linalg.norm(centers, axis=1), 1.0)
        assert len({tuple(c) for c in centers}) == 12

    def test_shape_and_labels(self):
        ds = generate_blobs(3, 5, 7, 0.5, seed=0)
        assert ds.features.shape == (15, 7)
        assert list(ds.class_counts()) == [5, 5, 5]

    def test_invalid(self):
        with pytest.raises(ConfigError):
            generate_blobs(1, 5, 2, 1.0, 0)
        with pytest.raises(ConfigError):
            generate_blobs(2, 5, 2, 0.0, 0)


class TestDataset:
    def test_immutable(self):
        ds = generate_blobs(2, 3, 2, 1.0, 0)
        with pytest.raises(ValueError):
            ds.features[0, 0] = 1.0

    @pytest.mark.parametrize(
        "features,labels,c",
        [(np.zeros((0, 2)), np.zeros(0), 2), (np.zeros((2, 2)), [0, 2], 2), (np.zeros((2, 2)), [0], 2),
         (np.zeros((2, 2)), [0, 1], 1), (np.zeros((2, 2)), [0, -1], 2)],
    )
    def test_invalid(self, features, labels, c):
        with pytest.raises(DataError):
            Dataset(features, labels, c)


class TestSplit:
    def test_sizes_and_disjoint(self):
        ds = Dataset(np.arange(10.0)[:, None], np.arange(10) % 2, 2)
        tr, te = split(ds, 0.8, seed=3)
        assert (len(tr), len(te)) == (8, 2)
        ids_tr, ids_te = set(tr.features[:, 0]), set(te.features[:, 0])
        assert not ids_tr & ids_te and ids_tr | ids_te == set(range(10))

    def test_deterministic(self):
        ds = generate_blobs(3, 10, 2, 1.0, 0)
        a, b = split(ds, 0.7, 5), split(ds, 0.7, 5)
        assert a[0].features.tobytes() == b[0].features.tobytes()

    def test_label_histogram_preserved(self):
        ds = generate_blobs(4, 25, 3, 1.0, 2)
        tr, te = split(ds, 0.6, 1)
        full = Counter(ds.labels.tolist())
        assert Counter(tr.labels.tolist()) + Counter(te.labels.tolist()) == full

    def test_empty_side(self):
        ds = Dataset(np.zeros((3, 1)), [0, 1, 0], 2)
        with pytest.raises(DataError):
            split(ds, 0.1, 0)

    @pytest.mark.parametrize("frac", [0.0, 1.0, 1.5])
    def test_bad_fraction(self, frac):
        with pytest.raises(ConfigError):
            split(generate_blobs(2, 5, 1, 1.0, 0), frac, 0)


class TestCSV:
    def test_single_row(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("1,0.5,0.25\n")
        ds = load_csv(p, num_classes=2)
        assert len(ds) == 1 and ds.labels[0] == 1
        np.testing.assert_array_equal(ds.features[0], [0.5, 0.25])

    def test_empty_file(self, tmp_path):
        p = tmp_path / "empty.csv"
        p.write_text("")
        with pytest.raises(DataError, match="no examples"):
            load_csv(p)

    def test_round_trip_bitwise(self, tmp_path):
        ds = generate_blobs(4, 30, 6, 0.7, seed=8)
        p = tmp_path / "blobs.csv"
        write_csv(ds, p)
        back = load_csv(p, num_classes=4)
        assert back.features.tobytes() == ds.features.tobytes()
        assert back.labels.tobytes() == ds.labels.tobytes()

    @pytest.mark.parametrize(
        "text,needle",
        [("0,1.0\n1,2.0,3.0\n", ":2: expected 1 features"), ("0,1.0\nx,2.0\n", ":2: label"),
         ("0,abc\n", ":1:"), ("5,1.0\n", ":1: label 5 >= number of classes 2"), ("3\n", ":1: expected a label"),
         ("-1,1.0\n", ":1: negative")],
    )
    def test_malformed(self, tmp_path, text, needle):
        p = tmp_path / "bad.csv"
        p.write_text(text)
        with pytest.raises(DataError, match=needle):
            load_csv(p, num_classes=2)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError, match="cannot read"):
            load_csv(tmp_path / "nope.csv")

    def test_classes_inferred(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("0,1\n3,2\n")
        assert load_csv(p).num_classes == 4


class TestIDX:
    @pytest.mark.parametrize("suffix", ["", ".gz"])
    def test_load_pair(self, tmp_path, suffix):
        imgs = np.arange(2 * 3 * 4).reshape(2, 3, 4) * 10
        labels = np.array([7, 2])
        write_idx(tmp_path / f"img{suffix}", imgs, 0x00000803)
        write_idx(tmp_path / f"lbl{suffix}", labels, 0x00000801)
        ds = load_idx(tmp_path / f"img{suffix}", tmp_path / f"lbl{suffix}")
        assert ds.features.shape == (2, 1, 3, 4)
        np.testing.assert_allclose(ds.features[:, 0], imgs / 255.0)
        assert list(ds.labels) == [7, 2] and ds.num_classes == 8

    def test_bad_magic(self, tmp_path):
        (tmp_path / "img").write_bytes(struct.pack(">I", 0x12345678))
        write_idx(tmp_path / "lbl", np.array([0]), 0x00000801)
        with pytest.raises(DataError, match="magic"):
            load_idx(tmp_path / "img", tmp_path / "lbl")

    def test_truncated(self, tmp_path):
        write_idx(tmp_path / "img", np.zeros((2, 2, 2)), 0x00000803)
        (tmp_path / "img").write_bytes((tmp_path / "img").read_bytes()[:-1])
        write_idx(tmp_path / "lbl", np.array([0, 1]), 0x00000801)
        with pytest.raises(DataError, match="expected 8 data bytes"):
            load_idx(tmp_path / "img", tmp_path / "lbl")

    def test_count_mismatch(self, tmp_path):
        write_idx(tmp_path / "img", np.zeros((2, 2, 2)), 0x00000803)
        write_idx(tmp_path / "lbl", np.array([0, 1, 1]), 0x00000801)
        with pytest.raises(DataError, match="2 images but 3 labels"):
            load_idx(tmp_path / "img", tmp_path / "lbl")

    def test_swapped_files(self, tmp_path):
        write_idx(tmp_path / "img", np.zeros((2, 2, 2)), 0x00000803)
        write_idx(tmp_path / "lbl", np.array([0, 1]), 0x00000801)
        with pytest.raises(DataError):
            load_idx(tmp_path / "lbl", tmp_path / "img")
