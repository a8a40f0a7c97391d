import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dfan.data import (
    ClassSplit,
    ConsistencyError,
    FeatureDataset,
    FeatureRecord,
    FormatError,
    LengthError,
    SemanticMatrix,
    SplitError,
    SynthSpec,
    generate_synthetic,
    load_semantic_matrix,
    read_feature_file,
    read_split,
    validate_split,
    write_feature_file,
    write_semantic_matrix,
    write_split,
    write_synthetic,
)


def random_dataset(rng, n, N, D, role="train"):
    return FeatureDataset(
        rng.standard_normal((n, N, D)).astype(np.float32),
        rng.standard_normal((n, D)).astype(np.float32),
        rng.integers(0, 50, n),
        role=role,
        N=N,
        D=D,
    )


class TestFeatureFile:
    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 6), st.integers(1, 5), st.integers(1, 7), st.integers(0, 2**31))
    def test_roundtrip_is_bit_identical(self, tmp_path_factory, n, N, D, seed):
        ds = random_dataset(np.random.default_rng(seed), n, N, D)
        path = tmp_path_factory.mktemp("ff") / "x.dfz"
        write_feature_file(ds, path)
        back = read_feature_file(path)
        assert back.local.tobytes() == ds.local.tobytes()
        assert back.global_.tobytes() == ds.global_.tobytes()
        assert back.labels.tolist() == ds.labels.tolist()
        assert (back.N, back.D) == (N, D)
        path2 = path.with_name("y.dfz")
        write_feature_file(back, path2)
        assert path.read_bytes() == path2.read_bytes()

    def test_layout(self, tmp_path):
        ds = FeatureDataset(np.arange(6, dtype=np.float32).reshape(1, 2, 3), [[9.0, 8.0, 7.0]], [4], N=2, D=3)
        write_feature_file(ds, tmp_path / "a.dfz")
        raw = (tmp_path / "a.dfz").read_bytes()
        assert raw[:4] == b"DFZ1"
        assert struct.unpack_from("<IIII", raw, 4) == (1, 1, 2, 3)
        assert struct.unpack_from("<I3f6f", raw, 20) == (4, 9.0, 8.0, 7.0, 0, 1, 2, 3, 4, 5)
        assert len(raw) == 20 + 4 + 12 + 24

    def test_bad_magic(self, tmp_path):
        ds = random_dataset(np.random.default_rng(0), 2, 2, 2)
        write_feature_file(ds, tmp_path / "a.dfz")
        raw = bytearray((tmp_path / "a.dfz").read_bytes())
        raw[:4] = b"XXXX"
        (tmp_path / "a.dfz").write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="magic"):
            read_feature_file(tmp_path / "a.dfz")

    def test_bad_version(self, tmp_path):
        ds = random_dataset(np.random.default_rng(0), 1, 2, 2)
        write_feature_file(ds, tmp_path / "a.dfz")
        raw = bytearray((tmp_path / "a.dfz").read_bytes())
        raw[4:8] = struct.pack("<I", 2)
        (tmp_path / "a.dfz").write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="version"):
            read_feature_file(tmp_path / "a.dfz")

    def test_truncated_payload_reports_byte_counts(self, tmp_path):
        ds = random_dataset(np.random.default_rng(0), 3, 2, 2)
        write_feature_file(ds, tmp_path / "a.dfz")
        raw = (tmp_path / "a.dfz").read_bytes()
        (tmp_path / "a.dfz").write_bytes(raw[:-5])
        with pytest.raises(LengthError, match=f"expected {len(raw)} bytes, got {len(raw) - 5}"):
            read_feature_file(tmp_path / "a.dfz")

    def test_empty_dataset(self, tmp_path):
        ds = FeatureDataset.from_records([], N=3, D=4)
        write_feature_file(ds, tmp_path / "e.dfz")
        assert len((tmp_path / "e.dfz").read_bytes()) == 20
        back = read_feature_file(tmp_path / "e.dfz")
        assert len(back) == 0 and (back.N, back.D) == (3, 4)

    def test_records_must_agree_on_shape(self):
        recs = [FeatureRecord(np.zeros((2, 3)), np.zeros(3), 0), FeatureRecord(np.zeros((3, 3)), np.zeros(3), 0)]
        with pytest.raises(ConsistencyError):
            FeatureDataset.from_records(recs)

    def test_record_rejects_non_finite(self):
        with pytest.raises(ConsistencyError):
            FeatureRecord(np.array([[np.nan]]), np.zeros(1), 0)


def write_matrix(tmp_path, values, ids):
    path = tmp_path / "sem.bin"
    write_semantic_matrix(SemanticMatrix(values, ids), path)
    return path


class TestSemanticMatrix:
    def test_load_shape(self, tmp_path):
        path = write_matrix(tmp_path, np.arange(12.0).reshape(3, 4), ("a", "b", "c"))
        sm = load_semantic_matrix(path)
        assert sm.values.shape == (3, 4)
        assert sm.class_ids == ("a", "b", "c")
        assert (tmp_path / "sem.manifest.txt").read_text() == "0\ta\n1\tb\n2\tc\n"

    def test_duplicate_class_id_in_manifest(self, tmp_path):
        path = write_matrix(tmp_path, np.zeros((2, 2)), ("a", "b"))
        (tmp_path / "sem.manifest.txt").write_text("0\ta\n1\ta\n")
        with pytest.raises(ConsistencyError, match="duplicate"):
            load_semantic_matrix(path)

    def test_manifest_one_row_short(self, tmp_path):
        path = write_matrix(tmp_path, np.zeros((3, 2)), ("a", "b", "c"))
        (tmp_path / "sem.manifest.txt").write_text("0\ta\n1\tb\n")
        with pytest.raises(ConsistencyError, match="3 rows"):
            load_semantic_matrix(path)

    def test_nan_rejected(self):
        with pytest.raises(ConsistencyError):
            SemanticMatrix(np.array([[np.nan]]), ("a",))


@pytest.fixture
def sm4():
    return SemanticMatrix(np.eye(4), ("a", "b", "c", "d"))


def train_with(labels):
    n = len(labels)
    return FeatureDataset(np.zeros((n, 1, 2)), np.zeros((n, 2)), labels, N=1, D=2)


class TestValidateSplit:
    def test_valid(self, sm4):
        validate_split(ClassSplit((0, 1), (2, 3)), sm4, train_with([0, 1, 1]))

    def test_class_in_both_sets_is_named(self, sm4):
        with pytest.raises(SplitError, match="'b'"):
            validate_split(ClassSplit((0, 1), (1, 2)), sm4)

    def test_train_label_unseen(self, sm4):
        with pytest.raises(SplitError, match="'c'"):
            validate_split(ClassSplit((0, 1), (2, 3)), sm4, train_with([0, 2]))

    def test_every_single_violation_is_rejected(self, sm4):
        valid = ClassSplit((0, 1), (2, 3))
        train = train_with([0, 1])
        validate_split(valid, sm4, train)
        mutations = [
            (ClassSplit((), (2, 3)), train_with([])),  # empty seen
            (ClassSplit((0, 1), ()), train),  # empty unseen
            (ClassSplit((0, 1, 2), (2, 3)), train),  # overlap
            (ClassSplit((0, 1), (2, 7)), train),  # unknown class
            (valid, train_with([0, 3])),  # unseen label in train
        ]
        for split, tr in mutations:
            with pytest.raises(SplitError):
                validate_split(split, sm4, tr)

    def test_split_file_roundtrip(self, sm4, tmp_path):
        split = ClassSplit((3, 0), (1,))
        write_split(split, sm4, tmp_path / "s.json")
        assert read_split(tmp_path / "s.json", sm4) == split

    def test_split_file_unknown_class(self, sm4, tmp_path):
        (tmp_path / "s.json").write_text('{"seen": ["a", "zz"], "unseen": ["b"]}')
        with pytest.raises(SplitError, match="zz"):
            read_split(tmp_path / "s.json", sm4)


class TestSynthetic:
    def test_least_squares_decoder_is_perfect_without_noise(self):
        d = generate_synthetic(SynthSpec(sigma=0.0, seed=11))
        A = d.semantic.values.astype(np.float64)
        X = d.train.global_.astype(np.float64)
        coef, *_ = np.linalg.lstsq(X, A[d.train.labels], rcond=None)
        decoded = X @ coef
        seen = np.array(d.split.seen)
        dist = ((decoded[:, None, :] - A[seen][None]) ** 2).sum(-1)
        assert np.array_equal(seen[dist.argmin(1)], d.train.labels)

    def test_deterministic(self):
        a, b = generate_synthetic(SynthSpec(seed=5)), generate_synthetic(SynthSpec(seed=5))
        assert a.train.local.tobytes() == b.train.local.tobytes()
        assert a.test_unseen.global_.tobytes() == b.test_unseen.global_.tobytes()
        assert a.semantic.values.tobytes() == b.semantic.values.tobytes()
        assert a.split == b.split

    def test_rows_distinct(self):
        d = generate_synthetic(SynthSpec())
        A = d.semantic.values
        gaps = np.linalg.norm(A[:, None] - A[None], axis=-1) + np.eye(len(A))
        assert gaps.min() > 1e-3

    def test_shapes_and_roles(self):
        spec = SynthSpec()
        d = generate_synthetic(spec)
        assert len(d.split.seen) == 10 and len(d.split.unseen) == 5
        assert len(d.train) == 10 * 24 and len(d.test_seen) == 10 * 6 and len(d.test_unseen) == 5 * 30
        assert d.train.local.shape[1:] == (spec.N, spec.D)
        assert set(d.train.labels.tolist()) == set(d.split.seen)
        assert set(d.test_unseen.labels.tolist()) == set(d.split.unseen)
        validate_split(d.split, d.semantic, d.train)
        np.testing.assert_allclose(d.train.global_, d.train.local.mean(axis=1), atol=1e-6)

    def test_attributes_must_fit_in_embedding(self):
        with pytest.raises(ValueError, match="M=9 exceeds D=8"):
            generate_synthetic(SynthSpec(M=9, D=8))

    def test_write_is_atomic(self, tmp_path, monkeypatch):
        import dfan.data as data_mod

        d = generate_synthetic(SynthSpec(n_seen=2, n_unseen=1, samples_per_class=3, M=2, N=2, D=4))

        def boom(*a, **k):
            raise OSError("disk full")

        monkeypatch.setattr(data_mod, "write_split", boom)
        with pytest.raises(OSError):
            write_synthetic(d, tmp_path / "out")
        assert list((tmp_path / "out").iterdir()) == []
