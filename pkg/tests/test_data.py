import json
import zipfile

import numpy as np
import pytest

from jointsearch import artifacts
from jointsearch.data import (
    RECORD_BYTES,
    DatasetError,
    SyntheticSpec,
    generate_synthetic,
    load_binary_batches,
    load_dataset,
    read_batch_file,
    save_dataset,
)


@pytest.fixture(scope="module")
def synthetic():
    return generate_synthetic()


def _write_batch(path, labels, seed=0):
    rng = np.random.default_rng(seed)
    rec = np.empty((len(labels), RECORD_BYTES), dtype=np.uint8)
    rec[:, 0] = labels
    rec[:, 1:] = rng.integers(0, 256, (len(labels), RECORD_BYTES - 1))
    rec.tofile(path)
    return rec


class TestSynthetic:
    def test_defaults(self, synthetic):
        assert synthetic.train_x.shape == (4000, 3, 16, 16)
        assert synthetic.test_x.shape == (1000, 3, 16, 16)
        assert synthetic.train_x.dtype == np.float32
        assert 0.0 <= synthetic.train_x.min() and synthetic.train_x.max() <= 1.0

    def test_balanced(self, synthetic):
        assert np.bincount(synthetic.test_y).tolist() == [250] * 4
        assert np.bincount(synthetic.train_y).tolist() == [1000] * 4

    def test_deterministic(self, synthetic):
        again = generate_synthetic()
        np.testing.assert_array_equal(again.train_x, synthetic.train_x)
        np.testing.assert_array_equal(again.test_y, synthetic.test_y)
        small = SyntheticSpec(train=40, test=40)
        assert not np.array_equal(generate_synthetic(small, seed=1).train_x, generate_synthetic(small, seed=2).train_x)

    def test_statistics_from_training_split(self, synthetic):
        np.testing.assert_allclose(synthetic.mean, synthetic.train_x.mean(axis=(0, 2, 3)), rtol=1e-6)

    def test_search_split_halves(self, synthetic):
        a, b = synthetic.search_split(0)
        assert len(a) == len(b) == 2000
        assert not set(a.tolist()) & set(b.tolist())
        np.testing.assert_array_equal(synthetic.search_split(0)[0], a)

    def test_linear_baseline_leaves_headroom(self, synthetic):
        # least-squares one-vs-all on raw pixels
        x = synthetic.train_x.reshape(4000, -1)
        xt = synthetic.test_x.reshape(1000, -1)
        x1 = np.hstack([x, np.ones((len(x), 1))])
        w, *_ = np.linalg.lstsq(x1, np.eye(4)[synthetic.train_y], rcond=None)
        pred = (np.hstack([xt, np.ones((len(xt), 1))]) @ w).argmax(axis=1)
        acc = float((pred == synthetic.test_y).mean())
        assert 0.30 < acc < 0.95

    @pytest.mark.parametrize(
        "spec",
        [SyntheticSpec(classes=1), SyntheticSpec(classes=9), SyntheticSpec(side=4), SyntheticSpec(train=10), SyntheticSpec(noise=-1.0)],
    )
    def test_invalid_specs(self, spec):
        with pytest.raises(DatasetError):
            generate_synthetic(spec)

    def test_save_load(self, tmp_path):
        ds = generate_synthetic(SyntheticSpec(train=40, test=20))
        save_dataset(tmp_path / "d.npz", ds)
        back = load_dataset(tmp_path / "d.npz")
        assert back.class_names == ds.class_names
        np.testing.assert_array_equal(back.train_x, ds.train_x)
        first = (tmp_path / "d.npz").read_bytes()
        save_dataset(tmp_path / "d.npz", back)
        assert (tmp_path / "d.npz").read_bytes() == first


class TestBinaryBatches:
    def test_record_arithmetic(self):
        assert RECORD_BYTES == 3073
        assert 30_730_000 // RECORD_BYTES == 10_000 and 30_730_000 % RECORD_BYTES == 0

    def test_full_batch_file(self, tmp_path):
        labels = np.arange(10_000) % 10
        rec = _write_batch(tmp_path / "data_batch_1.bin", labels)
        assert (tmp_path / "data_batch_1.bin").stat().st_size == 30_730_000
        images, y = read_batch_file(tmp_path / "data_batch_1.bin")
        assert images.shape == (10_000, 3, 32, 32)
        np.testing.assert_array_equal(y, labels)
        # planar layout: the first 1024 pixel bytes are the red plane
        np.testing.assert_array_equal(images[0, 0].ravel(), rec[0, 1:1025])

    def test_cap_and_subset(self, tmp_path):
        _write_batch(tmp_path / "data_batch_1.bin", np.arange(3000) % 10)
        _write_batch(tmp_path / "test_batch.bin", np.arange(500) % 10, seed=1)
        ds = load_binary_batches(tmp_path, cap=100)
        assert len(ds.train_x) == 1000 and ds.classes == 10
        assert ds.train_x.max() <= 1.0 and ds.train_x.dtype == np.float32
        sub = load_binary_batches(tmp_path, classes=[3, 7], cap=20)
        assert len(sub.train_x) == 40 and set(sub.train_y.tolist()) == {0, 1}
        assert sorted(np.bincount(sub.test_y).tolist()) == [20, 20]

    def test_truncated_file_names_offset(self, tmp_path):
        rec = _write_batch(tmp_path / "data_batch_1.bin", np.zeros(3, dtype=int))
        (tmp_path / "data_batch_1.bin").write_bytes(rec.tobytes()[:-10])
        with pytest.raises(DatasetError, match=f"byte offset {2 * RECORD_BYTES}"):
            read_batch_file(tmp_path / "data_batch_1.bin")

    def test_label_out_of_range(self, tmp_path):
        _write_batch(tmp_path / "data_batch_1.bin", np.array([1, 2, 12]))
        with pytest.raises(DatasetError, match=f"label 12 out of range at byte offset {2 * RECORD_BYTES}"):
            read_batch_file(tmp_path / "data_batch_1.bin")

    def test_missing_files(self, tmp_path):
        with pytest.raises(DatasetError, match="no training batches"):
            load_binary_batches(tmp_path)

    def test_bad_subset(self, tmp_path):
        _write_batch(tmp_path / "data_batch_1.bin", np.arange(20) % 10)
        with pytest.raises(DatasetError):
            load_binary_batches(tmp_path, classes=[1, 1])


class TestArtifacts:
    def test_json_round_trip(self, tmp_path):
        artifacts.write_json(tmp_path / "a.json", "x.schema", "1.2", {"k": [1, 2]})
        doc = artifacts.read_json(tmp_path / "a.json", "x.schema", "1.0")
        assert doc["k"] == [1, 2] and doc["header"] == {"schema": "x.schema", "version": "1.2"}

    def test_rejects_unknown_major(self, tmp_path):
        artifacts.write_json(tmp_path / "a.json", "x.schema", "2.0", {})
        with pytest.raises(artifacts.ArtifactError, match="unsupported"):
            artifacts.read_json(tmp_path / "a.json", "x.schema", "1.0")

    def test_rejects_other_schema_and_garbage(self, tmp_path):
        artifacts.write_json(tmp_path / "a.json", "y.schema", "1.0", {})
        with pytest.raises(artifacts.ArtifactError, match="expected schema"):
            artifacts.read_json(tmp_path / "a.json", "x.schema", "1.0")
        (tmp_path / "b.json").write_text("{not json")
        with pytest.raises(artifacts.ArtifactError):
            artifacts.read_json(tmp_path / "b.json", "x.schema", "1.0")
        (tmp_path / "c.json").write_text(json.dumps({"k": 1}))
        with pytest.raises(artifacts.ArtifactError, match="missing header"):
            artifacts.read_json(tmp_path / "c.json", "x.schema", "1.0")

    def test_archive_deterministic_and_versioned(self, tmp_path):
        arrays = {"b": np.arange(3.0), "a": np.eye(2, dtype=np.float32)}
        artifacts.write_arrays(tmp_path / "x.npz", "x.arrays", "1.0", {"m": 1}, arrays)
        first = (tmp_path / "x.npz").read_bytes()
        artifacts.write_arrays(tmp_path / "x.npz", "x.arrays", "1.0", {"m": 1}, dict(reversed(list(arrays.items()))))
        assert (tmp_path / "x.npz").read_bytes() == first
        meta, back = artifacts.read_arrays(tmp_path / "x.npz", "x.arrays", "1.3")
        assert meta == {"m": 1} and back["a"].dtype == np.float32
        with pytest.raises(artifacts.ArtifactError, match="unsupported"):
            artifacts.read_arrays(tmp_path / "x.npz", "x.arrays", "2.0")

    def test_archive_rejects_non_archives(self, tmp_path):
        (tmp_path / "x.npz").write_bytes(b"plain")
        with pytest.raises(artifacts.ArtifactError):
            artifacts.read_arrays(tmp_path / "x.npz", "x.arrays", "1.0")
        with zipfile.ZipFile(tmp_path / "y.npz", "w") as zf:
            zf.writestr("a.npy", b"")
        with pytest.raises(artifacts.ArtifactError, match="missing header"):
            artifacts.read_arrays(tmp_path / "y.npz", "x.arrays", "1.0")
