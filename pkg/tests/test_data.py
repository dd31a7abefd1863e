import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kdl.data import Dataset, DatasetSplit, gen_synthetic, load_csv, save_csv, split
from kdl.errors import DataError, ParameterError


def write(tmp_path, text, name="d.csv"):
    p = tmp_path / name
    p.write_bytes(text.encode())
    return p


def test_zero_row_with_usage(tmp_path):
    p = write(tmp_path, "emotion,pixels,Usage\n3," + " ".join(["0"] * 2304) + ",Training\n")
    data = load_csv(p, (48, 48))
    assert isinstance(data, DatasetSplit)
    assert data.train.images.shape == (1, 1, 48, 48) and not data.train.images.any()
    assert data.train.labels.tolist() == [3]
    assert len(data.val) == 0 and len(data.test) == 0


def test_short_row_is_a_data_error(tmp_path):
    p = write(tmp_path, "3," + " ".join(["0"] * 2303) + ",Training\n")
    with pytest.raises(DataError, match="row 1"):
        load_csv(p, (48, 48))


@pytest.mark.parametrize("row", ["1,0 0 0 x,Training", "1,0 0 0 1.5,Training",
                                 "1,0 0 0 300,Training", "1,0 0 0 0,Validation"])
def test_bad_values_are_data_errors(tmp_path, row):
    with pytest.raises(DataError):
        load_csv(write(tmp_path, row + "\n"), (2, 2))


def test_private_only_file_and_crlf(tmp_path):
    p = write(tmp_path, "emotion,pixels,Usage\r\n0,1 2 3 4,PrivateTest\r\n5,4 3 2 1,PrivateTest\r\n")
    data = load_csv(p, (2, 2))
    assert len(data.train) == 0 and len(data.test) == 2
    assert data.test.images[0, 0, 0, 1] == pytest.approx(2 / 255)


def test_no_usage_column_gives_dataset(tmp_path):
    data = load_csv(write(tmp_path, "0,1 2 3 4\n1,5 6 7 8\n"), (2, 2))
    assert isinstance(data, Dataset) and len(data) == 2


def test_colour_rows(tmp_path):
    data = load_csv(write(tmp_path, "0," + " ".join(map(str, range(12))) + "\n"), (2, 2))
    assert data.images.shape == (1, 3, 2, 2)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.lists(st.integers(0, 255), min_size=9, max_size=9), min_size=1, max_size=5),
       st.lists(st.integers(0, 6), min_size=5, max_size=5))
def test_csv_round_trip_preserves_integers(tmp_path_factory, pixels, labels):
    tmp = tmp_path_factory.mktemp("rt")
    ds = Dataset(np.array(pixels, np.float32).reshape(-1, 1, 3, 3) / np.float32(255), labels[:len(pixels)])
    save_csv(ds, tmp / "a.csv")
    back = load_csv(tmp / "a.csv", (3, 3))
    assert np.array_equal(np.rint(back.images * 255).astype(int).reshape(len(pixels), 9), pixels)
    assert back.labels.tolist() == labels[:len(pixels)]


def nearest_centroid_accuracy(X, y, centers):
    d = ((X[:, None, :] - centers[None]) ** 2).sum(-1)
    return float((d.argmin(1) == y).mean())


def test_blobs_are_linearly_separable():
    ds = gen_synthetic("blobs", 500, 2, seed=0)
    X = ds.images.reshape(-1, 2).astype(np.float64)
    assert nearest_centroid_accuracy(X, ds.labels, np.array([[2.0, 0.0], [-2.0, 0.0]])) >= 0.99


def test_spiral_layout_and_histogram():
    ds = gen_synthetic("spiral", 50, 3, seed=4)
    assert ds.images.shape == (150, 2, 1, 1)
    assert np.bincount(ds.labels).tolist() == [50, 50, 50]
    r = np.hypot(ds.images[:, 0, 0, 0], ds.images[:, 1, 0, 0])
    assert np.allclose(np.sort(r[ds.labels == 0]), np.arange(50) / 50, atol=1e-6)
    assert len(gen_synthetic("spiral", 1, 7)) == 7


def test_checkerboard_images():
    ds = gen_synthetic("checkerboard-image", 3, 7, seed=1, image_hw=(8, 8))
    assert ds.images.shape == (21, 1, 8, 8)
    assert ds.images.min() >= 0 and ds.images.max() <= 1
    means = ds.images.reshape(7, 3, 64).mean(axis=(1, 2))
    assert len(np.unique(np.round(means, 1))) >= 3


def test_synthetic_is_deterministic():
    for kind in ("blobs", "spiral", "checkerboard-image"):
        a = gen_synthetic(kind, 5, 3, seed=2, image_hw=(6, 6))
        b = gen_synthetic(kind, 5, 3, seed=2, image_hw=(6, 6))
        assert a.images.tobytes() == b.images.tobytes()


def test_split_examples():
    ds = Dataset(np.arange(10, dtype=np.float32).reshape(10, 1, 1, 1), np.arange(10))
    s = split(ds, (1, 0, 0))
    assert len(s.train) == 10 and len(s.val) == 0 and len(s.test) == 0
    s = split(ds, (0.8, 0.1, 0.1), seed=3)
    assert (len(s.train), len(s.val), len(s.test)) == (8, 1, 1)
    again = split(ds, (0.8, 0.1, 0.1), seed=3)
    assert np.array_equal(s.train.labels, again.train.labels)
    with pytest.raises(ParameterError):
        split(ds, (0.5, 0.2, 0.2))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 60), st.floats(0, 1), st.floats(0, 1), st.integers(0, 99))
def test_split_is_a_partition(n, a, b, seed):
    f_train = a
    f_val = (1 - a) * b
    ds = Dataset(np.arange(n, dtype=np.float32).reshape(n, 1, 1, 1), np.arange(n))
    s = split(ds, (f_train, f_val, 1 - f_train - f_val), seed)
    parts = [s.train.labels, s.val.labels, s.test.labels]
    joined = np.concatenate(parts)
    assert sorted(joined.tolist()) == list(range(n))
