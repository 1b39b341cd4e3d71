import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sarbnn import data


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 12), st.integers(1, 12)), elements=st.floats(0, 1)))
def test_pgm16_round_trip(tmp_path_factory, img):
    path = tmp_path_factory.mktemp("pgm") / "x.pgm"
    data.write_pgm(path, img)
    back = data.read_pgm(path)
    assert back.shape == img.shape and back.dtype == np.float32
    assert np.max(np.abs(back - img)) <= 0.5 / 65535 + 1e-7
    data.write_pgm(path, back)
    assert np.array_equal(data.read_pgm(path), back)


def test_quantize_is_idempotent_and_matches_disk(tmp_path):
    img = np.random.default_rng(0).uniform(-0.2, 1.2, size=(6, 7))
    q = data.quantize(img)
    assert np.array_equal(data.quantize(q), q)
    data.write_pgm(tmp_path / "q.pgm", img)
    assert np.array_equal(data.read_pgm(tmp_path / "q.pgm"), q)


def test_pgm8_with_comment(tmp_path):
    path = tmp_path / "8.pgm"
    path.write_bytes(b"P5\n# made by hand\n3 2\n255\n" + bytes([0, 51, 255, 102, 204, 153]))
    img = data.read_pgm(path)
    np.testing.assert_allclose(img, np.array([[0, 51, 255], [102, 204, 153]]) / 255, atol=1e-7)


@pytest.mark.parametrize("blob, where", [
    (b"P2\n1 1\n255\n0", "magic"),
    (b"P5\nx 1\n255\n\0", "header"),
    (b"P5\n2 2\n255\n\0", "truncated"),
    (b"P5\n0 2\n255\n", "invalid"),
    (b"P5\n1 1\n70000\n\0\0", "invalid"),
])
def test_pgm_errors_name_the_file(tmp_path, blob, where):
    path = tmp_path / "bad.pgm"
    path.write_bytes(blob)
    with pytest.raises(data.DataFormatError, match=where) as exc:
        data.read_pgm(path)
    assert exc.value.path == str(path)


def small_dataset(split="test"):
    return data.generate_synthetic(num_classes=3, per_class=4, chip_size=32, seed=1, split=split)


def test_manifest_round_trip(tmp_path):
    ds = small_dataset()
    ds.scatterers = {ds.ids[0]: [(3.0, 4.0, 0.5, 1.25)]}
    data.save_manifest(ds, tmp_path / "m.csv")
    back = data.load_manifest(tmp_path / "m.csv", num_classes=3)
    assert back.equals(ds)
    assert back.scatterers == ds.scatterers
    assert (tmp_path / "m.csv").read_text().splitlines()[0] == "id,file,label,split"


def test_manifest_errors(tmp_path):
    with pytest.raises(FileNotFoundError, match="nowhere.csv"):
        data.load_manifest(tmp_path / "nowhere.csv")
    ds = small_dataset()
    data.save_manifest(ds, tmp_path / "m.csv")
    good = (tmp_path / "m.csv").read_text().splitlines()
    cases = {
        "header": ["id,path,label,split"] + good[1:],
        "columns": good[:1] + [good[1] + ",extra"],
        "integer": good[:1] + [good[1].replace(",0,test", ",zero,test")],
        "range": good[:1] + [good[1].replace(",0,test", ",7,test")],
        "mixed": good[:2] + [good[2].replace(",test", ",train")],
        "no chips": good[:1],
    }
    for reason, lines in cases.items():
        (tmp_path / "bad.csv").write_text("\n".join(lines) + "\n")
        with pytest.raises(data.DataFormatError):
            data.load_manifest(tmp_path / "bad.csv", num_classes=3)
    (tmp_path / "gone.csv").write_text(good[0] + "\nx,missing/x.pgm,0,test\n")
    with pytest.raises(FileNotFoundError, match="missing"):
        data.load_manifest(tmp_path / "gone.csv")
    assert len(data.load_manifest(tmp_path / "m.csv", 3, split="test")) == len(ds)


def test_dataset_validation():
    with pytest.raises(ValueError):
        data.ChipDataset(np.zeros((2, 4, 4)), [0, 1], ["a", "a"])
    with pytest.raises(ValueError):
        data.ChipDataset(np.zeros((2, 4, 4)), [0, 10], ["a", "b"])
    with pytest.raises(ValueError):
        data.ChipDataset(np.zeros((2, 2, 4, 4)), [0, 1], ["a", "b"])


def test_center_crop_128_to_88():
    img = np.arange(128 * 128, dtype=np.float32).reshape(1, 1, 128, 128)
    out = data.center_crop(img, (88, 88))
    assert out.shape == (1, 1, 88, 88)
    assert out[0, 0, 0, 0] == img[0, 0, 20, 20]
    assert out[0, 0, -1, -1] == img[0, 0, 107, 107]
    with pytest.raises(ValueError):
        data.center_crop(img, (130, 10))


def test_augment_patches_are_sub_windows():
    ds = small_dataset("train")
    out = data.augment_and_crop(ds, data.PreprocessSpec((20, 20), (20, 20), 3), seed=5)
    assert len(out) == 3 * len(ds) and out.chip_shape == (20, 20)
    assert out.ids[:3] == [f"{ds.ids[0]}_p{j}" for j in range(3)]
    for i, (patch, label, _) in enumerate(out):
        src = ds.images[i // 3, 0]
        assert label == ds.labels[i // 3]
        found = any(np.array_equal(src[r:r + 20, c:c + 20], patch[0])
                    for r in range(13) for c in range(13))
        assert found
    again = data.augment_and_crop(ds, data.PreprocessSpec((20, 20), (20, 20), 3), seed=5)
    assert again.equals(out)


def test_test_split_is_center_cropped():
    ds = small_dataset("test")
    out = data.augment_and_crop(ds, data.PreprocessSpec((20, 20), (20, 20), 3))
    assert len(out) == len(ds)
    assert np.array_equal(out.images, ds.images[:, :, 6:26, 6:26])


def test_zero_augmentation_warns():
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        out = data.augment_and_crop(small_dataset("train"), data.PreprocessSpec((20, 20), (20, 20), 0))
    assert len(out) == 0
    assert any("empty" in str(w.message) for w in caught)


def test_synthetic_generator():
    ds = data.generate_synthetic(num_classes=10, per_class=6, chip_size=32, seed=3)
    assert np.bincount(ds.labels).tolist() == [6] * 10
    assert ds.images.min() >= 0 and ds.images.max() <= 1
    assert np.array_equal(data.quantize(ds.images), ds.images)
    assert data.generate_synthetic(num_classes=10, per_class=6, chip_size=32, seed=3).equals(ds)
    assert not data.generate_synthetic(num_classes=10, per_class=6, chip_size=32, seed=4).equals(ds)
    for bad in ({"per_class": 0}, {"chip_size": 16}, {"num_classes": 11}):
        with pytest.raises(ValueError):
            data.generate_synthetic(**bad)


def test_synthetic_target_brighter_than_background():
    ds = data.generate_synthetic(num_classes=10, per_class=3, chip_size=48, seed=2)
    for img in ds.images[:, 0]:
        assert img[18:30, 18:30].mean() > img[:6, :6].mean()
