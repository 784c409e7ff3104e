import json

import numpy as np
import pytest

from lesionseg.core import (
    Mask,
    MultiModalCase,
    Volume,
    VolumeIOError,
    foreground_mask,
    load_case,
    load_cases,
    load_mask,
    load_volume,
    missing_files,
    read_manifest,
    save_volume,
    write_manifest,
)


def test_volume_rejects_non_finite():
    data = np.zeros((4, 4, 4), np.float32)
    data[1, 2, 3] = np.nan
    with pytest.raises(ValueError):
        Volume(data)
    data[1, 2, 3] = np.inf
    with pytest.raises(ValueError):
        Volume(data)


def test_volume_geometry_validation():
    with pytest.raises(ValueError):
        Volume(np.zeros((4, 4)))
    with pytest.raises(ValueError):
        Volume(np.zeros((4, 4, 4)), spacing=(1.0, 0.0, 1.0))


def test_volume_is_read_only():
    vol = Volume(np.ones((3, 3, 3)))
    with pytest.raises(ValueError):
        vol.data[0, 0, 0] = 2


def test_mask_values():
    with pytest.raises(ValueError):
        Mask(np.full((2, 2, 2), 2))
    m = Mask(np.eye(3)[None].repeat(3, 0))
    assert m.data.dtype == bool and m.count == 9


def test_case_geometry_mismatch():
    a = Volume(np.zeros((4, 4, 4)))
    b = Volume(np.zeros((4, 4, 5)))
    with pytest.raises(ValueError, match="modality 1"):
        MultiModalCase("c", (a, b))
    with pytest.raises(ValueError, match="gold"):
        MultiModalCase("c", (a,), Mask(np.zeros((4, 4, 5))))
    with pytest.raises(ValueError):
        MultiModalCase("c", (a, Volume(np.zeros((4, 4, 4)), (1, 1, 2))))


def test_case_stack_and_foreground():
    a = np.zeros((4, 4, 4)); a[0, 0, 0] = 1
    b = np.zeros((4, 4, 4)); b[3, 3, 3] = -1
    case = MultiModalCase("c", (Volume(a), Volume(b)))
    assert case.stack().shape == (2, 4, 4, 4)
    assert case.modality_names == ("m0", "m1")
    fg = foreground_mask(case)
    assert fg.count == 2 and fg.data[0, 0, 0] and fg.data[3, 3, 3]


@pytest.mark.parametrize("ext", [".nii.gz", ".nii", ".raw"])
def test_volume_round_trip(tmp_path, rng, ext):
    data = rng.normal(size=(5, 6, 7)).astype(np.float32)
    vol = Volume(data, (0.5, 1.0, 2.5))
    save_volume(vol, tmp_path / f"v{ext}")
    back = load_volume(tmp_path / f"v{ext}")
    np.testing.assert_array_equal(back.data, data)
    assert back.spacing == (0.5, 1.0, 2.5)


@pytest.mark.parametrize("ext", [".nii.gz", ".raw"])
def test_mask_round_trip(tmp_path, rng, ext):
    m = Mask(rng.random((6, 5, 4)) > 0.5, (1.0, 1.0, 3.0))
    save_volume(m, tmp_path / f"m{ext}")
    back = load_mask(tmp_path / f"m{ext}")
    np.testing.assert_array_equal(back.data, m.data)
    assert back.spacing == m.spacing


def test_raw_layout_is_little_endian_c_order(tmp_path):
    data = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
    save_volume(Volume(data), tmp_path / "v.raw")
    raw = (tmp_path / "v.raw").read_bytes()
    assert raw == data.astype("<f4").tobytes(order="C")
    meta = json.loads((tmp_path / "v.json").read_text())
    assert meta["shape"] == [2, 3, 4] and meta["byteorder"] == "little" and meta["order"] == "C"


def test_raw_size_mismatch(tmp_path):
    save_volume(Volume(np.zeros((2, 2, 2))), tmp_path / "v.raw")
    (tmp_path / "v.raw").write_bytes(b"\0" * 12)
    with pytest.raises(VolumeIOError):
        load_volume(tmp_path / "v.raw")


def test_load_missing_file(tmp_path):
    with pytest.raises(VolumeIOError):
        load_volume(tmp_path / "nope.nii.gz")


def test_manifest_round_trip(tmp_path, rng):
    gold = np.zeros((4, 4, 4), bool); gold[1, 1, 1] = True
    cases = [MultiModalCase(f"c{i}", (Volume(rng.random((4, 4, 4))), Volume(rng.random((4, 4, 4)))),
                            Mask(gold), ("t1", "flair")) for i in range(2)]
    write_manifest(tmp_path / "manifest.json", cases)
    back = load_cases(tmp_path / "manifest.json")
    assert [c.case_id for c in back] == ["c0", "c1"]
    assert back[1].modality_names == ("t1", "flair")
    np.testing.assert_array_equal(back[1].modalities[1].data, cases[1].modalities[1].data)
    np.testing.assert_array_equal(back[0].gold.data, gold)


def test_manifest_missing_files(tmp_path):
    (tmp_path / "manifest.json").write_text(json.dumps(
        {"cases": [{"case_id": "a", "modalities": {"t1": "a_t1.nii.gz"}, "gold": "a_gold.nii.gz"}]}))
    entries = read_manifest(tmp_path / "manifest.json")
    assert missing_files(entries) == [str(tmp_path / "a_t1.nii.gz"), str(tmp_path / "a_gold.nii.gz")]
    with pytest.raises(VolumeIOError, match="a_t1"):
        load_cases(tmp_path / "manifest.json")


def test_load_case_geometry_error(tmp_path):
    save_volume(Volume(np.zeros((4, 4, 4))), tmp_path / "a.nii.gz")
    save_volume(Volume(np.zeros((4, 4, 3))), tmp_path / "b.nii.gz")
    entry = {"case_id": "x", "modalities": {"a": str(tmp_path / "a.nii.gz"), "b": str(tmp_path / "b.nii.gz")}}
    with pytest.raises(VolumeIOError, match="geometry"):
        load_case(entry)
