import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from utsrmorph.volume_io import (DisplacementField, FormatError, LabelMask, LandmarkSet, Volume, load_checkpoint,
                                 mm_to_voxel, read_field, read_grid, read_landmarks, read_mask, read_volume,
                                 save_checkpoint, voxel_to_mm, write_field, write_grid, write_landmarks, write_mask,
                                 write_volume)


def test_volume_roundtrip_is_byte_identical(tmp_path, rng):
    v = Volume(rng.standard_normal((8, 8, 8)), spacing=(1.0, 0.5, 2.0))
    write_volume(v, tmp_path / "a")
    back = read_volume(tmp_path / "a")
    write_volume(back, tmp_path / "b")
    assert (tmp_path / "a.raw").read_bytes() == (tmp_path / "b.raw").read_bytes()
    assert back.spacing == (1.0, 0.5, 2.0)
    assert np.array_equal(back.values, v.values)


def test_three_channel_field_is_96_bytes(tmp_path):
    write_field(DisplacementField(np.zeros((2, 2, 2, 3))), tmp_path / "u")
    assert (tmp_path / "u.raw").stat().st_size == 96


def test_layout_linear_index_exhaustive(tmp_path):
    X = Y = Z = C = 2
    arr = np.zeros((X, Y, Z, C), np.float32)
    for x in range(X):
        for y in range(Y):
            for z in range(Z):
                for c in range(C):
                    arr[x, y, z, c] = 1000 * c + 100 * x + 10 * y + z
    write_grid(arr, (1, 1, 1), tmp_path / "g", "f32")
    raw = np.frombuffer((tmp_path / "g.raw").read_bytes(), dtype="<f4")
    for x in range(X):
        for y in range(Y):
            for z in range(Z):
                for c in range(C):
                    assert raw[((c * Z + z) * Y + y) * X + x] == arr[x, y, z, c]
    back, _, _ = read_grid(tmp_path / "g")
    assert np.array_equal(back, arr)


def test_sidecar_fields(tmp_path):
    write_mask(LabelMask(np.ones((3, 2, 1), np.uint8)), tmp_path / "m")
    header = json.loads((tmp_path / "m.json").read_text())
    assert header == {"dims": [3, 2, 1], "spacing": [1.0, 1.0, 1.0], "channels": 1, "dtype": "u8"}


def test_truncated_raw_reports_expected_and_actual(tmp_path):
    write_volume(Volume(np.zeros((2, 2, 2))), tmp_path / "v")
    raw = tmp_path / "v.raw"
    raw.write_bytes(raw.read_bytes()[:-3])
    with pytest.raises(FormatError, match="expected 32 bytes, found 29"):
        read_volume(tmp_path / "v")


def test_unknown_dtype_rejected(tmp_path):
    write_volume(Volume(np.zeros((2, 2, 2))), tmp_path / "v")
    meta = tmp_path / "v.json"
    header = json.loads(meta.read_text())
    header["dtype"] = "f16"
    meta.write_text(json.dumps(header))
    with pytest.raises(FormatError, match="unknown dtype"):
        read_volume(tmp_path / "v")
    with pytest.raises(FormatError):
        write_grid(np.zeros((1, 1, 1)), (1, 1, 1), tmp_path / "w", "i16")


def test_reader_rejects_wrong_kind(tmp_path):
    write_volume(Volume(np.zeros((2, 2, 2))), tmp_path / "v")
    with pytest.raises(FormatError):
        read_field(tmp_path / "v")
    with pytest.raises(FormatError):
        read_mask(tmp_path / "v")


def test_type_invariants():
    with pytest.raises(ValueError):
        Volume(np.array([[[np.nan]]]))
    with pytest.raises(ValueError):
        Volume(np.zeros((2, 2, 2)), spacing=(1, 0, 1))
    with pytest.raises(ValueError):
        DisplacementField(np.zeros((2, 2, 2, 2)))
    with pytest.raises(ValueError):
        LabelMask(np.full((2, 2, 2), 4), num_labels=3)


def test_voxel_mm_conversion():
    assert np.array_equal(voxel_to_mm([0, 0, 0], (1, 2, 3)), [0, 0, 0])
    assert np.array_equal(voxel_to_mm([2, 3, 4], (1, 2, 0.5)), [2, 6, 2])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=3),
       st.lists(st.floats(0.1, 5.0), min_size=3, max_size=3))
def test_voxel_mm_inverse(p, spacing):
    np.testing.assert_allclose(voxel_to_mm(mm_to_voxel(p, spacing), spacing), p, atol=1e-6)


def test_landmark_roundtrip_and_duplicates(tmp_path):
    lm = LandmarkSet(["a", "b"], [[1.0, 2.0, 3.5], [0.1, 0.2, 0.3]])
    write_landmarks(lm, tmp_path / "l.csv")
    back = read_landmarks(tmp_path / "l.csv")
    assert back.names == ["a", "b"] and np.array_equal(back.positions, lm.positions)
    (tmp_path / "d.csv").write_text("name,x_mm,y_mm,z_mm\na,1,2,3\na,4,5,6\n")
    with pytest.raises(ValueError, match="duplicate"):
        read_landmarks(tmp_path / "d.csv")
    (tmp_path / "h.csv").write_text("a,1,2,3\n")
    with pytest.raises(FormatError):
        read_landmarks(tmp_path / "h.csv")


def test_landmarks_must_lie_inside_volume():
    lm = LandmarkSet(["a"], [[5.0, 0.0, 0.0]])
    lm.check_inside((6, 6, 6), (1, 1, 1))
    with pytest.raises(ValueError):
        lm.check_inside((4, 4, 4), (1, 1, 1))


def test_checkpoint_roundtrip(tmp_path, rng):
    params = {"b.w": rng.standard_normal((3, 2)).astype(np.float32), "a": np.float32(rng.standard_normal(4))}
    save_checkpoint(params, tmp_path / "ck", extra={"variant": "S"})
    back, cfg = load_checkpoint(tmp_path / "ck")
    assert cfg == {"variant": "S"}
    for k in params:
        assert np.array_equal(back[k], params[k])
    manifest = json.loads((tmp_path / "ck.json").read_text())
    assert [e["name"] for e in manifest["parameters"]] == ["a", "b.w"]
    assert [e["offset"] for e in manifest["parameters"]] == [0, 16]


def test_truncated_checkpoint_rejected(tmp_path):
    save_checkpoint({"w": np.ones(4, np.float32)}, tmp_path / "ck")
    (tmp_path / "ck.bin").write_bytes(b"\0" * 8)
    with pytest.raises(FormatError, match="expected 16 bytes"):
        load_checkpoint(tmp_path / "ck")
