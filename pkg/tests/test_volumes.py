import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slicenav.errors import DomainError, FormatError, ShapeError, UnsupportedError
from slicenav.volumes import (LabelVolume, Volume, gen_phantom, load_labels,
                              load_volume, normalize_minmax, save_labels,
                              save_volume)

from .oracles import write_nifti1


def _write_rawv(tmp_path, name, grid, dtype_tag):
    import json
    np_dtype = {"f32": "<f4", "u8": "u1", "i32": "<i4"}[dtype_tag]
    path = tmp_path / f"{name}.rawv"
    (tmp_path / f"{name}.rawv.json").write_text(json.dumps(
        {"dims": list(grid.shape), "dtype": dtype_tag, "order": "x-fastest"}))
    path.write_bytes(np.asarray(grid, dtype=np_dtype).flatten(order="F").tobytes())
    return path


class TestRawv:
    def test_constant_volume_normalizes_to_zeros(self, tmp_path):
        grid = np.full((4, 4, 4), 7.0, dtype=np.float32)
        path = _write_rawv(tmp_path, "const", grid, "f32")
        vol = load_volume(path, "rawv")
        assert vol.dims == (4, 4, 4)
        assert np.all(vol.data == 0.0)
        assert vol.value_range == (7.0, 7.0)

    def test_affine_minmax_map(self, tmp_path):
        grid = np.arange(8, dtype=np.float32).reshape((2, 2, 2), order="F")
        path = _write_rawv(tmp_path, "ramp", grid, "f32")
        vol = load_volume(path, "rawv")
        for k in range(8):
            x, y, z = k % 2, (k // 2) % 2, k // 4
            assert vol.data[x, y, z] == pytest.approx(k / 7.0, abs=1e-7)

    def test_round_trip_bit_exact(self, tmp_path):
        vol, region, tissue = gen_phantom(3, (16, 16, 16))
        save_volume(vol, tmp_path / "v.rawv")
        back = load_volume(tmp_path / "v.rawv", "rawv")
        assert np.array_equal(back.data, vol.data)
        save_labels(region, tmp_path / "r.rawv")
        back_r = load_labels(tmp_path / "r.rawv", "rawv")
        assert np.array_equal(back_r.labels, region.labels)
        assert back_r.num_classes == region.num_classes

    def test_missing_header_is_format_error(self, tmp_path):
        path = tmp_path / "naked.rawv"
        path.write_bytes(b"\x00" * 16)
        with pytest.raises(FormatError):
            load_volume(path, "rawv")

    def test_wrong_payload_size_is_format_error(self, tmp_path):
        path = _write_rawv(tmp_path, "bad", np.zeros((2, 2, 2), np.float32), "f32")
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(FormatError):
            load_volume(path, "rawv")

    def test_labels_preserved_exactly(self, tmp_path):
        grid = np.zeros((3, 3, 3), dtype=np.int32)
        grid[0, 0, 0] = 2
        path = _write_rawv(tmp_path, "lab", grid, "i32")
        lv = load_labels(path, "rawv")
        assert lv.num_classes == 3  # class 1 allowed to be empty
        assert lv.labels[0, 0, 0] == 2

    def test_all_zero_labels_single_class(self, tmp_path):
        path = _write_rawv(tmp_path, "zeros", np.zeros((3, 3, 3), np.int32), "i32")
        assert load_labels(path, "rawv").num_classes == 1

    def test_float_labels_rejected(self, tmp_path):
        path = _write_rawv(tmp_path, "fl", np.zeros((3, 3, 3), np.float32), "f32")
        with pytest.raises(UnsupportedError):
            load_labels(path, "rawv")


class TestNifti:
    def test_read_back_int16(self, tmp_path):
        grid = np.arange(27, dtype=np.int16).reshape((3, 3, 3), order="F")
        path = tmp_path / "small.nii"
        write_nifti1(path, grid, datatype_code=4)
        vol = load_volume(path, "nifti1")
        assert vol.dims == (3, 3, 3)
        # value k normalizes to k/26
        assert vol.data[1, 0, 0] == pytest.approx(1 / 26, abs=1e-7)
        assert vol.data[0, 0, 2] == pytest.approx(18 / 26, abs=1e-7)

    @pytest.mark.parametrize("code", [2, 4, 16])
    def test_supported_datatypes(self, tmp_path, code):
        grid = np.arange(27).reshape((3, 3, 3), order="F") % 100
        path = tmp_path / f"dt{code}.nii"
        write_nifti1(path, grid, datatype_code=code)
        assert load_volume(path, "nifti1").dims == (3, 3, 3)

    def test_bad_magic_is_format_error(self, tmp_path):
        grid = np.zeros((3, 3, 3), dtype=np.int16)
        path = tmp_path / "badmagic.nii"
        write_nifti1(path, grid, datatype_code=4)
        raw = bytearray(path.read_bytes())
        raw[344:348] = b"xxx\x00"
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError):
            load_volume(path, "nifti1")

    def test_unsupported_datatype(self, tmp_path):
        grid = np.zeros((3, 3, 3), dtype=np.int16)
        path = tmp_path / "f64.nii"
        write_nifti1(path, grid, datatype_code=4)
        raw = bytearray(path.read_bytes())
        import struct
        struct.pack_into("<h", raw, 70, 64)  # float64 code
        path.write_bytes(bytes(raw))
        with pytest.raises(UnsupportedError):
            load_volume(path, "nifti1")

    def test_wrong_dim_count_is_shape_error(self, tmp_path):
        grid = np.zeros((3, 3, 3), dtype=np.int16)
        path = tmp_path / "4d.nii"
        write_nifti1(path, grid, datatype_code=4)
        raw = bytearray(path.read_bytes())
        import struct
        struct.pack_into("<h", raw, 40, 4)
        path.write_bytes(bytes(raw))
        with pytest.raises(ShapeError):
            load_volume(path, "nifti1")


class TestNormalization:
    @given(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=8, max_size=8))
    @settings(max_examples=50, deadline=None)
    def test_idempotent(self, values):
        grid = np.array(values, dtype=np.float32).reshape(2, 2, 2)
        once, _ = normalize_minmax(grid)
        twice, _ = normalize_minmax(once)
        assert np.allclose(once, twice, atol=1e-6)
        assert once.min() >= 0.0 and once.max() <= 1.0


class TestPhantom:
    def test_deterministic(self):
        a = gen_phantom(5, (16, 16, 16))
        b = gen_phantom(5, (16, 16, 16))
        assert np.array_equal(a[0].data, b[0].data)
        assert np.array_equal(a[1].labels, b[1].labels)
        assert np.array_equal(a[2].labels, b[2].labels)

    def test_seed_sensitivity(self):
        a = gen_phantom(1, (16, 16, 16))
        b = gen_phantom(2, (16, 16, 16))
        assert not np.array_equal(a[0].data, b[0].data)

    def test_class_structure(self):
        vol, region, tissue = gen_phantom(0, (32, 32, 32))
        assert tissue.num_classes == 4
        assert set(np.unique(tissue.labels)) == {0, 1, 2, 3}
        assert len(np.unique(region.labels)) >= 5  # background + >=4 regions
        # tissue background is a subset of region background
        assert not np.any((tissue.labels == 0) & (region.labels != 0))

    @pytest.mark.parametrize("seed", range(10))
    def test_foreground_fraction(self, seed):
        # brute-force voxel scan of the non-background fraction
        _, _, tissue = gen_phantom(seed, (32, 32, 32))
        count = 0
        flat = tissue.labels.reshape(-1)
        for v in flat:
            if v != 0:
                count += 1
        frac = count / flat.size
        assert 0.2 <= frac <= 0.8

    def test_small_dims_rejected(self):
        with pytest.raises(ShapeError):
            gen_phantom(0, (8, 32, 32))

    def test_values_in_unit_interval(self):
        vol, _, _ = gen_phantom(7, (16, 16, 16))
        assert vol.data.min() >= 0.0 and vol.data.max() <= 1.0
