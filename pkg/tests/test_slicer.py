import numpy as np
import pytest

from slicenav.errors import ShapeError, ValidationError
from slicenav.slicer import (Action, RenderConfig, action_to_frame_grid,
                             render_coords, render_labels, render_slice,
                             rotation_matrix)
from slicenav.volumes import LabelVolume, Volume, gen_phantom

from .oracles import (nearest_labels_bruteforce, render_slice_bruteforce,
                      sample_point)


def make_volume(data):
    data = np.asarray(data, dtype=np.float32)
    return Volume(dims=data.shape, data=data, value_range=(0.0, 1.0), source="test")


class TestAction:
    def test_out_of_range_rejected(self):
        with pytest.raises(ValidationError):
            Action(p=(1.5, 0, 0))

    def test_array_round_trip(self):
        a = Action(p=(0.1, -0.2, 0.3), r=(0.4, -0.5, 0.6), s=(-0.7, 0.8))
        b = Action.from_array(a.as_array())
        assert np.allclose(a.as_array(), b.as_array(), atol=1e-7)


class TestFrameGrid:
    def test_identity_center_and_corner(self):
        cfg = RenderConfig(out_h=3, out_w=3, base_extent=1.0)
        grid = action_to_frame_grid(Action(), cfg)
        assert np.allclose(grid[1, 1], [0, 0, 0], atol=1e-12)
        assert np.allclose(grid[0, 0], [-1, 0, -1], atol=1e-12)

    def test_scale_law(self):
        cfg = RenderConfig(out_h=3, out_w=3, base_extent=1.0)
        grid = action_to_frame_grid(Action(s=(1.0, 0.0)), cfg)
        assert np.allclose(grid[1, 2], [2, 0, 0], atol=1e-12)

    def test_yaw_quarter_turn(self):
        # hand-multiplied R_y(pi/2): e_x -> -e_z
        cfg = RenderConfig(out_h=3, out_w=3, base_extent=1.0)
        grid = action_to_frame_grid(Action(r=(0.0, 0.5, 0.0)), cfg)
        assert np.allclose(grid[1, 2], [0, 0, -1], atol=1e-6)

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(0)
        cfg = RenderConfig(out_h=5, out_w=4, base_extent=1.0)
        for _ in range(20):
            vec = rng.uniform(-1, 1, 8)
            grid = action_to_frame_grid(Action.from_array(vec), cfg)
            for i in (0, 2, 4):
                for j in (0, 3):
                    expect = sample_point(vec, i, j, 5, 4)
                    assert np.allclose(grid[i, j], expect, atol=1e-9)


class TestRenderSlice:
    def test_constant_volume(self):
        vol = make_volume(np.full((8, 8, 8), 0.625))
        frame = render_slice(vol, Action(), RenderConfig(out_h=6, out_w=6))
        assert frame.valid.all()
        assert np.allclose(frame.pixels, 0.625, atol=1e-6)

    def test_linear_field_reproduced(self):
        # V(x,y,z) = normalized x; trilinear of a linear field is the field
        nx, ny, nz = 9, 9, 9
        xs = np.linspace(0, 1, nx)
        vol = make_volume(np.broadcast_to(xs[:, None, None], (nx, ny, nz)).copy())
        cfg = RenderConfig(out_h=5, out_w=5)
        frame = render_slice(vol, Action(), cfg)
        grid = action_to_frame_grid(Action(), cfg)
        expected_cols = (grid[0, :, 0] + 1) / 2  # x coord normalized to [0,1]
        for j in range(5):
            assert np.allclose(frame.pixels[:, j], expected_cols[j], atol=1e-6)

    def test_out_of_volume_masked_and_filled(self):
        vol = make_volume(np.ones((8, 8, 8)))
        cfg = RenderConfig(out_h=8, out_w=8, fill_value=0.0)
        frame = render_slice(vol, Action(p=(0.9, 0.0, 0.0)), cfg)
        assert not frame.valid.all()
        assert np.all(frame.pixels[frame.valid == 0] == 0.0)

    def test_oracle_equivalence_random(self):
        rng = np.random.default_rng(1234)
        cfg = RenderConfig(out_h=8, out_w=8)
        vol, _, _ = gen_phantom(0, (16, 16, 16))
        for _ in range(50):
            vec = rng.uniform(-1, 1, 8)
            frame = render_slice(vol, Action.from_array(vec), cfg)
            ref_pixels, ref_valid = render_slice_bruteforce(
                vol.data.astype(np.float64), vec, 8, 8)
            assert np.array_equal(frame.valid, ref_valid)
            mask = ref_valid.astype(bool)
            assert np.max(np.abs(frame.pixels[mask] - ref_pixels[mask])) <= 1e-5

    def test_axis_aligned_slice_reproduced(self):
        vol, _, _ = gen_phantom(2, (16, 16, 16))
        ny = 16
        k = 5
        y_norm = 2 * k / (ny - 1) - 1
        cfg = RenderConfig(out_h=16, out_w=16)
        frame = render_slice(vol, Action(p=(0.0, y_norm, 0.0)), cfg)
        assert frame.valid.all()
        # row i <-> z=i, column j <-> x=j
        assert np.max(np.abs(frame.pixels - vol.data[:, k, :].T)) <= 1e-6

    def test_rotation_composition(self):
        # Rmat factors into the three single-axis matrices in the fixed order,
        # and the rotated grid is that matrix applied to the unrotated offsets.
        cfg = RenderConfig(out_h=8, out_w=8)
        a = Action(p=(0.1, 0.2, -0.1), r=(0.25, 0.5, -0.3), s=(0.2, -0.4))
        composed = rotation_matrix(*a.r)
        factored = (rotation_matrix(0.0, a.r[1], 0.0)
                    @ rotation_matrix(a.r[0], 0.0, 0.0)
                    @ rotation_matrix(0.0, 0.0, a.r[2]))
        assert np.allclose(composed, factored, atol=1e-12)
        grid = action_to_frame_grid(a, cfg)
        base = action_to_frame_grid(Action(s=a.s), cfg)
        expect = base @ composed.T + np.asarray(a.p)
        assert np.max(np.abs(grid - expect)) <= 1e-6

    def test_monotone_validity_under_shrink(self):
        vol, _, _ = gen_phantom(3, (16, 16, 16))
        cfg = RenderConfig(out_h=10, out_w=10)
        rng = np.random.default_rng(7)
        for _ in range(10):
            r = tuple(rng.uniform(-1, 1, 3))
            s = rng.uniform(-0.5, 1.0)
            big = render_slice(vol, Action(r=r, s=(s, s)), cfg)
            small = render_slice(vol, Action(r=r, s=(s - 0.5, s - 0.5)), cfg)
            assert np.all(small.valid >= big.valid)

    def test_monotone_validity_axis_aligned_anisotropic(self):
        vol, _, _ = gen_phantom(3, (16, 16, 16))
        cfg = RenderConfig(out_h=10, out_w=10)
        big = render_slice(vol, Action(s=(0.8, 0.3)), cfg)
        small = render_slice(vol, Action(s=(0.1, -0.2)), cfg)
        assert np.all(small.valid >= big.valid)


class TestRenderLabels:
    def test_constant_labels(self):
        lv = LabelVolume(dims=(8, 8, 8), labels=np.full((8, 8, 8), 3, np.int32),
                         num_classes=4)
        tf = render_labels(lv, Action(), RenderConfig(out_h=6, out_w=6))
        assert np.all(tf.labels[tf.valid.astype(bool)] == 3)

    def test_split_plane(self):
        labels = np.zeros((9, 9, 9), dtype=np.int32)
        labels[5:, :, :] = 1  # split at x index 4.5 -> x_norm ~ 0.125
        lv = LabelVolume(dims=(9, 9, 9), labels=labels, num_classes=2)
        cfg = RenderConfig(out_h=9, out_w=9)
        tf = render_labels(lv, Action(), cfg)
        grid = action_to_frame_grid(Action(), cfg)
        x_idx = (grid[..., 0] + 1) / 2 * 8
        expect = (np.floor(x_idx + 0.5) >= 5).astype(np.int32)
        assert np.array_equal(tf.labels, expect)

    def test_oracle_equivalence(self):
        _, region, _ = gen_phantom(1, (16, 16, 16))
        rng = np.random.default_rng(5)
        cfg = RenderConfig(out_h=7, out_w=7)
        for _ in range(25):
            vec = rng.uniform(-1, 1, 8)
            tf = render_labels(region, Action.from_array(vec), cfg)
            ref, ref_valid = nearest_labels_bruteforce(region.labels, vec, 7, 7)
            assert np.array_equal(tf.valid, ref_valid)
            mask = ref_valid.astype(bool)
            assert np.array_equal(tf.labels[mask], ref[mask])

    def test_valid_mask_shared_with_slice(self):
        vol, region, _ = gen_phantom(1, (16, 16, 16))
        cfg = RenderConfig(out_h=8, out_w=8)
        a = Action(p=(0.5, -0.3, 0.2), r=(0.1, 0.7, -0.4))
        assert np.array_equal(render_slice(vol, a, cfg).valid,
                              render_labels(region, a, cfg).valid)


class TestRenderCoords:
    def test_zero_action_center(self):
        tf = render_coords(Action(), RenderConfig(out_h=5, out_w=5), (16, 16, 16))
        assert np.allclose(tf.coords[2, 2], [0, 0, 0], atol=1e-12)

    def test_valid_coords_in_cube(self):
        rng = np.random.default_rng(2)
        cfg = RenderConfig(out_h=6, out_w=6)
        for _ in range(20):
            vec = rng.uniform(-1, 1, 8)
            tf = render_coords(Action.from_array(vec), cfg, (16, 16, 16))
            mask = tf.valid.astype(bool)
            assert np.all(np.abs(tf.coords[mask]) <= 1.0 + 1e-6)

    def test_matches_frame_grid_bitwise(self):
        cfg = RenderConfig(out_h=6, out_w=6)
        a = Action(p=(0.2, 0.1, -0.3), r=(0.4, -0.2, 0.6), s=(0.3, -0.5))
        tf = render_coords(a, cfg, (16, 16, 16))
        grid = action_to_frame_grid(a, cfg).astype(np.float32)
        mask = tf.valid.astype(bool)
        assert np.array_equal(tf.coords[mask], grid[mask])


def test_render_config_validation():
    with pytest.raises(ShapeError):
        RenderConfig(out_h=1, out_w=4)
    with pytest.raises(ValidationError):
        RenderConfig(base_extent=0.0)
