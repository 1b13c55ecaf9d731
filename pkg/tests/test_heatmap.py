import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dpit.gradcheck import grad_check
from dpit.heatmap import (
    GroundTruthSpec,
    Heatmap,
    HeatmapGeometry,
    LossError,
    decode,
    export_heatmap,
    import_heatmap,
    mse_loss,
    project_keypoints,
    render_gaussian,
)
from dpit.tensor import DimensionError, Tensor

GEO = HeatmapGeometry(64, 48, 4.0)


def gaussian_at(cell_xy, sigma=2.0, geo=GEO, vis=1):
    crop = geo.cell_to_crop(np.asarray([cell_xy], dtype=float))
    return render_gaussian(GroundTruthSpec(crop, np.array([vis]), sigma, geo))


class TestGeometry:
    def test_cell_crop_inverse(self, rng):
        p = rng.uniform(-5, 200, (10, 2))
        np.testing.assert_allclose(GEO.cell_to_crop(GEO.crop_to_cell(p)), p, atol=1e-12)

    def test_cell_centre(self):
        # cell 0 spans crop pixels 0..3; its centre is pixel 1.5
        assert GEO.cell_to_crop(0.0) == 1.5


class TestProject:
    def test_shapes(self, rng):
        hm = project_keypoints(Tensor(rng.normal(size=(17, 192))), Tensor(rng.normal(size=(192, 64 * 48))), GEO)
        assert hm.array.shape == (64, 48, 17)

    def test_zero_weights(self, rng):
        hm = project_keypoints(Tensor(rng.normal(size=(3, 8))), Tensor(np.zeros((8, 12))), HeatmapGeometry(3, 4))
        assert np.all(hm.array == 0)

    def test_channel_flatten_is_row(self, rng):
        x = rng.normal(size=(5, 8))
        w = rng.normal(size=(8, 12))
        hm = project_keypoints(Tensor(x), Tensor(w), HeatmapGeometry(3, 4)).array
        for k in range(5):
            np.testing.assert_allclose(hm[:, :, k].reshape(-1), (x @ w)[k], rtol=1e-6)

    def test_batched(self, rng):
        hm = project_keypoints(Tensor(rng.normal(size=(2, 5, 8))), Tensor(rng.normal(size=(8, 12))), HeatmapGeometry(3, 4))
        assert hm.array.shape == (2, 3, 4, 5)

    def test_bad_head(self, rng):
        with pytest.raises(DimensionError):
            project_keypoints(Tensor(rng.normal(size=(5, 8))), Tensor(np.zeros((8, 11))), HeatmapGeometry(3, 4))


class TestRender:
    def test_peak_on_cell_centre(self):
        hm = gaussian_at((7, 11)).array
        assert hm[11, 7, 0] == pytest.approx(1.0)

    def test_invisible_channel_zero(self):
        assert np.all(gaussian_at((7, 11), vis=0).array == 0)

    def test_one_cell_offset(self):
        hm = gaussian_at((7, 11)).array
        assert hm[11, 8, 0] == pytest.approx(np.exp(-1 / 8), abs=1e-6)
        assert hm[11, 8, 0] == pytest.approx(0.8825, abs=1e-4)

    def test_outside_flagged(self):
        hm = gaussian_at((60, 5))
        assert hm.outside[0]

    def test_bad_sigma(self):
        with pytest.raises(ValueError):
            gaussian_at((1, 1), sigma=0)


class TestLoss:
    def test_equal_is_zero(self, rng):
        a = rng.normal(size=(8, 8, 2)).astype(np.float32)
        assert float(mse_loss(Heatmap(Tensor(a), GEO), Heatmap(a, GEO), [1, 1]).data) == 0.0

    def test_constant_offset(self):
        gt = np.zeros((64, 48, 1), np.float64)
        loss = mse_loss(Heatmap(Tensor(gt + 0.1), GEO), Heatmap(gt, GEO), [1])
        assert float(loss.data) == pytest.approx(0.01, rel=1e-12)

    def test_invisible_channels_ignored(self, rng):
        gt = np.zeros((4, 4, 2))
        pred = gt.copy()
        pred[..., 1] = 100.0
        assert float(mse_loss(Heatmap(Tensor(pred), GEO), Heatmap(gt, GEO), [1, 0]).data) == 0.0

    def test_nonnegative(self, rng):
        for _ in range(5):
            p, g = rng.normal(size=(2, 5, 5, 3))
            assert float(mse_loss(Heatmap(Tensor(p), GEO), Heatmap(g, GEO), [1, 0, 1]).data) > 0

    def test_nothing_visible(self):
        with pytest.raises(LossError):
            mse_loss(Heatmap(Tensor(np.zeros((2, 2, 1))), GEO), Heatmap(np.zeros((2, 2, 1)), GEO), [0])

    def test_gradient(self, rng):
        p = Tensor(rng.normal(size=(8, 8, 2)), requires_grad=True)
        g = rng.normal(size=(8, 8, 2))
        # quadratic loss: central differences are exact, so a larger step only cuts roundoff
        rep = grad_check(lambda: mse_loss(Heatmap(p, GEO), Heatmap(g, GEO), [1, 1]), [p], h=1e-4)
        assert rep.max_rel_err < 1e-6


class TestDecode:
    def test_delta(self):
        a = np.zeros((64, 48, 1))
        a[10, 21, 0] = 1.0
        x, y, s = decode(Heatmap(a, GEO), refine=False)[0]
        assert (x, y) == tuple(GEO.cell_to_crop([21.0, 10.0]))
        assert s == 1.0

    def test_tie_row_major_first(self):
        a = np.zeros((6, 5, 1))
        a[3, 1, 0] = a[2, 4, 0] = a[3, 0, 0] = 1.0
        x, y, _ = decode(Heatmap(a, HeatmapGeometry(6, 5, 1.0)), refine=False)[0]
        assert (x, y) == (4.0, 2.0)

    def test_refine_shifts_toward_larger_neighbour(self):
        a = np.zeros((5, 5, 1))
        a[2, 2, 0], a[2, 3, 0], a[1, 2, 0] = 1.0, 0.5, 0.2
        x, y, _ = decode(Heatmap(a, HeatmapGeometry(5, 5, 1.0)))[0]
        assert (x, y) == (2.25, 1.75)

    def test_round_trip_fixed(self):
        cell = GEO.crop_to_cell(np.array([20.6, 33.2]))
        hm = render_gaussian(GroundTruthSpec(np.array([[20.6, 33.2]]), np.array([1]), 2.0, GEO))
        got = GEO.crop_to_cell(decode(hm)[0, :2])
        assert np.max(np.abs(got - cell)) <= 0.5

    # in-grid: inside the hull of cell centres
    @given(st.floats(0, 47), st.floats(0, 63))
    @settings(max_examples=200, deadline=None)
    def test_round_trip_property(self, u, v):
        hm = gaussian_at((u, v))
        got = GEO.crop_to_cell(decode(hm)[0, :2])
        assert np.hypot(*(got - [u, v])) <= 0.5

    def test_border_peak_moves_inward(self):
        a = np.zeros((3, 3, 1))
        a[0, 0, 0], a[0, 1, 0], a[1, 0, 0] = 1.0, 0.5, 0.5
        x, y, _ = decode(Heatmap(a, HeatmapGeometry(3, 3, 1.0)))[0]
        assert (x, y) == (0.25, 0.25)

    def test_batched(self):
        a = np.zeros((2, 4, 4, 1))
        a[0, 1, 2, 0] = a[1, 3, 0, 0] = 1
        out = decode(Heatmap(a, HeatmapGeometry(4, 4, 1.0)), refine=False)
        np.testing.assert_array_equal(out[:, 0, :2], [[2, 1], [0, 3]])


def test_export_import(tmp_path, rng):
    hm = Heatmap(rng.normal(size=(6, 4, 3)).astype(np.float32), HeatmapGeometry(6, 4))
    export_heatmap(hm, tmp_path / "h.bin")
    assert (tmp_path / "h.bin").stat().st_size == 6 * 4 * 3 * 4
    back = import_heatmap(tmp_path / "h.bin", hm.geometry)
    np.testing.assert_array_equal(back.array, hm.array)
