import json

import numpy as np
import pytest
from scipy import ndimage
from skimage.morphology import skeletonize

import oracles
from vistaocta.vessels import (mask_3d, oof_response, otsu_log_threshold,
                               project_ids, skeletonize_graph, vesselness_2d)

SPACING = 6.7


def _ridge_image(sigma_um=6.0, n=64, axis=1):
    x = np.arange(n, dtype=np.float64)
    prof = np.exp(-((x - n // 2) ** 2) / (2 * (sigma_um / SPACING) ** 2))
    img = np.tile(prof, (n, 1))
    return img if axis == 1 else img.T


class TestVesselness:
    def test_constant_image_has_no_response(self):
        out = vesselness_2d(np.full((32, 32), 0.7), SPACING)
        np.testing.assert_array_equal(out, 0.0)

    def test_gaussian_ridge_stands_out(self):
        out = vesselness_2d(_ridge_image(), SPACING)
        on = out[30, 32]
        off = out[30, 10]
        assert on > 0.1
        assert on >= 10.0 * max(off, 1e-12)

    def test_blob_scores_below_a_ridge(self):
        n = 64
        yy, xx = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        s = (6.0 / SPACING) ** 2
        blob = np.exp(-((xx - 32) ** 2 + (yy - 32) ** 2) / (2 * s))
        b = vesselness_2d(blob, SPACING)[32, 32]
        r = vesselness_2d(_ridge_image(), SPACING)[32, 32]
        assert b < r

    def test_response_is_bounded(self, rng):
        out = vesselness_2d(rng.random((48, 48)), SPACING)
        assert out.min() >= 0.0
        assert out.max() <= 1.0

    def test_quarter_turn_symmetry(self):
        img = _ridge_image(axis=1)
        a = vesselness_2d(img, SPACING)
        b = vesselness_2d(img.T, SPACING)
        np.testing.assert_allclose(b, a.T, atol=1e-10)


class TestOtsu:
    def test_two_level_input_splits_exactly(self, rng):
        vals = np.concatenate([np.full(500, 1.0), np.full(400, 4.0)])
        rng.shuffle(vals)
        mask, thr = otsu_log_threshold(vals)
        assert 1.0 < thr < 4.0
        np.testing.assert_array_equal(mask, vals == 4.0)

    def test_lognormal_mixture_threshold_sits_between_modes(self, rng):
        logs = np.concatenate([rng.normal(0.0, 0.1, 5000),
                               rng.normal(3.0, 0.1, 3000)])
        mask, thr = otsu_log_threshold(np.exp(logs))
        assert 0.0 < np.log(thr) < 3.0
        np.testing.assert_array_equal(mask, logs > 1.5)

    def test_matches_exhaustive_reference(self, rng):
        vals = rng.lognormal(mean=0.5, sigma=1.2, size=4000)
        _, thr = otsu_log_threshold(vals)
        eps = 1e-6 * vals.max()
        ref_edge = oracles.otsu_threshold_reference(np.log(vals + eps))
        assert np.log(thr + eps) == pytest.approx(ref_edge, abs=1e-9)

    def test_constant_positive_input_is_all_or_nothing(self):
        mask, _ = otsu_log_threshold(np.full(100, 2.0))
        assert mask.all() or not mask.any()

    def test_no_positive_values_gives_empty_mask(self):
        mask, thr = otsu_log_threshold(np.zeros((4, 4)))
        assert not mask.any()
        assert thr == 0.0

    def test_shape_is_preserved(self, rng):
        resp = rng.random((6, 7))
        mask, _ = otsu_log_threshold(resp)
        assert mask.shape == resp.shape
        assert mask.dtype == bool


class TestSkeletonGraph:
    def test_bar_is_one_link_between_two_ends(self):
        mask = np.zeros((32, 48), bool)
        mask[14:18, 6:42] = True
        graph, id_img = skeletonize_graph(mask)
        assert len(graph.links) == 1
        assert len(graph.nodes) == 2
        assert graph.links[0].segment_id == 1
        assert set(np.unique(id_img[mask])) == {1}
        assert (id_img[~mask] == 0).all()

    def test_y_junction_has_three_links(self):
        mask = np.zeros((64, 64), bool)
        for dy, dx in [(-1, 0), (1, -1), (1, 1)]:
            for t in range(22):
                mask[32 + dy * t, 32 + dx * t] = True
        mask = ndimage.binary_dilation(mask, iterations=1)
        graph, id_img = skeletonize_graph(mask)
        assert len(graph.links) == 3
        assert len(graph.nodes) >= 4
        assert set(np.unique(id_img[mask])) <= {1, 2, 3}
        assert (id_img[mask] > 0).all()

    def test_closed_ring_gets_a_designated_node(self):
        n = 48
        yy, xx = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        r = np.sqrt((yy - 24) ** 2 + (xx - 24) ** 2)
        mask = np.abs(r - 14) < 1.6
        graph, _ = skeletonize_graph(mask)
        assert len(graph.nodes) == 1
        assert len(graph.links) == 1
        a, b = graph.links[0].node_ids
        assert a == b

    def test_nodes_and_interiors_partition_the_skeleton(self):
        mask = np.zeros((64, 64), bool)
        mask[10:14, 8:56] = True
        mask[10:50, 30:34] = True
        graph, _ = skeletonize_graph(mask)
        assert graph.skeleton_pixel_count() == int(skeletonize(mask).sum())

    def test_empty_mask(self):
        graph, id_img = skeletonize_graph(np.zeros((8, 8), bool))
        assert graph.links == [] and graph.nodes == []
        assert (id_img == 0).all()

    def test_graph_serializes_to_json(self):
        mask = np.zeros((16, 16), bool)
        mask[7:9, 2:14] = True
        graph, _ = skeletonize_graph(mask)
        doc = json.loads(graph.to_json())
        assert doc["shape"] == [16, 16]
        assert len(doc["links"]) == 1
        assert doc["links"][0]["id"] == 1


def test_project_ids_gates_on_mask_and_slab():
    id_img = np.array([[1, 2], [0, 3]], np.uint32)
    vessel = np.zeros((2, 2, 3), bool)
    vessel[0, 0, :] = True
    vessel[1, 1, 1] = True
    slab = np.zeros((2, 2, 3), bool)
    slab[:, :, :2] = True
    out = project_ids(id_img, vessel, slab)
    assert out.dtype == np.uint32
    assert out[0, 0, 0] == 1 and out[0, 0, 1] == 1
    assert out[0, 0, 2] == 0          # outside the slab
    assert out[1, 1, 1] == 3
    assert out[0, 1, 0] == 0          # no vessel there
    assert out[1, 0, 1] == 0          # id 0 column


def _tube_volume(n=40, spacing=5.0, radius_um=10.0, axis=0):
    idx = np.indices((n, n, n)).astype(np.float64) * spacing
    c = (n // 2) * spacing
    axes = [0, 1, 2]
    axes.remove(axis)
    d2 = (idx[axes[0]] - c) ** 2 + (idx[axes[1]] - c) ** 2
    return (d2 <= radius_um**2).astype(np.float64)


class TestOrientedFlux:
    SP = (5.0, 5.0, 5.0)

    def test_tube_cross_section_eigenvalues(self):
        vol = _tube_volume()
        l1, l2, l3, m = oof_response(vol, 10.0, self.SP, sigma_um=5.0)
        c = 20
        assert l1[c, c, c] < 0 and l2[c, c, c] < 0
        assert abs(l2[c, c, c]) > 0.5 * abs(l1[c, c, c])
        assert abs(l3[c, c, c]) < 0.3 * abs(l1[c, c, c])
        assert m[c, c, c] > 0

    def test_plane_rejected_by_the_two_eigenvalue_gate(self):
        n = 40
        plane = np.zeros((n, n, n))
        plane[:, :, 18:23] = 1.0
        *_, m_pl = oof_response(plane, 10.0, self.SP, sigma_um=5.0)
        *_, m_tu = oof_response(_tube_volume(), 10.0, self.SP, sigma_um=5.0)
        assert m_pl[20, 20, 20] <= 0.1 * m_tu[20, 20, 20]

    def test_plane_has_one_dominant_eigenvalue(self):
        n = 40
        plane = np.zeros((n, n, n))
        plane[:, :, 18:23] = 1.0
        l1, l2, _, _ = oof_response(plane, 10.0, self.SP, sigma_um=5.0)
        assert abs(l2[20, 20, 16]) < 0.2 * abs(l1[20, 20, 16])

    def test_constant_volume_is_silent(self):
        l1, l2, l3, m = oof_response(np.ones((16, 16, 16)), 10.0, self.SP)
        assert np.abs(l1).max() < 1e-10
        assert (m == 0).all()

    def test_measure_zero_unless_both_leaders_negative(self, rng):
        vol = ndimage.gaussian_filter(rng.random((24, 24, 24)), 2.0)
        l1, l2, _, m = oof_response(vol, 12.0, self.SP, sigma_um=5.0)
        pos = m > 0
        assert (l1[pos] <= 0).all() and (l2[pos] <= 0).all()
        np.testing.assert_allclose(m[pos], np.sqrt(np.abs(l1 * l2))[pos],
                                   rtol=1e-12)
        lax = (l1 > 0) | (l2 > 0)
        assert (m[lax] == 0).all()

    def test_axis_swap_symmetry(self):
        m_y = oof_response(_tube_volume(axis=0), 10.0, self.SP, sigma_um=5.0)[3]
        m_x = oof_response(_tube_volume(axis=1), 10.0, self.SP, sigma_um=5.0)[3]
        np.testing.assert_allclose(m_x, np.transpose(m_y, (1, 0, 2)),
                                   atol=1e-9 * m_y.max())

    def test_agrees_with_direct_sphere_quadrature(self):
        vol = ndimage.gaussian_filter(_tube_volume(n=24), 1.0)
        points = [(12, 12, 12), (12, 16, 12), (8, 10, 14)]
        l1, l2, l3, _ = oof_response(vol, 10.0, self.SP, sigma_um=5.0)
        ref_eigs, _ = oracles.oof_spatial(vol, 10.0, self.SP, 5.0, points)
        scale = np.abs(ref_eigs).max()
        for k, (iy, ix, iz) in enumerate(points):
            got = np.array([l1[iy, ix, iz], l2[iy, ix, iz], l3[iy, ix, iz]])
            np.testing.assert_allclose(got, ref_eigs[k], atol=0.07 * scale)

    def test_argument_validation(self):
        vol = np.zeros((16, 16, 16))
        with pytest.raises(ValueError, match="radius"):
            oof_response(vol, 0.0, self.SP)
        with pytest.raises(ValueError, match="volume extent"):
            oof_response(vol, 60.0, self.SP)
        with pytest.raises(ValueError, match="spacing"):
            oof_response(vol, 10.0, (5.0, 5.0))

    def test_mask_finds_the_tube(self):
        vol = ndimage.gaussian_filter(_tube_volume(), 1.0)
        mask, resp, thr = mask_3d(vol, 10.0, self.SP, sigma_um=5.0)
        assert thr > 0
        assert mask[20, 20, 20]
        assert not mask[20, 2, 2]
        assert resp.shape == vol.shape
