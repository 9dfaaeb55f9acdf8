"""Random-walk object attention: graph construction, propagation,
proposal fusion, and the crop geometry."""

import numpy as np
import pytest

from demetric.errors import ParameterError
from demetric.oam import (AttentionProposal, bilinear_resize, build_weight_matrix,
                          crop_and_zoom, crop_box, fuse_proposals, propagate)


def _stationary_oracle(matrix: np.ndarray, steps: int = 1000) -> np.ndarray:
    """Long power iteration of the transpose update, from uniform mass."""
    n = matrix.shape[0]
    m = np.full(n, 1.0 / n)
    for _ in range(steps):
        m = matrix.T @ m
    return m


class TestBuildWeightMatrix:
    def test_identical_locations_fall_back_to_uniform(self):
        u = np.ones((3, 1, 2))  # two locations, identical features
        d = build_weight_matrix(u)
        np.testing.assert_allclose(d.matrix, [[0.5, 0.5], [0.5, 0.5]], atol=1e-15)

    def test_two_distinct_locations(self):
        u = np.zeros((1, 1, 2))
        u[0, 0, 1] = 3.0
        d = build_weight_matrix(u)
        np.testing.assert_allclose(d.matrix, [[0.0, 1.0], [1.0, 0.0]], atol=1e-15)

    def test_hand_computed_row(self):
        """Scalar features 0,1,2,4 on a 2x2 grid: distances from the first
        node are 1,2,4, so its normalized row is [0, 1/7, 2/7, 4/7]."""
        u = np.array([[[0.0, 1.0], [2.0, 4.0]]])
        d = build_weight_matrix(u)
        np.testing.assert_allclose(d.matrix[0], [0.0, 1 / 7, 2 / 7, 4 / 7], atol=1e-12)

    def test_rows_are_stochastic(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            u = rng.standard_normal((4, 3, 3))
            d = build_weight_matrix(u)
            assert np.all(d.matrix >= 0.0)
            np.testing.assert_allclose(d.matrix.sum(axis=1), 1.0, atol=1e-9)


class TestPropagate:
    def test_uniform_rows_are_a_fixed_point(self):
        u = np.ones((2, 2, 3))
        d = build_weight_matrix(u)  # degenerate -> uniform rows
        for t in (1, 5, 50):
            m = propagate(d, t).mass
            np.testing.assert_allclose(m, np.full((2, 3), 1 / 6), atol=1e-12)

    def test_two_node_symmetric(self):
        u = np.zeros((1, 2, 1))
        u[0, 1, 0] = 1.0
        d = build_weight_matrix(u)
        for t in (1, 3, 10):
            np.testing.assert_allclose(propagate(d, t).mass.reshape(-1), [0.5, 0.5],
                                       atol=1e-12)

    def test_outlier_location_holds_maximal_mass(self):
        """One feature vector far from an otherwise homogeneous 3x3 map
        collects the most mass: every inbound edge to it dominates."""
        rng = np.random.default_rng(1)
        u = rng.standard_normal((8, 3, 3)) * 0.1
        u[:, 1, 1] += 10.0
        m = propagate(build_weight_matrix(u), 10).mass
        flat = m.reshape(-1)
        assert flat.argmax() == 4  # center of the 3x3 grid
        assert np.all(flat[4] > np.delete(flat, 4))

    def test_ten_steps_match_eigenvector_oracle(self):
        """On well-mixing maps the 10-step state coincides with the
        dominant left eigenvector from a 1000-step power iteration."""
        rng = np.random.default_rng(12)
        for _ in range(10):
            u = rng.standard_normal((8, 3, 3))
            d = build_weight_matrix(u)
            m = propagate(d, 10).mass
            oracle = _stationary_oracle(d.matrix)
            assert np.abs(m.reshape(-1) - oracle).sum() < 1e-6

    def test_mass_conserved_at_every_iteration(self):
        rng = np.random.default_rng(2)
        u = rng.standard_normal((3, 4, 4))
        d = build_weight_matrix(u)
        for t in range(1, 11):
            assert abs(propagate(d, t).mass.sum() - 1.0) < 1e-9

    def test_ten_steps_reach_the_stable_state(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            u = rng.standard_normal((8, 4, 4))
            d = build_weight_matrix(u)
            m10 = propagate(d, 10).mass
            m1000 = propagate(d, 1000).mass
            assert np.abs(m10 - m1000).sum() < 1e-4

    def test_outlier_saliency_property(self):
        rng = np.random.default_rng(4)
        for trial in range(20):
            base = rng.standard_normal(6)
            u = base[:, None, None] + rng.standard_normal((6, 3, 3)) * 0.05
            spot = (rng.integers(3), rng.integers(3))
            u[:, spot[0], spot[1]] += 10.0 * np.sign(rng.standard_normal(6))
            m = propagate(build_weight_matrix(u), 10).mass
            assert np.unravel_index(m.argmax(), m.shape) == spot

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(5)
        u = rng.standard_normal((3, 2, 3))
        n = 6
        perm = rng.permutation(n)
        u_perm = u.reshape(3, n)[:, perm].reshape(3, 2, 3)
        m = propagate(build_weight_matrix(u), 10).mass.reshape(-1)
        m_perm = propagate(build_weight_matrix(u_perm), 10).mass.reshape(-1)
        np.testing.assert_allclose(m_perm, m[perm], atol=1e-12)

    def test_bad_iteration_count(self):
        d = build_weight_matrix(np.ones((1, 2, 2)))
        with pytest.raises(ParameterError):
            propagate(d, 0)


class TestFuseProposals:
    def test_single_proposal_at_target_size_unchanged(self):
        rng = np.random.default_rng(6)
        mass = rng.random((4, 4))
        mass /= mass.sum()
        fused = fuse_proposals([AttentionProposal(mass=mass)], 4, 4)
        np.testing.assert_allclose(fused.mass, mass, atol=1e-12)

    def test_mean_of_identical_proposals_is_identity(self):
        mass = np.full((2, 2), 0.25)
        p = AttentionProposal(mass=mass)
        fused = fuse_proposals([p, p, p], 2, 2)
        np.testing.assert_allclose(fused.mass, mass, atol=1e-15)

    def test_hand_fused_uniform_and_onehot(self):
        uniform = AttentionProposal(mass=np.full((2, 2), 0.25))
        onehot = AttentionProposal(mass=np.array([[0.0, 0.0], [0.0, 1.0]]))
        fused = fuse_proposals([uniform, onehot], 2, 2)
        np.testing.assert_allclose(fused.mass.reshape(-1),
                                   [0.125, 0.125, 0.125, 0.625], atol=1e-12)

    def test_empty_list_rejected(self):
        with pytest.raises(ParameterError):
            fuse_proposals([], 2, 2)

    def test_fused_mass_sums_to_one(self):
        rng = np.random.default_rng(7)
        ps = []
        for h, w in ((3, 3), (5, 5)):
            mass = rng.random((h, w))
            ps.append(AttentionProposal(mass=mass / mass.sum()))
        fused = fuse_proposals(ps, 8, 8)
        assert abs(fused.mass.sum() - 1.0) < 1e-9
        assert np.all(fused.mass >= 0.0)


class TestCropBox:
    def test_uniform_map_gives_full_image(self):
        m = AttentionProposal(mass=np.full((32, 32), 1.0 / 1024))
        box = crop_box(m, 32, 32)
        assert box.side == 32
        assert box.top == 0 and box.left == 0

    def test_single_spike_minimum_side(self):
        mass = np.zeros((32, 32))
        mass[20, 11] = 1.0
        box = crop_box(AttentionProposal(mass=mass), 32, 32)
        assert box.side == 8
        assert box.center_row == 20 and box.center_col == 11

    def test_hand_threshold_hot_block(self):
        """4x4 map, 2x2 hot block of 0.2 on a 0.0125 background; the
        threshold keeps exactly the block, whose pixel box on a 32x32
        image is the block scaled by 8."""
        mass = np.full((4, 4), 0.0125)
        mass[1:3, 1:3] = 0.2
        tau = mass.mean() + 0.5 * (mass.max() - mass.mean())
        assert np.array_equal(mass >= tau, mass == 0.2)
        box = crop_box(AttentionProposal(mass=mass), 32, 32)
        assert box.side == 16
        assert box.top == 8 and box.left == 8  # covers pixel rows/cols 8..23

    def test_box_always_inside_image(self):
        rng = np.random.default_rng(8)
        for _ in range(50):
            mass = rng.random((8, 8))
            mass /= mass.sum()
            box = crop_box(AttentionProposal(mass=mass), 32, 32)
            assert 0 <= box.top and box.top + box.side <= 32
            assert 0 <= box.left and box.left + box.side <= 32
            assert box.side >= 8


class TestCropAndZoom:
    def test_full_image_box_is_identity(self):
        rng = np.random.default_rng(9)
        img = rng.random((2, 16, 16))
        box = crop_box(AttentionProposal(mass=np.full((16, 16), 1 / 256)), 16, 16)
        out = crop_and_zoom(img, box)
        assert np.abs(out - img).max() < 1e-12

    def test_zoom_of_constant_image_is_constant(self):
        from demetric.oam import CropBox
        img = np.full((1, 32, 32), 0.7)
        out = crop_and_zoom(img, CropBox(center_row=16, center_col=16, side=16))
        np.testing.assert_allclose(out, 0.7, atol=1e-12)

    def test_half_size_box_on_ramp_matches_direct_sampler(self):
        """Cropping the central half of a linear ramp and zooming back
        rescales the per-pixel slope by (side-1)/(W-1); checked against
        an independent per-pixel bilinear sampler."""
        from demetric.oam import CropBox
        w = 32
        img = np.tile(np.arange(w, dtype=np.float64), (w, 1))[None]
        box = CropBox(center_row=16, center_col=16, side=16)
        out = crop_and_zoom(img, box)

        def oracle(grid, top, left, side, out_h, out_w):
            res = np.zeros((out_h, out_w))
            for i in range(out_h):
                for j in range(out_w):
                    r = top + i * (side - 1) / (out_h - 1)
                    c = left + j * (side - 1) / (out_w - 1)
                    r0, c0 = int(np.floor(r)), int(np.floor(c))
                    r1, c1 = min(r0 + 1, grid.shape[0] - 1), min(c0 + 1, grid.shape[1] - 1)
                    fr, fc = r - r0, c - c0
                    res[i, j] = (grid[r0, c0] * (1 - fr) * (1 - fc)
                                 + grid[r0, c1] * (1 - fr) * fc
                                 + grid[r1, c0] * fr * (1 - fc)
                                 + grid[r1, c1] * fr * fc)
            return res

        expected = oracle(img[0], box.top, box.left, box.side, w, w)
        np.testing.assert_allclose(out[0], expected, atol=1e-12)
        slopes = np.diff(out[0], axis=1)
        np.testing.assert_allclose(slopes, (box.side - 1) / (w - 1), atol=1e-12)

    def test_random_boxes_match_direct_sampler(self):
        from demetric.oam import CropBox
        rng = np.random.default_rng(10)
        img = rng.random((1, 16, 16))
        for _ in range(5):
            side = int(rng.integers(8, 16))
            cr = int(rng.integers(side // 2, 16 - side + side // 2 + 1))
            cc = int(rng.integers(side // 2, 16 - side + side // 2 + 1))
            box = CropBox(center_row=cr, center_col=cc, side=side)
            out = crop_and_zoom(img, box)
            rows = box.top + np.arange(16) * (side - 1) / 15.0
            cols = box.left + np.arange(16) * (side - 1) / 15.0
            r0 = np.floor(rows).astype(int)
            c0 = np.floor(cols).astype(int)
            r1 = np.minimum(r0 + 1, 15)
            c1 = np.minimum(c0 + 1, 15)
            fr = (rows - r0)[:, None]
            fc = (cols - c0)[None, :]
            expected = (img[0][np.ix_(r0, c0)] * (1 - fr) * (1 - fc)
                        + img[0][np.ix_(r0, c1)] * (1 - fr) * fc
                        + img[0][np.ix_(r1, c0)] * fr * (1 - fc)
                        + img[0][np.ix_(r1, c1)] * fr * fc)
            np.testing.assert_allclose(out[0], expected, atol=1e-12)


def test_bilinear_resize_identity_and_constant():
    rng = np.random.default_rng(11)
    grid = rng.random((5, 7))
    np.testing.assert_allclose(bilinear_resize(grid, 5, 7), grid, atol=1e-12)
    np.testing.assert_allclose(bilinear_resize(np.full((3, 3), 2.0), 9, 9), 2.0, atol=1e-12)
