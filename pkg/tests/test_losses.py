import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from trajseg import losses as L
from trajseg import numkernel as nk
from trajseg.errors import InvalidInputError, RangeError
from trajseg.scene_synth import SceneConfig, make_scene

from oracles import central_difference_grad, matrix_with_spectrum


def hard_assignment(labels, k, mode="point", grid=None):
    return L.SoftAssignment.from_labels(labels, num_classes=k, mode=mode, grid=grid)


@pytest.fixture(scope="module")
def planar_scene():
    return make_scene(
        SceneConfig(mode="planar2d", num_objects=2, frames=6, grid=(48, 48), motion_seed=5)
    )


@pytest.fixture(scope="module")
def affine_scene():
    return make_scene(
        SceneConfig(
            mode="rigid3d_affine", num_objects=3, frames=12, grid=(96, 96), motion_seed=11
        )
    )


class TestSoftAssignment:
    def test_rows_must_be_stochastic(self):
        with pytest.raises(InvalidInputError):
            L.SoftAssignment(weights=np.array([[0.5, 0.4]]), mode="point")

    def test_pixel_mode_needs_grid(self):
        with pytest.raises(InvalidInputError):
            L.SoftAssignment(weights=np.ones((4, 1)), mode="pixel")

    def test_from_logits_is_softmax(self):
        logits = np.array([[0.0, 1.0, 2.0]])
        a = L.SoftAssignment.from_logits(logits)
        e = np.exp([0.0, 1.0, 2.0])
        assert np.allclose(a.weights, e / e.sum())


class TestQuadEmbed:
    def test_corner_values(self):
        emb = L.quad_embed(3, 3)
        assert np.allclose(emb[0], [0, 0, 0, 0, 0, 1])
        assert np.allclose(emb[-1], [1, 1, 1, 1, 1, 1])

    def test_hand_value(self):
        # normalized position (0.5, 0.25) -> [x, x2, y, y2, xy, 1]
        row = L.embed_points(np.array([[0.5, 0.25]]))[0]
        assert np.allclose(row, [0.5, 0.25, 0.25, 0.0625, 0.125, 1.0])

    def test_lattice_columns(self):
        emb = L.quad_embed(4, 5)
        gx = emb[:, 0].reshape(4, 5)
        gy = emb[:, 2].reshape(4, 5)
        assert np.allclose(gx[0], np.arange(5) / 4)
        assert np.allclose(gy[:, 0], np.arange(4) / 3)
        assert np.all(emb[:, 5] == 1.0)


class TestFlowLoss:
    def test_ground_truth_masks_fit_exactly(self, planar_scene):
        sc = planar_scene
        masks = hard_assignment(
            sc.masks[0].ravel(), 3, mode="pixel", grid=sc.config.grid
        )
        flow = sc.flows[0] / np.array(sc.config.grid[::-1], dtype=float)
        value, parts = L.flow_loss(masks, flow)
        assert value < 1e-10
        assert parts.shape == (3,)

    def test_uniform_masks_worse_than_truth(self, planar_scene):
        sc = planar_scene
        hw = sc.masks[0].size
        flow = sc.flows[0] / np.array(sc.config.grid[::-1], dtype=float)
        uniform = L.SoftAssignment(
            weights=np.full((hw, 3), 1 / 3), mode="pixel", grid=sc.config.grid
        )
        truth = hard_assignment(sc.masks[0].ravel(), 3, mode="pixel", grid=sc.config.grid)
        u_val = L.flow_loss(uniform, flow)[0]
        t_val = L.flow_loss(truth, flow)[0]
        assert u_val > t_val
        assert u_val > 0

    def test_single_segment_pure_translation(self):
        # constant flow lies in the quadratic span, residual is numerics only
        h = w = 12
        flow = np.full((h * w, 2), 0.013)
        masks = L.SoftAssignment(weights=np.ones((h * w, 1)), mode="pixel", grid=(h, w))
        assert L.flow_loss(masks, flow)[0] < 1e-10

    def test_shape_mismatch(self, planar_scene):
        masks = hard_assignment(
            planar_scene.masks[0].ravel(), 3, mode="pixel", grid=planar_scene.config.grid
        )
        with pytest.raises(InvalidInputError):
            L.flow_loss(masks, np.zeros((10, 2)))


class TestFlowLossGrad:
    def test_zero_flow_zero_gradient(self):
        rng = np.random.default_rng(0)
        logits = rng.standard_normal((64, 2))
        g = L.flow_loss_grad(logits, np.zeros((64, 2)), (8, 8))
        assert np.abs(g).max() < 1e-14

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        h = w = 12
        emb = L.quad_embed(h, w)
        flow = emb @ (rng.standard_normal((6, 2)) * 0.05)
        flow += rng.standard_normal(flow.shape) * 0.01
        logits = rng.standard_normal((h * w, 2)) * 0.5
        g = L.flow_loss_grad(logits, flow, (h, w))
        ref = central_difference_grad(
            lambda x: L.flow_loss(
                L.SoftAssignment.from_logits(x, "pixel", (h, w)), flow
            )[0],
            logits,
        )
        assert np.linalg.norm(g - ref) / np.linalg.norm(ref) < 1e-4

    def test_truth_is_stationary(self, planar_scene):
        sc = planar_scene
        flow = sc.flows[0] / np.array(sc.config.grid[::-1], dtype=float)
        logits = 10.0 * np.eye(3)[sc.masks[0].ravel()]
        g = L.flow_loss_grad(logits, flow, sc.config.grid)
        assert np.abs(g).max() < 1e-6


class TestTrajectoryTailLoss:
    def test_ground_truth_on_rigid_scene(self, affine_scene):
        sc = affine_scene
        a = hard_assignment(sc.labels, 4)
        p = sc.tracks.positions
        value = L.trajectory_tail_loss(a, p, 5)
        sigma_tops = sum(
            np.linalg.svd(p[:, sc.labels == k], compute_uv=False)[0] for k in range(4)
        )
        assert value < 1e-8 * sigma_tops

    def test_merged_assignment_pays(self, affine_scene):
        sc = affine_scene
        merged = L.SoftAssignment(
            weights=np.ones((sc.tracks.n_tracks, 1)), mode="point"
        )
        value = L.trajectory_tail_loss(merged, sc.tracks.positions, 5)
        s1 = np.linalg.svd(sc.tracks.positions, compute_uv=False)[0]
        assert value > 1e-3 * s1

    def test_low_rank_single_segment_is_free(self):
        rng = np.random.default_rng(1)
        p = matrix_with_spectrum(rng, 12, 30, np.array([5, 3, 1, 0.5] + [0] * 8))
        ones = L.SoftAssignment(weights=np.ones((30, 1)), mode="point")
        assert L.trajectory_tail_loss(ones, p, 5) == pytest.approx(
            nk.tail_singular_sum(p, 5), abs=1e-10
        )
        assert L.trajectory_tail_loss(ones, p, 5) < 1e-10

    def test_rank_beyond_matrix_is_empty_sum(self):
        ones = L.SoftAssignment(weights=np.ones((3, 1)), mode="point")
        assert L.trajectory_tail_loss(ones, np.random.default_rng(0).random((4, 3)), 5) == 0.0

    def test_shape_mismatch(self):
        a = L.SoftAssignment(weights=np.ones((5, 1)), mode="point")
        with pytest.raises(InvalidInputError):
            L.trajectory_tail_loss(a, np.zeros((4, 6)), 2)

    def test_zero_tracks_zero_everything(self):
        logits = np.random.default_rng(2).standard_normal((6, 3))
        value, grad = L.trajectory_tail_value_and_grad(logits, np.zeros((8, 6)), 2)
        assert value == 0.0
        assert np.all(grad == 0.0)


class TestTrajectoryTailGrad:
    def test_matches_finite_differences(self):
        rng = np.random.default_rng(14)
        p = rng.standard_normal((16, 40))
        logits = rng.standard_normal((40, 3)) * 0.5
        g = L.trajectory_tail_grad(logits, p, 5)
        ref = central_difference_grad(
            lambda x: L.trajectory_tail_loss(L.SoftAssignment.from_logits(x), p, 5),
            logits,
        )
        assert np.linalg.norm(g - ref) / np.linalg.norm(ref) < 1e-5

    def test_descent_direction_on_truth(self, affine_scene):
        sc = affine_scene
        logits = 8.0 * np.eye(4)[sc.labels]
        p = sc.tracks.positions
        value, g = L.trajectory_tail_value_and_grad(logits, p, 5)
        stepped = L.trajectory_tail_loss(
            L.SoftAssignment.from_logits(logits - 1e-3 * g), p, 5
        )
        assert stepped <= value + 1e-12


class TestReconstructionLoss:
    def test_rank_r_group_is_free(self):
        rng = np.random.default_rng(4)
        p = matrix_with_spectrum(rng, 10, 20, np.array([4, 3, 2, 0, 0, 0, 0, 0, 0, 0.0]))
        ones = L.SoftAssignment(weights=np.ones((20, 1)), mode="point")
        assert L.trajectory_reconstruction_loss(ones, p, 3) < 1e-20

    def test_diagonal_case(self):
        p = np.diag([5.0, 4.0, 3.0, 2.0, 1.0])
        ones = L.SoftAssignment(weights=np.ones((5, 1)), mode="point")
        assert L.trajectory_reconstruction_loss(ones, p, 3) == pytest.approx(5.0)

    def test_eckart_young_identity(self):
        rng = np.random.default_rng(6)
        p = rng.standard_normal((12, 25))
        logits = rng.standard_normal((25, 3))
        a = L.SoftAssignment.from_logits(logits)
        value = L.trajectory_reconstruction_loss(a, p, 5)
        expect = 0.0
        for k in range(3):
            s = np.linalg.svd(p * a.weights[:, k], compute_uv=False)
            expect += float((s[5:] ** 2).sum())
        assert value == pytest.approx(expect, abs=1e-8)

    def test_grad_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        p = rng.standard_normal((10, 18))
        logits = rng.standard_normal((18, 2)) * 0.4
        g = L.trajectory_reconstruction_grad(logits, p, 4)
        ref = central_difference_grad(
            lambda x: L.trajectory_reconstruction_loss(
                L.SoftAssignment.from_logits(x), p, 4
            ),
            logits,
        )
        assert np.linalg.norm(g - ref) / np.linalg.norm(ref) < 1e-4


class TestProjectiveLoss:
    def test_constant_depth_scene_is_free(self):
        sc = make_scene(
            SceneConfig(
                mode="rigid3d_perspective", num_objects=2, frames=8, grid=(64, 64),
                motion_seed=2, depth_motion=0.0,
            )
        )
        a = hard_assignment(sc.labels, 3)
        value = L.trajectory_projective_loss(a, sc.tracks.positions)
        assert value < 1e-8

    def test_varying_depth_pays_more(self):
        base = dict(
            mode="rigid3d_perspective", num_objects=2, frames=8, grid=(64, 64), motion_seed=2
        )
        flat = make_scene(SceneConfig(**base, depth_motion=0.0))
        wavy = make_scene(SceneConfig(**base, depth_motion=2.0))
        va = L.trajectory_projective_loss(
            hard_assignment(flat.labels, 3), flat.tracks.positions
        )
        vb = L.trajectory_projective_loss(
            hard_assignment(wavy.labels, 3), wavy.tracks.positions
        )
        assert vb > va

    def test_affine_scene_is_free_too(self, affine_scene):
        sc = affine_scene
        a = hard_assignment(sc.labels, 4)
        assert L.trajectory_projective_loss(a, sc.tracks.positions) < 1e-8

    def test_grad_matches_finite_differences(self):
        rng = np.random.default_rng(9)
        p = rng.random((12, 20))
        logits = rng.standard_normal((20, 2)) * 0.4
        g = L.trajectory_projective_grad(logits, p)
        ref = central_difference_grad(
            lambda x: L.trajectory_projective_loss(L.SoftAssignment.from_logits(x), p),
            logits,
        )
        assert np.linalg.norm(g - ref) / np.linalg.norm(ref) < 1e-4


class TestTracksAsFlow:
    def test_static_tracks_zero(self):
        p = np.tile(np.random.default_rng(0).random((2, 15)), (5, 1))
        a = L.SoftAssignment(weights=np.ones((15, 1)), mode="point")
        assert L.tracks_as_flow_loss(a, p, 32, 32) < 1e-20

    def test_ground_truth_on_affine_motion(self, planar_scene):
        sc = planar_scene
        a = hard_assignment(sc.labels, 3)
        h, w = sc.config.grid
        value = L.tracks_as_flow_loss(a, sc.tracks.positions, h, w)
        assert value < 1e-8

    def test_equals_per_pair_fits(self):
        # oracle: independent per-pair least-squares via numpy's SVD solver
        rng = np.random.default_rng(5)
        p = rng.random((8, 22))
        logits = rng.standard_normal((22, 2))
        a = L.SoftAssignment.from_logits(logits)
        total = L.tracks_as_flow_loss(a, p, 16, 16)
        expect = 0.0
        sx = 16 / 15
        for t in range(3):
            pts = np.column_stack([p[2 * t] * sx, p[2 * t + 1] * sx])
            basis = L.embed_points(pts)
            disp = np.column_stack([p[2 * t + 2] - p[2 * t], p[2 * t + 3] - p[2 * t + 1]])
            for k in range(2):
                ek = a.weights[:, k : k + 1] * basis
                fk = a.weights[:, k : k + 1] * disp
                theta = np.linalg.lstsq(ek, fk, rcond=None)[0]
                expect += float(((fk - ek @ theta) ** 2).sum())
        assert total == pytest.approx(expect, rel=1e-9)


class TestTemporalSmooth:
    def _pixel_masks(self, values, grid):
        return L.SoftAssignment(weights=values, mode="pixel", grid=grid)

    def test_identical_constant_masks(self):
        grid = (4, 4)
        w = np.tile([0.3, 0.7], (16, 1))
        masks = self._pixel_masks(w, grid)
        window = np.random.default_rng(0).random((12, 9))
        assert L.temporal_smooth_loss(masks, masks, window, 0, 5) == pytest.approx(0.0)

    def test_static_scene_identical_masks(self):
        rng = np.random.default_rng(1)
        grid = (6, 6)
        w = rng.dirichlet(np.ones(3), 36)
        masks = self._pixel_masks(w, grid)
        frame = rng.random((2, 10))
        window = np.tile(frame, (7, 1))
        assert L.temporal_smooth_loss(masks, masks, window, 0, 5) == pytest.approx(0.0)

    def test_hand_computed_bilinear(self):
        # 2x2 grid, one segment channel; point at the cell center averages
        # the four corners: (0.1 + 0.9 + 0.3 + 0.7) / 4 = 0.5
        grid = (2, 2)
        w1 = np.array([[0.1, 0.9], [0.9, 0.1], [0.3, 0.7], [0.7, 0.3]])
        w2 = np.array([[1.0, 0.0]] * 4)
        masks_a = self._pixel_masks(w1, grid)
        masks_b = self._pixel_masks(w2, grid)
        window = np.array([[0.25], [0.25], [0.25], [0.25]])  # 2 frames, 1 track
        # pixel position = 0.25 * 2 = 0.5 in both frames
        val = L.temporal_smooth_loss(masks_a, masks_b, window, 0, 1)
        assert val == pytest.approx((0.5 - 1.0) ** 2 + (0.5 - 0.0) ** 2)

    def test_out_of_window_frames(self):
        masks = self._pixel_masks(np.ones((4, 1)), (2, 2))
        window = np.random.default_rng(0).random((4, 3))
        with pytest.raises(RangeError):
            L.temporal_smooth_loss(masks, masks, window, 0, 5)

    def test_clamp_diagnostics(self):
        masks = self._pixel_masks(np.ones((4, 1)), (2, 2))
        window = np.array([[2.0], [2.0], [0.1], [0.1]])  # first frame out of grid
        diag = {}
        L.temporal_smooth_loss(masks, masks, window, 0, 1, diagnostics=diag)
        assert diag["clamped"] == 1


class TestCombinedLoss:
    def test_all_weights_zero(self):
        w = L.LossWeights(0.0, 0.0, 0.0)
        out = L.combined_loss(weights=w)
        assert out.weighted_total == 0.0

    def test_flow_only(self, planar_scene):
        sc = planar_scene
        masks = hard_assignment(sc.masks[0].ravel(), 3, mode="pixel", grid=sc.config.grid)
        flow = sc.flows[0] / np.array(sc.config.grid[::-1], dtype=float)
        out = L.combined_loss(
            masks=masks, flow=flow, weights=L.LossWeights(1.0, 0.0, 0.0)
        )
        assert out.weighted_total == pytest.approx(L.flow_loss(masks, flow)[0])

    def test_default_weights_recombination(self, affine_scene):
        sc = affine_scene
        rng = np.random.default_rng(0)
        logits = rng.standard_normal((sc.tracks.n_tracks, 4))
        a = L.SoftAssignment.from_logits(logits)
        masks = hard_assignment(sc.masks[0].ravel(), 4, mode="pixel", grid=sc.config.grid)
        masks2 = hard_assignment(sc.masks[5].ravel(), 4, mode="pixel", grid=sc.config.grid)
        flow = sc.flows[0] / np.array(sc.config.grid[::-1], dtype=float)
        out = L.combined_loss(
            masks=masks,
            assignment=a,
            flow=flow,
            tracks=sc.tracks.positions,
            masks_ahead=masks2,
            window=sc.tracks.positions,
            frame=0,
            dt=5,
        )
        expect = 0.03 * out.l_f + 5e-5 * out.l_t + 0.1 * out.l_tau
        assert out.weighted_total == pytest.approx(expect, abs=1e-12)
        js = out.to_json()
        assert set(js) == {"l_f", "l_t", "l_rec", "l_per", "l_tau", "total", "r", "weights"}


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_permutation_equivariance(seed):
    rng = np.random.default_rng(seed)
    p = rng.standard_normal((8, 15))
    logits = rng.standard_normal((15, 3))
    a = L.SoftAssignment.from_logits(logits)
    perm = rng.permutation(3)
    permuted = L.SoftAssignment(weights=a.weights[:, perm], mode="point")
    assert L.trajectory_tail_loss(a, p, 3) == pytest.approx(
        L.trajectory_tail_loss(permuted, p, 3), rel=1e-12
    )
    assert L.trajectory_reconstruction_loss(a, p, 3) == pytest.approx(
        L.trajectory_reconstruction_loss(permuted, p, 3), rel=1e-12
    )


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 10.0))
def test_scale_behavior(seed, c):
    rng = np.random.default_rng(seed)
    p = rng.standard_normal((8, 12))
    logits = rng.standard_normal((12, 2))
    a = L.SoftAssignment.from_logits(logits)
    tail = L.trajectory_tail_loss(a, p, 3)
    rec = L.trajectory_reconstruction_loss(a, p, 3)
    assert L.trajectory_tail_loss(a, c * p, 3) == pytest.approx(c * tail, rel=1e-9)
    assert L.trajectory_reconstruction_loss(a, c * p, 3) == pytest.approx(
        c * c * rec, rel=1e-9
    )


def test_ground_truth_beats_random_assignments(affine_scene):
    sc = affine_scene
    p = sc.tracks.positions
    truth_val = L.trajectory_tail_loss(hard_assignment(sc.labels, 4), p, 5)
    s1 = np.linalg.svd(p, compute_uv=False)[0]
    rng = np.random.default_rng(123)
    worse = 0
    vals = []
    for _ in range(200):
        labels = rng.integers(0, 4, sc.tracks.n_tracks)
        val = L.trajectory_tail_loss(hard_assignment(labels, 4), p, 5)
        vals.append(val)
        worse += val >= truth_val
    assert worse == 200
    assert np.mean(vals) - truth_val > 1e-3 * s1
