import numpy as np
import pytest

from conftest import all_permutations, random_weights
from lcapa.quadrature import build_grid, channel_matrix, gram_pair
from lcapa.scene import sample_scene
from lcapa.wmmse import (
    BaselineResult,
    DiscretePrecoder,
    LiftConditionError,
    WmmseOptions,
    baseline_se,
    discrete_sinr,
    discretize_channels,
    lift_precoder,
    wmmse_precoding,
)


def run_wmmse(scene, num_nodes, options=None):
    grid = build_grid(scene.aperture, num_nodes)
    h = discretize_channels(scene, grid)
    precoder, info = wmmse_precoding(h, grid.cell_area, scene.user_apertures(),
                                     scene.noise_vars(), scene.power_budget,
                                     options or WmmseOptions())
    return grid, h, precoder, info


class TestWmmseOptions:
    def test_validation(self):
        with pytest.raises(ValueError):
            WmmseOptions(max_iterations=0)
        with pytest.raises(ValueError):
            WmmseOptions(tolerance=0.0)


class TestSingleUser:
    def test_converges_to_matched_filter(self):
        scene = sample_scene(seed=2, num_users=1)
        grid, h, precoder, info = run_wmmse(scene, 64)
        v = precoder.values[:, 0]
        # optimal single-user precoder is proportional to the channel samples
        alignment = abs(np.vdot(h[0], v)) / (np.linalg.norm(h[0]) * np.linalg.norm(v))
        assert alignment == pytest.approx(1.0, abs=1e-10)

    def test_matches_closed_form_se(self):
        scene = sample_scene(seed=2, num_users=1)
        grid, h, precoder, info = run_wmmse(scene, 64)
        gamma = discrete_sinr(precoder.values, h, grid.cell_area,
                              scene.user_apertures(), scene.noise_vars())
        expected = (scene.user_aperture * grid.cell_area
                    * np.sum(np.abs(h[0]) ** 2) * scene.power_budget
                    / scene.noise_var)
        assert abs(np.log2(1 + gamma[0]) - np.log2(1 + expected)) <= 1e-8
        assert info.objective_trace[-1] == pytest.approx(np.log2(1 + expected),
                                                         abs=1e-8)

    def test_golden_mrt_sinr_seed1(self):
        # closed form gamma = |A_1| * delta * sum|h|^2 * P / sigma^2 for the
        # first user of the seed-1 scene alone
        scene = sample_scene(seed=1, num_users=4)
        solo = scene.with_positions(scene.positions[:1])
        grid, h, precoder, info = run_wmmse(solo, 256)
        gamma = discrete_sinr(precoder.values, h, grid.cell_area,
                              solo.user_apertures(), solo.noise_vars())
        expected = (solo.user_aperture * grid.cell_area * np.sum(np.abs(h[0]) ** 2)
                    / solo.noise_var)
        assert gamma[0] == pytest.approx(expected, rel=1e-8)


class TestIterationProperties:
    def test_trace_nondecreasing_on_random_scenes(self):
        for seed in range(40):
            scene = sample_scene(seed=2000 + seed, num_users=4)
            _, _, _, info = run_wmmse(scene, 64)
            diffs = np.diff(info.objective_trace)
            assert diffs.min() >= -1e-8

    def test_power_equality(self):
        for seed in (1, 5, 9):
            scene = sample_scene(seed=seed, num_users=4)
            _, _, precoder, _ = run_wmmse(scene, 64)
            assert abs(precoder.total_power - scene.power_budget) \
                <= 1e-6 * scene.power_budget

    def test_shared_aperture_required(self):
        scene = sample_scene(seed=1, num_users=2)
        grid = build_grid(scene.aperture, 16)
        h = discretize_channels(scene, grid)
        with pytest.raises(ValueError):
            wmmse_precoding(h, grid.cell_area, np.array([1e-5, 2e-5]),
                            scene.noise_vars(), 1.0)

    def test_permutation_covariance_with_fixed_init(self):
        scene = sample_scene(seed=4, num_users=4)
        grid, chan_h, precoder, _ = run_wmmse(scene, 64)
        chan = channel_matrix(scene, grid)
        lift = lift_precoder(precoder, chan, grid.cell_area)
        for pi in all_permutations(4)[:6]:
            permuted = scene.with_positions(pi.T @ scene.positions)
            _, _, precoder_p, _ = run_wmmse(permuted, 64)
            chan_p = channel_matrix(permuted, grid)
            lift_p = lift_precoder(precoder_p, chan_p, grid.cell_area)
            assert np.allclose(lift_p.weights, pi.T @ lift.weights @ pi,
                               rtol=1e-6, atol=1e-6 * np.abs(lift.weights).max())


class TestDiscreteSinr:
    def test_m1_reduces_to_scalar_channel(self):
        scene = sample_scene(seed=3, num_users=2)
        grid = build_grid(scene.aperture, 1)
        h = discretize_channels(scene, grid)
        assert h.shape == (2, 1)
        v = np.array([[0.3 + 0.1j, 0.2 - 0.4j]])
        gamma = discrete_sinr(v, h, grid.cell_area, scene.user_apertures(),
                              scene.noise_vars())
        g = grid.cell_area * np.conj(h) @ v
        expected0 = (scene.user_aperture * abs(g[0, 0]) ** 2
                     / (scene.user_aperture * abs(g[0, 1]) ** 2 + scene.noise_var))
        assert gamma[0] == pytest.approx(expected0, rel=1e-12)

    def test_matches_quadrature_couplings(self, seed1_scene, seed1_grid256,
                                          seed1_channels):
        rng = np.random.default_rng(0)
        v = rng.standard_normal((256, 4)) + 1j * rng.standard_normal((256, 4))
        gamma = discrete_sinr(v, seed1_channels.h, seed1_grid256.cell_area,
                              seed1_scene.user_apertures(), seed1_scene.noise_vars())
        from lcapa.objective import sinr_vector

        g = seed1_grid256.cell_area * (np.conj(seed1_channels.h) @ v)
        assert np.allclose(
            gamma, sinr_vector(g, seed1_scene.user_apertures(),
                               seed1_scene.noise_vars()), rtol=1e-14)


class TestLift:
    def test_recovers_in_subspace_precoder(self, seed1_scene, seed1_grid256,
                                           seed1_channels):
        rng = np.random.default_rng(1)
        a0 = random_weights(rng, 4, scale=1e-4)
        v = DiscretePrecoder(values=seed1_channels.h.T @ a0,
                             cell_area=seed1_grid256.cell_area)
        lift = lift_precoder(v, seed1_channels, seed1_grid256.cell_area)
        assert np.allclose(lift.weights, a0, atol=1e-8 * np.abs(a0).max())
        assert lift.residual_norm <= 1e-8 * np.linalg.norm(v.values)

    def test_zero_precoder(self, seed1_channels, seed1_grid256):
        v = DiscretePrecoder(values=np.zeros((256, 4), dtype=complex),
                             cell_area=seed1_grid256.cell_area)
        lift = lift_precoder(v, seed1_channels, seed1_grid256.cell_area)
        assert np.array_equal(lift.weights, np.zeros((4, 4)))
        assert lift.residual_norm == 0.0

    def test_wmmse_solution_is_channel_shaped(self, seed1_scene):
        grid, h, precoder, _ = run_wmmse(seed1_scene, 256)
        chan = channel_matrix(seed1_scene, grid)
        lift = lift_precoder(precoder, chan, grid.cell_area)
        assert lift.residual_norm <= 1e-9 * np.linalg.norm(precoder.values)

    def test_lifted_se_matches_pointwise_se(self, seed1_scene):
        # same-grid evaluation: lifting a channel-shaped precoder loses nothing
        grid, h, precoder, _ = run_wmmse(seed1_scene, 256)
        chan = channel_matrix(seed1_scene, grid)
        lift = lift_precoder(precoder, chan, grid.cell_area)
        from lcapa.objective import sinr_vector, sum_se
        from lcapa.quadrature import integral_couplings

        gamma_direct = discrete_sinr(precoder.values, h, grid.cell_area,
                                     seed1_scene.user_apertures(),
                                     seed1_scene.noise_vars())
        grams = gram_pair(h, grid.cell_area)
        gamma_lifted = sinr_vector(
            integral_couplings(lift.weights, grams.coupling),
            seed1_scene.user_apertures(), seed1_scene.noise_vars())
        se_direct = sum_se(gamma_direct).sum_se
        se_lifted = sum_se(gamma_lifted).sum_se
        assert se_lifted >= se_direct - 1e-6

    def test_ill_conditioned_gram_rejected(self):
        scene = sample_scene(seed=1, num_users=2)
        positions = scene.positions.copy()
        positions[1] = positions[0] + 1e-10
        near_dup = scene.with_positions(positions)
        grid = build_grid(scene.aperture, 64)
        chan = channel_matrix(near_dup, grid)
        v = DiscretePrecoder(values=np.zeros((64, 2), dtype=complex),
                             cell_area=grid.cell_area)
        with pytest.raises(LiftConditionError):
            lift_precoder(v, chan, grid.cell_area)


class TestBaseline:
    def test_pipeline_structure(self, seed1_scene):
        res = baseline_se(seed1_scene, num_nodes=64, num_nodes_eval=256)
        assert isinstance(res, BaselineResult)
        assert res.runtime_seconds > 0.0
        assert res.se_report.sum_se > 0.0
        row = res.csv_row("scene-1")
        assert row.split(",")[1:3] == ["64", "256"]

    def test_finer_wmmse_grid_improves_se(self):
        # seed-averaged: evaluating on a common fine grid, the M=256 baseline
        # beats the M=16 baseline
        gains = []
        for seed in range(8):
            scene = sample_scene(seed=3000 + seed, num_users=4)
            lo = baseline_se(scene, num_nodes=16, num_nodes_eval=1024)
            hi = baseline_se(scene, num_nodes=256, num_nodes_eval=1024)
            gains.append(hi.se_report.sum_se - lo.se_report.sum_se)
        assert np.mean(gains) > 0.0
