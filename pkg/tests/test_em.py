import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from emstop.core import DomainError, NumericalFailure, RngStream, SingularityError, kl_divergence
from emstop.em import (
    X_FLOOR,
    EmProblem,
    em_step,
    initial_state,
    reconstruct,
    run_coupled,
    run_trajectory,
)
from emstop.harness import ExperimentConfig, simulate_data
from emstop.io import load_image
from emstop.operators import dense_operator


def random_problem(seed, background=0.0, size=16, flux=5e4):
    cfg = ExperimentConfig(seed=seed, flux=flux, size=size, psf_sigma=1.5, background_level=background)
    sim = simulate_data(cfg, RngStream(seed, 9))
    return EmProblem(sim.operator, sim.y, background)


class TestStep:
    def test_identity_operator_recovers_data(self):
        problem = EmProblem(dense_operator(np.eye(2)), [4.0, 9.0])
        assert np.array_equal(reconstruct(problem, 1), [4.0, 9.0])

    def test_hand_example(self):
        problem = EmProblem(dense_operator([[0.5, 0.5], [0.5, 0.5]]), [2.0, 4.0])
        state = em_step(problem, initial_state(problem))
        assert state.k == 1
        assert np.array_equal(state.x, [3.0, 3.0])
        assert np.array_equal(state.prediction, [3.0, 3.0])

    def test_fixed_point(self):
        y = np.array([1.5, 7.0, 3.25])
        problem = EmProblem(dense_operator(np.eye(3)), y, initial=y)
        assert np.max(np.abs(reconstruct(problem, 1) - y)) <= 1e-14

    def test_k_zero_is_initial(self):
        problem = random_problem(1)
        assert np.array_equal(reconstruct(problem, 0), np.ones((16, 16)))

    def test_singularity_on_counted_pixel(self):
        # the second data pixel sees no object pixel, so its prediction is 0
        op = dense_operator([[1.0, 1.0], [0.0, 0.0]])
        with pytest.raises(SingularityError):
            run_trajectory(EmProblem(op, [1.0, 5.0]), 3)
        # with no counts there the zero prediction is harmless
        assert np.all(np.isfinite(reconstruct(EmProblem(op, [1.0, 0.0]), 3)))

    def test_zero_data_pixel_is_floored_not_fatal(self):
        problem = EmProblem(dense_operator(np.eye(3)), [0.0, 2.0, 3.0])
        x = reconstruct(problem, 3)
        assert np.all(x > 0)
        assert x[0] == X_FLOOR

    def test_validation(self):
        op = dense_operator(np.eye(2))
        with pytest.raises(DomainError):
            EmProblem(op, [1.0, -1.0])
        with pytest.raises(DomainError):
            EmProblem(op, [1.0, 2.0, 3.0])
        with pytest.raises(DomainError):
            EmProblem(op, [1.0, 2.0], background=-1.0)
        with pytest.raises(DomainError):
            EmProblem(op, [1.0, 2.0], initial=[0.0, 1.0])

    def test_non_finite_iterate(self):
        op = dense_operator([[1.0, 1e-300], [1e-300, 1.0]])
        problem = EmProblem(op, [1e308, 1e308], initial=[1e-300, 1e-300])
        with pytest.raises(NumericalFailure) as info:
            run_trajectory(problem, 5)
        assert info.value.iteration == 1


class TestTrajectory:
    def test_positive_and_monotone(self):
        cfg = ExperimentConfig(seed=4, flux=6.25e5, size=64, background_level=100.0)
        sim = simulate_data(cfg, RngStream(4, 1))
        problem = EmProblem(sim.operator, sim.y, sim.background)
        track = []

        def observe(k, state):
            assert np.all(state.x > 0)
            assert np.all(state.prediction > 0)
            track.append(kl_divergence(problem.data, state.prediction))

        run_trajectory(problem, 500, observe)
        assert np.all(np.diff(track) <= 1e-12 * np.asarray(track[:-1]) + 1e-12)

    def test_flux_conservation(self):
        gen = np.random.default_rng(0)
        op = dense_operator(gen.random((10, 10)) + 0.05)
        y = gen.poisson(50, 10).astype(float)
        problem = EmProblem(op, y)

        def observe(k, state):
            assert abs(np.sum(op.column_sums * state.x) - y.sum()) <= 1e-8 * y.sum()

        run_trajectory(problem, 100, observe)

    @pytest.mark.parametrize("scale", [2.0, 10.0, 100.0])
    def test_homogeneity(self, scale):
        problem = random_problem(5)
        for k in (1, 10, 50):
            base = reconstruct(problem, k)
            scaled = reconstruct(problem.scaled(scale), k)
            assert np.max(np.abs(scaled - scale * base)) <= 1e-10 * np.max(scale * base)

    def test_deterministic(self):
        problem = random_problem(6, background=2.0)
        assert np.array_equal(reconstruct(problem, 30), reconstruct(problem, 30))

    def test_checkpoints(self, tmp_path):
        problem = random_problem(7)
        final = run_trajectory(problem, 10, checkpoint_dir=tmp_path, checkpoint_stride=5)
        assert sorted(p.name for p in tmp_path.iterdir()) == ["x_000005.txt", "x_000010.txt"]
        assert np.array_equal(load_image(tmp_path / "x_000010.txt"), final.x)

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 10_000), st.sampled_from([2.0, 10.0, 100.0]))
    def test_homogeneity_random(self, seed, scale):
        gen = np.random.default_rng(seed)
        op = dense_operator(gen.random((12, 9)) + 1e-3)
        y = gen.poisson(20, 12).astype(float)
        problem = EmProblem(op, y)
        base = reconstruct(problem, 20)
        assert np.max(np.abs(reconstruct(problem.scaled(scale), 20) - scale * base)) <= 1e-10 * np.max(scale * base)


class TestCoupled:
    def test_zero_probe_matches_main_bitwise(self):
        problem = random_problem(8, background=1.0)
        zeros = np.zeros(problem.data.shape)

        def observe(k, c):
            for name in ("normal", "rademacher", "rekl_plus", "rekl_minus"):
                assert np.array_equal(c.x[c.index(name)], c.x[c.index("main")])

        run_coupled(problem, 20, 1e-3, RngStream(0), observe, eta=zeros, zeta=zeros, eta_rekl=zeros)

    def test_main_matches_plain_trajectory(self):
        problem = random_problem(9, background=1.0)
        coupled = run_coupled(problem, 40, 1e-3, RngStream(1))
        assert np.allclose(coupled.main.x, reconstruct(problem, 40), rtol=1e-12, atol=0)

    def test_replica_counts(self):
        problem = random_problem(10, background=1.0)
        assert len(run_coupled(problem, 1, 1e-3, RngStream(2)).names) == 5
        assert len(run_coupled(problem, 1, 1e-3, RngStream(2), probes=("normal",)).names) == 2
        shared = run_coupled(problem, 1, 1e-3, RngStream(2), shared_rekl_probe=True)
        assert len(shared.names) == 4
        assert shared.index("rekl_plus") == shared.index("normal")
        assert np.array_equal(shared.eta_rekl, shared.eta)

    def test_probes_drawn_once_and_reproducible(self):
        problem = random_problem(11, background=1.0)
        seen = []
        run_coupled(problem, 3, 1e-3, RngStream(3), lambda k, c: seen.append(c.eta.copy()))
        assert all(np.array_equal(seen[0], e) for e in seen)
        again = run_coupled(problem, 3, 1e-3, RngStream(3))
        assert np.array_equal(again.eta, seen[0])
        assert np.array_equal(again.x, run_coupled(problem, 3, 1e-3, RngStream(3)).x)

    def test_perturbed_data_clamped(self):
        problem = EmProblem(dense_operator(np.eye(3)), [0.0, 5.0, 7.0], background=0.5)
        coupled = run_coupled(problem, 1, 0.1, RngStream(4), eta=[-1.0, 1.0, 1.0], eta_rekl=[1.0, 1.0, 1.0])
        assert coupled.data[coupled.index("normal")][0] == 0.0
        assert coupled.data[coupled.index("rekl_minus")][0] == 0.0
        assert coupled.data[coupled.index("rekl_plus")][0] == pytest.approx(0.1)

    def test_errors(self):
        problem = random_problem(12)
        with pytest.raises(DomainError):
            run_coupled(problem, 1, 0.0, RngStream(0))
        with pytest.raises(DomainError):
            run_coupled(problem, 1, 1e-3, RngStream(0), probes=("bogus",))
        with pytest.raises(KeyError):
            run_coupled(problem, 1, 1e-3, RngStream(0), probes=("normal",)).index("rademacher")
