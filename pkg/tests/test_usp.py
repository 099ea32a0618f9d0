"""
Tests for uniform support partitioning
"""

import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

sys.path.insert(0, str(Path(__file__).parent.parent / "src"))

from usp_ebm.core.distributions import BoxDomain
from usp_ebm.core.energy import QuadraticEnergy
from usp_ebm.core.usp import (
    ParticleSet,
    constraint_violations,
    fused_round,
    init_particles,
    maximization_step,
    min_pairwise_distance,
    psusp_round,
    read_particles,
    repulsion_gradient,
    repulsion_step,
    sample_lambda_gamma,
    select_estimation_points,
    write_particles,
)
from usp_ebm.models import UspConfig

EPS = 0.1


def line(points, epsilon=EPS):
    domain = BoxDomain(np.array([-1.0]), np.array([1.0]))
    return ParticleSet(
        np.asarray(points, dtype=np.float64).reshape(-1, 1), epsilon, domain
    )


class TestParticleSet:
    """Validation of partition point sets"""

    def test_points_outside_domain_rejected(self):
        with pytest.raises(ValueError, match="inside the domain"):
            line([0.0, 1.5])

    def test_non_positive_epsilon_rejected(self):
        with pytest.raises(ValueError, match="epsilon"):
            line([0.0], epsilon=0.0)

    def test_separation_statistics(self):
        particles = line([0.0, 0.03, 0.1], epsilon=0.05)
        assert min_pairwise_distance(particles) == pytest.approx(0.03)
        assert constraint_violations(particles) == 1


class TestMaximizationStep:
    """Projected gradient steps on the log-density"""

    def test_closed_form_step(self):
        out = maximization_step(QuadraticEnergy(np.zeros(1)), line([1.0]), [0], 0.1, 1)
        assert_allclose(out.points, [[0.9]])

    def test_projection_clamps_to_domain(self):
        out = maximization_step(
            QuadraticEnergy(np.array([1.9])), line([0.9]), [0], 0.4, 1
        )
        assert_array_equal(out.points, [[1.0]])

    def test_only_selected_particles_move(self):
        particles = line([0.5, -0.5, 0.25])
        out = maximization_step(QuadraticEnergy(np.zeros(1)), particles, [1], 0.5, 2)
        assert_array_equal(out.points[[0, 2]], particles.points[[0, 2]])
        assert_allclose(out.points[1], [-0.5 * 0.5**2])

    @given(
        center=st.tuples(st.floats(-2.0, 2.0), st.floats(-2.0, 2.0)),
        scale=st.floats(0.1, 2.0),
        fraction=st.floats(0.01, 1.0),
        seed=st.integers(0, 2**32 - 1),
    )
    @settings(max_examples=30, deadline=None)
    def test_total_energy_never_increases(self, center, scale, fraction, seed):
        """Projected steps of size <= s^2/2 on a quadratic never raise sum E"""
        model = QuadraticEnergy(np.array(center), scale)
        domain = BoxDomain(np.full(2, -1.0), np.full(2, 1.0))
        rng = np.random.default_rng(seed)
        particles = ParticleSet(rng.uniform(-1.0, 1.0, size=(100, 2)), 0.05, domain)
        step = fraction * scale**2 / 2.0
        previous = model.energy(particles.points).sum()
        for _ in range(50):
            particles = maximization_step(model, particles, np.arange(100), step)
            total = model.energy(particles.points).sum()
            assert total <= previous + 1e-12
            previous = total

    def test_out_of_range_indices_rejected(self):
        with pytest.raises(ValueError, match="indices"):
            maximization_step(QuadraticEnergy(np.zeros(1)), line([0.0]), [3], 0.1)


class TestRepulsion:
    """Gradient of sum_j min(||u_i - u_j||, epsilon)"""

    def test_separated_pair_has_zero_gradient(self):
        particles = line([0.0, EPS])
        assert_array_equal(repulsion_gradient(particles, 0, [0, 1]), [0.0])

    def test_close_pair_unit_direction(self):
        particles = line([0.0, EPS / 2])
        assert_allclose(repulsion_gradient(particles, 0, [0, 1]), [-1.0])

    def test_symmetric_neighbors_cancel(self):
        particles = line([0.0, EPS / 3, 2 * EPS / 3])
        assert_allclose(repulsion_gradient(particles, 1, [0, 1, 2]), [0.0], atol=1e-15)

    def test_coincident_pair_needs_stream(self):
        particles = line([0.2, 0.2])
        with pytest.raises(ValueError, match="random stream"):
            repulsion_gradient(particles, 0, [1])
        direction = repulsion_gradient(particles, 0, [1], rng=np.random.default_rng(0))
        assert_allclose(np.abs(direction), [1.0])

    def test_separated_set_unchanged(self):
        particles = line([-0.5, 0.0, 0.5])
        out = repulsion_step(particles, [0, 1, 2], [], 0.01)
        assert_array_equal(out.points, particles.points)

    def test_close_pair_moves_apart(self):
        gamma = 0.01
        out = repulsion_step(line([0.0, EPS / 2]), [0, 1], [], gamma)
        assert_allclose(out.points[:, 0], [-gamma, EPS / 2 + gamma])

    def test_gamma_anchor_is_read_only(self):
        particles = line([0.3, 0.3, -0.8])
        out = repulsion_step(particles, [0], [1], 0.01, rng=np.random.default_rng(4))
        assert out.points[1, 0] == particles.points[1, 0]
        assert out.points[2, 0] == particles.points[2, 0]
        assert abs(out.points[0, 0] - 0.3) == pytest.approx(0.01)

    def test_overlapping_lambda_gamma_rejected(self):
        with pytest.raises(ValueError, match="disjoint"):
            repulsion_step(line([0.0, 0.5]), [0, 1], [1], 0.01)

    def test_repulsion_spreads_a_cluster(self):
        domain = BoxDomain(np.zeros(2), np.full(2, 2.0))
        rng = np.random.default_rng(8)
        particles = ParticleSet(rng.uniform(0.9, 1.1, size=(64, 2)), EPS, domain)
        before = constraint_violations(particles)
        out = repulsion_step(particles, np.arange(64), [], EPS / 10, count=300, rng=rng)
        assert constraint_violations(out) <= 0.05 * before
        assert min_pairwise_distance(out) > EPS / 2

    def test_collapsed_ball_recovers_separation(self):
        """64 points in an eps/10 ball reach 0.9 eps within 10 n steps of eps/10"""
        n = 64
        side = 4 * EPS * np.sqrt(n)
        domain = BoxDomain(np.zeros(2), np.full(2, side))
        rng = np.random.default_rng(10)
        radius = (EPS / 10) * np.sqrt(rng.uniform(size=n))
        angle = rng.uniform(0.0, 2 * np.pi, size=n)
        points = side / 2 + np.column_stack(
            [radius * np.cos(angle), radius * np.sin(angle)]
        )
        particles = ParticleSet(points, EPS, domain)
        for _ in range(10 * n):
            particles = repulsion_step(particles, np.arange(n), [], EPS / 10, rng=rng)
            if min_pairwise_distance(particles) >= 0.9 * EPS:
                break
        assert min_pairwise_distance(particles) >= 0.9 * EPS
        assert np.all(domain.contains(particles.points))

    def test_neighbor_index_matches_brute_force(self):
        domain = BoxDomain(np.zeros(2), np.ones(2))
        rng = np.random.default_rng(9)
        particles = ParticleSet(rng.uniform(size=(200, 2)), EPS, domain)
        lam, gamma = np.arange(0, 100), np.arange(100, 200)
        brute = repulsion_step(particles, lam, gamma, 0.01, count=3)
        tree = repulsion_step(particles, lam, gamma, 0.01, count=3, neighbor_index=True)
        assert_allclose(tree.points, brute.points, atol=1e-12)


class TestRounds:
    """Persistent stochastic rounds"""

    def config(self, n, **overrides):
        values = dict(
            n_particles=n, lambda_size=n, n_s=n, N=1, gamma_size=0,
            epsilon=EPS, step_max=0.01, step_rep=0.005,
        )
        values.update(overrides)
        return UspConfig(**values)

    def test_zero_rounds_is_identity(self):
        particles = line([0.0, 0.01, 0.5])
        config = self.config(3, N=0)
        model = QuadraticEnergy(np.zeros(1))
        out = psusp_round(model, particles, config, np.random.default_rng(0))
        assert_array_equal(out.points, particles.points)

    def test_full_lambda_reduces_to_alternation(self):
        model = QuadraticEnergy(np.array([0.2]))
        particles = line([0.0, 0.04, 0.5, -0.6])
        out = psusp_round(
            model, particles, self.config(4, n_m=2, n_r=3), np.random.default_rng(0)
        )
        manual = maximization_step(model, particles, np.arange(4), 0.01, 2)
        manual = repulsion_step(manual, np.arange(4), [], 0.005, 3)
        assert_array_equal(out.points, manual.points)

    def test_fused_round_splits_violators(self):
        model = QuadraticEnergy(np.array([0.3]))
        particles = line([0.0, 0.01, 0.5], epsilon=0.05)
        out = fused_round(model, particles, [0, 1, 2], [], step_max=0.1, step_rep=0.02)
        assert_allclose(out.points[:, 0], [-0.02, 0.03, 0.5 - 0.1 * 0.2])

    def test_fused_psusp_keeps_particles_in_domain(self):
        model = QuadraticEnergy(np.array([2.0]))
        rng = np.random.default_rng(5)
        particles = line(rng.uniform(-1, 1, size=50))
        config = self.config(
            50, lambda_size=10, gamma_size=None, N=20, fused=True, step_max=0.5
        )
        out = psusp_round(model, particles, config, rng)
        assert np.all(out.points <= 1.0) and np.all(out.points >= -1.0)

    def test_lambda_gamma_disjoint_and_sorted(self, rng):
        lam, gamma = sample_lambda_gamma(100, 20, 30, rng)
        assert lam.size == 20 and gamma.size == 30
        assert np.intersect1d(lam, gamma).size == 0
        assert np.all(np.diff(lam) > 0) and np.all(np.diff(gamma) > 0)

    def test_gamma_capped_by_free_particles(self, rng):
        lam, gamma = sample_lambda_gamma(10, 8, 8, rng)
        assert gamma.size == 2

    def test_default_gamma_size(self):
        small = UspConfig(n_particles=100, lambda_size=30, n_s=100)
        large = UspConfig(n_particles=100, lambda_size=80, n_s=100)
        assert small.resolved_gamma_size() == 30
        assert large.resolved_gamma_size() == 20


class TestEstimationPoints:
    """Uniform subsets for the SNIS estimate"""

    def test_full_set(self, rng):
        assert_array_equal(select_estimation_points(10, 10, rng), np.arange(10))

    def test_deterministic(self):
        a = select_estimation_points(100, 10, np.random.default_rng(3))
        b = select_estimation_points(100, 10, np.random.default_rng(3))
        assert_array_equal(a, b)

    def test_uniform_frequencies(self, rng):
        draws = np.array(
            [select_estimation_points(4, 1, rng)[0] for _ in range(100_000)]
        )
        freqs = np.bincount(draws, minlength=4) / draws.size
        assert np.all((freqs >= 0.24) & (freqs <= 0.26))

    def test_invalid_size_rejected(self, rng):
        with pytest.raises(ValueError):
            select_estimation_points(4, 5, rng)


class TestInitAndSnapshots:
    """Particle initialization and CSV snapshots"""

    def test_rightmost_mode_init(self, two_gaussians, unit_interval, rng):
        particles = init_particles(
            "rightmost-mode", 500, EPS, unit_interval, rng, target=two_gaussians
        )
        assert abs(particles.points.mean() - 0.5) < 0.01

    def test_unknown_init_rejected(self, unit_interval, rng):
        with pytest.raises(ValueError, match="Unknown particle initialization"):
            init_particles("grid", 10, EPS, unit_interval, rng)

    def test_snapshot_round_trip(self, tmp_path, square, rng):
        particles = init_particles("proposal", 20, EPS, square, rng)
        path = write_particles(tmp_path / "particles.csv", particles, np.arange(20.0))
        restored = read_particles(path, EPS, square)
        assert_array_equal(restored.points, particles.points)


if __name__ == "__main__":
    pytest.main([__file__])
