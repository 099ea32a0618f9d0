"""
Tests for modified Langevin dynamics and the replay buffer
"""

import math
import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

sys.path.insert(0, str(Path(__file__).parent.parent / "src"))

from usp_ebm.core.distributions import BoxDomain, Proposal
from usp_ebm.core.energy import MlpEnergy, QuadraticEnergy
from usp_ebm.core.sampler import (
    ChainBatch,
    ReplayBuffer,
    buffer_draw_init,
    buffer_push,
    lmc_step,
    run_srlmc,
    tempered_variance,
    write_chain_trace,
)
from usp_ebm.models import LmcConfig
from usp_ebm.utils.io import read_numeric_csv


class TestLmcStep:
    """Single modified Langevin updates"""

    def test_update_rule_is_exact(self):
        model = MlpEnergy.initialize(2, [8, 8], np.random.default_rng(3))
        x = np.random.default_rng(4).normal(size=(32, 2))
        alpha, beta = 0.01, 0.002
        out = lmc_step(
            model, ChainBatch.from_positions(x), alpha, beta, np.random.default_rng(5)
        )
        noise = np.random.default_rng(5).standard_normal(x.shape)
        expected = x - (alpha / 2.0) * model.grad_x(x) + math.sqrt(beta) * noise
        assert_array_equal(out.positions, expected)

    @given(eta=st.floats(1e-6, 1.0), seed=st.integers(0, 2**32 - 1))
    @settings(max_examples=50, deadline=None)
    def test_equal_step_and_noise_is_standard_langevin(self, eta, seed):
        """alpha = beta = eta gives x - (eta/2) grad E + sqrt(eta) xi bit for bit"""
        model = MlpEnergy.initialize(2, [8], np.random.default_rng(3))
        x = np.random.default_rng(seed).uniform(-1.0, 1.0, size=(16, 2))
        out = lmc_step(
            model, ChainBatch.from_positions(x), eta, eta, np.random.default_rng(seed)
        )
        xi = np.random.default_rng(seed).standard_normal(x.shape)
        assert_array_equal(
            out.positions, x - (eta / 2.0) * model.grad_x(x) + math.sqrt(eta) * xi
        )

    def test_noiseless_gradient_step(self, rng):
        batch = ChainBatch.from_positions([[2.0]])
        out = lmc_step(QuadraticEnergy(np.zeros(1)), batch, 1.0, 0.0, rng)
        assert_array_equal(out.positions, [[1.0]])

    def test_projection_onto_domain(self, rng, unit_interval):
        batch = ChainBatch.from_positions([[0.9], [-0.9]])
        out = lmc_step(
            QuadraticEnergy(np.array([5.0])), batch, 1.0, 0.0, rng, domain=unit_interval
        )
        assert_array_equal(out.positions, [[1.0], [1.0]])

    def test_non_finite_chain_flagged_and_frozen(self, rng):
        batch = ChainBatch.from_positions([[np.inf], [1.0]])
        with np.errstate(invalid="ignore"):
            out = lmc_step(QuadraticEnergy(np.zeros(1)), batch, 0.1, 0.01, rng)
        assert_array_equal(out.diverged, [True, False])
        assert out.positions[0, 0] == np.inf
        assert np.isfinite(out.positions[1, 0])
        assert_array_equal(out.healthy_positions(), out.positions[1:])

    def test_diverged_chains_stay_frozen(self, rng):
        batch = ChainBatch.from_positions([[np.inf], [1.0]])
        with np.errstate(invalid="ignore"):
            once = lmc_step(QuadraticEnergy(np.zeros(1)), batch, 0.1, 0.01, rng)
            twice = lmc_step(QuadraticEnergy(np.zeros(1)), once, 0.1, 0.01, rng)
        assert twice.n_diverged == 1
        assert twice.positions[0, 0] == np.inf

    def test_gradient_clipping_bounds_the_drift(self, rng):
        batch = ChainBatch.from_positions([[100.0], [-50.0]])
        out = lmc_step(
            QuadraticEnergy(np.zeros(1)), batch, 1.0, 0.0, rng, grad_clip=2.0
        )
        assert_allclose(out.positions[:, 0], [99.0, -49.0])

    def test_invalid_step_sizes_rejected(self, rng):
        batch = ChainBatch.from_positions([[0.0]])
        with pytest.raises(ValueError, match="alpha"):
            lmc_step(QuadraticEnergy(np.zeros(1)), batch, 0.0, 0.1, rng)
        with pytest.raises(ValueError, match="beta"):
            lmc_step(QuadraticEnergy(np.zeros(1)), batch, 0.1, -0.1, rng)


class TestRunSrlmc:
    """T-step chains"""

    def test_single_noiseless_step(self, rng):
        config = LmcConfig(T=1, alpha=0.5, beta=0.0)
        init = ChainBatch.from_positions([[2.0], [-4.0]])
        result = run_srlmc(QuadraticEnergy(np.zeros(1)), init, config, rng)
        assert_allclose(result.batch.positions[:, 0], [1.5, -3.0])
        assert_allclose(result.displacement, [0.5, 1.0])

    def test_noiseless_chain_contracts_geometrically(self, rng):
        config = LmcConfig(T=10, alpha=0.2, beta=0.0)
        init = ChainBatch.from_positions([[1.0]])
        result = run_srlmc(QuadraticEnergy(np.zeros(1)), init, config, rng)
        assert_allclose(result.batch.positions[0, 0], 0.9**10, rtol=1e-12)

    def test_identical_seeds_are_bit_identical(self):
        model = MlpEnergy.initialize(1, [16, 16], np.random.default_rng(0))
        config = LmcConfig(T=20, alpha=0.01, beta=0.001)
        init = ChainBatch.from_positions(np.linspace(-1, 1, 50))
        a = run_srlmc(model, init, config, np.random.default_rng(11))
        b = run_srlmc(model, init, config, np.random.default_rng(11))
        assert_array_equal(a.batch.positions, b.batch.positions)

    def test_step_schedules(self, rng):
        config = LmcConfig(T=2, alpha=[1.0, 0.5], beta=[0.0, 0.0])
        init = ChainBatch.from_positions([[4.0]])
        result = run_srlmc(QuadraticEnergy(np.zeros(1)), init, config, rng)
        assert_allclose(result.batch.positions[0, 0], 4.0 * 0.5 * 0.75)

    def test_trace_csv(self, tmp_path, rng):
        config = LmcConfig(T=3, alpha=0.1, beta=0.01)
        init = ChainBatch.from_positions(np.zeros((4, 2)))
        result = run_srlmc(
            QuadraticEnergy(np.zeros(2)), init, config, rng, record_trace=True
        )
        assert len(result.trace) == 4
        header, rows = read_numeric_csv(
            write_chain_trace(tmp_path / "chains.csv", result.trace, init.stream_ids)
        )
        assert header == ["chain_id", "t", "x0", "x1"]
        assert rows.shape == (16, 4)


class TestTemperedVariance:
    """Long-run variance of modified Langevin chains matches 1/rho"""

    def test_rho_ten(self):
        report = tempered_variance(10.0, 0.001, np.random.default_rng(21))
        assert report["expected"] == pytest.approx(0.1)
        assert report["steps"] == 3000
        assert report["stderr"] < 0.01
        assert report["relative_error"] < 0.05

    def test_step_count_is_capped(self):
        report = tempered_variance(
            0.5, 1e-6, np.random.default_rng(0), n_chains=8, max_steps=100
        )
        assert report["steps"] == 100
        assert np.isfinite(report["stderr"])


class TestReplayBuffer:
    """FIFO replay buffer"""

    def test_push_into_empty(self):
        buffer = buffer_push(ReplayBuffer(100, 1), np.arange(10.0))
        assert len(buffer) == 10

    def test_overflow_evicts_oldest(self):
        buffer = ReplayBuffer(8, 1)
        buffer_push(buffer, np.arange(5.0))
        buffer_push(buffer, np.arange(5.0, 11.0))
        assert len(buffer) == 8
        assert_array_equal(buffer.contents()[:, 0], np.arange(3.0, 11.0))

    @given(st.lists(st.integers(min_value=1, max_value=25), min_size=1, max_size=20))
    @settings(max_examples=50, deadline=None)
    def test_matches_list_oracle(self, chunk_sizes):
        buffer = ReplayBuffer(16, 1)
        oracle = []
        counter = 0
        for size in chunk_sizes:
            chunk = np.arange(counter, counter + size, dtype=np.float64)
            counter += size
            buffer.push(chunk)
            oracle.extend(chunk.tolist())
            oracle = oracle[-16:]
            assert_array_equal(buffer.contents()[:, 0], oracle)

    def test_diverged_chains_not_stored(self):
        batch = ChainBatch.from_positions([[0.1], [0.2]])
        batch = ChainBatch(batch.positions, batch.stream_ids, np.array([True, False]))
        buffer = buffer_push(ReplayBuffer(10, 1), batch)
        assert_array_equal(buffer.contents(), [[0.2]])

    def test_empty_buffer_draws_from_proposal(self, rng):
        batch = buffer_draw_init(
            ReplayBuffer(10, 1, 0.0), Proposal.subinterval(10, 11), 50, rng
        )
        assert np.all(batch.positions >= 10)

    @pytest.mark.parametrize("rate,expected", [(1.0, 1.0), (0.0, 0.0)])
    def test_reinit_boundaries(self, rng, rate, expected):
        buffer = buffer_push(ReplayBuffer(100, 1, rate), np.zeros(100))
        batch = buffer_draw_init(buffer, Proposal.subinterval(10, 11), 1000, rng)
        assert np.mean(batch.positions >= 10) == expected

    def test_reinit_fraction(self, rng):
        buffer = buffer_push(ReplayBuffer(1000, 1, 0.05), np.zeros(1000))
        batch = buffer_draw_init(buffer, Proposal.subinterval(10, 11), 100_000, rng)
        assert 0.045 <= np.mean(batch.positions >= 10) <= 0.055

    def test_invalid_buffer_settings(self):
        with pytest.raises(ValueError):
            ReplayBuffer(0, 1)
        with pytest.raises(ValueError):
            ReplayBuffer(10, 1, 1.5)


if __name__ == "__main__":
    pytest.main([__file__])
