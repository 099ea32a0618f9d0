"""
Tests for energy models and their analytic gradients
"""

import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

sys.path.insert(0, str(Path(__file__).parent.parent / "src"))

from usp_ebm.core.energy import (
    GridEnergy,
    MlpEnergy,
    ParamVector,
    QuadraticEnergy,
    energy,
    grad_theta,
    grad_x,
    load_checkpoint,
    read_checkpoint,
    save_checkpoint,
)


def central_difference(fn, x, step=1e-5):
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros_like(x)
    for i in range(x.size):
        up, down = x.copy(), x.copy()
        up[i] += step
        down[i] -= step
        out[i] = (fn(up) - fn(down)) / (2 * step)
    return out


def relative_error(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-8)


def reference_mlp_energy(model: MlpEnergy, x: np.ndarray) -> float:
    """Straight-line forward pass, one unit at a time"""
    a = list(x)
    for l in range(model.n_layers):
        W = model.params.segment(f"W{l}")
        b = model.params.segment(f"b{l}")
        z = []
        for row in range(W.shape[0]):
            total = b[row]
            for col in range(W.shape[1]):
                total += W[row, col] * a[col]
            z.append(total)
        if l < model.n_layers - 1:
            z = [v if v >= 0 else model.slope * v for v in z]
        a = z
    if model.head == "scalar":
        return a[0]
    return sum((xi - oi) ** 2 for xi, oi in zip(x, a))


def far_from_kinks(model: MlpEnergy, x: np.ndarray, margin: float = 1e-3) -> bool:
    pre, _ = model._forward(x.reshape(1, -1))
    return all(np.min(np.abs(z)) > margin for z in pre)


def random_fixture(family: str, rng: np.random.Generator):
    """(model, x) for a random model of `family`, or None if x sits on a kink or knot"""
    if family == "quadratic":
        dim = int(rng.integers(1, 4))
        model = QuadraticEnergy(rng.uniform(-0.5, 0.5, size=dim), rng.uniform(0.3, 2.0))
        x = rng.uniform(-1.0, 1.0, size=dim)
        return (model, x) if np.linalg.norm(x - model.center) > 1e-2 else None
    if family == "grid":
        model = GridEnergy(-1.0, 1.0, rng.normal(size=int(rng.integers(3, 33))))
        x = rng.uniform(-1.0, 1.0, size=1)
        spacing = 2.0 / (model.values.size - 1)
        offset = (x[0] + 1.0) / spacing
        return (model, x) if abs(offset - round(offset)) * spacing > 1e-3 else None
    dim = int(rng.integers(1, 3))
    head = "scalar" if rng.uniform() < 0.5 else "reconstruction"
    model = MlpEnergy.initialize(dim, [5, 4], rng, head=head)
    x = rng.uniform(-1.0, 1.0, size=dim)
    return (model, x) if far_from_kinks(model, x) else None


def random_fixtures(family: str, count: int, seed: int):
    rng = np.random.default_rng(seed)
    fixtures = []
    while len(fixtures) < count:
        fixture = random_fixture(family, rng)
        if fixture is not None:
            fixtures.append(fixture)
    return fixtures


class TestParamVector:
    """Flat parameter vectors with named layouts"""

    def test_segments_round_trip(self):
        params = ParamVector.from_segments(
            {"a": np.arange(6.0).reshape(2, 3), "b": np.ones(2)}
        )
        assert len(params) == 8
        assert_array_equal(params.segment("a"), np.arange(6.0).reshape(2, 3))
        assert_array_equal(params.segment("b"), np.ones(2))

    def test_layout_mismatch_rejected(self):
        a = ParamVector.from_segments({"a": np.zeros(3)})
        b = ParamVector.from_segments({"b": np.zeros(3)})
        with pytest.raises(ValueError, match="Layout mismatch"):
            a - b

    def test_non_finite_model_parameters_rejected(self):
        with pytest.raises(ValueError):
            QuadraticEnergy(np.array([np.nan]))


class TestQuadraticEnergy:
    """E(x) = ||x - c||^2 / (2 s^2)"""

    def test_minimum_at_center(self):
        assert energy(QuadraticEnergy(np.zeros(1)), [0.0]) == 0.0

    def test_grad_x_is_displacement(self):
        model = QuadraticEnergy(np.zeros(2), 1.0)
        assert_allclose(grad_x(model, [2.0, -1.0]), [2.0, -1.0])

    def test_grad_theta_analytic(self):
        model = QuadraticEnergy(np.array([0.5, -0.5]), 2.0)
        x = np.array([1.5, 0.5])
        assert_allclose(grad_theta(model, x).values, -(x - model.center) / 4.0)

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(ValueError, match="Dimension mismatch"):
            energy(QuadraticEnergy(np.zeros(2)), [1.0, 2.0, 3.0])


class TestGridEnergy:
    """Piecewise-linear knot energies"""

    @pytest.fixture
    def model(self):
        return GridEnergy(-1.0, 1.0, np.array([0.0, 2.0, 1.0, 3.0, -1.0]))

    def test_energy_at_knots(self, model):
        for k, x in enumerate(model.knots):
            assert energy(model, [x]) == model.values[k]

    def test_grad_x_between_knots(self, model):
        # knots at -1, -0.5, 0, 0.5, 1
        assert_allclose(grad_x(model, [-0.2]), [(1.0 - 2.0) / 0.5])

    def test_grad_theta_one_hot_at_knot(self, model):
        g = grad_theta(model, [0.0]).values
        assert_array_equal(g, [0.0, 0.0, 1.0, 0.0, 0.0])

    def test_grad_theta_interpolates(self, model):
        g = grad_theta(model, [-0.875]).values
        assert_allclose(g, [0.75, 0.25, 0.0, 0.0, 0.0])

    @given(
        shift=st.floats(-100, 100, allow_nan=False),
        x=st.floats(-1.2, 1.2, allow_nan=False),
    )
    @settings(max_examples=50, deadline=None)
    def test_gradient_shift_invariance(self, shift, x):
        values = np.array([0.0, 2.0, 1.0, 3.0, -1.0])
        a = GridEnergy(-1.0, 1.0, values)
        b = GridEnergy(-1.0, 1.0, values + shift)
        assert_allclose(grad_x(a, [x]), grad_x(b, [x]), atol=1e-9)


class TestMlpEnergy:
    """Leaky-ReLU MLP energies with explicit backprop"""

    @pytest.mark.parametrize(
        "head,dim", [("scalar", 2), ("reconstruction", 1), ("reconstruction", 2)]
    )
    def test_energy_matches_reference_forward(self, head, dim):
        rng = np.random.default_rng(0)
        model = MlpEnergy.initialize(dim, [6, 5], rng, head=head)
        x = rng.normal(size=dim)
        assert abs(energy(model, x) - reference_mlp_energy(model, x)) < 1e-12

    def test_small_parameter_step_lowers_energy(self):
        """theta - lr * grad_theta E(x) lowers E(x) off the kinks"""
        for model, x in random_fixtures("mlp", 100, seed=7):
            gradient = grad_theta(model, x).values
            if np.linalg.norm(gradient) < 1e-2:
                continue
            lr = 1e-6 / max(1.0, np.linalg.norm(gradient))
            stepped = model.with_params(
                model.params.with_values(model.params.values - lr * gradient)
            )
            assert energy(stepped, x) < energy(model, x)

    def test_weighted_grad_theta_is_linear(self, rng):
        model = MlpEnergy.initialize(2, [8], rng)
        points = rng.normal(size=(5, 2))
        coeffs = rng.uniform(size=5)
        batched = model.weighted_grad_theta(points, coeffs).values
        summed = sum(c * grad_theta(model, p).values for c, p in zip(coeffs, points))
        assert_allclose(batched, summed, rtol=1e-12, atol=1e-14)

    def test_repeated_calls_are_bit_identical(self, rng):
        model = MlpEnergy.initialize(2, [8, 8], rng)
        x = rng.normal(size=(10, 2))
        assert_array_equal(model.energy(x), model.energy(x))
        assert_array_equal(model.grad_x(x), model.grad_x(x))

    def test_invalid_slope_rejected(self, rng):
        with pytest.raises(ValueError):
            MlpEnergy.initialize(1, [4], rng, slope=0.0)


class TestGradientSweep:
    """Analytic gradients against central differences for every family"""

    @pytest.mark.parametrize("family", ["quadratic", "grid", "mlp"])
    def test_gradients_match_finite_differences(self, family):
        for model, x in random_fixtures(family, 100, seed=1):
            gx = grad_x(model, x)
            fd_x = central_difference(lambda v: energy(model, v), x)
            assert relative_error(gx, fd_x) < 1e-4

            gt = grad_theta(model, x).values
            base = model.params
            fd_t = central_difference(
                lambda v: energy(model.with_params(base.with_values(v)), x), base.values
            )
            assert relative_error(gt, fd_t) < 1e-4


class TestCheckpoints:
    """JSON checkpoints {family, hyperparams, params}"""

    def test_round_trip_through_file(self, tmp_path, rng):
        model = MlpEnergy.initialize(2, [7, 3], rng, head="reconstruction")
        path = save_checkpoint(model, tmp_path / "model.json")
        restored = read_checkpoint(path)
        assert restored.hyperparams() == model.hyperparams()
        assert_array_equal(restored.params.values, model.params.values)

    def test_grid_round_trip(self):
        model = GridEnergy(-2.0, 3.0, np.linspace(0, 1, 7))
        restored = load_checkpoint(model.to_checkpoint())
        assert_array_equal(restored.params.values, model.params.values)
        assert restored.hyperparams() == model.hyperparams()

    def test_unknown_family_rejected(self):
        with pytest.raises(ValueError, match="Unknown energy family"):
            load_checkpoint({"family": "conv", "hyperparams": {}, "params": []})


if __name__ == "__main__":
    pytest.main([__file__])
