"""Tests for AdamW and the cosine schedule."""

import numpy as np
import pytest

from tri_branch_fusion.errors import (
    ConfigurationError,
    ContractError,
    DimensionError,
)
from tri_branch_fusion.layers import Module
from tri_branch_fusion.optim import (
    AdamW,
    CosineSchedule,
    OptimizerState,
    optimizer_step,
)
from tri_branch_fusion.tensor import Parameter, backward

pytestmark = pytest.mark.usefixtures("float64")


class Quadratic(Module):
    def __init__(self):
        self.x = Parameter(np.array([0.0, 10.0]))
        self.unused = Parameter(np.array([1.0]))

    def forward(self):
        return ((self.x - 3.0) ** 2).sum()


class TestCosineSchedule:
    """Test cases for CosineSchedule."""

    def test_endpoints_and_midpoint(self):
        """Test lr_max at 0, lr_min at T and the mean halfway."""
        schedule = CosineSchedule(10, lr_max=1e-3, lr_min=1e-4)
        assert schedule.lr(0) == pytest.approx(1e-3)
        assert schedule.lr(10) == pytest.approx(1e-4)
        assert schedule.lr(5) == pytest.approx(5.5e-4)

    def test_non_increasing(self):
        """Test that the rate never rises within the schedule."""
        schedule = CosineSchedule(50)
        rates = [schedule.lr(t) for t in range(51)]
        assert all(a >= b for a, b in zip(rates, rates[1:]))

    def test_clamped_outside_range(self):
        """Test that steps past T keep lr_min."""
        schedule = CosineSchedule(4, lr_max=1.0, lr_min=0.5)
        assert schedule.lr(9) == pytest.approx(0.5)

    def test_invalid(self):
        """Test that inverted bounds or zero steps are rejected."""
        with pytest.raises(ConfigurationError, match="lr_min <= lr_max"):
            CosineSchedule(10, lr_max=1e-5, lr_min=1e-4)
        with pytest.raises(ConfigurationError, match="total_steps"):
            CosineSchedule(0)


class TestOptimizerStep:
    """Test cases for the functional AdamW update."""

    def setup_method(self):
        """Set up test fixtures."""
        self.state = OptimizerState(
            schedule=CosineSchedule(4, lr_max=0.1, lr_min=0.1),
            weight_decay=0.5,
        )

    def test_first_step_is_signed_lr_after_decay(self):
        """Test that the bias-corrected first step is lr * sign(g)."""
        params = {"w": np.array([1.0, -2.0, 0.5])}
        grads = {"w": np.array([0.3, -4.0, 2.0])}
        optimizer_step(self.state, params, grads)
        decayed = np.array([1.0, -2.0, 0.5]) * (1.0 - 0.1 * 0.5)
        expected = decayed - 0.1 * np.sign(grads["w"])
        np.testing.assert_allclose(params["w"], expected, atol=1e-7)
        assert self.state.step == 1
        assert self.state.param_steps == {"w": 1}

    def test_none_gradient_left_untouched(self):
        """Test that parameters without gradient skip decay and moments."""
        params = {"w": np.array([1.0]), "frozen": np.array([2.0])}
        optimizer_step(
            self.state, params, {"w": np.array([1.0]), "frozen": None}
        )
        assert params["frozen"][0] == 2.0
        assert "frozen" not in self.state.first_moments

    def test_per_parameter_bias_correction(self):
        """Test that a late parameter gets its own step counter."""
        params = {"a": np.array([0.0]), "b": np.array([0.0])}
        optimizer_step(self.state, params, {"a": np.array([1.0])})
        optimizer_step(
            self.state, params, {"a": np.array([1.0]), "b": np.array([1.0])}
        )
        assert self.state.param_steps == {"a": 2, "b": 1}
        assert params["b"][0] == pytest.approx(-0.1, abs=1e-7)

    def test_beyond_schedule(self):
        """Test that stepping past the schedule is a contract error."""
        params = {"w": np.zeros(1)}
        for _ in range(4):
            optimizer_step(self.state, params, {"w": np.ones(1)})
        with pytest.raises(ContractError, match="beyond schedule"):
            optimizer_step(self.state, params, {"w": np.ones(1)})

    def test_gradient_shape_mismatch(self):
        """Test that a gradient of the wrong shape is rejected."""
        with pytest.raises(DimensionError, match="Gradient shape"):
            optimizer_step(self.state, {"w": np.zeros(2)}, {"w": np.zeros(3)})


class TestAdamW:
    """Test cases for the module-bound optimizer."""

    def test_minimizes_quadratic(self):
        """Test convergence on a separable quadratic."""
        module = Quadratic()
        optimizer = AdamW(
            module,
            CosineSchedule(400, lr_max=0.2, lr_min=0.01),
            weight_decay=0.0,
        )
        for _ in range(400):
            optimizer.zero_grad()
            backward(module(), module.parameters())
            optimizer.step()
        np.testing.assert_allclose(module.x.data, [3.0, 3.0], atol=0.05)

    def test_step_returns_scheduled_rate(self):
        """Test that step() reports the rate it applied."""
        module = Quadratic()
        schedule = CosineSchedule(2, lr_max=0.4, lr_min=0.2)
        optimizer = AdamW(module, schedule)
        backward(module(), module.parameters())
        assert optimizer.step() == pytest.approx(0.4)
        assert optimizer.state.current_lr == pytest.approx(0.3)

    def test_zero_gradient_parameter_still_decays(self):
        """Test that a listed parameter with zero gradient only decays."""
        module = Quadratic()
        optimizer = AdamW(
            module,
            CosineSchedule(1, lr_max=0.1, lr_min=0.1),
            weight_decay=0.5,
        )
        backward(module(), module.parameters())
        optimizer.step()
        assert module.unused.data[0] == pytest.approx(0.95)
