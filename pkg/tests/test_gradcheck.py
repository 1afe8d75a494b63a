import numpy as np
import pytest

from lgc3d.gradcheck import finite_difference_check
from lgc3d.gradcheck import relative_error
from lgc3d.tensor import Tensor
from lgc3d.tensor import parameter
from lgc3d.utils import ShapeError


def test_square_passes():
    """Test that the gradient of a sum of squares matches central differences."""
    x = parameter(np.array([1.5, -2.0, 0.25]))
    report = finite_difference_check(lambda: (x * x).sum(), {"x": x})
    assert report.passed
    assert report.parameters[0].elements == 3
    np.testing.assert_array_equal(x.data, [1.5, -2.0, 0.25])


def test_constant_function():
    """Test that a function ignoring its parameter has exactly zero error."""
    x = parameter(np.array([1.0, 2.0]))
    y = parameter(np.array([3.0]))
    report = finite_difference_check(lambda: (y * 2.0).sum(), {"x": x, "y": y})
    assert report.max_rel_error < 1e-8
    assert report.parameters[0].max_abs_error == 0.0


def test_wrong_gradient_fails():
    """Test that a function hiding half of its dependency on the parameter is caught."""
    x = parameter(np.array([1.0, -3.0]))
    report = finite_difference_check(lambda: (x * Tensor(x.data.copy())).sum(), {"x": x})
    assert not report.passed
    assert report.max_rel_error == pytest.approx(0.5)


def test_non_scalar_function():
    """Test that only scalar functions can be checked."""
    x = parameter(np.array([1.0, 2.0]))
    with pytest.raises(ShapeError):
        finite_difference_check(lambda: x * x, {"x": x})


def test_relative_error_floor():
    """Test that tiny gradients are compared absolutely."""
    errors = relative_error(np.array([1e-6, 2.0]), np.array([0.0, 1.0]))
    assert errors[0] == pytest.approx(1e-3)
    assert errors[1] == pytest.approx(0.5)
