import numpy as np
import pytest

from cfrcsim import validation as v


def test_check_array_2d_passes_and_converts():
    out = v.check_array_2d([[1, 2], [3, 4]], "field")
    assert out.shape == (2, 2)
    assert out.dtype == np.float64


def test_check_array_2d_rejects_wrong_rank():
    with pytest.raises(ValueError, match="field"):
        v.check_array_2d(np.zeros(3), "field")


def test_check_finite_rejects_nan_and_inf():
    with pytest.raises(ValueError, match="stress"):
        v.check_finite(np.array([1.0, np.nan]), "stress")
    with pytest.raises(ValueError, match="stress"):
        v.check_finite(np.array([np.inf]), "stress")


def test_check_unit_interval_tolerance():
    v.check_unit_interval(np.array([0.0, 1.0]), "dmg")
    v.check_unit_interval(np.array([-1e-9, 1.0 + 1e-9]), "dmg", atol=1e-6)
    with pytest.raises(ValueError, match="dmg"):
        v.check_unit_interval(np.array([1.1]), "dmg")


def test_check_positive_strict_and_nonstrict():
    v.check_positive(1.0, "dt")
    v.check_positive(0.0, "dt", strict=False)
    with pytest.raises(ValueError, match="dt"):
        v.check_positive(0.0, "dt")
    with pytest.raises(ValueError, match="dt"):
        v.check_positive(-1.0, "dt", strict=False)


def test_check_in_names_allowed_values():
    v.check_in("linear", "head", ("linear", "sigmoid"))
    with pytest.raises(ValueError, match="head"):
        v.check_in("relu", "head", ("linear", "sigmoid"))


def test_check_binary_rejects_intermediate_values():
    v.check_binary(np.array([0.0, 1.0, 1.0]), "mask")
    with pytest.raises(ValueError, match="mask"):
        v.check_binary(np.array([0.5]), "mask")
