"""Kernel distance: hand oracles, brute-force equivalence, drift response."""
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from evofa import autodiff as ad, mmd
from evofa.errors import ConfigError, ShapeError


def t(data, grad=False):
    return ad.Tensor(np.asarray(data, dtype=np.float64), requires_grad=grad)


SINGLE = mmd.KernelSpec.single(1.0)


# -- KernelSpec ----------------------------------------------------------------

def test_kernel_spec_normalizes_weights():
    spec = mmd.KernelSpec((1.0, 2.0), (1.0, 3.0))
    assert sum(spec.weights) == pytest.approx(1.0)
    assert spec.weights[1] == pytest.approx(0.75)


def test_kernel_spec_rejects_empty_and_nonpositive():
    with pytest.raises(ConfigError):
        mmd.KernelSpec((), ())
    with pytest.raises(ConfigError):
        mmd.KernelSpec((0.0,), (1.0,))
    with pytest.raises(ConfigError):
        mmd.KernelSpec((1.0,), (-1.0,))
    with pytest.raises(ConfigError):
        mmd.KernelSpec((1.0, 2.0), (1.0,))


def test_kernel_ladder_around_sigma():
    spec = mmd.KernelSpec.around(2.0)
    assert spec.bandwidths == (1.0, 2.0, 4.0)
    assert all(w == pytest.approx(1.0 / 3.0) for w in spec.weights)


# -- kernel_matrix -------------------------------------------------------------

def test_kernel_matrix_unit_diagonal():
    rng = np.random.default_rng(0)
    x = t(rng.normal(size=(6, 3)))
    spec = mmd.KernelSpec((0.5, 1.0, 3.0), (0.2, 0.3, 0.5))
    k = mmd.kernel_matrix(x, x, spec).data
    assert np.allclose(np.diag(k), 1.0)


def test_kernel_matrix_hand_value():
    k = mmd.kernel_matrix(t([[0.0]]), t([[1.0]]), SINGLE).data
    assert k[0, 0] == pytest.approx(np.exp(-0.5), abs=1e-9)
    assert k[0, 0] == pytest.approx(0.60653, abs=1e-5)


def test_kernel_matrix_symmetry():
    rng = np.random.default_rng(1)
    x = t(rng.normal(size=(5, 4)))
    y = t(rng.normal(size=(3, 4)))
    spec = mmd.KernelSpec.around(1.5)
    assert np.allclose(mmd.kernel_matrix(x, y, spec).data, mmd.kernel_matrix(y, x, spec).data.T)


def test_kernel_matrix_dim_mismatch_rejected():
    with pytest.raises(ShapeError):
        mmd.kernel_matrix(t(np.zeros((2, 3))), t(np.zeros((2, 4))), SINGLE)


# -- mmd2 ------------------------------------------------------------------------

def test_mmd2_identical_sets_is_zero():
    rng = np.random.default_rng(2)
    x = t(rng.normal(size=(7, 5)))
    assert abs(mmd.mmd2(x, x, mmd.KernelSpec.around(1.0)).item()) < 1e-12


def test_mmd2_hand_value():
    value = mmd.mmd2(t([[0.0]]), t([[1.0]]), SINGLE).item()
    assert value == pytest.approx(2.0 - 2.0 * np.exp(-0.5), abs=1e-9)
    assert value == pytest.approx(0.78694, abs=1e-5)


def test_mmd2_matches_brute_force():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(5, 3))
    y = rng.normal(size=(4, 3))
    spec = mmd.KernelSpec((0.7, 1.3), (0.4, 0.6))

    def k(a, b):
        d2 = np.sum((a - b) ** 2)
        return sum(w * np.exp(-d2 / (2 * s * s)) for s, w in zip(spec.bandwidths, spec.weights))

    kxx = np.mean([[k(a, b) for b in x] for a in x])
    kyy = np.mean([[k(a, b) for b in y] for a in y])
    kxy = np.mean([[k(a, b) for b in y] for a in x])
    expect = kxx + kyy - 2 * kxy
    assert mmd.mmd2(t(x), t(y), spec).item() == pytest.approx(expect, abs=1e-12)


def test_mmd2_empty_set_rejected():
    with pytest.raises(ShapeError):
        mmd.mmd2(t(np.zeros((0, 3))), t(np.zeros((4, 3))), SINGLE)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_mmd2_nonnegative(seed):
    rng = np.random.default_rng(seed)
    x = t(rng.normal(size=(rng.integers(1, 8), 3)))
    y = t(rng.normal(loc=rng.normal(), size=(rng.integers(1, 8), 3)))
    assert mmd.mmd2(x, y, mmd.KernelSpec.around(1.0)).item() >= 0.0


def test_mmd2_gradient_matches_finite_differences():
    rng = np.random.default_rng(4)
    x = t(rng.normal(size=(5, 3)), grad=True)
    y = t(rng.normal(loc=0.5, size=(4, 3)), grad=True)
    spec = mmd.KernelSpec.around(1.2)

    def f(_):
        return mmd.mmd2(x, y, spec)

    assert ad.finite_diff_check(f, [x, y], eps=1e-5) < 1e-4


def test_mmd2_monotone_in_mean_gap():
    rng = np.random.default_rng(5)
    base = rng.normal(size=(30, 4))
    target = rng.normal(size=(30, 4))
    spec = mmd.KernelSpec.around(np.sqrt(2.0 * 4))
    values = [mmd.mmd2(t(base + delta), t(target), spec).item() for delta in (0.0, 1.0, 2.0)]
    assert values[0] < values[1] < values[2]


# -- median heuristic ---------------------------------------------------------------

def test_median_heuristic_two_points():
    sigma = mmd.median_heuristic(np.array([[0.0, 0.0]]), np.array([[0.0, 3.0]]))
    assert sigma == pytest.approx(3.0)


def test_median_heuristic_scale_equivariant():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(6, 3))
    y = rng.normal(size=(5, 3))
    base = mmd.median_heuristic(x, y)
    scaled = mmd.median_heuristic(2.5 * x, 2.5 * y)
    assert scaled == pytest.approx(2.5 * base, rel=1e-12)


def test_median_heuristic_degenerate_falls_back():
    pts = np.ones((4, 2))
    with pytest.warns(UserWarning):
        sigma = mmd.median_heuristic(pts, pts)
    assert sigma == 1.0


def test_median_heuristic_needs_two_points():
    with pytest.raises(ShapeError):
        mmd.median_heuristic(np.zeros((1, 2)), np.zeros((0, 2)))


def test_default_spec_builds_ladder():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(8, 3))
    y = rng.normal(size=(8, 3))
    spec = mmd.default_spec(x, y)
    sigma = mmd.median_heuristic(x, y)
    assert spec.bandwidths == (sigma / 2.0, sigma, 2.0 * sigma)
