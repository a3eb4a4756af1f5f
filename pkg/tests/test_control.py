import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import gamma as gamma_fn

from kscontrol.control import (ControlField, ControlSpaceSpec, control_from_text,
                               control_to_text, eval_control, eval_grid, is_feasible,
                               lr_norm_of_l, project, w1q_norm, zero_control)
from kscontrol.grid import GridSpec

GSPEC = GridSpec(n=64, L=4.0)


def one_bump_spec(T=0.25, bins=1, l0=1.0, width=0.8, center=(0.5, 0.0, 0.0), q=4.0, r=4.0):
    return ControlSpaceSpec(T=T, q=q, r=r, l_profile=(l0,), bins=bins,
                            centers=(center,), widths=(width,))


def test_zero_control_evaluates_to_zero():
    f = zero_control(one_bump_spec(bins=2))
    pts = np.random.default_rng(0).uniform(-2, 2, (10, 3))
    assert np.all(eval_control(f, 0.1, pts) == 0.0)
    assert f.is_zero()


def test_single_bump_profile_peaks_at_center():
    spec = one_bump_spec()
    f = ControlField(spec, np.array([[1.0]]))
    center = np.array([[0.5, 0.0, 0.0]])
    assert eval_control(f, 0.0, center)[0] == pytest.approx(1.0)
    off = np.array([[1.5, 0.3, -0.2]])
    assert eval_control(f, 0.0, off)[0] < 1.0


def test_grid_sample_matches_pointwise_eval():
    spec = one_bump_spec(bins=2)
    f = ControlField(spec, np.array([[0.7], [-0.3]]))
    g = eval_grid(f, 0.2, GSPEC)
    X, Y, Z = GSPEC.meshes()
    pts = np.stack(np.broadcast_arrays(X, Y, Z), axis=-1).reshape(-1, 3)
    direct = eval_control(f, 0.2, pts).reshape(g.values.shape)
    assert np.allclose(g.values, direct, atol=1e-12)


def test_w1q_norm_zero_and_scaling():
    spec = one_bump_spec()
    assert w1q_norm(zero_control(spec), 0, GSPEC) == 0.0
    f = ControlField(spec, np.array([[0.8]]))
    g = ControlField(spec, np.array([[-2.4]]))
    assert w1q_norm(g, 0, GSPEC) == pytest.approx(3.0 * w1q_norm(f, 0, GSPEC), rel=1e-12)


def test_w1q_norm_against_gamma_oracle():
    # closed forms for the Gaussian bump: int |f|^q = (2 pi w^2 / q)^{3/2},
    # int |grad f|^q = 4 pi (w^2/q)^{(q+3)/2} Gamma((q+3)/2) / (2 w^{2q}) * q...
    # assembled via the radial Gamma integral below.
    q, w = 4.0, 0.8
    spec = one_bump_spec(width=w, q=q)
    f = ControlField(spec, np.array([[1.3]]))
    a = q / (2 * w * w)
    int_fq = 1.3**q * (2 * np.pi * w * w / q) ** 1.5
    int_gq = 1.3**q * w ** (-2 * q) * 4 * np.pi * gamma_fn((q + 3) / 2) / (2 * a ** ((q + 3) / 2))
    oracle = (int_fq + int_gq) ** (1.0 / q)
    assert w1q_norm(f, 0, GSPEC) == pytest.approx(oracle, rel=1e-3)


def test_projection_contract():
    spec = one_bump_spec(l0=1.0)
    feasible = ControlField(spec, np.array([[0.1]]))
    assert np.array_equal(project(feasible, GSPEC).coeffs, feasible.coeffs)

    # scale a unit-norm control to exactly twice the bound
    unit = ControlField(spec, np.array([[1.0]]))
    n0 = w1q_norm(unit, 0, GSPEC)
    over = ControlField(spec, np.array([[2.0 / n0]]))
    proj = project(over, GSPEC)
    assert w1q_norm(proj, 0, GSPEC) == pytest.approx(1.0, rel=1e-9)
    assert proj.coeffs[0, 0] == pytest.approx(over.coeffs[0, 0] / 2.0, rel=1e-9)

    again = project(proj, GSPEC)
    assert np.array_equal(again.coeffs, proj.coeffs)  # idempotent, exactly
    assert is_feasible(proj, GSPEC)


def test_projection_only_touches_offending_bins():
    spec = one_bump_spec(bins=2, l0=1.0)
    unit = ControlField(spec, np.array([[1.0], [1.0]]))
    n0 = w1q_norm(unit, 0, GSPEC)
    f = ControlField(spec, np.array([[0.5 / n0], [3.0 / n0]]))
    proj = project(f, GSPEC)
    assert proj.coeffs[0, 0] == f.coeffs[0, 0]
    assert w1q_norm(proj, 1, GSPEC) == pytest.approx(1.0, rel=1e-9)


def test_lr_norm_of_l():
    assert lr_norm_of_l(one_bump_spec(T=1.0, l0=1.0)) == pytest.approx(1.0)
    assert lr_norm_of_l(one_bump_spec(T=1.0, l0=2.0, r=4.0)) == pytest.approx(2.0)
    spec = ControlSpaceSpec(T=1.0, q=4.0, r=3.0, l_profile=(1.0, 2.0, 0.5, 1.5),
                            bins=4, centers=((0, 0, 0),), widths=(0.8,))
    # trapezoid oracle on a fine grid of the piecewise-constant profile
    tt = np.linspace(0, 1.0, 400001)
    lv = np.array([1.0, 2.0, 0.5, 1.5])[np.minimum((tt * 4).astype(int), 3)]
    oracle = np.trapezoid(lv**3.0, tt) ** (1 / 3.0)
    assert lr_norm_of_l(spec) == pytest.approx(oracle, abs=1e-4)


def test_serialization_roundtrip_bit_exact():
    spec = ControlSpaceSpec(T=0.25, q=4.5, r=3.5, l_profile=(1.25,), bins=3,
                            centers=((0.5, 0.0, 0.0), (-0.3, 0.7, 0.1)),
                            widths=(0.8, 0.6))
    rng = np.random.default_rng(42)
    f = ControlField(spec, rng.standard_normal((3, 2)) / 3.0)
    text = control_to_text(f)
    g = control_from_text(text)
    assert g.spec == f.spec
    assert np.array_equal(g.coeffs, f.coeffs)
    assert control_to_text(g) == text


@settings(max_examples=25, deadline=None)
@given(st.floats(min_value=-5.0, max_value=5.0))
def test_projection_always_feasible_property(c):
    spec = one_bump_spec(l0=0.5)
    f = project(ControlField(spec, np.array([[c]])), GSPEC)
    assert is_feasible(f, GSPEC)


def test_spec_validation():
    with pytest.raises(ValueError):
        ControlSpaceSpec(T=1.0, q=2.0)          # q <= d
    with pytest.raises(ValueError):
        ControlSpaceSpec(T=1.0, r=2.0)          # r <= 2
    with pytest.raises(ValueError):
        ControlSpaceSpec(T=1.0, widths=(0.5, 0.6))  # centers/widths mismatch
    with pytest.raises(ValueError):
        ControlField(one_bump_spec(bins=2), np.zeros((1, 1)))
    with pytest.raises(ValueError):
        one_bump_spec().bin_of(0.3)             # t outside [0, T]
