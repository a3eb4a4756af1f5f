import numpy as np
import pytest

from kscontrol.control import ControlField, ControlSpaceSpec, lr_norm_of_l, zero_control
from kscontrol.densities import isotropic_gaussian
from kscontrol.grid import DensityField, GridSpec, lp_norm
from kscontrol.kernels import KernelConfig, PhysicsParams, build_kernel_table
from kscontrol.pde import (NumericalAbort, PdeConfig, _Stepper, cdp_constant,
                           cdp_constant_log, picard_solve, smallness_condition,
                           solve_keller_segel, solve_regularized)

PARAMS = PhysicsParams(chi=0.5, T=0.25, L=4.0)
SPEC32 = GridSpec(n=32, L=4.0)
SPEC64 = GridSpec(n=64, L=4.0)


def l1_distance(a, b):
    return float(np.abs(a.values - b.values).sum() * a.spec.cell_volume())


def test_heat_flow_matches_closed_form():
    # chi=0: pure diffusion; exact solution is the widened Gaussian
    rho0 = isotropic_gaussian(0.8).to_grid(SPEC64)
    snaps, mon = solve_keller_segel(rho0, None, _zero_chi(), PdeConfig(dt=1e-2 / 3.2), T=0.1)
    exact = isotropic_gaussian(0.8).heat_evolved(0.1).to_grid(SPEC64, renormalize=False)
    assert l1_distance(snaps[-1], exact) <= 5e-3
    for s in snaps:
        assert abs(s.mass - 1.0) <= 1e-6


def _zero_chi():
    return PhysicsParams(chi=0.0, T=0.25, L=4.0)


def test_mass_conservation_with_drift():
    rho0 = isotropic_gaussian(0.8).to_grid(SPEC32)
    snaps, mon = solve_keller_segel(rho0, None, PARAMS, PdeConfig(dt=5e-3, snapshots=8), T=0.1)
    for s in snaps:
        assert abs(s.mass - 1.0) <= 1e-6
    assert min(m for m in mon.l_d2_norm) > 0


def test_small_data_monitor_bound():
    rho0 = isotropic_gaussian(0.8).to_grid(SPEC32)
    snaps, mon = solve_keller_segel(rho0, None, PARAMS, PdeConfig(dt=5e-3, snapshots=8), T=0.1)
    # C0 for sigma=0.8 is ~0.19, well under the geometric cap 8/27
    cond = smallness_condition(mon.C0, 3, 4.0, PARAMS.chi, lr_norm_of_l(
        ControlSpaceSpec(T=PARAMS.T, l_profile=(1.0,))))
    assert cond["satisfied"]
    assert mon.bound_holds
    assert max(mon.l_d2_norm) <= mon.bound_2sqrtC0


def test_cdp_constant_log_domain_identity():
    for (d, p, chi) in ((3, 4.0, 0.5), (3, 3.0, 1.0), (3, 2.5, 2.0)):
        a = cdp_constant(d, p, chi)
        b = cdp_constant_log(d, p, chi)
        assert a == pytest.approx(b, rel=1e-12)


def test_smallness_condition_formula():
    # verbatim: C0 <= min{2^d (1-2/d)^d, exp(-2 C(d,r) ||l||_r^r)}
    out = smallness_condition(0.19, 3, 4.0, 0.5, 1.0 * 0.25**0.25)
    assert out["cap_geometric"] == pytest.approx(8.0 / 27.0)
    lr4 = (1.0 * 0.25**0.25) ** 4.0
    assert out["cap_exponential"] == pytest.approx(np.exp(-2 * cdp_constant(3, 4.0, 0.5) * lr4))
    assert out["threshold"] == min(out["cap_geometric"], out["cap_exponential"])
    assert out["satisfied"] == (0.19 <= out["threshold"])
    assert not smallness_condition(0.9, 3, 4.0, 0.5, 1.0)["satisfied"]


def test_regularized_identical_to_plain_when_chi_zero():
    rho0 = isotropic_gaussian(0.8).to_grid(SPEC32)
    table = build_kernel_table(KernelConfig(eps=0.2, table_points=1024), PARAMS)
    params0 = _zero_chi()
    cfg = PdeConfig(dt=5e-3, snapshots=4)
    a, _ = solve_keller_segel(rho0, None, params0, cfg, T=0.05)
    b, _ = solve_regularized(rho0, None, params0, cfg, table, T=0.05)
    for fa, fb in zip(a, b):
        assert np.array_equal(fa.values, fb.values)


def test_regularized_gap_shrinks_with_eps():
    # quick two-point monotonicity check; the full sweep with the slope fit is
    # acceptance criterion 3
    rho0 = isotropic_gaussian(0.8).to_grid(SPEC32)
    cfg = PdeConfig(dt=2.5e-3, snapshots=8)
    base, _ = solve_keller_segel(rho0, None, PARAMS, cfg, T=0.05)
    gaps = []
    for eps in (0.4, 0.2):
        table = build_kernel_table(KernelConfig(eps=eps, table_points=2048), PARAMS)
        reg, _ = solve_regularized(rho0, None, PARAMS, cfg, table, T=0.05)
        gaps.append(max(l1_distance(a, b) for a, b in zip(base, reg)))
    assert gaps[1] < gaps[0]


def test_picard_linear_case_converges_in_one_iteration():
    rho0 = isotropic_gaussian(0.8).to_grid(SPEC32)
    fields, report = picard_solve(rho0, None, _zero_chi(), PdeConfig(dt=2.5e-3), T_small=0.05)
    assert report.converged
    assert report.n_solves == 2
    assert report.iterate_diffs[1] <= 1e-12  # first corrective pass changed nothing


def test_picard_contracts_and_matches_splitting():
    rho0 = isotropic_gaussian(0.8).to_grid(SPEC32)
    dt = 2.5e-3
    fields, report = picard_solve(rho0, None, PARAMS, PdeConfig(dt=dt), T_small=0.05)
    assert report.converged
    assert all(r < 1.0 for r in report.ratios)
    snaps, _ = solve_keller_segel(rho0, None, PARAMS, PdeConfig(dt=dt, snapshots=20), T=0.05)
    by_time = {round(f.time_stamp, 12): f for f in fields}
    gaps = [l1_distance(s, by_time[round(s.time_stamp, 12)]) for s in snaps]
    assert max(gaps) <= 5 * dt


def test_positivity_fix_mechanics():
    stepper = _Stepper(SPEC32, PARAMS, PdeConfig(), None, "coulomb")
    vals = np.full((32,) * 3, 1e-4)
    vals[0, 0, 0] = -1e-9
    fixed, clipped = stepper.positivity(vals.copy())
    assert fixed.min() >= 0.0
    assert clipped == pytest.approx(1e-9 * SPEC32.cell_volume(), rel=1e-6)
    assert fixed.sum() == pytest.approx(vals.sum(), rel=1e-12)
    big = np.full((32,) * 3, 1e-4)
    big[:4, :4, :4] = -1.0
    with pytest.raises(NumericalAbort):
        stepper.positivity(big)


def test_cfl_limit_and_config_validation():
    stepper = _Stepper(SPEC32, PARAMS, PdeConfig(cfl_safety=0.5), None, "coulomb")
    v = [np.full((32,) * 3, 2.0), np.zeros((32,) * 3), np.zeros((32,) * 3)]
    assert stepper.cfl_limit(v) == pytest.approx(0.5 * SPEC32.h / 2.0)
    assert stepper.cfl_limit(None) == np.inf
    with pytest.raises(ValueError):
        PdeConfig(dt=-1.0)
    with pytest.raises(ValueError):
        PdeConfig(positivity_fix="nope")
    with pytest.raises(ValueError):
        PdeConfig(control_sign=0.5)


def test_control_sign_flag_changes_drift():
    rho0 = isotropic_gaussian(0.8).to_grid(SPEC32)
    spec = ControlSpaceSpec(T=0.05, l_profile=(2.0,), centers=((0.5, 0.0, 0.0),), widths=(0.8,))
    f = ControlField(spec, np.array([[0.5]]))
    a, _ = solve_keller_segel(rho0, f, PARAMS, PdeConfig(dt=2.5e-3, snapshots=4), T=0.05)
    cfgp = PdeConfig(dt=2.5e-3, snapshots=4, control_sign=+1.0)
    b, _ = solve_keller_segel(rho0, f, PARAMS, cfgp, T=0.05)
    assert l1_distance(a[-1], b[-1]) > 1e-6
