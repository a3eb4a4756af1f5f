"""Controlled Keller-Segel solver: Strang splitting with spectral diffusion.

d rho/dt = Laplace rho - div(rho * chi * grad Phi*(rho - f))

One step is half-advection / full spectral diffusion / half-advection.  The
advection half-steps are RK2 on the conservative centered flux with the
velocity frozen from the entering state; the diffusion factor exp(-k^2 dt) is
exact.  Mass is conserved to rounding by construction (the centered flux
divergence telescopes).  The regularized variant replaces Phi by the
phi_tilde_eps lookup table.  picard_solve runs the fixed-point construction
(iterating the linearized equation with the previous iterate's potential
frozen) and reports contraction ratios.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.fft as sfft

from .control import ControlField, eval_bin_grid
from .grid import (DensityField, GridSpec, convolve_free_space, kernel_hat,
                   lp_norm, require_probability_density, sobolev_w1q_norm)
from .kernels import KernelTable, PhysicsParams


class NumericalAbort(RuntimeError):
    """CFL collapse, mass loss, or positivity failure during time marching."""


class NonContractionError(RuntimeError):
    def __init__(self, ratios):
        super().__init__(f"Picard iteration stopped contracting: ratios {ratios}")
        self.ratios = ratios


@dataclass
class PdeConfig:
    dt: float = 4e-3
    snapshots: int = 16            # K save intervals -> K+1 stored fields
    positivity_fix: str = "clip-and-renormalize"   # or "off"
    control_sign: float = -1.0     # -1: drift chi grad Phi*(rho - f); +1 flips f
    cfl_safety: float = 0.45
    max_halvings: int = 5

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.positivity_fix not in ("clip-and-renormalize", "off"):
            raise ValueError("positivity_fix must be 'clip-and-renormalize' or 'off'")
        if self.control_sign not in (-1.0, 1.0):
            raise ValueError("control_sign must be -1 or +1")


def cdp_constant(d: int, p: float, chi: float) -> float:
    """C(d,p) = (2-4/d)^(-1/(p-1)) (p-1) p^(-p/(p-1)) chi^p."""
    return (2 - 4 / d) ** (-1.0 / (p - 1)) * (p - 1) * p ** (-p / (p - 1)) * chi**p


def cdp_constant_log(d: int, p: float, chi: float) -> float:
    """Same constant assembled in the log domain (independent arithmetic path)."""
    ln = (-np.log(2 - 4 / d) / (p - 1) + np.log(p - 1)
          - p / (p - 1) * np.log(p) + p * np.log(chi))
    return float(np.exp(ln))


def smallness_condition(C0: float, d: int, r: float, chi: float, l_lr_norm: float) -> dict:
    """The small-data condition C0 <= min{2^d (1-2/d)^d, exp(-2 C(d,r) ||l||_r^r)}."""
    cap_geom = 2.0**d * (1 - 2.0 / d) ** d
    Cdr = cdp_constant(d, r, chi)
    cap_exp = float(np.exp(-2.0 * Cdr * l_lr_norm**r))
    threshold = min(cap_geom, cap_exp)
    return {"C0": C0, "cap_geometric": cap_geom, "cap_exponential": cap_exp,
            "threshold": threshold, "Cdr": Cdr, "satisfied": bool(C0 <= threshold)}


@dataclass
class NormMonitor:
    """Per-step records of the a-priori quantities the analysis bounds."""

    C0: float
    bound_2sqrtC0: float
    Cdp: float
    q: float
    times: list = field(default_factory=list)
    l_d2_norm: list = field(default_factory=list)    # ||rho||_{L^{3/2}}^{3/2}
    w1q_norm: list = field(default_factory=list)
    clipped_mass: list = field(default_factory=list)

    def record(self, t: float, rho: DensityField, clipped: float) -> None:
        self.times.append(t)
        self.l_d2_norm.append(lp_norm(rho, 1.5) ** 1.5)
        self.w1q_norm.append(sobolev_w1q_norm(rho, self.q))
        self.clipped_mass.append(clipped)

    @property
    def bound_holds(self) -> bool:
        return max(self.l_d2_norm) <= self.bound_2sqrtC0

    def to_csv(self, path) -> None:
        data = np.column_stack([self.times, self.l_d2_norm, self.w1q_norm, self.clipped_mass])
        np.savetxt(path, data, delimiter=",",
                   header="t,l32_norm_pow,w1q_norm,clipped_mass", comments="")


def _diffusion_factor(spec: GridSpec, dt: float) -> np.ndarray:
    k1 = 2 * np.pi * sfft.fftfreq(spec.n, d=spec.h)
    kx, ky, kz = np.meshgrid(k1, k1, k1[: spec.n // 2 + 1], indexing="ij", sparse=True)
    return np.exp(-(kx**2 + ky**2 + kz**2) * dt)


def _centered_gradient(values: np.ndarray, h: float) -> list:
    return [(np.roll(values, -1, axis=ax) - np.roll(values, 1, axis=ax)) / (2 * h)
            for ax in range(3)]


def _centered_divergence(flux: list, h: float) -> np.ndarray:
    out = np.zeros_like(flux[0])
    for ax in range(3):
        out += (np.roll(flux[ax], -1, axis=ax) - np.roll(flux[ax], 1, axis=ax)) / (2 * h)
    return out


class _Stepper:
    """Shared machinery for the nonlinear solve and the Picard linear solves."""

    def __init__(self, gspec: GridSpec, params: PhysicsParams, cfg: PdeConfig,
                 f: ControlField | None, kernel):
        self.gspec = gspec
        self.params = params
        self.cfg = cfg
        self.kernel = kernel
        self.f = f
        self._fpot_cache: dict = {}
        self._diff_cache: dict = {}

    def control_potential(self, t: float) -> np.ndarray | None:
        """sign * (Phi * f(t_bin)) on the grid, cached per time bin."""
        if self.f is None or self.f.is_zero() or self.params.chi == 0.0:
            return None
        m = self.f.spec.bin_of(min(t, self.f.spec.T))
        if m not in self._fpot_cache:
            fgrid = eval_bin_grid(self.f, m, self.gspec)
            pot = convolve_free_space(fgrid, self.kernel).values
            self._fpot_cache[m] = self.cfg.control_sign * pot
        return self._fpot_cache[m]

    def velocity(self, rho_values: np.ndarray, t: float) -> list | None:
        """chi * grad(Phi*(rho + sign*f)) as three arrays, or None when chi=0."""
        if self.params.chi == 0.0:
            return None
        pot = convolve_free_space(DensityField(self.gspec, rho_values), self.kernel).values
        fpot = self.control_potential(t)
        if fpot is not None:
            pot = pot + fpot
        return [self.params.chi * g for g in _centered_gradient(pot, self.gspec.h)]

    def advect_half(self, rho: np.ndarray, v: list | None, dt_half: float) -> np.ndarray:
        if v is None:
            return rho
        h = self.gspec.h
        k1 = -_centered_divergence([rho * vi for vi in v], h)
        mid = rho + 0.5 * dt_half * k1
        k2 = -_centered_divergence([mid * vi for vi in v], h)
        return rho + dt_half * k2

    def diffuse(self, rho: np.ndarray, dt: float) -> np.ndarray:
        if dt not in self._diff_cache:
            self._diff_cache[dt] = _diffusion_factor(self.gspec, dt)
        return sfft.irfftn(sfft.rfftn(rho) * self._diff_cache[dt], s=rho.shape)

    def cfl_limit(self, v: list | None) -> float:
        if v is None:
            return np.inf
        vmax = max(float(np.abs(vi).max()) for vi in v)
        return np.inf if vmax == 0 else self.cfg.cfl_safety * self.gspec.h / vmax

    def positivity(self, rho: np.ndarray) -> tuple:
        if self.cfg.positivity_fix == "off":
            return rho, 0.0
        neg = rho < 0
        clipped = -float(rho[neg].sum()) * self.gspec.cell_volume()
        if clipped > 0:
            if clipped > 1e-3:
                raise NumericalAbort(f"positivity fix would remove {clipped:.2e} mass (> 1e-3)")
            mass_before = rho.sum()
            rho = np.where(neg, 0.0, rho)
            rho *= mass_before / rho.sum()
        return rho, clipped

    def step(self, rho: np.ndarray, t: float, dt: float,
             frozen_velocity=None) -> tuple:
        """One Strang step; frozen_velocity(t) overrides the self-consistent
        velocity (used by the Picard linear solves).  Subdivides on CFL
        violation up to cfg.max_halvings."""
        def vel(state, tau):
            return frozen_velocity(tau) if frozen_velocity is not None else self.velocity(state, tau)

        v0 = vel(rho, t)
        sub, clipped = 1, 0.0
        while dt / sub > self.cfl_limit(v0):
            sub *= 2
            if sub > 2**self.cfg.max_halvings:
                raise NumericalAbort(
                    f"CFL limit unreachable after {self.cfg.max_halvings} halvings at t={t}")
        dts = dt / sub
        out = rho
        for k in range(sub):
            tk = t + k * dts
            v = v0 if k == 0 else vel(out, tk)
            out = self.advect_half(out, v, 0.5 * dts)
            out = self.diffuse(out, dts)
            v2 = vel(out, tk + dts)
            out = self.advect_half(out, v2, 0.5 * dts)
            out, c = self.positivity(out)
            clipped += c
        return out, clipped


def _resolve_steps(T: float, dt: float, snapshots: int) -> tuple:
    """Steps per snapshot interval so saved times land exactly on the grid."""
    t_save = T / snapshots
    per = max(1, int(np.ceil(t_save / dt - 1e-12)))
    return per, t_save / per


def _march(stepper: _Stepper, rho0: DensityField, T: float, snapshots: int,
           monitor: NormMonitor) -> list:
    per, dt = _resolve_steps(T, stepper.cfg.dt, snapshots)
    rho = rho0.values.copy()
    out = [DensityField(stepper.gspec, rho.copy(), 0.0)]
    monitor.record(0.0, out[0], 0.0)
    mass0 = rho.sum()
    for s in range(snapshots):
        for k in range(per):
            t = (s * per + k) * dt
            rho, clipped = stepper.step(rho, t, dt)
            monitor.record(t + dt, DensityField(stepper.gspec, rho), clipped)
        drift = abs(rho.sum() - mass0) / mass0
        if drift > 1e-6:
            raise NumericalAbort(f"mass drifted {drift:.2e} by t={(s + 1) * per * dt}")
        out.append(DensityField(stepper.gspec, rho.copy(), (s + 1) * per * dt))
    return out


def _make_monitor(rho0: DensityField, params: PhysicsParams, q: float, r: float) -> NormMonitor:
    C0 = lp_norm(rho0, 1.5) ** 1.5
    return NormMonitor(C0=C0, bound_2sqrtC0=2.0 * np.sqrt(C0),
                       Cdp=cdp_constant(params.d, r, params.chi), q=q)


def solve_keller_segel(rho0: DensityField, f: ControlField | None,
                       params: PhysicsParams, cfg: PdeConfig,
                       T: float | None = None) -> tuple:
    """March the controlled Keller-Segel equation; returns (snapshots, monitor)."""
    require_probability_density(rho0)
    q = f.spec.q if f is not None else 4.0
    r = f.spec.r if f is not None else 4.0
    monitor = _make_monitor(rho0, params, q, r)
    stepper = _Stepper(rho0.spec, params, cfg, f, "coulomb")
    snaps = _march(stepper, rho0, params.T if T is None else T, cfg.snapshots, monitor)
    return snaps, monitor


def solve_regularized(rho0: DensityField, f: ControlField | None,
                      params: PhysicsParams, cfg: PdeConfig, table: KernelTable,
                      T: float | None = None) -> tuple:
    """Same marching with Phi replaced by the mollified cutoff kernel."""
    require_probability_density(rho0)
    q = f.spec.q if f is not None else 4.0
    r = f.spec.r if f is not None else 4.0
    monitor = _make_monitor(rho0, params, q, r)
    kernel = table if params.chi != 0.0 else "coulomb"  # kernel unused when chi=0
    stepper = _Stepper(rho0.spec, params, cfg, f, kernel)
    snaps = _march(stepper, rho0, params.T if T is None else T, cfg.snapshots, monitor)
    return snaps, monitor


@dataclass
class PicardReport:
    iterate_diffs: list          # sup_t L1 distance between successive iterates
    ratios: list                 # diffs[m+1]/diffs[m]
    n_solves: int
    converged: bool


def _sup_l1(traj_a: list, traj_b: list, spec: GridSpec) -> float:
    vol = spec.cell_volume()
    return max(float(np.abs(a - b).sum() * vol) for a, b in zip(traj_a, traj_b))


def picard_solve(rho0: DensityField, f: ControlField | None, params: PhysicsParams,
                 cfg: PdeConfig, T_small: float = 0.05, tol: float = 1e-6,
                 max_iter: int = 50) -> tuple:
    """Fixed point of the linearized equation with frozen potential.

    Iterates rho^{m+1} solving d rho/dt = Lap rho - div(rho chi grad c^m) with
    c^m = Phi*(rho^m - f) frozen from the previous iterate's full trajectory
    (rho^0 = 0).  Stops when sup_t L1 of successive iterates < tol.  Returns
    (snapshot fields of the converged iterate, PicardReport).
    """
    require_probability_density(rho0)
    gspec = rho0.spec
    stepper = _Stepper(gspec, params, cfg, f, "coulomb")
    n_steps = max(1, int(round(T_small / cfg.dt)))
    dt = T_small / n_steps
    step_times = dt * np.arange(n_steps + 1)

    def solve_linear(frozen_traj: list | None) -> list:
        # velocity from the frozen trajectory, index by nearest step time
        def vel_at(t: float):
            if params.chi == 0.0:
                return None
            if frozen_traj is None:
                rho_m = np.zeros((gspec.n,) * 3)
            else:
                idx = min(int(round(t / dt)), n_steps)
                rho_m = frozen_traj[idx]
            return stepper.velocity(rho_m, t)

        rho = rho0.values.copy()
        traj = [rho.copy()]
        for k in range(n_steps):
            rho, _ = stepper.step(rho, step_times[k], dt, frozen_velocity=vel_at)
            traj.append(rho.copy())
        return traj

    prev = [np.zeros((gspec.n,) * 3) for _ in range(n_steps + 1)]
    diffs, ratios = [], []
    traj = prev
    converged = False
    n_solves = 0
    for m in range(max_iter):
        traj = solve_linear(None if m == 0 else prev)
        n_solves += 1
        diffs.append(_sup_l1(traj, prev, gspec))
        if len(diffs) >= 2 and diffs[-2] > 0:
            ratios.append(diffs[-1] / diffs[-2])
            if len(ratios) >= 3 and all(r >= 1.0 for r in ratios[-3:]):
                raise NonContractionError(ratios)
        prev = traj
        if diffs[-1] < tol:
            converged = True
            break
    fields = [DensityField(gspec, v.copy(), t) for v, t in zip(traj, step_times)]
    return fields, PicardReport(diffs, ratios, n_solves, converged)
