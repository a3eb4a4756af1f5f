"""Cost functionals: the particle cost J_N (Monte Carlo over replicas) and the PDE cost J.

Both costs share the same discrete target z (analytic mixture sampled once to
the grid), the same L^p tracking norm, and trapezoid time quadrature over the
snapshot grid.  J_N under the common-random-numbers policy is a deterministic
function of (control, seed), which is what makes derivative-free descent on
it well-posed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .control import ControlField, eval_bin_grid, eval_control
from .densities import GaussianMixture
from .grid import DensityField, GridSpec, lp_norm, smooth_empirical
from .kernels import KernelTable, PhysicsParams
from .particles import ReplicaRun, SdeConfig, run_replica


class CostConfigurationError(ValueError):
    pass


@dataclass
class CostConfig:
    z: GaussianMixture
    p: float = 2.0
    replicas: int = 8
    snapshots: int = 16
    seed_policy: str = "common-random-numbers"  # or "independent"
    seed: int = 0

    def __post_init__(self):
        if self.p < 2:
            raise CostConfigurationError("tracking exponent p must be >= 2")
        if self.replicas < 1:
            raise CostConfigurationError("replicas must be >= 1")
        if self.seed_policy not in ("common-random-numbers", "independent"):
            raise CostConfigurationError("seed_policy must be 'common-random-numbers' or 'independent'")


@dataclass
class CostBreakdown:
    tracking: float
    control: float
    stderr: float | None = None

    @property
    def total(self) -> float:
        return self.tracking + self.control


def target_on_grid(z: GaussianMixture, gspec: GridSpec) -> DensityField:
    """z sampled to the grid; both J and J_N consume this same field."""
    return z.to_grid(gspec, renormalize=False)


def eval_J(rho_traj: list, f: ControlField | None, cfg: CostConfig,
           z_field: DensityField | None = None) -> CostBreakdown:
    """J = int ||rho - z||_p dt + int <f, rho> dt on the trajectory's snapshots."""
    gspec = rho_traj[0].spec
    z = z_field if z_field is not None else target_on_grid(cfg.z, gspec)
    if z.spec != gspec:
        raise CostConfigurationError("target grid does not match trajectory grid")
    times = np.array([s.time_stamp for s in rho_traj])
    if not np.all(np.diff(times) > 0):
        raise CostConfigurationError("trajectory snapshots must have increasing times")
    vol = gspec.cell_volume()
    track = np.array([lp_norm(DensityField(gspec, s.values - z.values), cfg.p)
                      for s in rho_traj])
    if f is None or f.is_zero():
        ctrl = np.zeros_like(times)
    else:
        fgrids = {m: eval_bin_grid(f, m, gspec).values for m in range(f.spec.bins)}
        ctrl = np.array([float((fgrids[f.spec.bin_of(min(t, f.spec.T))] * s.values).sum() * vol)
                         for t, s in zip(times, rho_traj)])
    return CostBreakdown(tracking=float(np.trapezoid(track, times)),
                         control=float(np.trapezoid(ctrl, times)))


class ParticleCostEvaluator:
    """Evaluates J_N; owns the seed policy so 'independent' draws a fresh
    stream per evaluation while staying deterministic for a fixed construction
    order (the CRN policy reuses the base seed every time)."""

    def __init__(self, N: int, rho0: GaussianMixture, table: KernelTable,
                 params: PhysicsParams, sde_cfg: SdeConfig, cfg: CostConfig,
                 gspec: GridSpec, T: float | None = None):
        if abs(table.eps - sde_cfg.eps_of(N)) > 1e-12:
            raise CostConfigurationError(
                f"table eps {table.eps} != N^-beta = {sde_cfg.eps_of(N)} for N={N}")
        self.N = N
        self.rho0 = rho0
        self.table = table
        self.params = params
        self.sde_cfg = sde_cfg
        self.cfg = cfg
        self.gspec = gspec
        self.T = params.T if T is None else T
        self.z_field = target_on_grid(cfg.z, gspec)
        self._eval_count = 0

    def _seed_for_eval(self) -> int:
        if self.cfg.seed_policy == "common-random-numbers":
            return self.cfg.seed
        self._eval_count += 1
        return int(np.random.SeedSequence(
            entropy=self.cfg.seed, spawn_key=(0x5EED, self._eval_count)).generate_state(1)[0])

    def evaluate(self, f: ControlField | None) -> CostBreakdown:
        seed = self._seed_for_eval()
        eps = self.table.eps
        vol = self.gspec.cell_volume()
        totals, tracks, ctrls = [], [], []
        times = None
        for rep in range(self.cfg.replicas):
            run = run_replica(self.N, self.rho0, f, self.table, self.params,
                              self.sde_cfg, self.gspec, seed, rep,
                              K=self.cfg.snapshots, T=self.T)
            times = run.times
            track = np.empty(len(run.times))
            ctrl = np.zeros(len(run.times))
            for s, (t, pos) in enumerate(zip(run.times, run.positions)):
                kde = smooth_empirical(pos, eps, self.gspec, time_stamp=t)
                track[s] = lp_norm(DensityField(self.gspec, kde.values - self.z_field.values),
                                   self.cfg.p)
                if f is not None and not f.is_zero():
                    ctrl[s] = float(eval_control(f, min(t, f.spec.T), pos).mean())
            tracks.append(np.trapezoid(track, run.times))
            ctrls.append(np.trapezoid(ctrl, run.times))
            totals.append(tracks[-1] + ctrls[-1])
        totals = np.asarray(totals)
        stderr = float(totals.std(ddof=1) / np.sqrt(len(totals))) if len(totals) > 1 else 0.0
        return CostBreakdown(tracking=float(np.mean(tracks)), control=float(np.mean(ctrls)),
                             stderr=stderr)


def eval_J_N(f: ControlField | None, N: int, rho0: GaussianMixture,
             table: KernelTable, params: PhysicsParams, sde_cfg: SdeConfig,
             cfg: CostConfig, gspec: GridSpec, T: float | None = None) -> CostBreakdown:
    """One-shot J_N evaluation (constructs a fresh evaluator)."""
    return ParticleCostEvaluator(N, rho0, table, params, sde_cfg, cfg, gspec, T).evaluate(f)


def breakdown_to_dict(b: CostBreakdown) -> dict:
    out = {"tracking": b.tracking, "control": b.control, "total": b.total}
    if b.stderr is not None:
        out["stderr"] = b.stderr
    return out
