"""Derivative-free minimization over control coefficients, and the minima-convergence study.

Compass search is the default: with common random numbers the particle cost is
a deterministic function of the coefficients, accepted values are
nonincreasing by construction, and every probe is projected onto the feasible
set before evaluation.  Nelder-Mead (scipy) is available as an alternative.
The study minimizes J_N per (N, seed), minimizes J once, and reports the gaps
|J_N(f_N*) - J(f_bar*)| whose decay over the N schedule is the headline
convergence-of-minima measurement.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.optimize

from .control import ControlField, ControlSpaceSpec, project, zero_control
from .cost import CostConfig, ParticleCostEvaluator, eval_J, target_on_grid
from .densities import GaussianMixture
from .grid import GridSpec
from .kernels import KernelConfig, PhysicsParams, build_kernel_table
from .particles import SdeConfig
from .pde import PdeConfig, solve_keller_segel


class CoercivityAlert(RuntimeError):
    """Sustained linear descent: the objective looks unbounded below."""

    def __init__(self, history):
        super().__init__("monotone unbounded descent detected (coercivity alert)")
        self.history = history


class ObjectiveError(RuntimeError):
    def __init__(self, coeffs, value):
        super().__init__(f"objective returned non-finite value {value}")
        self.coeffs = coeffs


@dataclass
class OptimConfig:
    method: str = "compass-search"   # or "nelder-mead"
    max_evals: int = 120
    step_init: float = 0.25
    step_tol: float = 5e-3
    seed: int = 0

    def __post_init__(self):
        if self.method not in ("compass-search", "nelder-mead"):
            raise ValueError("method must be 'compass-search' or 'nelder-mead'")
        if not 0 < self.step_tol < self.step_init:
            raise ValueError("need 0 < step_tol < step_init")
        if self.max_evals < 1:
            raise ValueError("max_evals must be >= 1")


@dataclass
class OptimResult:
    coeffs: np.ndarray
    value: float
    evals_used: int
    converged: bool
    history: list                   # (eval index, value) pairs

    def history_to_csv(self, path) -> None:
        np.savetxt(path, np.asarray(self.history), delimiter=",",
                   header="eval,value", comments="")


_LINEAR_DESCENT_RUN = 50


def _check_coercivity(accepted: list) -> None:
    # 50 consecutive accepted steps with near-constant decrements
    if len(accepted) < _LINEAR_DESCENT_RUN + 1:
        return
    recent = np.asarray(accepted[-(_LINEAR_DESCENT_RUN + 1):])
    drops = -np.diff(recent)
    if np.all(drops > 0) and drops.std() <= 0.1 * drops.mean():
        raise CoercivityAlert(accepted)


def minimize(objective, f0: ControlField, ocfg: OptimConfig, gspec: GridSpec) -> OptimResult:
    """Minimize objective(ControlField) over coefficients with projection onto
    the feasible set before every evaluation."""
    spec = f0.spec
    shape = f0.coeffs.shape

    history: list = []
    evals = 0

    def evaluate(vec: np.ndarray) -> tuple:
        nonlocal evals
        f = project(ControlField(spec, vec.reshape(shape).copy()), gspec)
        val = float(objective(f))
        if not np.isfinite(val):
            raise ObjectiveError(f.coeffs, val)
        evals += 1
        history.append((evals, val))
        return val, f

    x = project(f0, gspec).coeffs.ravel().copy()
    fbest, best_field = evaluate(x)

    if ocfg.method == "nelder-mead":
        def wrapped(vec):
            return evaluate(vec)[0]

        res = scipy.optimize.minimize(
            wrapped, x, method="Nelder-Mead",
            options={"maxfev": max(1, ocfg.max_evals - 1), "xatol": ocfg.step_tol,
                     "fatol": 1e-12, "initial_simplex": None})
        val, f = evaluate(res.x)
        if val > res.fun:  # projection may move the reported optimum; keep best
            val, f = res.fun, project(ControlField(spec, res.x.reshape(shape).copy()), gspec)
        return OptimResult(f.coeffs, float(min(val, res.fun)), evals, bool(res.success), history)

    # compass search: poll +/- step along each coordinate, accept the best
    # improving poll, shrink on failure
    step = ocfg.step_init
    accepted = [fbest]
    xbest = x
    while evals < ocfg.max_evals and step > ocfg.step_tol:
        improved = False
        best_poll = None
        for i in range(xbest.size):
            for sgn in (+1.0, -1.0):
                if evals >= ocfg.max_evals:
                    break
                trial = xbest.copy()
                trial[i] += sgn * step
                val, f = evaluate(trial)
                if val < fbest - 1e-15 and (best_poll is None or val < best_poll[0]):
                    best_poll = (val, trial, f)
        if best_poll is not None:
            fbest, xbest, best_field = best_poll
            accepted.append(fbest)
            _check_coercivity(accepted)
            improved = True
        if not improved:
            step *= 0.5
    converged = step <= ocfg.step_tol
    return OptimResult(best_field.coeffs, fbest, evals, converged, history)


# --- objective wiring ---------------------------------------------------------

def pde_objective(rho0: GaussianMixture, params: PhysicsParams, pde_cfg: PdeConfig,
                  cost_cfg: CostConfig, gspec: GridSpec, T: float | None = None):
    """J as a function of the control (deterministic)."""
    rho0_field = rho0.to_grid(gspec)
    z_field = target_on_grid(cost_cfg.z, gspec)

    def objective(f: ControlField) -> float:
        traj, _ = solve_keller_segel(rho0_field, f, params, pde_cfg, T=T)
        return eval_J(traj, f, cost_cfg, z_field=z_field).total

    return objective


def particle_objective(evaluator: ParticleCostEvaluator):
    """J_N under the evaluator's seed policy (CRN by default)."""

    def objective(f: ControlField) -> float:
        return evaluator.evaluate(f).total

    return objective


# --- the minima-convergence study ----------------------------------------------

@dataclass
class GammaReport:
    N_schedule: tuple
    seeds: tuple
    pde_coeffs: np.ndarray
    pde_value: float
    per_cell: list          # dicts: N, seed, coeffs, value, gap, coeff_distance, jn_at_fbar
    median_gaps: dict
    median_consistency_gaps: dict   # |J_N(f_bar) - J(f_bar)| medians

    def to_text(self) -> str:
        lines = ["kscontrol-gamma-report v1",
                 f"N_schedule={list(self.N_schedule)}",
                 f"seeds={list(self.seeds)}",
                 f"pde_value={self.pde_value!r}",
                 "pde_coeffs=" + ",".join(repr(float(c)) for c in self.pde_coeffs.ravel())]
        for N in self.N_schedule:
            lines.append(f"median_gap[N={N}]={self.median_gaps[N]!r}")
            lines.append(f"median_consistency_gap[N={N}]={self.median_consistency_gaps[N]!r}")
        for cell in self.per_cell:
            lines.append(
                f"cell N={cell['N']} seed={cell['seed']} value={cell['value']!r} "
                f"gap={cell['gap']!r} coeff_distance={cell['coeff_distance']!r}")
        return "\n".join(lines) + "\n"


def gamma_study(N_schedule, seeds, rho0: GaussianMixture, control_spec: ControlSpaceSpec,
                params: PhysicsParams, gspec: GridSpec, pde_cfg: PdeConfig,
                sde_cfg: SdeConfig, cost_cfg: CostConfig, ocfg: OptimConfig,
                table_points: int = 4096, T: float | None = None,
                progress=None) -> GammaReport:
    """Minimize J once and J_N per (N, seed); report value gaps and minimizer
    distances over the schedule."""
    f0 = zero_control(control_spec)
    pde_obj = pde_objective(rho0, params, pde_cfg, cost_cfg, gspec, T=T)
    pde_res = minimize(pde_obj, f0, ocfg, gspec)
    if progress is not None:
        progress(f"PDE minimizer value {pde_res.value:.6f} at {pde_res.coeffs.ravel()}")

    per_cell = []
    for N in N_schedule:
        eps = sde_cfg.eps_of(N)
        table = build_kernel_table(KernelConfig(eps=eps, table_points=table_points), params)
        for seed in seeds:
            cfg_seeded = CostConfig(z=cost_cfg.z, p=cost_cfg.p, replicas=cost_cfg.replicas,
                                    snapshots=cost_cfg.snapshots,
                                    seed_policy="common-random-numbers", seed=seed)
            evaluator = ParticleCostEvaluator(N, rho0, table, params, sde_cfg,
                                              cfg_seeded, gspec, T=T)
            res = minimize(particle_objective(evaluator), f0, ocfg, gspec)
            jn_at_fbar = evaluator.evaluate(
                project(ControlField(control_spec, pde_res.coeffs.copy()), gspec)).total
            cell = {"N": N, "seed": seed, "coeffs": res.coeffs, "value": res.value,
                    "gap": abs(res.value - pde_res.value),
                    "coeff_distance": float(np.linalg.norm(res.coeffs - pde_res.coeffs)),
                    "jn_at_fbar": jn_at_fbar,
                    "consistency_gap": abs(jn_at_fbar - pde_res.value),
                    "evals": res.evals_used}
            per_cell.append(cell)
            if progress is not None:
                progress(f"gamma cell N={N} seed={seed}: J_N*={res.value:.6f} "
                         f"gap={cell['gap']:.6f}")
    median_gaps = {N: float(np.median([c["gap"] for c in per_cell if c["N"] == N]))
                   for N in N_schedule}
    median_cons = {N: float(np.median([c["consistency_gap"] for c in per_cell if c["N"] == N]))
                   for N in N_schedule}
    return GammaReport(tuple(N_schedule), tuple(seeds), pde_res.coeffs, pde_res.value,
                       per_cell, median_gaps, median_cons)


def grid_scan_2d(objective, f_template: ControlField, gspec: GridSpec,
                 lo: float, hi: float, points: int) -> tuple:
    """Exhaustive scan of a 2-coefficient control over [lo, hi]^2; returns
    (best coeffs (2,), best value, grid values (points, points))."""
    if f_template.coeffs.size != 2:
        raise ValueError("grid scan expects exactly two coefficients")
    axis = np.linspace(lo, hi, points)
    values = np.empty((points, points))
    best = (None, np.inf)
    for i, a in enumerate(axis):
        for j, b in enumerate(axis):
            f = ControlField(f_template.spec,
                             np.array([a, b]).reshape(f_template.coeffs.shape))
            val = objective(project(f, gspec))
            values[i, j] = val
            if val < best[1]:
                best = (np.array([a, b]), val)
    return best[0], best[1], values
