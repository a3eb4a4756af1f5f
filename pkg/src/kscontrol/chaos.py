"""Propagation-of-chaos measurements on coupled particle/PDE runs.

The 1-particle marginal is estimated by the replica-averaged smoothed
empirical measure (exchangeability makes every particle's law the marginal),
compared against the unregularized PDE solution in L^1 snapshot-wise.  The
A_alpha statistic counts replicas whose coupled trajectories deviate beyond
N^{-alpha}.  A direct Monte-Carlo check of the law-of-large-numbers
concentration event used by the convergence-in-probability proof is included.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .densities import GaussianMixture
from .grid import DensityField, GridSpec, deposit_particles, smooth_field
from .kernels import KernelConfig, KernelTable, PhysicsParams, build_kernel_table
from .particles import (ReplicaRun, SdeConfig, check_exponent_constraints, run_replica)
from .pde import PdeConfig, solve_keller_segel, solve_regularized


class ChaosConfigurationError(ValueError):
    pass


@dataclass
class ChaosConfig:
    N_schedule: tuple = (256, 1024, 4096)
    beta: float = 0.02
    alpha: float = 0.4
    theta1: float = 0.45
    replicas: int = 32
    seeds: tuple = (101, 202, 303)
    snapshots: int = 16

    def __post_init__(self):
        violations = check_exponent_constraints(self.alpha, self.theta1, self.beta, 3)
        if violations:
            raise ChaosConfigurationError("; ".join(violations))
        if list(self.N_schedule) != sorted(set(self.N_schedule)):
            raise ChaosConfigurationError("N_schedule must be strictly increasing")


# --- statistics ----------------------------------------------------------------

def average_kde_fields(runs: list, eps: float, gspec: GridSpec) -> list:
    """Replica-averaged smoothed empirical measure per snapshot."""
    if not runs:
        raise ChaosConfigurationError("no runs supplied")
    n_snap = len(runs[0].positions)
    fields = []
    for s in range(n_snap):
        acc = np.zeros((gspec.n,) * 3)
        for run in runs:
            acc += deposit_particles(run.positions[s], gspec).values
        acc /= len(runs)
        avg = smooth_field(DensityField(gspec, acc, runs[0].times[s]), eps)
        fields.append(avg)
    return fields


def l1_marginal_distance(runs: list, rho_traj: list, eps: float) -> np.ndarray:
    """Per-snapshot L^1 distance of the replica-averaged KDE marginal to rho."""
    gspec = rho_traj[0].spec
    if any(len(run.positions) != len(rho_traj) for run in runs):
        raise ChaosConfigurationError("snapshot counts differ between runs and trajectory")
    kde = average_kde_fields(runs, eps, gspec)
    vol = gspec.cell_volume()
    for k, r in zip(kde, rho_traj):
        if abs(k.time_stamp - r.time_stamp) > 1e-9:
            raise ChaosConfigurationError("snapshot times differ between runs and trajectory")
    return np.array([float(np.abs(k.values - r.values).sum() * vol)
                     for k, r in zip(kde, rho_traj)])


def a_alpha_frequency(runs: list, alpha: float, N: int) -> float:
    """Fraction of coupled replicas with max_{i, t_snap} |X_i - Xbar_i| >= N^-alpha."""
    thresh = N ** (-alpha)
    hits = 0
    for run in runs:
        if run.max_deviation is None:
            raise ChaosConfigurationError("runs are not coupled (no deviation records)")
        if run.max_deviation.max() >= thresh:
            hits += 1
    return hits / len(runs)


def _normalized_pair(kde: DensityField, rho: DensityField, floor: float):
    vol = kde.spec.cell_volume()
    p = np.maximum(kde.values, floor)
    q = np.maximum(rho.values, floor)
    return p / (p.sum() * vol), q / (q.sum() * vol), vol


def kl_proxy(kde: DensityField, rho: DensityField, floor: float = 1e-12) -> float:
    """Marginal KL surrogate h^3 sum kde log(kde/rho) after renormalizing both
    to unit discrete mass and flooring; nonnegative by Gibbs' inequality."""
    p, q, vol = _normalized_pair(kde, rho, floor)
    return float((p * np.log(p / q)).sum() * vol)


def pinsker_pair(kde: DensityField, rho: DensityField, floor: float = 1e-12) -> tuple:
    """(L^1 distance, KL) of the same renormalized pair, so the
    Csiszar-Kullback-Pinsker inequality L1^2 <= 2 KL applies verbatim."""
    p, q, vol = _normalized_pair(kde, rho, floor)
    l1 = float(np.abs(p - q).sum() * vol)
    kl = float((p * np.log(p / q)).sum() * vol)
    return l1, kl


def lln_concentration_test(U, conv_U_v, sampler, N: int, theta: float,
                           trials: int, seed: int = 0) -> float:
    """Empirical P(max_i |(1/N) sum_j U(Y_i - Y_j) - (U*v)(Y_i)| > N^-theta)
    over i.i.d. draws Y ~ v.  The j-sum runs over all N including j=i (the
    kernel is bounded, U(0) finite)."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    thresh = N ** (-theta)
    hits = 0
    for _ in range(trials):
        pts = sampler(rng, N)
        diff = pts[:, None, :] - pts[None, :, :]
        means = U(diff.reshape(-1, 3)).reshape(N, N).mean(axis=1)
        dev = np.abs(means - conv_U_v(pts))
        if dev.max() > thresh:
            hits += 1
    return hits / trials


def fit_slope_with_bootstrap(Ns, medians_fn, B: int = 400, seed: int = 0) -> dict:
    """Log-log slope of medians_fn(resample) over Ns with a percentile CI.

    medians_fn(rng or None) returns per-N medians; None = point estimate,
    otherwise a bootstrap resample driven by the supplied generator.
    """
    point = np.asarray(medians_fn(None), dtype=float)
    lnN = np.log(np.asarray(Ns, dtype=float))
    slope = float(np.polyfit(lnN, np.log(point), 1)[0])
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    slopes = np.empty(B)
    for b in range(B):
        med = np.asarray(medians_fn(rng), dtype=float)
        slopes[b] = np.polyfit(lnN, np.log(np.maximum(med, 1e-300)), 1)[0]
    lo, hi = np.quantile(slopes, [0.025, 0.975])
    return {"slope": slope, "ci_low": float(lo), "ci_high": float(hi)}


# --- the study -------------------------------------------------------------------

@dataclass
class ChaosCell:
    """One (N, seed) cell of the study."""

    N: int
    seed: int
    eps: float
    sup_l1: float
    argmax_snapshot: int
    a_alpha_freq: float
    kl: float
    l1_at_argmax: float
    median_max_deviation: float
    per_replica_kde_at_argmax: np.ndarray | None = None  # (R, n^3) float32


@dataclass
class ChaosReport:
    config: ChaosConfig
    cells: list
    per_N_median_sup_l1: dict
    per_N_median_freq: dict
    slope_fit: dict
    pinsker_ok: bool

    def to_text(self) -> str:
        lines = ["kscontrol-chaos-report v1",
                 f"N_schedule={list(self.config.N_schedule)}",
                 f"beta={self.config.beta!r}", f"alpha={self.config.alpha!r}",
                 f"replicas={self.config.replicas}", f"seeds={list(self.config.seeds)}",
                 f"slope={self.slope_fit['slope']!r}",
                 f"slope_ci=[{self.slope_fit['ci_low']!r},{self.slope_fit['ci_high']!r}]",
                 f"pinsker_ok={self.pinsker_ok}"]
        for N in self.config.N_schedule:
            lines.append(f"median_sup_l1[N={N}]={self.per_N_median_sup_l1[N]!r}")
            lines.append(f"median_a_alpha_freq[N={N}]={self.per_N_median_freq[N]!r}")
        return "\n".join(lines) + "\n"

    def to_csv(self, path) -> None:
        rows = [(c.N, c.seed, c.eps, c.sup_l1, c.a_alpha_freq, c.kl,
                 c.median_max_deviation) for c in self.cells]
        np.savetxt(path, np.asarray(rows), delimiter=",",
                   header="N,seed,eps,sup_l1,a_alpha_freq,kl_proxy,median_max_dev",
                   comments="")


def run_chaos_study(cfg: ChaosConfig, rho0: GaussianMixture, params: PhysicsParams,
                    gspec: GridSpec, pde_cfg: PdeConfig, sde_dt: float,
                    keep_bootstrap_fields: bool = True, table_points: int = 4096,
                    progress=None) -> ChaosReport:
    """Coupled runs over (N, seed) cells with f = 0; produces criterion-6/7 data."""
    rho0_field = rho0.to_grid(gspec)
    rho_traj, _ = solve_keller_segel(rho0_field, None, params, pde_cfg)
    cells = []
    for N in cfg.N_schedule:
        eps = N ** (-cfg.beta)
        table = build_kernel_table(KernelConfig(eps=eps, table_points=table_points), params)
        reg_traj, _ = solve_regularized(rho0_field, None, params, pde_cfg, table)
        for seed in cfg.seeds:
            runs = [run_replica(N, rho0, None, table, params,
                                SdeConfig(dt=sde_dt, beta=cfg.beta, alpha=cfg.alpha,
                                          theta1=cfg.theta1),
                                gspec, seed, rep, K=cfg.snapshots, rho_eps_traj=reg_traj)
                    for rep in range(cfg.replicas)]
            dists = l1_marginal_distance(runs, rho_traj, eps)
            s_star = int(np.argmax(dists))
            kde_star = average_kde_fields(runs, eps, gspec)[s_star]
            l1_ckp, kl_ckp = pinsker_pair(kde_star, rho_traj[s_star])
            cell = ChaosCell(
                N=N, seed=seed, eps=eps, sup_l1=float(dists.max()),
                argmax_snapshot=s_star,
                a_alpha_freq=a_alpha_frequency(runs, cfg.alpha, N),
                kl=kl_ckp,
                l1_at_argmax=l1_ckp,
                median_max_deviation=float(np.median([r.max_deviation.max() for r in runs])))
            if keep_bootstrap_fields:
                per = np.empty((len(runs), gspec.n**3), dtype=np.float32)
                for i, run in enumerate(runs):
                    dep = deposit_particles(run.positions[s_star], gspec)
                    per[i] = smooth_field(dep, eps).values.ravel()
                cell.per_replica_kde_at_argmax = per
            cells.append(cell)
            if progress is not None:
                progress(f"chaos cell N={N} seed={seed}: sup_l1={cell.sup_l1:.4e} "
                         f"freq={cell.a_alpha_freq:.3f}")
    report = _assemble_report(cfg, cells, rho_traj)
    return report


def _assemble_report(cfg: ChaosConfig, cells: list, rho_traj: list) -> ChaosReport:
    per_N_l1 = {N: float(np.median([c.sup_l1 for c in cells if c.N == N]))
                for N in cfg.N_schedule}
    per_N_freq = {N: float(np.median([c.a_alpha_freq for c in cells if c.N == N]))
                  for N in cfg.N_schedule}

    gspec = rho_traj[0].spec
    vol = gspec.cell_volume()
    rho_flat = {s: rho_traj[s].values.ravel() for s in range(len(rho_traj))}

    def medians(rng):
        out = []
        for N in cfg.N_schedule:
            vals = []
            for c in (c for c in cells if c.N == N):
                if rng is None or c.per_replica_kde_at_argmax is None:
                    vals.append(c.sup_l1)
                else:
                    R = c.per_replica_kde_at_argmax.shape[0]
                    idx = rng.integers(0, R, R)
                    mean = c.per_replica_kde_at_argmax[idx].mean(axis=0)
                    vals.append(float(np.abs(mean - rho_flat[c.argmax_snapshot]).sum() * vol))
            out.append(np.median(vals))
        return out

    slope_fit = fit_slope_with_bootstrap(list(cfg.N_schedule), medians, B=400, seed=12345)

    # Csiszar-Kullback-Pinsker direction on each cell (10% relative slack)
    pinsker_ok = all(c.l1_at_argmax**2 <= 2.0 * c.kl * 1.1 + 1e-12 for c in cells)
    return ChaosReport(cfg, cells, per_N_l1, per_N_freq, slope_fit, pinsker_ok)
