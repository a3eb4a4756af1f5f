"""Euler-Maruyama particle dynamics: interacting system and coupled McKean-Vlasov twin.

The interacting system moves each particle by the tabulated pairwise kernel
gradient averaged over the ensemble plus the control drift; the intermediate
(McKean-Vlasov) twin replaces the empirical interaction by grad(phi_tilde_eps
* rho_eps) read off a regularized PDE trajectory.  Coupled runs feed the SAME
Brownian increments to both systems, particle by particle and step by step.

Randomness is counter-based: every (seed, replica, step) triple keys its own
Philox stream through SeedSequence spawn keys, with a fixed particle-major
layout inside the step block, so results are bit-identical no matter how
replicas are scheduled.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .control import ControlField, eval_bin_grid
from .densities import GaussianMixture
from .grid import DensityField, GridSpec, convolve_gradient, interpolate_vector
from .kernels import KernelTable, PhysicsParams

try:
    from ._pairwise import pairwise_accumulate as _pairwise_impl

    PAIRWISE_BACKEND = "cython"
except ImportError:  # compiled extension not built; chunked NumPy fallback
    from ._pairwise_fallback import pairwise_accumulate as _pairwise_impl

    PAIRWISE_BACKEND = "numpy"

from . import _pairwise_fallback

_INIT_TAG = 2**31  # spawn-key slot reserved for initial-condition sampling


class SdeConfigurationError(ValueError):
    pass


@dataclass
class SdeConfig:
    dt: float = 0.25 / 32
    beta: float = 0.02           # eps = N^{-beta}
    alpha: float = 0.4           # A_alpha threshold exponent
    theta1: float = 0.45
    force_method: str = "direct"  # or "cell_list"
    control_sign: float = -1.0
    num_threads: int = 1

    def __post_init__(self):
        if self.dt <= 0:
            raise SdeConfigurationError("dt must be positive")
        if not 0 < self.alpha < 0.5:
            raise SdeConfigurationError("alpha must lie in (0, 1/2)")
        if self.force_method not in ("direct", "cell_list"):
            raise SdeConfigurationError("force_method must be 'direct' or 'cell_list'")

    def eps_of(self, N: int) -> float:
        return float(N ** (-self.beta))


@dataclass
class ParticleEnsemble:
    N: int
    positions: np.ndarray
    t: float = 0.0
    replica_id: int = 0
    seed: int = 0

    def __post_init__(self):
        self.positions = np.ascontiguousarray(self.positions, dtype=float)
        if self.positions.shape != (self.N, 3):
            raise ValueError("positions must be (N, 3)")
        if self.N < 1:
            raise ValueError("N must be >= 1")


@dataclass
class CoupledEnsemble:
    x: ParticleEnsemble    # interacting
    xbar: ParticleEnsemble  # McKean-Vlasov twin, same noise

    def __post_init__(self):
        if self.x.N != self.xbar.N:
            raise ValueError("coupled ensembles must share N")

    def max_deviation(self) -> float:
        return float(np.sqrt(((self.x.positions - self.xbar.positions) ** 2).sum(axis=1)).max())


def stream(seed: int, replica_id: int, step: int) -> np.random.Generator:
    """Philox stream for one (seed, replica, step) cell."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(replica_id), int(step)))
    return np.random.Generator(np.random.Philox(ss))


def brownian_increments(seed: int, replica_id: int, step: int, N: int, dt: float) -> np.ndarray:
    """sqrt(2 dt) * standard normals, (N, 3), particle-major layout."""
    return np.sqrt(2.0 * dt) * stream(seed, replica_id, step).standard_normal((N, 3))


def sample_initial(N: int, rho0: GaussianMixture, seed: int, replica_id: int = 0) -> ParticleEnsemble:
    """N i.i.d. draws from the analytic initial density."""
    rng = stream(seed, replica_id, _INIT_TAG)
    return ParticleEnsemble(N=N, positions=rho0.sample(rng, N),
                            replica_id=replica_id, seed=seed)


# --- pairwise drift -----------------------------------------------------------

def _cell_permutation(positions: np.ndarray, L: float, cell: float) -> np.ndarray:
    idx = np.floor((positions + L) / cell).astype(np.int64)
    idx -= idx.min(axis=0)
    dims = idx.max(axis=0) + 1
    flat = (idx[:, 0] * dims[1] + idx[:, 1]) * dims[2] + idx[:, 2]
    return np.argsort(flat, kind="stable")


def pairwise_drift(ens: ParticleEnsemble, table: KernelTable, chi: float,
                   method: str = "direct", num_threads: int = 1,
                   box_L: float | None = None) -> np.ndarray:
    """(chi/N) sum_j grad phi_tilde_eps(X_i - X_j), self term excluded.

    'cell_list' evaluates the identical sum in spatially blocked order (the
    kernel has global support, so no pair is skipped); it agrees with 'direct'
    to rounding.
    """
    pos = ens.positions
    N = ens.N
    scale = chi / N
    inv_dr = 1.0 / table.dr
    tail = -1.0 / (4.0 * np.pi)  # d/dr of C3/r times r^2 = -C3
    out = np.zeros((N, 3))
    if method == "direct":
        _pairwise_impl(pos, table.dphi_eps, inv_dr, table.r_max, tail, scale, out, num_threads)
        return out
    if method == "cell_list":
        L = box_L if box_L is not None else float(np.abs(pos).max()) + 1.0
        perm = _cell_permutation(pos, L, max(4 * table.eps, L / 4))
        sorted_out = np.zeros((N, 3))
        _pairwise_impl(np.ascontiguousarray(pos[perm]), table.dphi_eps, inv_dr,
                       table.r_max, tail, scale, sorted_out, num_threads)
        out[perm] = sorted_out
        return out
    raise SdeConfigurationError(f"unknown force method {method!r}")


def pairwise_drift_reference(positions: np.ndarray, table: KernelTable, chi: float) -> np.ndarray:
    """Chunked-NumPy path regardless of the compiled backend (oracle/benchmark)."""
    N = positions.shape[0]
    out = np.zeros((N, 3))
    _pairwise_fallback.pairwise_accumulate(
        np.ascontiguousarray(positions, dtype=float), table.dphi_eps, 1.0 / table.dr,
        table.r_max, -1.0 / (4.0 * np.pi), chi / N, out)
    return out


# --- grid-backed drift fields ---------------------------------------------------

class ControlDriftFields:
    """Per-time-bin samples of sign * chi * (grad phi_tilde_eps * f) on the grid."""

    def __init__(self, f: ControlField | None, table: KernelTable, gspec: GridSpec,
                 chi: float, control_sign: float):
        self.gspec = gspec
        self.f = f
        self._fields: dict = {}
        if f is not None and not f.is_zero() and chi != 0.0:
            for m in range(f.spec.bins):
                fgrid = eval_bin_grid(f, m, gspec)
                if not np.any(fgrid.values):
                    continue
                self._fields[m] = control_sign * chi * convolve_gradient(fgrid, table)

    def drift_at(self, t: float, positions: np.ndarray) -> np.ndarray | None:
        if not self._fields or self.f is None:
            return None
        m = self.f.spec.bin_of(min(t, self.f.spec.T))
        comp = self._fields.get(m)
        if comp is None:
            return None
        return interpolate_vector(comp, self.gspec, positions)


class McKeanDriftFields:
    """chi * (grad phi_tilde_eps * rho_eps)(t, .) per PDE snapshot, lerped in t."""

    def __init__(self, rho_traj: list, table: KernelTable, chi: float):
        if len(rho_traj) < 2:
            raise SdeConfigurationError("need at least two snapshots for time interpolation")
        self.gspec = rho_traj[0].spec
        self.times = np.array([f.time_stamp for f in rho_traj])
        if not np.all(np.diff(self.times) > 0):
            raise SdeConfigurationError("snapshot times must increase")
        self._fields = [chi * convolve_gradient(f, table) for f in rho_traj]

    def drift_at(self, t: float, positions: np.ndarray) -> np.ndarray:
        t = min(max(t, self.times[0]), self.times[-1])
        s = int(np.searchsorted(self.times, t, side="right") - 1)
        s = min(s, len(self.times) - 2)
        w = (t - self.times[s]) / (self.times[s + 1] - self.times[s])
        a = interpolate_vector(self._fields[s], self.gspec, positions)
        b = interpolate_vector(self._fields[s + 1], self.gspec, positions)
        return (1.0 - w) * a + w * b


# --- stepping -------------------------------------------------------------------

def step(ens: ParticleEnsemble, control_fields: ControlDriftFields | None,
         table: KernelTable, params: PhysicsParams, cfg: SdeConfig,
         noise: np.ndarray) -> ParticleEnsemble:
    """One Euler-Maruyama step of the interacting system."""
    drift = pairwise_drift(ens, table, params.chi, cfg.force_method,
                           cfg.num_threads, params.L)
    if control_fields is not None:
        ctrl = control_fields.drift_at(ens.t, ens.positions)
        if ctrl is not None:
            drift = drift + ctrl
    new_pos = ens.positions + cfg.dt * drift + noise
    if not np.all(np.isfinite(new_pos)):
        raise RuntimeError(f"non-finite position in replica {ens.replica_id} at t={ens.t}")
    return replace(ens, positions=new_pos, t=ens.t + cfg.dt)


def step_mckean(ens: ParticleEnsemble, mckean_fields: McKeanDriftFields,
                control_fields: ControlDriftFields | None, params: PhysicsParams,
                cfg: SdeConfig, noise: np.ndarray) -> ParticleEnsemble:
    """One Euler-Maruyama step of the McKean-Vlasov twin (shared noise)."""
    drift = mckean_fields.drift_at(ens.t, ens.positions)
    if control_fields is not None:
        ctrl = control_fields.drift_at(ens.t, ens.positions)
        if ctrl is not None:
            drift = drift + ctrl
    new_pos = ens.positions + cfg.dt * drift + noise
    if not np.all(np.isfinite(new_pos)):
        raise RuntimeError(f"non-finite xbar position in replica {ens.replica_id} at t={ens.t}")
    return replace(ens, positions=new_pos, t=ens.t + cfg.dt)


def snapshot_schedule(T: float, K: int, dt: float) -> tuple:
    """(steps per snapshot interval, exact dt) so saves land on step times."""
    t_save = T / K
    per = max(1, int(np.ceil(t_save / dt - 1e-12)))
    return per, t_save / per


@dataclass
class ReplicaRun:
    """Snapshots of one replica: positions (and twin positions when coupled)."""

    times: np.ndarray
    positions: list                 # list of (N, 3) arrays at snapshot times
    xbar_positions: list | None
    max_deviation: np.ndarray | None  # per snapshot, coupled runs only
    replica_id: int
    out_of_box: int                 # particles outside the box at final time


def run_replica(N: int, rho0: GaussianMixture, f: ControlField | None,
                table: KernelTable, params: PhysicsParams, cfg: SdeConfig,
                gspec: GridSpec, seed: int, replica_id: int, K: int,
                T: float | None = None,
                rho_eps_traj: list | None = None) -> ReplicaRun:
    """Simulate one replica over [0, T]; couples a McKean twin when a
    regularized PDE trajectory is supplied."""
    T = params.T if T is None else T
    per, dt = snapshot_schedule(T, K, cfg.dt)
    cfg = replace(cfg, dt=dt)
    ens = sample_initial(N, rho0, seed, replica_id)
    control_fields = ControlDriftFields(f, table, gspec, params.chi, cfg.control_sign)
    coupled = rho_eps_traj is not None
    if coupled:
        mk = McKeanDriftFields(rho_eps_traj, table, params.chi)
        xbar = replace(ens, positions=ens.positions.copy())
    times = [0.0]
    snaps = [ens.positions.copy()]
    xsnaps = [ens.positions.copy()] if coupled else None
    devs = [0.0] if coupled else None
    step_idx = 0
    for s in range(K):
        for _ in range(per):
            noise = brownian_increments(seed, replica_id, step_idx, N, dt)
            ens = step(ens, control_fields, table, params, cfg, noise)
            if coupled:
                xbar = step_mckean(xbar, mk, control_fields, params, cfg, noise)
            step_idx += 1
        times.append(ens.t)
        snaps.append(ens.positions.copy())
        if coupled:
            xsnaps.append(xbar.positions.copy())
            devs.append(float(np.sqrt(((ens.positions - xbar.positions) ** 2).sum(axis=1)).max()))
    outside = int(np.any(np.abs(ens.positions) >= params.L, axis=1).sum())
    return ReplicaRun(np.asarray(times), snaps, xsnaps,
                      np.asarray(devs) if coupled else None, replica_id, outside)


# --- exponent bookkeeping --------------------------------------------------------

def beta_star(alpha: float, theta1: float, d: int, chi: float, t: float) -> tuple:
    """min{1/(2d), alpha/(d+1), (1/2-alpha)/(d-1), |alpha-theta1|/(2 chi t)} and
    the list of binding terms.  The last term uses |alpha-theta1|: the proof's
    Gronwall step needs beta <= (theta1-alpha)/(2t) while the final display
    prints (alpha-theta1)/(2 chi t); the absolute value covers both readings."""
    if not 0 < alpha < 0.5:
        raise ValueError("alpha must lie in (0, 1/2)")
    if alpha >= theta1:
        raise ValueError("infeasible: alpha must be < theta1")
    terms = {
        "1/(2d)": 1.0 / (2 * d),
        "alpha/(d+1)": alpha / (d + 1),
        "(1/2-alpha)/(d-1)": (0.5 - alpha) / (d - 1),
        "|alpha-theta1|/(2 chi t)": abs(alpha - theta1) / (2 * chi * t),
    }
    value = min(terms.values())
    binding = sorted(name for name, v in terms.items() if v == value)
    return value, binding


def check_exponent_constraints(alpha: float, theta1: float, beta: float, d: int) -> list:
    """Violations of the conditions alpha < theta1, 2 beta d < 1,
    theta1 < 1/2 - beta (d-1); empty list when all hold."""
    out = []
    if not alpha < theta1:
        out.append(f"alpha={alpha} must be < theta1={theta1}")
    if not 2 * beta * d < 1:
        out.append(f"2*beta*d={2 * beta * d} must be < 1")
    if not theta1 < 0.5 - beta * (d - 1):
        out.append(f"theta1={theta1} must be < 1/2 - beta(d-1)={0.5 - beta * (d - 1)}")
    return out
