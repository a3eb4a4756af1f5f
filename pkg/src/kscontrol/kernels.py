r"""Coulomb potential, its cutoff, the bump mollifier, and mollified lookup tables.

The interaction used by the particle system and the regularized PDE is the
mollified cutoff potential

    phi(r)        = C3 / r                      (3D Poisson fundamental solution)
    phi_tilde(r)  = phi(r)        for r >= 2*eps
                    C3 / (2*eps)  for r <  2*eps
    phi_tilde_eps = j_eps * phi_tilde           (3D convolution, bump mollifier)

All convolutions of radial functions are reduced to 1D quadratures with the
shell identity  (K*g)(r) = (2 pi / r) \int s K(s) [G(r+s) - G(|r-s|)] ds  where
G(u) = \int_0^u t g(t) dt, so nothing here touches a 3D grid.  phi_tilde_eps
is constant C3/(2 eps) for r <= eps and equals phi exactly for r >= 3 eps
(mean-value property of the harmonic phi), which pins the table to [0, 4 eps]
with an analytic tail.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.integrate import quad
from scipy.special import erf

C3 = 1.0 / (4.0 * np.pi)  # fundamental-solution normalization of -Laplace in 3D
D = 3


class KernelConstructionError(RuntimeError):
    """Radial quadrature failed to converge while building a table."""


@dataclass(frozen=True)
class PhysicsParams:
    """Global physical parameters: aggregation strength, horizon, box half-width."""

    chi: float
    T: float
    L: float
    d: int = 3

    def __post_init__(self):
        if self.d != 3:
            raise ValueError("only d=3 is supported (the log-kernel d=2 case is out of scope)")
        # chi = 0 is admitted: the pure-diffusion control cases exercise it
        if self.chi < 0 or self.T <= 0 or self.L <= 0:
            raise ValueError("chi must be >= 0, T and L positive")


@dataclass(frozen=True)
class KernelConfig:
    eps: float
    table_points: int = 4096
    quad_points: int = 128

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.table_points < 1024:
            raise ValueError("table_points must be >= 1024")


@lru_cache(maxsize=1)
def bump_normalization() -> float:
    """A such that A*exp(-1/(1-|y|^2)) on |y|<1 has unit mass in R^3."""
    val, err = quad(lambda s: np.exp(-1.0 / (1.0 - s * s)) * s * s, 0.0, 1.0,
                    epsabs=1e-15, epsrel=1e-15)
    if err > 1e-12:
        raise KernelConstructionError(f"bump normalization quadrature error {err:.2e}")
    return 1.0 / (4.0 * np.pi * val)


def bump_profile(s):
    """Unit-scale radial bump profile j(s), s = |y|, zero outside [0, 1)."""
    s = np.asarray(s, dtype=float)
    out = np.zeros_like(s)
    inside = np.abs(s) < 1.0
    out[inside] = bump_normalization() * np.exp(-1.0 / (1.0 - s[inside] ** 2))
    return out


def mollifier(x, eps: float):
    """j_eps(x) = eps^-3 j(|x|/eps) for points x of shape (..., 3)."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.asarray(x, dtype=float)
    r = np.sqrt(np.sum(x * x, axis=-1))
    return bump_profile(r / eps) / eps**3


def mollifier_radial(r, eps: float):
    """Radial profile j_eps(r)."""
    return bump_profile(np.asarray(r, dtype=float) / eps) / eps**3


def phi(r):
    """Coulomb potential C3/r; domain error for r <= 0."""
    r = np.asarray(r, dtype=float)
    if np.any(r <= 0):
        raise ValueError("phi requires r > 0")
    return C3 / r


def phi_tilde(r, eps: float):
    """Cutoff potential: C3/r outside 2*eps, constant plateau C3/(2*eps) inside."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    r = np.asarray(r, dtype=float)
    if np.any(r < 0):
        raise ValueError("phi_tilde requires r >= 0")
    return np.where(r >= 2 * eps, C3 / np.maximum(r, 2 * eps), C3 / (2 * eps))


# --- radial convolution machinery -------------------------------------------

def radial_convolution(r, profile, smax: float, G, g, quad_points: int = 128):
    """Value and radial derivative of (K*g)(|x|) for radial K and g.

    profile(s) is the radial profile of K on (0, smax]; G(u) = int_0^u t g(t) dt
    and g(u) = u * g_rad(u) are the partial moments of the other factor.
    """
    t, w = leggauss(quad_points)
    s = 0.5 * smax * (t + 1.0)
    ws = w * (0.5 * smax)
    ks = profile(s)
    r = np.atleast_1d(np.asarray(r, dtype=float))
    R, S = r[:, None], s[None, :]
    rsafe = np.where(r > 0, r, 1.0)
    val = 2 * np.pi * np.sum(ws * S * ks * (G(R + S) - G(np.abs(R - S))), axis=1) / rsafe
    dI = np.sum(ws * S * ks * (g(R + S) - np.sign(R - S) * g(np.abs(R - S))), axis=1)
    dval = -val / rsafe + 2 * np.pi * dI / rsafe
    return val, dval


def _G_tilde(u, eps):
    # int_0^u t*phi_tilde(t) dt, closed form
    u = np.asarray(u, dtype=float)
    return np.where(u <= 2 * eps, C3 * u * u / (4.0 * eps), C3 * (u - eps))


def _g_tilde(u, eps):
    u = np.asarray(u, dtype=float)
    return np.where(u <= 2 * eps, C3 * u / (2.0 * eps), np.full_like(u, C3))


def phi_tilde_eps_radial(r, eps: float, quad_points: int = 128):
    """(value, d/dr) of the mollified cutoff potential phi_tilde_eps.

    The shell integrand kinks where |r-s| or r+s crosses the cutoff seam 2*eps
    (G_tilde is only C^1 there), so the s-quadrature is split at
    s* = clip(|r-2eps|, 0, eps) per radius to keep Gauss-Legendre spectral.
    """
    t, w = leggauss(quad_points)
    r = np.atleast_1d(np.asarray(r, dtype=float))
    s_star = np.clip(np.abs(r - 2 * eps), 0.0, eps)
    lows = [np.zeros_like(r), s_star]
    highs = [s_star, np.full_like(r, eps)]
    S_parts, W_parts = [], []
    for lo, hi in zip(lows, highs):
        half = 0.5 * (hi - lo)
        S_parts.append(lo[:, None] + (t[None, :] + 1.0) * half[:, None])
        W_parts.append(w[None, :] * half[:, None])
    S = np.concatenate(S_parts, axis=1)
    W = np.concatenate(W_parts, axis=1)
    js = mollifier_radial(S, eps)
    R = r[:, None]
    rsafe = np.where(r > 0, r, 1.0)
    integ = np.sum(W * S * js * (_G_tilde(R + S, eps) - _G_tilde(np.abs(R - S), eps)), axis=1)
    val = 2 * np.pi * integ / rsafe
    dI = np.sum(W * S * js * (_g_tilde(R + S, eps)
                              - np.sign(R - S) * _g_tilde(np.abs(R - S), eps)), axis=1)
    dval = -val / rsafe + 2 * np.pi * dI / rsafe
    # the mollifier ball stays inside the plateau for r <= eps and inside the
    # harmonic region for r >= 3 eps, so both bands are exact:
    core = r <= eps
    val[core] = C3 / (2 * eps)
    dval[core] = 0.0
    far = r >= 3 * eps
    val[far] = C3 / r[far]
    dval[far] = -C3 / r[far] ** 2
    return val, dval


def gaussian_radial_antiderivatives(sigma: float):
    """(G, g) partial moments of the unit-mass isotropic Gaussian, closed form."""
    c = (2 * np.pi * sigma**2) ** -1.5

    def G(u):
        return c * sigma**2 * (1.0 - np.exp(-np.asarray(u) ** 2 / (2 * sigma**2)))

    def g(u):
        u = np.asarray(u)
        return u * c * np.exp(-(u**2) / (2 * sigma**2))

    return G, g


def newtonian_potential_of_gaussian(r, sigma: float):
    """phi * gaussian_sigma, closed form erf(r/(sqrt2 sigma))/(4 pi r)."""
    r = np.asarray(r, dtype=float)
    rs = np.where(r > 1e-14, r, 1.0)
    out = erf(rs / (np.sqrt(2) * sigma)) / (4 * np.pi * rs)
    limit0 = np.sqrt(2.0 / np.pi) / (4 * np.pi * sigma)
    return np.where(r > 1e-14, out, limit0)


def newtonian_field_of_gaussian(r, sigma: float):
    """d/dr of phi * gaussian_sigma (radial component of the force field)."""
    r = np.asarray(r, dtype=float)
    rs = np.where(r > 1e-14, r, 1.0)
    e = np.exp(-(rs**2) / (2 * sigma**2))
    out = (np.sqrt(2 / np.pi) / sigma * e * rs - erf(rs / (np.sqrt(2) * sigma))) / (4 * np.pi * rs**2)
    return np.where(r > 1e-14, out, 0.0)


# --- the lookup table --------------------------------------------------------

@dataclass
class KernelTable:
    """Dense radial samples of phi_tilde_eps on [0, 4 eps]; analytic beyond.

    Immutable after construction; shared reads from any number of workers are
    safe.  bounds holds finite-difference sup-norm estimates of the first three
    derivatives of the kernel (grad, Hessian, third) used by the scaling tests.
    """

    eps: float
    r_grid: np.ndarray
    phi_eps: np.ndarray
    dphi_eps: np.ndarray
    bounds: dict = field(default_factory=dict)

    @property
    def r_max(self) -> float:
        return float(self.r_grid[-1])

    @property
    def dr(self) -> float:
        return float(self.r_grid[1] - self.r_grid[0])

    def phi_at(self, r):
        r = np.asarray(r, dtype=float)
        out = np.interp(r, self.r_grid, self.phi_eps)
        tail = r >= self.r_max
        if np.any(tail):
            out = np.where(tail, C3 / np.maximum(r, self.r_max), out)
        return out

    def dphi_at(self, r):
        r = np.asarray(r, dtype=float)
        out = np.interp(r, self.r_grid, self.dphi_eps)
        tail = r >= self.r_max
        if np.any(tail):
            out = np.where(tail, -C3 / np.maximum(r, self.r_max) ** 2, out)
        return out

    def to_csv(self, path) -> None:
        data = np.column_stack([self.r_grid, self.phi_eps, self.dphi_eps])
        np.savetxt(path, data, delimiter=",", header="r,phi_eps,dphi_eps", comments="")


def _derivative_sup_norms(eps: float, quad_points: int) -> dict:
    # FD estimates on a fine probe grid over the active region [0, 4 eps]
    rr = np.linspace(0.0, 4 * eps, 4001)
    _, d1 = phi_tilde_eps_radial(rr, eps, quad_points)
    d2 = np.gradient(d1, rr)
    d3 = np.gradient(d2, rr)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(rr > 1e-9, d1 / rr, d2[0])  # Hessian eigenvalue psi'/r
    return {
        "grad": float(np.abs(d1).max()),
        "hess": float(max(np.abs(d2).max(), np.abs(ratio).max())),
        "third": float(np.abs(d3).max()),
    }


def build_kernel_table(cfg: KernelConfig, params: PhysicsParams) -> KernelTable:
    """Tabulate phi_tilde_eps and its radial derivative on [0, 4 eps]."""
    eps = cfg.eps
    if 4 * eps >= params.L:
        raise ValueError(f"kernel support 4*eps={4*eps} must stay inside the box half-width L={params.L}")
    r = np.linspace(0.0, 4 * eps, cfg.table_points)
    val, dval = phi_tilde_eps_radial(r, eps, cfg.quad_points)
    val2, dval2 = phi_tilde_eps_radial(r, eps, 2 * cfg.quad_points)
    refinement = max(np.abs(val - val2).max(), np.abs(dval - dval2).max())
    if refinement > 1e-8:
        raise KernelConstructionError(
            f"radial quadrature not converged: refinement difference {refinement:.2e} > 1e-8")
    # the profile is monotone with dphi <= 0 analytically; remove rounding lint
    dval2 = np.minimum(dval2, 0.0)
    val2 = np.minimum.accumulate(val2)
    return KernelTable(eps=eps, r_grid=r, phi_eps=val2, dphi_eps=dval2,
                       bounds=_derivative_sup_norms(eps, cfg.quad_points))


# --- appendix lemma error curves ---------------------------------------------

def fit_loglog_slope(xs, ys) -> float:
    """Least-squares slope of log(ys) against log(xs)."""
    return float(np.polyfit(np.log(np.asarray(xs, dtype=float)),
                            np.log(np.asarray(ys, dtype=float)), 1)[0])


def _sup_radius_grid(eps: float):
    # dense near the kernel core where the sup lives, coarser outside
    return np.concatenate([np.linspace(1e-6, max(6 * eps, 0.6), 4000),
                           np.linspace(max(6 * eps, 0.6), 3.0, 800)])


def grad_error_cutoff_vs_coulomb(sigma: float, eps: float, quad_points: int = 192) -> float:
    """sup_x |grad(phi_tilde - phi) * g|, g the unit Gaussian of width sigma."""
    G, g = gaussian_radial_antiderivatives(sigma)
    rr = _sup_radius_grid(eps)
    prof = lambda s: C3 / (2 * eps) - C3 / s  # (phi_tilde - phi) on (0, 2 eps)
    _, dval = radial_convolution(rr, prof, 2 * eps, G, g, quad_points)
    return float(np.abs(dval).max())


def grad_error_mollified_vs_coulomb(sigma: float, eps: float, quad_points: int = 192) -> float:
    """sup_x |grad(j_eps*phi - phi) * g| computed as |d/dr (j_eps*p) - p'|,
    p = phi * g the closed-form Newtonian potential of the Gaussian."""

    def Gp(u):
        u = np.asarray(u)
        return (u * erf(u / (np.sqrt(2) * sigma))
                + np.sqrt(2 / np.pi) * sigma * (np.exp(-(u**2) / (2 * sigma**2)) - 1.0)) / (4 * np.pi)

    def gp(u):
        return erf(np.asarray(u) / (np.sqrt(2) * sigma)) / (4 * np.pi)

    rr = _sup_radius_grid(eps)
    prof = lambda s: mollifier_radial(s, eps)
    _, dval = radial_convolution(rr, prof, eps, Gp, gp, quad_points)
    return float(np.abs(dval - newtonian_field_of_gaussian(rr, sigma)).max())


def grad_error_table_vs_coulomb(sigma: float, eps: float, quad_points: int = 192) -> float:
    """sup_x |grad(phi_tilde_eps - phi) * g| for the assembled kernel."""
    G, g = gaussian_radial_antiderivatives(sigma)
    rr = _sup_radius_grid(eps)

    def prof(s):
        val, _ = phi_tilde_eps_radial(s, eps, quad_points)
        return val - C3 / np.maximum(s, 1e-300)

    # difference kernel vanishes for r >= 3 eps
    _, dval = radial_convolution(rr, prof, 3 * eps, G, g, quad_points)
    return float(np.abs(dval).max())


def grad_cutoff_sup(sigma: float, eps: float, r_extent: float = 8.0, quad_points: int = 400) -> float:
    """sup_x |grad(phi_tilde * g)| for Gaussian g (appendix lemma-l quantity)."""
    G, g = gaussian_radial_antiderivatives(sigma)
    rr = _sup_radius_grid(eps)
    prof = lambda s: np.where(s < 2 * eps, C3 / (2 * eps), C3 / np.maximum(s, 1e-300))
    # phi_tilde has unbounded support; truncate where the Gaussian moments die
    smax = r_extent + 10 * sigma
    _, dval = radial_convolution(rr, prof, smax, G, g, quad_points)
    return float(np.abs(dval).max())
