"""Admissible controls: time-binned Gaussian-bump expansions with a W^{1,q} cap.

A control is f(t, x) = sum_b coeffs[bin(t), b] * G_b(x) with G_b a Gaussian
bump of width w_b at center c_b, piecewise constant over M equal time bins on
[0, T].  Feasibility means the per-bin spatial W^{1,q} norm stays below the
profile l(t); projection rescales offending bins (exact for this constraint
by homogeneity of the norm).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .grid import DensityField, GridSpec, gradient, lp_norm


@dataclass(frozen=True)
class ControlSpaceSpec:
    T: float
    q: float = 4.0                         # spatial Sobolev exponent, > d
    r: float = 4.0                         # time exponent of the bound profile, > 2
    l_profile: tuple = (1.0,)              # per-bin bound l(t); length 1 = constant
    bins: int = 1                          # M time bins on [0, T]
    centers: tuple = ((0.0, 0.0, 0.0),)    # one Gaussian bump per entry
    widths: tuple = (0.8,)

    def __post_init__(self):
        if self.q <= 3:
            raise ValueError("q must exceed d=3")
        if self.r <= 2:
            raise ValueError("r must exceed 2")
        if self.bins < 1:
            raise ValueError("bins must be >= 1")
        if len(self.centers) != len(self.widths):
            raise ValueError("centers and widths must pair up")
        if any(w <= 0 for w in self.widths):
            raise ValueError("bump widths must be positive")
        if len(self.l_profile) not in (1, self.bins):
            raise ValueError("l_profile must be scalar or per-bin")
        if any(l <= 0 for l in self.l_profile):
            raise ValueError("l(t) must be positive")

    @property
    def n_bumps(self) -> int:
        return len(self.centers)

    def l_at_bin(self, m: int) -> float:
        return float(self.l_profile[0] if len(self.l_profile) == 1 else self.l_profile[m])

    def bin_of(self, t: float) -> int:
        if not 0 <= t <= self.T * (1 + 1e-12):
            raise ValueError(f"t={t} outside [0, {self.T}]")
        return min(int(t / self.T * self.bins), self.bins - 1)


@dataclass
class ControlField:
    spec: ControlSpaceSpec
    coeffs: np.ndarray  # (bins, n_bumps)

    def __post_init__(self):
        self.coeffs = np.atleast_2d(np.asarray(self.coeffs, dtype=float))
        if self.coeffs.shape != (self.spec.bins, self.spec.n_bumps):
            raise ValueError(f"coeffs shape {self.coeffs.shape} != "
                             f"({self.spec.bins}, {self.spec.n_bumps})")

    def copy(self) -> "ControlField":
        return ControlField(self.spec, self.coeffs.copy())

    def is_zero(self) -> bool:
        return not np.any(self.coeffs)


def zero_control(spec: ControlSpaceSpec) -> ControlField:
    return ControlField(spec, np.zeros((spec.bins, spec.n_bumps)))


def _bumps(spec: ControlSpaceSpec, points: np.ndarray) -> np.ndarray:
    """(..., n_bumps) bump values at points (..., 3)."""
    pts = np.asarray(points, dtype=float)
    out = np.empty(pts.shape[:-1] + (spec.n_bumps,))
    for b, (c, w) in enumerate(zip(spec.centers, spec.widths)):
        d2 = np.sum((pts - np.asarray(c)) ** 2, axis=-1)
        out[..., b] = np.exp(-d2 / (2 * w * w))
    return out


def eval_control(f: ControlField, t: float, points: np.ndarray) -> np.ndarray:
    """f(t, x) at points of shape (..., 3)."""
    row = f.coeffs[f.spec.bin_of(t)]
    return _bumps(f.spec, points) @ row


def eval_grid(f: ControlField, t: float, gspec: GridSpec) -> DensityField:
    """f(t, .) sampled on the grid nodes."""
    vals = eval_bin_grid(f, f.spec.bin_of(t), gspec)
    vals.time_stamp = t
    return vals


def eval_bin_grid(f: ControlField, m: int, gspec: GridSpec) -> DensityField:
    X, Y, Z = gspec.meshes()
    vals = np.zeros((gspec.n,) * 3)
    for b, (c, w) in enumerate(zip(f.spec.centers, f.spec.widths)):
        coef = f.coeffs[m, b]
        if coef == 0.0:
            continue
        d2 = (X - c[0]) ** 2 + (Y - c[1]) ** 2 + (Z - c[2]) ** 2
        vals += coef * np.exp(-d2 / (2 * w * w))
    return DensityField(gspec, vals)


def _grad_bin_grid(f: ControlField, m: int, gspec: GridSpec) -> np.ndarray:
    """Analytic gradient of the bin-m control on the grid, (3, n, n, n)."""
    X, Y, Z = gspec.meshes()
    out = np.zeros((3, gspec.n, gspec.n, gspec.n))
    for b, (c, w) in enumerate(zip(f.spec.centers, f.spec.widths)):
        coef = f.coeffs[m, b]
        if coef == 0.0:
            continue
        d2 = (X - c[0]) ** 2 + (Y - c[1]) ** 2 + (Z - c[2]) ** 2
        g = coef * np.exp(-d2 / (2 * w * w)) / (w * w)
        out[0] -= g * (X - c[0])
        out[1] -= g * (Y - c[1])
        out[2] -= g * (Z - c[2])
    return out


def w1q_norm(f: ControlField, m: int, gspec: GridSpec) -> float:
    """Per-bin W^{1,q} norm by grid quadrature with the analytic gradient."""
    q = f.spec.q
    vals = eval_bin_grid(f, m, gspec).values
    g = _grad_bin_grid(f, m, gspec)
    gmag = np.sqrt(np.sum(g * g, axis=0))
    total = (np.abs(vals) ** q).sum() + (gmag**q).sum()
    return float(total * gspec.cell_volume()) ** (1.0 / q)


_PROJECT_SLACK = 1e-9  # bins within this of the bound are left untouched (idempotence)


def project(f: ControlField, gspec: GridSpec) -> ControlField:
    """Radial projection onto the feasible set: rescale each offending bin so
    its W^{1,q} norm equals l(t_bin).  Exact by norm homogeneity; idempotent."""
    out = f.copy()
    for m in range(f.spec.bins):
        bound = f.spec.l_at_bin(m)
        norm = w1q_norm(out, m, gspec)
        if norm > bound * (1.0 + _PROJECT_SLACK):
            out.coeffs[m] *= bound / norm
    return out


def is_feasible(f: ControlField, gspec: GridSpec, slack: float = 1e-6) -> bool:
    return all(w1q_norm(f, m, gspec) <= f.spec.l_at_bin(m) * (1 + slack)
               for m in range(f.spec.bins))


def lr_norm_of_l(spec: ControlSpaceSpec) -> float:
    """(int_0^T l(t)^r dt)^(1/r); exact for the piecewise-constant profile."""
    l = np.asarray(spec.l_profile, dtype=float)
    if l.size == 1:
        return float(l[0] * spec.T ** (1.0 / spec.r))
    dt = spec.T / spec.bins
    return float((np.sum(l**spec.r) * dt) ** (1.0 / spec.r))


# --- serialization (round-trips bit-exactly via repr of floats) ---------------

def control_to_text(f: ControlField) -> str:
    s = f.spec
    lines = [
        "kscontrol-control v1",
        f"T={float(s.T)!r}",
        f"q={float(s.q)!r}",
        f"r={float(s.r)!r}",
        f"bins={s.bins}",
        "l_profile=" + ",".join(repr(float(x)) for x in s.l_profile),
        "widths=" + ",".join(repr(float(x)) for x in s.widths),
    ]
    for c in s.centers:
        lines.append("center=" + ",".join(repr(float(x)) for x in c))
    for m in range(s.bins):
        lines.append("row=" + ",".join(repr(float(x)) for x in f.coeffs[m]))
    return "\n".join(lines) + "\n"


def control_from_text(text: str) -> ControlField:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if lines[0] != "kscontrol-control v1":
        raise ValueError("not a control file")
    kv = {}
    centers, rows = [], []
    for ln in lines[1:]:
        key, _, val = ln.partition("=")
        if key == "center":
            centers.append(tuple(float(x) for x in val.split(",")))
        elif key == "row":
            rows.append([float(x) for x in val.split(",")])
        else:
            kv[key] = val
    spec = ControlSpaceSpec(
        T=float(kv["T"]), q=float(kv["q"]), r=float(kv["r"]),
        l_profile=tuple(float(x) for x in kv["l_profile"].split(",")),
        bins=int(kv["bins"]), centers=tuple(centers),
        widths=tuple(float(x) for x in kv["widths"].split(",")))
    return ControlField(spec, np.asarray(rows))
