"""Analytic Gaussian mixtures used for initial data and tracking targets.

Both the PDE and the particle pipeline consume the same analytic spec: the
PDE samples it to the grid (renormalized to exact discrete unit mass), the
particle sampler draws i.i.d. points from it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid import DensityField, GridSpec


@dataclass(frozen=True)
class GaussianMixture:
    """Isotropic Gaussian mixture sum_k w_k N(center_k, sigma_k^2 I)."""

    weights: tuple = (1.0,)
    centers: tuple = ((0.0, 0.0, 0.0),)
    sigmas: tuple = (1.0,)

    def __post_init__(self):
        if not len(self.weights) == len(self.centers) == len(self.sigmas):
            raise ValueError("weights, centers, sigmas must have equal length")
        if abs(sum(self.weights) - 1.0) > 1e-12:
            raise ValueError("mixture weights must sum to 1")
        if any(s <= 0 for s in self.sigmas):
            raise ValueError("sigmas must be positive")

    def pdf(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        out = np.zeros(points.shape[:-1])
        for w, c, s in zip(self.weights, self.centers, self.sigmas):
            d2 = np.sum((points - np.asarray(c)) ** 2, axis=-1)
            out += w * (2 * np.pi * s * s) ** -1.5 * np.exp(-d2 / (2 * s * s))
        return out

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        comp = rng.choice(len(self.weights), size=n, p=np.asarray(self.weights))
        pts = rng.standard_normal((n, 3))
        sig = np.asarray(self.sigmas)[comp][:, None]
        cen = np.asarray(self.centers)[comp]
        return cen + sig * pts

    def second_moment(self) -> float:
        """E|X|^2 = sum_k w_k (|c_k|^2 + 3 sigma_k^2)."""
        return float(sum(w * (np.dot(c, c) + 3 * s * s)
                         for w, c, s in zip(self.weights, self.centers, self.sigmas)))

    def to_grid(self, spec: GridSpec, renormalize: bool = True) -> DensityField:
        X, Y, Z = spec.meshes()
        vals = np.zeros((spec.n,) * 3)
        for w, c, s in zip(self.weights, self.centers, self.sigmas):
            d2 = (X - c[0]) ** 2 + (Y - c[1]) ** 2 + (Z - c[2]) ** 2
            vals += w * (2 * np.pi * s * s) ** -1.5 * np.exp(-d2 / (2 * s * s))
        f = DensityField(spec, vals)
        if renormalize:
            f.values /= f.mass
        return f

    def heat_evolved(self, t: float) -> "GaussianMixture":
        """Mixture after free diffusion d rho/dt = Laplace rho for time t."""
        return GaussianMixture(self.weights, self.centers,
                               tuple(float(np.sqrt(s * s + 2.0 * t)) for s in self.sigmas))

    def as_dict(self) -> dict:
        return {"weights": list(self.weights),
                "centers": [list(c) for c in self.centers],
                "sigmas": list(self.sigmas)}

    @staticmethod
    def from_dict(d: dict) -> "GaussianMixture":
        return GaussianMixture(tuple(d["weights"]),
                               tuple(tuple(c) for c in d["centers"]),
                               tuple(d["sigmas"]))


def isotropic_gaussian(sigma: float, center=(0.0, 0.0, 0.0)) -> GaussianMixture:
    return GaussianMixture((1.0,), (tuple(center),), (sigma,))
