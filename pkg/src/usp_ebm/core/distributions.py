"""
Target, proposal and grid distributions for usp-ebm

Analytic Gaussian-mixture targets, box domains and proposals, plus midpoint
quadrature on uniform grids for normalizing EBM densities in one and two
dimensions. Densities stay in log space until the final exponentiation.
"""

from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Optional, Sequence, Tuple, Union

import numpy as np
from cachetools import LRUCache, cached
from loguru import logger
from scipy.special import logsumexp
from scipy.stats import norm

from ..utils.config import get_settings
from ..utils.io import write_csv
from .energy import EnergyModel

Resolution = Union[int, Sequence[int]]

MIN_RESOLUTION = 16
MAX_QUADRATURE_DIM = 2


@dataclass(frozen=True, eq=False)
class BoxDomain:
    """Axis-aligned box Omega = [lo, hi]"""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lo, dtype=np.float64)).copy()
        hi = np.atleast_1d(np.asarray(self.hi, dtype=np.float64)).copy()
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError(
                f"BoxDomain bounds must be matching vectors, got {lo} and {hi}"
            )
        if not np.all(lo < hi):
            raise ValueError(
                f"BoxDomain requires lo < hi componentwise, got {lo} and {hi}"
            )
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def cube(cls, lo: float, hi: float, dim: int) -> "BoxDomain":
        return cls(np.full(dim, float(lo)), np.full(dim, float(hi)))

    @property
    def dim(self) -> int:
        return self.lo.size

    @property
    def widths(self) -> np.ndarray:
        return self.hi - self.lo

    @property
    def volume(self) -> float:
        return float(np.prod(self.widths))

    @property
    def diameter(self) -> float:
        return float(np.linalg.norm(self.widths))

    def contains(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64).reshape(-1, self.dim)
        return np.all((points >= self.lo) & (points <= self.hi), axis=1)

    def project(self, points: np.ndarray) -> np.ndarray:
        """Euclidean projection onto the box (componentwise clip)"""
        return np.clip(points, self.lo, self.hi)

    def uniform(self, count: int, rng: np.random.Generator) -> np.ndarray:
        return self.lo + rng.random((int(count), self.dim)) * self.widths

    def same_as(self, other: "BoxDomain") -> bool:
        return bool(
            np.array_equal(self.lo, other.lo) and np.array_equal(self.hi, other.hi)
        )

    def to_dict(self) -> Dict[str, Any]:
        return {"lo": self.lo.tolist(), "hi": self.hi.tolist()}


@dataclass(frozen=True, eq=False)
class GaussianMixture:
    """Mixture of isotropic Gaussians with simplex weights"""

    weights: np.ndarray
    means: np.ndarray
    stddevs: np.ndarray

    def __post_init__(self):
        weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        means = np.asarray(self.means, dtype=np.float64)
        if means.ndim == 1:
            means = means.reshape(-1, 1)
        stddevs = np.asarray(self.stddevs, dtype=np.float64).reshape(-1)
        if not (weights.size == means.shape[0] == stddevs.size):
            raise ValueError(
                f"Mixture has {weights.size} weights, {means.shape[0]} means and "
                f"{stddevs.size} stddevs"
            )
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-12:
            raise ValueError(f"Mixture weights must lie on the simplex, got {weights}")
        if not np.all(stddevs > 0):
            raise ValueError(f"Mixture stddevs must be > 0, got {stddevs}")
        for name, value in (
            ("weights", weights), ("means", means), ("stddevs", stddevs)
        ):
            value.setflags(write=False)
            object.__setattr__(self, name, value)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return self.weights.size

    def sample(self, count: int, rng: np.random.Generator) -> np.ndarray:
        if count < 1:
            raise ValueError(f"Sample count must be >= 1, got {count}")
        components = rng.choice(self.n_components, size=int(count), p=self.weights)
        noise = rng.standard_normal((int(count), self.dim))
        return self.means[components] + self.stddevs[components, None] * noise

    def sample_component(
        self, index: int, count: int, rng: np.random.Generator
    ) -> np.ndarray:
        noise = rng.standard_normal((int(count), self.dim))
        return self.means[index] + self.stddevs[index] * noise

    def component_log_densities(self, points: np.ndarray) -> np.ndarray:
        """log(w_k N(x; mu_k, sigma_k^2 I)) per point and component, shape (m, K)"""
        points = np.asarray(points, dtype=np.float64).reshape(-1, self.dim)
        sq = np.sum((points[:, None, :] - self.means[None, :, :]) ** 2, axis=2)
        var = self.stddevs**2
        log_norm = -0.5 * self.dim * np.log(2.0 * np.pi * var)
        return np.log(self.weights) + log_norm - sq / (2.0 * var)

    def log_density(self, points: np.ndarray) -> np.ndarray:
        return logsumexp(self.component_log_densities(points), axis=1)

    def nearest_component(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64).reshape(-1, self.dim)
        sq = np.sum((points[:, None, :] - self.means[None, :, :]) ** 2, axis=2)
        return np.argmin(sq, axis=1)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "stddevs": self.stddevs.tolist(),
        }


def two_gaussians_1d(offset: float = 0.5, stddev: float = 0.05) -> GaussianMixture:
    """Equal-weight mixture of N(-offset, stddev^2) and N(offset, stddev^2)"""
    return GaussianMixture(
        weights=np.array([0.5, 0.5]),
        means=np.array([[-offset], [offset]]),
        stddevs=np.array([stddev, stddev]),
    )


def six_mode_ring_2d(radius: float = 1.0, stddev: float = 0.1) -> GaussianMixture:
    """Six equal-weight modes at (cos t, sin t), t = n pi / 3"""
    angles = np.arange(6) * np.pi / 3.0
    means = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    return GaussianMixture(
        weights=np.full(6, 1.0 / 6.0), means=means, stddevs=np.full(6, stddev)
    )


def mog_sample(
    mog: GaussianMixture, count: int, rng: np.random.Generator
) -> np.ndarray:
    return mog.sample(count, rng)


def mog_log_density(mog: GaussianMixture, x: np.ndarray) -> Union[float, np.ndarray]:
    """log p(x); a float for a single point, an array for a batch"""
    array = np.asarray(x, dtype=np.float64)
    if array.ndim == 2 and array.shape[1] != mog.dim:
        raise ValueError(
            f"Dimension mismatch: mixture is {mog.dim}-D, got {array.shape}"
        )
    if array.ndim < 2 and array.size != mog.dim and mog.dim != 1:
        raise ValueError(
            f"Dimension mismatch: mixture is {mog.dim}-D, got {array.shape}"
        )
    values = mog.log_density(array)
    single = array.ndim == 0 or (array.ndim == 1 and (mog.dim > 1 or array.size == 1))
    return float(values[0]) if single else values


class ProposalKind(str, Enum):
    """Proposal families for chain and particle initialization"""

    UNIFORM_BOX = "uniform-box"
    GAUSSIAN = "gaussian"
    UNIFORM_SUBINTERVAL = "uniform-subinterval"
    MIXTURE_COMPONENT = "mixture-component"


@dataclass(frozen=True, eq=False)
class Proposal:
    """Initialization law q_0"""

    kind: ProposalKind
    box: Optional[BoxDomain] = None
    mean: Optional[np.ndarray] = None
    std: float = 1.0
    mixture: Optional[GaussianMixture] = None
    component: int = 0

    def __post_init__(self):
        if self.kind in (ProposalKind.UNIFORM_BOX, ProposalKind.UNIFORM_SUBINTERVAL):
            if self.box is None:
                raise ValueError(f"{self.kind.value} proposal needs a box")
        elif self.kind == ProposalKind.GAUSSIAN:
            if self.mean is None or not self.std > 0:
                raise ValueError("gaussian proposal needs a mean and std > 0")
        elif self.kind == ProposalKind.MIXTURE_COMPONENT:
            count = 0 if self.mixture is None else self.mixture.n_components
            if not 0 <= self.component < count:
                raise ValueError(
                    "mixture-component proposal needs a valid component index"
                )

    @classmethod
    def uniform(cls, box: BoxDomain) -> "Proposal":
        return cls(ProposalKind.UNIFORM_BOX, box=box)

    @classmethod
    def subinterval(cls, lo: float, hi: float) -> "Proposal":
        box = BoxDomain(np.array([lo]), np.array([hi]))
        return cls(ProposalKind.UNIFORM_SUBINTERVAL, box=box)

    @classmethod
    def gaussian(cls, mean: Sequence[float], std: float) -> "Proposal":
        return cls(
            ProposalKind.GAUSSIAN, mean=np.atleast_1d(np.asarray(mean, float)), std=std
        )

    @classmethod
    def mixture_component(cls, mixture: GaussianMixture, component: int) -> "Proposal":
        return cls(ProposalKind.MIXTURE_COMPONENT, mixture=mixture, component=component)

    @property
    def dim(self) -> int:
        if self.box is not None:
            return self.box.dim
        if self.mean is not None:
            return self.mean.size
        return self.mixture.dim

    def sample(self, count: int, rng: np.random.Generator) -> np.ndarray:
        if self.kind in (ProposalKind.UNIFORM_BOX, ProposalKind.UNIFORM_SUBINTERVAL):
            return self.box.uniform(count, rng)
        if self.kind == ProposalKind.GAUSSIAN:
            return self.mean + self.std * rng.standard_normal(
                (int(count), self.mean.size)
            )
        return self.mixture.sample_component(self.component, count, rng)


def _normalize_resolution(domain: BoxDomain, resolution: Resolution) -> Tuple[int, ...]:
    if np.isscalar(resolution):
        res = (int(resolution),) * domain.dim
    else:
        res = tuple(int(r) for r in resolution)
    if len(res) != domain.dim:
        raise ValueError(
            f"Resolution {res} does not match domain dimension {domain.dim}"
        )
    return res


@cached(cache=LRUCache(maxsize=get_settings().grid_cache_size))
def _cell_centers(
    lo: Tuple[float, ...], hi: Tuple[float, ...], res: Tuple[int, ...]
) -> np.ndarray:
    axes = [
        lo[a] + (np.arange(res[a]) + 0.5) * (hi[a] - lo[a]) / res[a] for a in range(
            len(res)
        )
    ]
    mesh = np.meshgrid(*axes, indexing="ij")
    centers = np.stack([m.ravel() for m in mesh], axis=1)
    centers.setflags(write=False)
    return centers


def cell_centers(domain: BoxDomain, resolution: Resolution) -> np.ndarray:
    """Midpoints of a uniform grid over the domain, C order (axis 0 slowest)"""
    res = _normalize_resolution(domain, resolution)
    return _cell_centers(tuple(domain.lo.tolist()), tuple(domain.hi.tolist()), res)


@dataclass(frozen=True, eq=False)
class DensityGrid:
    """
    Cellwise density on a uniform grid over a box domain.

    `log_values` is flattened in C order over `resolution`. For grids built
    by quadrature, `log_partition` holds log Z of the unnormalized density.
    """

    domain: BoxDomain
    resolution: Tuple[int, ...]
    log_values: np.ndarray
    normalized: bool = True
    log_partition: Optional[float] = None
    label: str = ""

    def __post_init__(self):
        res = _normalize_resolution(self.domain, self.resolution)
        log_values = np.asarray(self.log_values, dtype=np.float64).reshape(-1)
        if log_values.size != int(np.prod(res)):
            raise ValueError(f"Grid of resolution {res} got {log_values.size} values")
        log_values.setflags(write=False)
        object.__setattr__(self, "resolution", res)
        object.__setattr__(self, "log_values", log_values)

    @property
    def values(self) -> np.ndarray:
        return np.exp(self.log_values)

    @property
    def cell_widths(self) -> np.ndarray:
        return self.domain.widths / np.asarray(self.resolution)

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.cell_widths))

    @property
    def centers(self) -> np.ndarray:
        return cell_centers(self.domain, self.resolution)

    def cell_masses(self) -> np.ndarray:
        return self.values * self.cell_volume

    def mass(self) -> float:
        return float(np.sum(self.values) * self.cell_volume)

    def mean(self) -> np.ndarray:
        return self.cell_masses() @ self.centers

    def variance(self) -> np.ndarray:
        centered = self.centers - self.mean()
        return self.cell_masses() @ (centered * centered)

    def same_grid(self, other: "DensityGrid") -> bool:
        return self.domain.same_as(other.domain) and self.resolution == other.resolution

    def sample(self, count: int, rng: np.random.Generator) -> np.ndarray:
        """Exact draws: a cell by its mass, then uniform within the cell"""
        masses = self.cell_masses()
        cells = rng.choice(masses.size, size=int(count), p=masses / masses.sum())
        jitter = (rng.random((int(count), self.domain.dim)) - 0.5) * self.cell_widths
        return self.centers[cells] + jitter

    def to_csv(self, path: Union[str, Path]) -> Path:
        header = [f"x{a}" for a in range(self.domain.dim)] + ["density", "log_density"]
        rows = np.column_stack([self.centers, self.values, self.log_values])
        return write_csv(path, header, rows.tolist())


def _grid_from_log_weights(
    domain: BoxDomain, res: Tuple[int, ...], log_weights: np.ndarray, label: str
) -> DensityGrid:
    cell_volume = float(np.prod(domain.widths / np.asarray(res)))
    finite = np.isfinite(log_weights)
    if not np.any(finite):
        raise ValueError(f"All log weights of grid '{label}' are non-finite")
    log_weights = np.where(finite | (log_weights == -np.inf), log_weights, -np.inf)
    log_z = float(logsumexp(log_weights) + np.log(cell_volume))
    return DensityGrid(
        domain=domain,
        resolution=res,
        log_values=log_weights - log_z,
        normalized=True,
        log_partition=log_z,
        label=label,
    )


def _check_quadrature_domain(domain: BoxDomain, res: Tuple[int, ...]):
    if domain.dim > MAX_QUADRATURE_DIM:
        raise ValueError(
            f"Quadrature is limited to {MAX_QUADRATURE_DIM} dimensions, "
            f"got {domain.dim}; use a sampling estimator instead"
        )
    if min(res) < MIN_RESOLUTION:
        raise ValueError(
            f"Quadrature resolution must be >= {MIN_RESOLUTION} per axis, got {res}"
        )


def model_energies(model: EnergyModel, points: np.ndarray) -> np.ndarray:
    """Energies over many points, evaluated in row chunks"""
    chunk = get_settings().chunk_size
    if points.shape[0] <= chunk:
        return model.energy(points)
    return np.concatenate(
        [model.energy(points[i : i + chunk]) for i in range(0, points.shape[0], chunk)]
    )


def quadrature_normalize(
    model: EnergyModel, rho: float, domain: BoxDomain, resolution: Resolution
) -> DensityGrid:
    """
    Normalized exp(-rho E) on a midpoint grid.

    The returned grid's `log_partition` is log Z(theta, rho) up to
    quadrature error.
    """
    if not rho > 0:
        raise ValueError(f"rho must be > 0, got {rho}")
    res = _normalize_resolution(domain, resolution)
    _check_quadrature_domain(domain, res)
    if model.input_dim != domain.dim:
        raise ValueError(
            f"Dimension mismatch: model is {model.input_dim}-D, "
            f"domain is {domain.dim}-D"
        )
    energies = model_energies(model, cell_centers(domain, res))
    bad = ~np.isfinite(energies)
    if np.any(bad):
        logger.warning(
            f"{int(bad.sum())} grid cells have non-finite energy; given zero mass"
        )
    log_weights = np.where(bad, -np.inf, -rho * energies)
    return _grid_from_log_weights(domain, res, log_weights, label=f"model(rho={rho:g})")


def log_density_grid(
    log_fn, domain: BoxDomain, resolution: Resolution, label: str = ""
) -> DensityGrid:
    """Normalize an arbitrary log density (up to a constant) on a midpoint grid"""
    res = _normalize_resolution(domain, resolution)
    _check_quadrature_domain(domain, res)
    return _grid_from_log_weights(
        domain, res, np.asarray(log_fn(cell_centers(domain, res))), label
    )


def target_grid(
    mog: GaussianMixture, domain: BoxDomain, resolution: Resolution
) -> DensityGrid:
    return log_density_grid(mog.log_density, domain, resolution, label="target")


def binned_mixture_grid(
    mog: GaussianMixture, domain: BoxDomain, resolution: Resolution
) -> DensityGrid:
    """
    Exact per-cell mass of the mixture restricted to the domain, as a
    normalized grid. Components are isotropic, so each cell mass is a
    product of per-axis normal CDF differences.
    """
    res = _normalize_resolution(domain, resolution)
    if mog.dim != domain.dim:
        raise ValueError(
            f"Dimension mismatch: mixture is {mog.dim}-D, domain is {domain.dim}-D"
        )
    masses = np.zeros(int(np.prod(res)))
    for k in range(mog.n_components):
        per_axis = []
        for a in range(domain.dim):
            edges = np.linspace(domain.lo[a], domain.hi[a], res[a] + 1)
            cdf = norm.cdf(edges, loc=mog.means[k, a], scale=mog.stddevs[k])
            per_axis.append(np.diff(cdf))
        outer = per_axis[0]
        for axis_mass in per_axis[1:]:
            outer = np.multiply.outer(outer, axis_mass)
        masses += mog.weights[k] * np.ravel(outer)
    cell_volume = float(np.prod(domain.widths / np.asarray(res)))
    with np.errstate(divide="ignore"):
        log_values = np.log(masses / masses.sum()) - np.log(cell_volume)
    return DensityGrid(
        domain=domain, resolution=res, log_values=log_values, label="binned-target"
    )


def histogram_grid(
    samples: np.ndarray,
    domain: BoxDomain,
    resolution: Resolution,
    label: str = "histogram",
) -> DensityGrid:
    """Normalized histogram on the grid; samples are clipped into the domain"""
    res = _normalize_resolution(domain, resolution)
    samples = np.asarray(samples, dtype=np.float64).reshape(-1, domain.dim)
    samples = samples[np.all(np.isfinite(samples), axis=1)]
    if samples.shape[0] == 0:
        raise ValueError("Cannot build a histogram from zero finite samples")
    edges = [
        np.linspace(domain.lo[a], domain.hi[a], res[a] + 1) for a in range(domain.dim)
    ]
    counts, _ = np.histogramdd(domain.project(samples), bins=edges)
    cell_volume = float(np.prod(domain.widths / np.asarray(res)))
    density = counts.ravel() / (samples.shape[0] * cell_volume)
    with np.errstate(divide="ignore"):
        log_values = np.log(density)
    return DensityGrid(
        domain=domain, resolution=res, log_values=log_values, label=label
    )


def tv_distance(a: DensityGrid, b: DensityGrid) -> float:
    """Total variation distance 0.5 * sum |a - b| * cell volume"""
    if not a.same_grid(b):
        raise ValueError(
            f"Grid mismatch: {a.resolution} on {a.domain.to_dict()} vs "
            f"{b.resolution} on {b.domain.to_dict()}"
        )
    if not (a.normalized and b.normalized):
        raise ValueError("tv_distance requires normalized grids")
    tv = 0.5 * float(np.sum(np.abs(a.values - b.values))) * a.cell_volume
    return min(max(tv, 0.0), 1.0)
