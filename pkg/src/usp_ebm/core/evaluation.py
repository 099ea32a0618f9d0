"""
Evaluation metrics for usp-ebm

OOD detection metrics on density scores (score = -E, higher means more
in-distribution), per-mode probability mass of learned densities, and the
thin-shell concentration check for high-dimensional i.i.d. vectors.
"""

from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
from loguru import logger
from sklearn.metrics import average_precision_score, roc_curve

from ..utils.config import get_settings
from .distributions import BoxDomain, DensityGrid, GaussianMixture
from .energy import EnergyModel


@dataclass(frozen=True, eq=False)
class ScoreSet:
    """In- and out-of-distribution scores"""

    in_scores: np.ndarray
    out_scores: np.ndarray

    def __post_init__(self):
        for name in ("in_scores", "out_scores"):
            values = np.asarray(getattr(self, name), dtype=np.float64).reshape(-1)
            if values.size == 0:
                raise ValueError(f"{name} is empty")
            if not np.all(np.isfinite(values)):
                raise ValueError(f"{name} contains non-finite scores")
            object.__setattr__(self, name, values)

    @classmethod
    def from_energies(
        cls, model: EnergyModel, in_points: np.ndarray, out_points: np.ndarray
    ) -> "ScoreSet":
        return cls(-model.energy(in_points), -model.energy(out_points))

    def labeled(self):
        """(labels, scores) with in-distribution as the positive class"""
        labels = np.concatenate(
            [np.ones(self.in_scores.size), np.zeros(self.out_scores.size)]
        )
        return labels, np.concatenate([self.in_scores, self.out_scores])


def fpr_at_tpr(scores: ScoreSet, tpr_target: float = 0.95) -> float:
    """
    Out-score fraction at or above the largest threshold keeping at least
    `tpr_target` of the in-scores. Both classes use >= at the threshold.
    """
    if not 0.0 < tpr_target <= 1.0:
        raise ValueError(f"tpr_target must lie in (0, 1], got {tpr_target}")
    labels, values = scores.labeled()
    fpr, tpr, _ = roc_curve(labels, values, drop_intermediate=False)
    return float(fpr[np.argmax(tpr >= tpr_target)])


def aupr(scores: ScoreSet) -> float:
    """Step-wise area under the precision-recall curve, in-distribution positive"""
    labels, values = scores.labeled()
    return float(average_precision_score(labels, values))


# Thin-shell concentration
@dataclass(frozen=True)
class ComponentLaw:
    """Law of each i.i.d. coordinate"""

    name: str
    mean: float
    variance: float

    def sample(self, shape, rng: np.random.Generator) -> np.ndarray:
        if self.name == "uniform":
            return rng.uniform(-1.0, 1.0, size=shape)
        if self.name == "gaussian":
            return rng.standard_normal(shape)
        return np.full(shape, self.mean)


COMPONENT_LAWS = {
    "uniform": ComponentLaw("uniform", 0.0, 1.0 / 3.0),
    "gaussian": ComponentLaw("gaussian", 0.0, 1.0),
    "constant": ComponentLaw("constant", 1.0, 0.0),
}


def shell_concentration(
    d: int, count: int, component_law: str, eps: float, rng: np.random.Generator
) -> float:
    """Share of vectors with ||X|| in ((1-eps) r, (1+eps) r), r^2 = d (var + mean^2)"""
    if component_law not in COMPONENT_LAWS:
        raise ValueError(f"Unknown component law '{component_law}'")
    if d < 1 or count < 1 or not eps > 0:
        raise ValueError(
            f"Need d >= 1, count >= 1 and eps > 0, got {d}, {count}, {eps}"
        )
    law = COMPONENT_LAWS[component_law]
    radius = np.sqrt(d * (law.variance + law.mean**2))
    rows = max(1, get_settings().chunk_size * 64 // d)
    inside = 0
    for start in range(0, count, rows):
        block = law.sample((min(rows, count - start), d), rng)
        norms = np.linalg.norm(block, axis=1)
        inside += int(
            np.sum((norms > (1 - eps) * radius) & (norms < (1 + eps) * radius))
        )
    return inside / count


# Mode mass
@dataclass(frozen=True)
class IntervalBasin:
    """lo <= x < hi on the first axis; `closed` also admits x == hi"""

    name: str
    lo: float
    hi: float
    closed: bool = False

    def contains(self, points: np.ndarray) -> np.ndarray:
        x = np.asarray(points, dtype=np.float64).reshape(points.shape[0], -1)[:, 0]
        upper = x <= self.hi if self.closed else x < self.hi
        return (x >= self.lo) & upper


@dataclass(frozen=True, eq=False)
class VoronoiBasin:
    """Points whose nearest mean is `index`"""

    name: str
    means: np.ndarray
    index: int

    def contains(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64).reshape(points.shape[0], -1)
        sq = np.sum((points[:, None, :] - self.means[None, :, :]) ** 2, axis=2)
        return np.argmin(sq, axis=1) == self.index


@dataclass
class ModeReport:
    """Per-basin masses of a learned density and of a reference"""

    names: List[str]
    masses: np.ndarray
    target_masses: Optional[np.ndarray] = None

    @property
    def ratios(self) -> Optional[np.ndarray]:
        if self.target_masses is None:
            return None
        with np.errstate(divide="ignore", invalid="ignore"):
            return self.masses / self.target_masses

    @property
    def max_min_ratio(self) -> float:
        low = float(self.masses.min())
        return float("inf") if low <= 0 else float(self.masses.max()) / low

    def to_dict(self) -> Dict[str, Any]:
        ratios = self.ratios
        return {
            "basins": [
                {
                    "name": name,
                    "mass": float(self.masses[k]),
                    "target_mass": None if self.target_masses is None else float(
                        self.target_masses[k]
                    ),
                    "ratio": None if ratios is None else float(ratios[k]),
                }
                for k, name in enumerate(self.names)
            ],
            "max_min_ratio": self.max_min_ratio,
        }


def _basin_masks(grid: DensityGrid, basins: Sequence[Any]) -> np.ndarray:
    centers = grid.centers
    masks = np.stack([np.asarray(b.contains(centers), dtype=bool) for b in basins])
    overlap = masks.sum(axis=0) > 1
    if np.any(overlap):
        raise ValueError(f"Basins overlap on {int(overlap.sum())} grid cells")
    return masks


def mode_mass(
    density: DensityGrid, basins: Sequence[Any], reference: Optional[DensityGrid] = None
) -> ModeReport:
    """Integral of the density over each basin, with the reference's masses alongside"""
    if not basins:
        raise ValueError("mode_mass needs at least one basin")
    masks = _basin_masks(density, basins)
    masses = np.clip(masks @ density.cell_masses(), 0.0, 1.0)
    target_masses = None
    if reference is not None:
        if not reference.same_grid(density):
            raise ValueError("Reference grid does not match the density grid")
        target_masses = np.clip(masks @ reference.cell_masses(), 0.0, 1.0)
    return ModeReport([b.name for b in basins], masses, target_masses)


def watershed_basins_1d(target: DensityGrid) -> List[IntervalBasin]:
    """Intervals split at the density minimum between consecutive local maxima"""
    if target.domain.dim != 1:
        raise ValueError("watershed_basins_1d needs a 1-D grid")
    values = target.values
    x = target.centers[:, 0]
    interior = (values[1:-1] > values[:-2]) & (values[1:-1] >= values[2:])
    peaks = np.flatnonzero(interior) + 1
    if peaks.size == 0:
        peaks = np.array([int(np.argmax(values))])
    splits = [
        float(x[a + int(np.argmin(values[a : b + 1]))])
        for a, b in zip(peaks[:-1], peaks[1:])
    ]
    edges = [float(target.domain.lo[0])] + splits + [float(target.domain.hi[0])]
    return [
        IntervalBasin(f"mode{k}", edges[k], edges[k + 1], closed=(k == len(edges) - 2))
        for k in range(len(edges) - 1)
    ]


def voronoi_basins(mog: GaussianMixture) -> List[VoronoiBasin]:
    return [VoronoiBasin(f"mode{k}", mog.means, k) for k in range(mog.n_components)]


def default_basins(mog: GaussianMixture, target: DensityGrid) -> List[Any]:
    """Watershed intervals in 1-D, nearest-mean sectors otherwise"""
    return watershed_basins_1d(target) if mog.dim == 1 else voronoi_basins(mog)


# OOD sets
def ood_region_mask(
    points: np.ndarray, mog: GaussianMixture, radius: float = 3.0
) -> np.ndarray:
    """True for points outside every radius-sigma ball around a component mean"""
    points = np.asarray(points, dtype=np.float64).reshape(-1, mog.dim)
    dist = np.sqrt(np.sum((points[:, None, :] - mog.means[None, :, :]) ** 2, axis=2))
    return np.all(dist > radius * mog.stddevs[None, :], axis=1)


def make_ood_set(
    name: str,
    count: int,
    domain: BoxDomain,
    mog: GaussianMixture,
    rng: np.random.Generator,
    radius: float = 3.0,
) -> np.ndarray:
    """
    Synthetic OOD points: `constant` vectors c * 1, `noise` as an equal mix of
    uniform-on-domain and standard Gaussian draws, or uniform `ood-region`
    points outside every radius-sigma component ball.
    """
    dim = domain.dim
    if name == "constant":
        c = rng.uniform(domain.lo[0], domain.hi[0], size=count)
        return np.repeat(c[:, None], dim, axis=1)
    if name == "noise":
        use_uniform = rng.random(count) < 0.5
        points = rng.standard_normal((count, dim))
        points[use_uniform] = domain.uniform(int(use_uniform.sum()), rng)
        return points
    if name == "ood-region":
        kept: List[np.ndarray] = []
        total = 0
        for _ in range(1000):
            draws = domain.uniform(max(count, 1024), rng)
            draws = draws[ood_region_mask(draws, mog, radius)]
            kept.append(draws)
            total += draws.shape[0]
            if total >= count:
                return np.concatenate(kept)[:count]
        raise ValueError("The OOD region has (almost) no volume inside the domain")
    raise ValueError(f"Unknown OOD set '{name}'")


def ood_intervals_1d(
    mog: GaussianMixture, domain: BoxDomain, radius: float = 3.0
) -> List[List[float]]:
    """Complement within the domain of the radius-sigma intervals around the means"""
    covered = sorted(
        (float(m[0] - radius * s), float(m[0] + radius * s)) for m, s in zip(
            mog.means, mog.stddevs
        )
    )
    lo, hi = float(domain.lo[0]), float(domain.hi[0])
    gaps = []
    cursor = lo
    for a, b in covered:
        if a > cursor:
            gaps.append([cursor, min(a, hi)])
        cursor = max(cursor, b)
    if cursor < hi:
        gaps.append([cursor, hi])
    result = [g for g in gaps if g[1] > g[0]]
    logger.debug(f"OOD intervals: {result}")
    return result
