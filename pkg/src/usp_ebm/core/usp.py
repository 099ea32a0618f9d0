"""
Uniform support partitioning

Partition points u_1..u_n cover the support of q_theta with epsilon-balls by
alternating projected gradient steps: maximization moves points downhill in
energy (uphill in log-density, so Z(theta) is never needed), repulsion
pushes apart every pair closer than epsilon. The persistent stochastic
variant updates a random subset Lambda per round against read-only anchors
Gamma.

Repulsion updates are Jacobi-style: all directions are computed from one
snapshot of positions and then applied together.
"""

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger
from scipy.spatial import cKDTree

from ..models import UspConfig
from ..utils.io import read_numeric_csv, write_csv
from .distributions import BoxDomain, GaussianMixture, Proposal
from .energy import EnergyModel

COINCIDENT_DISTANCE = 1e-12

IndexLike = Union[Sequence[int], np.ndarray]


@dataclass(frozen=True, eq=False)
class ParticleSet:
    """Partition points on a box domain with separation target epsilon"""

    points: np.ndarray
    epsilon: float
    domain: BoxDomain

    def __post_init__(self):
        points = np.asarray(self.points, dtype=np.float64)
        if points.ndim == 1:
            points = points.reshape(-1, 1)
        if points.shape[0] < 1:
            raise ValueError("A particle set needs at least one point")
        if points.shape[1] != self.domain.dim:
            raise ValueError(
                f"Dimension mismatch: particles are {points.shape[1]}-D, "
                f"domain is {self.domain.dim}-D"
            )
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")
        if not np.all(self.domain.contains(points)):
            raise ValueError("All particles must lie inside the domain")
        object.__setattr__(self, "points", points)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def with_points(self, points: np.ndarray) -> "ParticleSet":
        return replace(self, points=points)


def _as_indices(indices: IndexLike, n: int, what: str) -> np.ndarray:
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ValueError(
            f"{what} indices must lie in [0, {n}), got range [{idx.min()}, {idx.max()}]"
        )
    return idx


def maximization_step(
    model: EnergyModel,
    particles: ParticleSet,
    indices: IndexLike,
    step: float,
    count: int = 1,
) -> ParticleSet:
    """`count` projected steps u <- P(u - step * grad_x E(u)) on selected particles"""
    if not step > 0:
        raise ValueError(f"Maximization step must be > 0, got {step}")
    idx = _as_indices(indices, particles.n, "Maximization")
    points = particles.points.copy()
    for _ in range(count):
        current = points[idx]
        grads = model.grad_x(current)
        bad = ~np.all(np.isfinite(grads), axis=1)
        moved = particles.domain.project(current - step * grads)
        moved[bad] = current[bad]
        points[idx] = moved
        if np.any(bad):
            logger.warning(
                f"{int(bad.sum())} particles had non-finite gradients; left unchanged"
            )
    return particles.with_points(points)


def _candidate_pairs(
    points: np.ndarray,
    movers: np.ndarray,
    neighbors: np.ndarray,
    epsilon: float,
    use_tree: bool,
) -> Tuple[np.ndarray, np.ndarray]:
    """Row-major (mover, neighbor) pairs closer than epsilon, self pairs excluded"""
    if neighbors.size == 0 or movers.size == 0:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty
    if use_tree:
        tree = cKDTree(points[neighbors])
        found = tree.query_ball_point(points[movers], r=epsilon)
        rows = np.concatenate(
            [np.full(len(cols), r, dtype=np.int64) for r, cols in enumerate(found)]
        )
        cols = np.concatenate([np.sort(np.asarray(c, dtype=np.int64)) for c in found])
    else:
        diffs = points[movers][:, None, :] - points[neighbors][None, :, :]
        dist = np.sqrt(np.sum(diffs * diffs, axis=2))
        rows, cols = np.nonzero(dist < epsilon)
    keep = movers[rows] != neighbors[cols]
    rows, cols = rows[keep], cols[keep]
    if use_tree and rows.size:
        # query_ball_point is inclusive at r
        gap = points[movers[rows]] - points[neighbors[cols]]
        strict = np.sqrt(np.sum(gap * gap, axis=1)) < epsilon
        rows, cols = rows[strict], cols[strict]
    return rows, cols


def _repulsion_field(
    points: np.ndarray,
    movers: np.ndarray,
    neighbors: np.ndarray,
    epsilon: float,
    rng: Optional[np.random.Generator],
    use_tree: bool = False,
) -> Tuple[np.ndarray, np.ndarray]:
    """Summed unit repulsion directions per mover, and a per-mover violation mask"""
    field = np.zeros((movers.size, points.shape[1]))
    rows, cols = _candidate_pairs(points, movers, neighbors, epsilon, use_tree)
    if rows.size == 0:
        return field, np.zeros(movers.size, dtype=bool)
    diffs = points[movers[rows]] - points[neighbors[cols]]
    dist = np.sqrt(np.sum(diffs * diffs, axis=1))
    coincident = dist < COINCIDENT_DISTANCE
    units = np.empty_like(diffs)
    units[~coincident] = diffs[~coincident] / dist[~coincident, None]
    if np.any(coincident):
        if rng is None:
            raise ValueError(
                "Coincident particles need a random stream for the tie-break"
            )
        draws = rng.standard_normal((int(coincident.sum()), points.shape[1]))
        units[coincident] = draws / np.linalg.norm(draws, axis=1, keepdims=True)
    np.add.at(field, rows, units)
    violators = np.zeros(movers.size, dtype=bool)
    violators[rows] = True
    return field, violators


def repulsion_gradient(
    particles: ParticleSet,
    i: int,
    neighbor_indices: IndexLike,
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """
    Ascent direction of sum_j min(||u_i - u_j||, epsilon) at u_i.

    Neighbors at distance >= epsilon contribute nothing; j == i is skipped.
    A coincident pair contributes a random unit vector drawn from `rng`.
    """
    neighbors = _as_indices(neighbor_indices, particles.n, "Neighbor")
    movers = _as_indices([i], particles.n, "Particle")
    field, _ = _repulsion_field(
        particles.points, movers, neighbors, particles.epsilon, rng
    )
    return field[0]


def _check_disjoint(lam: np.ndarray, gamma: np.ndarray):
    if np.intersect1d(lam, gamma).size:
        raise ValueError("Lambda and Gamma index sets must be disjoint")


def repulsion_step(
    particles: ParticleSet,
    indices: IndexLike,
    gamma_indices: IndexLike,
    step: float,
    count: int = 1,
    rng: Optional[np.random.Generator] = None,
    neighbor_index: bool = False,
) -> ParticleSet:
    """`count` projected repulsion steps moving Lambda against Lambda and Gamma"""
    if not step > 0:
        raise ValueError(f"Repulsion step must be > 0, got {step}")
    lam = _as_indices(indices, particles.n, "Lambda")
    gamma = _as_indices(gamma_indices, particles.n, "Gamma")
    _check_disjoint(lam, gamma)
    neighbors = np.concatenate([lam, gamma])
    points = particles.points.copy()
    for _ in range(count):
        field, _ = _repulsion_field(
            points, lam, neighbors, particles.epsilon, rng, use_tree=neighbor_index
        )
        points[lam] = particles.domain.project(points[lam] + step * field)
    return particles.with_points(points)


def fused_round(
    model: EnergyModel,
    particles: ParticleSet,
    indices: IndexLike,
    gamma_indices: IndexLike,
    step_max: float,
    step_rep: float,
    rng: Optional[np.random.Generator] = None,
    neighbor_index: bool = False,
) -> ParticleSet:
    """
    Single-pass round for one maximization and one repulsion step: a Lambda
    particle closer than epsilon to any of Lambda and Gamma is repelled,
    every other Lambda particle takes a maximization step.
    """
    lam = _as_indices(indices, particles.n, "Lambda")
    gamma = _as_indices(gamma_indices, particles.n, "Gamma")
    _check_disjoint(lam, gamma)
    points = particles.points.copy()
    field, violators = _repulsion_field(
        points,
        lam,
        np.concatenate([lam, gamma]),
        particles.epsilon,
        rng,
        use_tree=neighbor_index,
    )
    moved = points[lam].copy()
    if np.any(violators):
        moved[violators] = moved[violators] + step_rep * field[violators]
    free = ~violators
    if np.any(free):
        current = moved[free]
        grads = model.grad_x(current)
        bad = ~np.all(np.isfinite(grads), axis=1)
        stepped = current - step_max * grads
        stepped[bad] = current[bad]
        moved[free] = stepped
        if np.any(bad):
            logger.warning(
                f"{int(bad.sum())} particles had non-finite gradients; left unchanged"
            )
    points[lam] = particles.domain.project(moved)
    return particles.with_points(points)


def sample_lambda_gamma(
    n: int, lambda_size: int, gamma_size: int, rng: np.random.Generator
) -> Tuple[np.ndarray, np.ndarray]:
    """Lambda uniformly without replacement, then Gamma from the rest; both sorted"""
    lambda_size = min(lambda_size, n)
    if lambda_size == n:
        lam = np.arange(n)
    else:
        lam = np.sort(rng.choice(n, size=lambda_size, replace=False))
    gamma_size = min(gamma_size, n - lambda_size)
    if gamma_size <= 0:
        return lam, np.zeros(0, dtype=np.int64)
    rest = np.setdiff1d(np.arange(n), lam)
    gamma = np.sort(rng.choice(rest, size=gamma_size, replace=False))
    return lam, gamma


def psusp_round(
    model: EnergyModel,
    particles: ParticleSet,
    config: UspConfig,
    rng: np.random.Generator,
) -> ParticleSet:
    """N persistent stochastic rounds of maximization then repulsion"""
    step_max = config.resolved_step_max(particles.domain.diameter)
    step_rep = config.resolved_step_rep()
    gamma_size = config.resolved_gamma_size()
    for _ in range(config.N):
        if config.fused:
            lam, gamma = sample_lambda_gamma(
                particles.n, config.lambda_size, gamma_size, rng
            )
            particles = fused_round(
                model,
                particles,
                lam,
                gamma,
                step_max,
                step_rep,
                rng,
                config.neighbor_index,
            )
            continue
        lam, _ = sample_lambda_gamma(particles.n, config.lambda_size, 0, rng)
        particles = maximization_step(model, particles, lam, step_max, config.n_m)
        rest = np.setdiff1d(np.arange(particles.n), lam)
        size = min(gamma_size, rest.size)
        gamma = np.sort(rng.choice(rest, size=size, replace=False)) if size else rest[
            :0
        ]
        particles = repulsion_step(
            particles, lam, gamma, step_rep, config.n_r, rng, config.neighbor_index
        )
    return particles


def select_estimation_points(n: int, n_s: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform subset of n_s particle indices without replacement"""
    if not 1 <= n_s <= n:
        raise ValueError(f"n_s must lie in [1, {n}], got {n_s}")
    if n_s == n:
        return np.arange(n)
    return np.sort(rng.choice(n, size=n_s, replace=False))


def min_pairwise_distance(particles: ParticleSet) -> float:
    if particles.n < 2:
        return float("inf")
    dist, _ = cKDTree(particles.points).query(particles.points, k=2)
    return float(dist[:, 1].min())


def constraint_violations(particles: ParticleSet) -> int:
    """Number of unordered pairs closer than epsilon"""
    pairs = cKDTree(particles.points).query_pairs(
        particles.epsilon, output_type="ndarray"
    )
    if len(pairs) == 0:
        return 0
    gap = particles.points[pairs[:, 0]] - particles.points[pairs[:, 1]]
    return int(np.sum(np.sqrt(np.sum(gap * gap, axis=1)) < particles.epsilon))


def init_particles(
    kind: str,
    n: int,
    epsilon: float,
    domain: BoxDomain,
    rng: np.random.Generator,
    proposal: Optional[Proposal] = None,
    target: Optional[GaussianMixture] = None,
) -> ParticleSet:
    """Initial partition points from q_0, from data or from the rightmost mode"""
    if kind == "proposal":
        points = (proposal or Proposal.uniform(domain)).sample(n, rng)
    elif kind == "data":
        points = target.sample(n, rng)
    elif kind == "rightmost-mode":
        component = int(np.argmax(target.means[:, 0]))
        points = target.sample_component(component, n, rng)
    else:
        raise ValueError(f"Unknown particle initialization '{kind}'")
    return ParticleSet(domain.project(points), epsilon, domain)


def write_particles(
    path: Union[str, Path],
    particles: ParticleSet,
    energies: Optional[np.ndarray] = None,
) -> Path:
    """Snapshot CSV: particle_id, x0.., energy"""
    energies = np.full(particles.n, np.nan) if energies is None else energies
    header = ["particle_id"] + [f"x{a}" for a in range(particles.dim)] + ["energy"]
    rows = (
        [i, *p.tolist(), float(e)]
        for i, (p, e) in enumerate(zip(particles.points, energies))
    )
    return write_csv(path, header, rows)


def read_particles(
    path: Union[str, Path], epsilon: float, domain: BoxDomain
) -> ParticleSet:
    header, data = read_numeric_csv(path)
    coords = [i for i, name in enumerate(header) if name.startswith("x")]
    if len(coords) != domain.dim:
        raise ValueError(
            f"Snapshot {path} has {len(coords)} coordinates, domain is {domain.dim}-D"
        )
    order = np.argsort(data[:, 0], kind="stable")
    return ParticleSet(data[order][:, coords], epsilon, domain)
