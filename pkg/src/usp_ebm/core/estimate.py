"""
MLE gradient estimation and EBM training for usp-ebm

The log-likelihood gradient is

    grad L(theta) = E_q[grad_theta E] - E_p[grad_theta E],

returned in ascent orientation. The first expectation is estimated by one
of three methods: equal weights over short-run Langevin outputs (srlmc),
self-normalized importance weights over uniform points (riemann), or the
same weights over persistent partition points (psusp).
"""

import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple, Union

import numpy as np
from loguru import logger
from scipy.special import logsumexp

from ..models import OptimizerConfig, OptimizerKind, TrainConfig, TrainMethod
from ..utils.io import write_csv
from ..utils.rng import streams
from .distributions import (
    BoxDomain,
    DensityGrid,
    GaussianMixture,
    Proposal,
    binned_mixture_grid,
    cell_centers,
    histogram_grid,
    model_energies,
    quadrature_normalize,
    tv_distance,
)
from .energy import EnergyModel, ParamVector
from .sampler import ChainBatch, ReplayBuffer, buffer_draw_init, buffer_push, run_srlmc
from .usp import (
    ParticleSet,
    constraint_violations,
    init_particles,
    min_pairwise_distance,
    psusp_round,
    select_estimation_points,
)

TRAIN_STREAMS = ("data", "sampler", "riemann", "usp", "init")


@dataclass(frozen=True, eq=False)
class WeightVector:
    """Normalized importance weights aligned 1:1 with a point set"""

    log_weights: np.ndarray
    weights: np.ndarray

    def __len__(self) -> int:
        return self.weights.size

    @classmethod
    def uniform(cls, count: int) -> "WeightVector":
        if count < 1:
            raise ValueError("A weight vector needs at least one point")
        return cls(np.full(count, -np.log(count)), np.full(count, 1.0 / count))

    @classmethod
    def from_log_weights(cls, log_weights: np.ndarray) -> "WeightVector":
        """Softmax of unnormalized log weights; non-finite entries get zero weight"""
        log_weights = np.asarray(log_weights, dtype=np.float64).reshape(-1)
        if log_weights.size == 0:
            raise ValueError("A weight vector needs at least one point")
        usable = np.where(np.isfinite(log_weights), log_weights, -np.inf)
        if not np.any(np.isfinite(usable)):
            raise ValueError(
                "All energies are non-finite; importance weights are undefined"
            )
        normalized = usable - logsumexp(usable)
        return cls(normalized, np.exp(normalized))

    @classmethod
    def from_density_grid(cls, grid: DensityGrid) -> "WeightVector":
        """Exact cell masses of a normalized grid, aligned with its cell centers"""
        return cls.from_log_weights(grid.log_values + np.log(grid.cell_volume))


def weights_from_energies(energies: np.ndarray, rho: float = 1.0) -> WeightVector:
    return WeightVector.from_log_weights(-rho * np.asarray(energies, dtype=np.float64))


def snis_weights(model: EnergyModel, points: np.ndarray) -> WeightVector:
    """w_i = exp(-E(u_i)) / sum_j exp(-E(u_j)), computed in log space"""
    points = model.as_batch(points)
    energies = model_energies(model, points)
    bad = ~np.isfinite(energies)
    if np.any(bad) and not np.all(bad):
        logger.warning(f"{int(bad.sum())} estimation points have non-finite energy")
    return weights_from_energies(energies)


def snis_expectation(
    model: EnergyModel, points: np.ndarray, f: Callable[[np.ndarray], np.ndarray]
) -> np.ndarray:
    """Self-normalized estimate of E_q[f(x)] for a vector-valued f"""
    points = model.as_batch(points)
    weights = snis_weights(model, points)
    values = np.asarray(f(points), dtype=np.float64).reshape(points.shape[0], -1)
    return weights.weights @ values


def mle_gradient(
    model: EnergyModel,
    weights: WeightVector,
    points: np.ndarray,
    data_batch: np.ndarray,
    data_weights: Optional[np.ndarray] = None,
) -> ParamVector:
    """sum_i w_i grad_theta E(u_i) - sum_j v_j grad_theta E(x_j), v uniform default"""
    points = model.as_batch(points)
    data = model.as_batch(data_batch)
    if len(weights) != points.shape[0]:
        raise ValueError(
            f"Weights have {len(weights)} entries "
            f"but there are {points.shape[0]} points"
        )
    if data.shape[0] == 0:
        raise ValueError("Data batch is empty")
    if data_weights is None:
        data_weights = np.full(data.shape[0], 1.0 / data.shape[0])
    model_term = model.weighted_grad_theta(points, weights.weights)
    data_term = model.weighted_grad_theta(data, data_weights)
    return model_term - data_term


@dataclass
class OptimizerState:
    kind: OptimizerKind
    step: int = 0
    first_moment: Optional[np.ndarray] = None
    second_moment: Optional[np.ndarray] = None
    skipped: int = 0


def optimizer_step(
    kind: Union[OptimizerKind, str],
    state: Optional[OptimizerState],
    params: ParamVector,
    gradient: ParamVector,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> Tuple[ParamVector, OptimizerState]:
    """Gradient-ascent update; a non-finite gradient leaves everything unchanged"""
    kind = OptimizerKind(kind)
    params.require_layout(gradient, "gradient")
    state = state or OptimizerState(kind=kind)
    if not gradient.is_finite():
        state.skipped += 1
        logger.warning(f"Skipping {kind.value} update: gradient has non-finite entries")
        return params, state

    g = gradient.values
    if kind == OptimizerKind.SGD:
        state.step += 1
        return params.with_values(params.values + lr * g), state

    if state.first_moment is None:
        state.first_moment = np.zeros_like(g)
        state.second_moment = np.zeros_like(g)
    state.step += 1
    state.first_moment = beta1 * state.first_moment + (1.0 - beta1) * g
    state.second_moment = beta2 * state.second_moment + (1.0 - beta2) * g * g
    m_hat = state.first_moment / (1.0 - beta1**state.step)
    v_hat = state.second_moment / (1.0 - beta2**state.step)
    update = lr * m_hat / (np.sqrt(v_hat) + eps)
    return params.with_values(params.values + update), state


def apply_optimizer(
    config: OptimizerConfig,
    state: Optional[OptimizerState],
    params: ParamVector,
    gradient: ParamVector,
) -> Tuple[ParamVector, OptimizerState]:
    return optimizer_step(
        config.kind,
        state,
        params,
        gradient,
        config.lr,
        config.beta1,
        config.beta2,
        config.eps,
    )


@dataclass
class TrainTrace:
    """Per-iteration training diagnostics"""

    grad_norms: List[float] = field(default_factory=list)
    diverged: List[int] = field(default_factory=list)
    wall_times: List[float] = field(default_factory=list)
    snapshots: List[Tuple[int, DensityGrid]] = field(default_factory=list)
    buffer_tv: List[Tuple[int, float]] = field(default_factory=list)
    particle_stats: List[Dict[str, float]] = field(default_factory=list)
    skipped_updates: int = 0
    stopped_early: bool = False
    stop_iteration: Optional[int] = None

    @property
    def iterations(self) -> int:
        return len(self.grad_norms)

    @property
    def total_diverged(self) -> int:
        return int(sum(self.diverged))

    def to_csv(self, path: Union[str, Path], include_wall_time: bool = False) -> Path:
        """wall_time is always a column; it holds nan unless include_wall_time"""
        header = ["iteration", "grad_norm", "diverged_chains", "wall_time"]

        def rows():
            for i, (norm, div) in enumerate(zip(self.grad_norms, self.diverged)):
                wall = self.wall_times[i] if include_wall_time else float("nan")
                yield [i, norm, div, wall]

        return write_csv(path, header, rows())


@dataclass
class TrainResult:
    model: EnergyModel
    trace: TrainTrace
    samples: np.ndarray
    buffer: Optional[ReplayBuffer] = None
    particles: Optional[ParticleSet] = None


def plateau_reached(grad_norms: List[float], window: int, tol: float) -> bool:
    """Relative change of the windowed mean gradient norm below tol"""
    if len(grad_norms) < 2 * window or len(grad_norms) % window:
        return False
    previous = float(np.mean(grad_norms[-2 * window : -window]))
    current = float(np.mean(grad_norms[-window:]))
    return abs(current - previous) <= tol * max(previous, 1e-300)


class Trainer:
    """
    Maximum-likelihood training loop for one estimation method.

    Random streams are derived from the seed by name, so e.g. the data
    stream is identical across methods.
    """

    def __init__(
        self,
        config: TrainConfig,
        target: GaussianMixture,
        domain: BoxDomain,
        seed: int,
        proposal: Optional[Proposal] = None,
    ):
        if target.dim != domain.dim:
            raise ValueError(
                f"Dimension mismatch: target is {target.dim}-D, "
                f"domain is {domain.dim}-D"
            )
        self.config = config
        self.target = target
        self.domain = domain
        self.proposal = proposal or Proposal.uniform(domain)
        self.rngs = streams(seed, TRAIN_STREAMS)
        self.buffer: Optional[ReplayBuffer] = None
        self.particles: Optional[ParticleSet] = None
        self.samples = np.zeros((0, domain.dim))
        self._riemann_points: Optional[np.ndarray] = None
        self._binned_target: Optional[DensityGrid] = None

        method = config.method
        if method == TrainMethod.SRLMC and config.srlmc.replay.use_buffer:
            replay = config.srlmc.replay
            self.buffer = ReplayBuffer(replay.capacity, domain.dim, replay.reinit_rate)
        elif method == TrainMethod.RIEMANN and domain.dim == 1:
            self._riemann_points = cell_centers(domain, config.riemann.resolution)
        elif method == TrainMethod.PSUSP:
            usp = config.usp
            self.particles = init_particles(
                usp.init,
                usp.n_particles,
                usp.epsilon,
                domain,
                self.rngs["init"],
                proposal=self.proposal,
                target=target,
            )

    @property
    def binned_target(self) -> DensityGrid:
        if self._binned_target is None:
            self._binned_target = binned_mixture_grid(
                self.target, self.domain, self.config.histogram_resolution
            )
        return self._binned_target

    def _srlmc_points(self, model: EnergyModel) -> Tuple[np.ndarray, WeightVector, int]:
        srlmc = self.config.srlmc
        count = srlmc.n_chains or self.config.batch_size
        rng = self.rngs["sampler"]
        if self.buffer is not None:
            init = buffer_draw_init(self.buffer, self.proposal, count, rng)
        else:
            init = ChainBatch.from_positions(self.proposal.sample(count, rng))
        result = run_srlmc(model, init, srlmc.lmc, rng, domain=self.domain)
        healthy = result.batch.healthy_positions()
        if self.buffer is not None:
            buffer_push(self.buffer, result.batch)
        if healthy.shape[0] == 0:
            logger.warning("Every Langevin chain diverged; skipping this update")
            return healthy, None, result.n_diverged
        self.samples = healthy
        return healthy, WeightVector.uniform(healthy.shape[0]), result.n_diverged

    def _riemann_points_and_weights(self, model: EnergyModel) -> Tuple[
        np.ndarray, WeightVector, int
    ]:
        if self._riemann_points is not None:
            points = self._riemann_points
        else:
            points = self.domain.uniform(
                self.config.riemann.n_points, self.rngs["riemann"]
            )
        return points, snis_weights(model, points), 0

    def _psusp_points(self, model: EnergyModel) -> Tuple[np.ndarray, WeightVector, int]:
        usp = self.config.usp
        self.particles = psusp_round(model, self.particles, usp, self.rngs["usp"])
        idx = select_estimation_points(self.particles.n, usp.n_s, self.rngs["usp"])
        points = self.particles.points[idx]
        self.samples = self.particles.points
        return points, snis_weights(model, points), 0

    def estimation_points(self, model: EnergyModel) -> Tuple[
        np.ndarray, WeightVector, int
    ]:
        method = self.config.method
        if method == TrainMethod.SRLMC:
            return self._srlmc_points(model)
        if method == TrainMethod.RIEMANN:
            return self._riemann_points_and_weights(model)
        return self._psusp_points(model)

    def data_batch(self) -> np.ndarray:
        data = self.target.sample(self.config.batch_size, self.rngs["data"])
        noise = self.config.srlmc.lmc.data_noise
        if self.config.method == TrainMethod.SRLMC and noise > 0:
            data = data + noise * self.rngs["data"].standard_normal(data.shape)
        return data

    def snapshot(self, model: EnergyModel, iteration: int, trace: TrainTrace):
        if self.domain.dim <= 2:
            grid = quadrature_normalize(
                model, 1.0, self.domain, self.config.resolved_density_resolution(
                    self.domain.dim
                )
            )
            trace.snapshots.append((iteration, grid))
        if self.buffer is not None and len(self.buffer):
            hist = histogram_grid(
                self.buffer.contents(), self.domain, self.config.histogram_resolution
            )
            tv = tv_distance(hist, self.binned_target)
            trace.buffer_tv.append((iteration, tv))
            logger.debug(f"iter {iteration}: replay buffer TV to data {tv:.4f}")
        if self.particles is not None:
            stats = {
                "iteration": float(iteration),
                "min_distance": min_pairwise_distance(self.particles),
                "violations": float(constraint_violations(self.particles)),
            }
            trace.particle_stats.append(stats)
            logger.debug(
                f"iter {iteration}: particle min distance {stats['min_distance']:.4g}, "
                f"{int(stats['violations'])} epsilon violations"
            )

    def run(self, model: EnergyModel) -> TrainResult:
        config = self.config
        trace = TrainTrace()
        state: Optional[OptimizerState] = None
        start = time.perf_counter()
        logger.info(
            f"Training {model!r} with {config.method.value} "
            f"for {config.iterations} iterations"
        )

        for it in range(config.iterations):
            data = self.data_batch()
            points, weights, n_diverged = self.estimation_points(model)
            if weights is None:
                trace.grad_norms.append(float("nan"))
                trace.diverged.append(n_diverged)
                trace.wall_times.append(time.perf_counter() - start)
                trace.skipped_updates += 1
                continue
            gradient = mle_gradient(model, weights, points, data)
            params, state = apply_optimizer(
                config.optimizer, state, model.params, gradient
            )
            if params is not model.params:
                model = model.with_params(params)

            trace.grad_norms.append(gradient.norm())
            trace.diverged.append(n_diverged)
            trace.wall_times.append(time.perf_counter() - start)
            logger.debug(f"iter {it}: grad norm {trace.grad_norms[-1]:.6g}")

            if (it + 1) % config.snapshot_every == 0:
                self.snapshot(model, it + 1, trace)
            if (it + 1) % config.log_every == 0:
                logger.info(
                    f"iter {it + 1}/{config.iterations}: "
                    f"grad norm {trace.grad_norms[-1]:.6g}, "
                    f"diverged chains {trace.total_diverged}"
                )
            if config.early_stop and plateau_reached(
                trace.grad_norms, config.early_stop_window, config.early_stop_tol
            ):
                trace.stopped_early = True
                trace.stop_iteration = it + 1
                logger.info(
                    f"Gradient norm plateau reached; stopping at iteration {it + 1}"
                )
                break

        trace.skipped_updates += state.skipped if state else 0
        riemann = config.method == TrainMethod.RIEMANN
        if riemann and config.iterations and self.domain.dim <= 2:
            resolution = config.resolved_density_resolution(self.domain.dim)
            grid = quadrature_normalize(model, 1.0, self.domain, resolution)
            self.samples = grid.sample(config.batch_size, self.rngs["init"])
        return TrainResult(
            model=model,
            trace=trace,
            samples=self.samples,
            buffer=self.buffer,
            particles=self.particles,
        )


def train(
    model: EnergyModel,
    target: GaussianMixture,
    config: TrainConfig,
    domain: BoxDomain,
    seed: int,
    proposal: Optional[Proposal] = None,
) -> TrainResult:
    """Train `model` on samples of `target`; iterations=0 returns the model untouched"""
    return Trainer(config, target, domain, seed, proposal).run(model)
