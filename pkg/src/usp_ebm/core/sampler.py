"""
Langevin samplers for usp-ebm

Modified Langevin dynamics with decoupled step size and noise scale,

    x <- x - (alpha / 2) grad_x E(x) + sqrt(beta) eps,    eps ~ N(0, I),

which with alpha = beta = eta is the canonical update. Its long-run law is
exp(-rho E) / Z(theta, rho) with rho = alpha / beta. Short-run chains use a
FIFO replay buffer for initialization.
"""

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
from loguru import logger

from ..models import LmcConfig
from ..utils.io import write_csv
from .distributions import BoxDomain, Proposal
from .energy import EnergyModel, QuadraticEnergy


@dataclass(frozen=True, eq=False)
class ChainBatch:
    """Chain positions with per-chain stream ids and divergence flags"""

    positions: np.ndarray
    stream_ids: np.ndarray
    diverged: np.ndarray

    @classmethod
    def from_positions(
        cls, positions: np.ndarray, stream_ids: Optional[np.ndarray] = None
    ) -> "ChainBatch":
        positions = np.asarray(positions, dtype=np.float64)
        if positions.ndim == 1:
            positions = positions.reshape(-1, 1)
        m = positions.shape[0]
        ids = np.arange(m) if stream_ids is None else np.asarray(
            stream_ids, dtype=np.int64
        )
        return cls(positions, ids, np.zeros(m, dtype=bool))

    @property
    def size(self) -> int:
        return self.positions.shape[0]

    @property
    def dim(self) -> int:
        return self.positions.shape[1]

    @property
    def n_diverged(self) -> int:
        return int(self.diverged.sum())

    def healthy_positions(self) -> np.ndarray:
        return self.positions[~self.diverged]


@dataclass
class SrlmcResult:
    batch: ChainBatch
    displacement: np.ndarray
    trace: List[np.ndarray] = field(default_factory=list)

    @property
    def n_diverged(self) -> int:
        return self.batch.n_diverged


def _clip_rows(grads: np.ndarray, max_norm: float) -> np.ndarray:
    norms = np.linalg.norm(grads, axis=1, keepdims=True)
    factors = np.minimum(1.0, max_norm / np.maximum(norms, 1e-300))
    return grads * factors


def lmc_step(
    model: EnergyModel,
    batch: ChainBatch,
    alpha: float,
    beta: float,
    rng: np.random.Generator,
    domain: Optional[BoxDomain] = None,
    grad_clip: Optional[float] = None,
) -> ChainBatch:
    """
    One modified Langevin step for every chain.

    The (m, d) noise matrix is always drawn in full so the random stream does
    not depend on which chains are alive. Chains whose gradient or new
    position is non-finite are flagged and frozen at their last position.
    """
    if not alpha > 0:
        raise ValueError(f"alpha must be > 0, got {alpha}")
    if beta < 0:
        raise ValueError(f"beta must be >= 0, got {beta}")

    x = batch.positions
    noise = rng.standard_normal(x.shape)
    alive = ~batch.diverged
    new = x.copy()
    diverged = batch.diverged.copy()

    if np.any(alive):
        grads = model.grad_x(x[alive])
        if grad_clip is not None:
            grads = _clip_rows(grads, grad_clip)
        moved = x[alive] - (alpha / 2.0) * grads + math.sqrt(beta) * noise[alive]
        bad = ~(np.all(np.isfinite(grads), axis=1) & np.all(np.isfinite(moved), axis=1))
        if domain is not None:
            moved = domain.project(moved)
        moved[bad] = x[alive][bad]
        new[alive] = moved
        alive_idx = np.flatnonzero(alive)
        diverged[alive_idx[bad]] = True
        if np.any(bad):
            logger.warning(
                f"{int(bad.sum())} Langevin chains diverged (non-finite gradient)"
            )

    return replace(batch, positions=new, diverged=diverged)


def run_srlmc(
    model: EnergyModel,
    init: ChainBatch,
    config: LmcConfig,
    rng: np.random.Generator,
    domain: Optional[BoxDomain] = None,
    record_trace: bool = False,
) -> SrlmcResult:
    """Run T steps of modified Langevin dynamics from `init`"""
    batch = init
    trace = [init.positions.copy()] if record_trace else []
    for t in range(config.T):
        batch = lmc_step(
            model,
            batch,
            config.alpha_at(t),
            config.beta_at(t),
            rng,
            domain=domain,
            grad_clip=config.grad_clip,
        )
        if record_trace:
            trace.append(batch.positions.copy())
    displacement = np.linalg.norm(batch.positions - init.positions, axis=1)
    if batch.n_diverged:
        logger.debug(
            f"SRLMC finished with {batch.n_diverged}/{batch.size} diverged chains"
        )
    return SrlmcResult(batch=batch, displacement=displacement, trace=trace)


class ReplayBuffer:
    """
    Bounded FIFO store of past chain outputs.

    Storage is a preallocated ring; `contents()` returns samples oldest first.
    """

    def __init__(self, capacity: int, dim: int, reinit_rate: float = 0.05):
        if capacity < 1:
            raise ValueError(f"Replay buffer capacity must be >= 1, got {capacity}")
        if not 0.0 <= reinit_rate <= 1.0:
            raise ValueError(f"reinit_rate must lie in [0, 1], got {reinit_rate}")
        self.capacity = int(capacity)
        self.dim = int(dim)
        self.reinit_rate = float(reinit_rate)
        self._storage = np.zeros((self.capacity, self.dim))
        self._head = 0
        self._count = 0

    def __len__(self) -> int:
        return self._count

    def push(self, points: np.ndarray) -> "ReplayBuffer":
        points = np.asarray(points, dtype=np.float64).reshape(-1, self.dim)
        if points.shape[0] >= self.capacity:
            self._storage[:] = points[-self.capacity :]
            self._head = 0
            self._count = self.capacity
            return self
        end = self._head + points.shape[0]
        if end <= self.capacity:
            self._storage[self._head : end] = points
        else:
            split = self.capacity - self._head
            self._storage[self._head :] = points[:split]
            self._storage[: end - self.capacity] = points[split:]
        self._head = end % self.capacity
        self._count = min(self.capacity, self._count + points.shape[0])
        return self

    def contents(self) -> np.ndarray:
        if self._count < self.capacity:
            return self._storage[: self._count].copy()
        return np.concatenate(
            [self._storage[self._head :], self._storage[: self._head]]
        )

    def draw_init(
        self, proposal: Proposal, count: int, rng: np.random.Generator
    ) -> ChainBatch:
        """Chains start from q_0 with probability reinit_rate, else from the buffer"""
        if count < 1:
            raise ValueError(f"count must be >= 1, got {count}")
        if self._count == 0:
            fresh = np.ones(count, dtype=bool)
        else:
            fresh = rng.random(count) < self.reinit_rate
        positions = np.empty((count, self.dim))
        n_fresh = int(fresh.sum())
        if n_fresh:
            positions[fresh] = proposal.sample(n_fresh, rng)
        if n_fresh < count:
            picks = rng.integers(0, self._count, size=count - n_fresh)
            stored = self._storage if self._count == self.capacity else self._storage[
                : self._count
            ]
            positions[~fresh] = stored[picks]
        return ChainBatch.from_positions(positions)


def buffer_push(
    buffer: ReplayBuffer, batch: Union[ChainBatch, np.ndarray]
) -> ReplayBuffer:
    """Append healthy chain outputs, evicting the oldest beyond capacity"""
    points = batch.healthy_positions() if isinstance(batch, ChainBatch) else batch
    return buffer.push(points)


def buffer_draw_init(
    buffer: ReplayBuffer, proposal: Proposal, count: int, rng: np.random.Generator
) -> ChainBatch:
    return buffer.draw_init(proposal, count, rng)


def tempered_variance(
    rho: float,
    beta: float,
    rng: np.random.Generator,
    scale: float = 1.0,
    n_chains: int = 2048,
    time_horizon: float = 30.0,
    burn_in: float = 0.3,
    max_steps: int = 1_000_000,
) -> Dict[str, float]:
    """
    Long-run variance of modified Langevin chains on a 1-D quadratic energy.

    Chains start at the center and run ceil(time_horizon / alpha) steps with
    alpha = rho * beta, capped at `max_steps`; the first `burn_in` fraction is
    discarded. Chains are independent, so the spread of per-chain mean squares
    gives the standard error. The closed-form law is N(0, s^2 / rho).
    """
    model = QuadraticEnergy(np.zeros(1), scale)
    alpha = rho * beta
    n_steps = int(math.ceil(time_horizon / alpha))
    if n_steps > max_steps:
        logger.warning(f"rho={rho:g}: {n_steps} steps capped at {max_steps}")
        n_steps = max_steps
    start = int(burn_in * n_steps)
    batch = ChainBatch.from_positions(np.zeros((n_chains, 1)))
    sums = np.zeros(n_chains)
    squares = np.zeros(n_chains)
    for step in range(n_steps):
        batch = lmc_step(model, batch, alpha, beta, rng)
        if step >= start:
            x = batch.positions[:, 0]
            sums += x
            squares += x * x
    kept = n_steps - start
    mean = sums.sum() / (kept * n_chains)
    chain_squares = squares / kept
    variance = float(chain_squares.mean() - mean * mean)
    expected = scale**2 / rho
    stderr = float(chain_squares.std(ddof=1) / math.sqrt(n_chains) / expected)
    logger.info(
        f"rho={rho:g}: empirical variance {variance:.5f} vs {expected:.5f} "
        f"(relative stderr {stderr:.4f}) over {n_steps} steps x {n_chains} chains"
    )
    return {
        "rho": rho,
        "alpha": alpha,
        "beta": beta,
        "steps": n_steps,
        "variance": variance,
        "expected": expected,
        "relative_error": abs(variance - expected) / expected,
        "stderr": stderr,
    }


def write_chain_trace(
    path: Union[str, Path], trace: Sequence[np.ndarray], stream_ids: np.ndarray
) -> Path:
    """CSV of (chain_id, t, x0, ...) rows, chains grouped by step"""
    dim = trace[0].shape[1]
    header = ["chain_id", "t"] + [f"x{a}" for a in range(dim)]

    def rows():
        for t, positions in enumerate(trace):
            for chain, point in zip(stream_ids, positions):
                yield [int(chain), t, *point.tolist()]

    return write_csv(path, header, rows())
