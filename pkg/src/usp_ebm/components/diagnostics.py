"""
Diagnostics Component for usp-ebm

Short-run Langevin behaviour on a trained 1-D two-mode EBM: chains started
on one side of the valley stay there, chains started from data rarely cross,
and the alpha/beta ratio controls how sharp the sampled law is.
"""

from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np
from loguru import logger

from ..core.distributions import (
    BoxDomain,
    Proposal,
    histogram_grid,
    quadrature_normalize,
    tv_distance,
)
from ..core.energy import EnergyModel, save_checkpoint
from ..core.sampler import ChainBatch, ReplayBuffer, run_srlmc, write_chain_trace
from ..models import ExperimentConfig, ExperimentOutcome, LmcConfig
from ..utils.io import write_csv
from ..utils.rng import stream
from .training import TrainingComponent, build_domain, build_model, build_target


def crossing_fraction(start: np.ndarray, end: np.ndarray, split: float = 0.0) -> float:
    """Fraction of chains that end on the other side of `split`"""
    return float(np.mean((start[:, 0] < split) != (end[:, 0] < split)))


class DiagnosticsComponent:
    """Runs the srlmc-diagnostics experiment"""

    def __init__(self, run_dir: Path):
        self.run_dir = Path(run_dir)

    def obtain_model(self, config: ExperimentConfig):
        """The checkpointed model, or one trained here from the train sub-config"""
        if config.checkpoint:
            return build_model(config, build_target(config)), None
        logger.info("No checkpoint configured; training a model first")
        result = TrainingComponent(self.run_dir).fit(config)
        save_checkpoint(result.model, self.run_dir / "model.json")
        return result.model, result.buffer

    def side_fractions(
        self, model: EnergyModel, config: ExperimentConfig, domain: BoxDomain
    ) -> Dict[str, Any]:
        lmc = config.train.srlmc.lmc
        n = config.diagnostics.n_chains
        results: Dict[str, Any] = {}
        for side, (lo, hi) in (
            ("left", (float(domain.lo[0]), 0.0)), ("right", (0.0, float(domain.hi[0])))
        ):
            rng = stream(config.seed, f"diagnostics/{side}")
            init = ChainBatch.from_positions(
                Proposal.subinterval(lo, hi).sample(n, rng)
            )
            result = run_srlmc(model, init, lmc, rng, domain=domain, record_trace=True)
            final = result.batch.healthy_positions()[:, 0]
            same_side = float(np.mean(final < 0.0)) if side == "left" else float(
                np.mean(final > 0.0)
            )
            results[f"{side}_same_side_fraction"] = same_side
            results[f"{side}_mean_displacement"] = float(result.displacement.mean())
            write_chain_trace(
                self.run_dir / f"chains_{side}.csv", result.trace, init.stream_ids
            )
            logger.info(
                f"Chains started on the {side}: {same_side:.3f} finish on the same side"
            )
        return results

    def crossing(
        self,
        model: EnergyModel,
        config: ExperimentConfig,
        domain: BoxDomain,
        buffer: Optional[ReplayBuffer],
    ) -> Dict[str, float]:
        lmc = config.train.srlmc.lmc
        n = config.diagnostics.n_chains
        target = build_target(config)
        starts = {"data": target.sample(n, stream(config.seed, "diagnostics/data"))}
        if buffer is not None and len(buffer):
            stored = buffer.contents()
            picks = stream(config.seed, "diagnostics/buffer").integers(
                0, stored.shape[0], size=n
            )
            starts["buffer"] = stored[picks]
        results = {}
        for name, points in starts.items():
            rng = stream(config.seed, f"diagnostics/crossing/{name}")
            init = ChainBatch.from_positions(domain.project(points))
            result = run_srlmc(model, init, lmc, rng, domain=domain)
            keep = ~result.batch.diverged
            results[f"{name}_crossing_fraction"] = crossing_fraction(
                init.positions[keep], result.batch.positions[keep]
            )
        return results

    def temperature_sweep(
        self, model: EnergyModel, config: ExperimentConfig, domain: BoxDomain
    ) -> Dict[str, Any]:
        """Short-run histograms from U(Omega) for each rho, beta held fixed"""
        spec = config.diagnostics
        beta = config.train.srlmc.lmc.beta_at(0)
        bins = spec.histogram_resolution
        rows = []
        summary = {}
        for rho in spec.rhos:
            lmc = LmcConfig(T=spec.sweep_T, alpha=rho * beta, beta=beta)
            rng = stream(config.seed, f"diagnostics/sweep/{rho!r}")
            init = ChainBatch.from_positions(domain.uniform(spec.n_chains, rng))
            result = run_srlmc(model, init, lmc, rng, domain=domain)
            hist = histogram_grid(result.batch.healthy_positions(), domain, bins)
            tempered = quadrature_normalize(model, rho, domain, bins)
            summary[f"{rho:g}"] = {
                "tv_to_tempered": tv_distance(hist, tempered),
                "left_fraction": float(
                    np.mean(result.batch.healthy_positions()[:, 0] < 0.0)
                ),
            }
            masses = hist.cell_masses()
            rows.extend(
                [rho, float(c), float(m)] for c, m in zip(hist.centers[:, 0], masses)
            )
        write_csv(self.run_dir / "temperature_sweep.csv", ["rho", "x0", "mass"], rows)
        return summary

    def process(self, config: ExperimentConfig) -> ExperimentOutcome:
        try:
            logger.info("Processing srlmc-diagnostics")
            self.run_dir.mkdir(parents=True, exist_ok=True)
            domain = build_domain(config)
            if domain.dim != 1:
                raise ValueError("srlmc-diagnostics runs on a 1-D domain")
            model, buffer = self.obtain_model(config)

            results: Dict[str, Any] = {}
            results.update(self.side_fractions(model, config, domain))
            results.update(self.crossing(model, config, domain, buffer))
            results["temperature_sweep"] = self.temperature_sweep(model, config, domain)

            spec = config.diagnostics
            left = results["left_same_side_fraction"]
            right = results["right_same_side_fraction"]
            crossing = results["data_crossing_fraction"]
            checks = {
                "left_stays_left": left > spec.mass_threshold,
                "right_stays_right": right > spec.mass_threshold,
                "data_chains_rarely_cross": crossing < spec.crossing_threshold,
            }
            results["checks"] = checks
            return ExperimentOutcome(
                results=results,
                artifacts=sorted(p.name for p in self.run_dir.iterdir() if p.is_file()),
                passed=all(checks.values()),
            )
        except Exception as e:
            logger.error(f"Error in srlmc diagnostics: {e}")
            raise
