"""
Training Component for usp-ebm

Builds the target, domain and energy model from an experiment config, trains
the EBM with the configured estimator and writes the run artifacts.
"""

from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
from loguru import logger

from ..core.distributions import (
    BoxDomain,
    GaussianMixture,
    Proposal,
    binned_mixture_grid,
    cell_centers,
    histogram_grid,
    model_energies,
    quadrature_normalize,
    six_mode_ring_2d,
    target_grid,
    tv_distance,
    two_gaussians_1d,
)
from ..core.energy import (
    EnergyModel,
    GridEnergy,
    MlpEnergy,
    QuadraticEnergy,
    read_checkpoint,
    save_checkpoint,
)
from ..core.estimate import TrainResult, train
from ..core.evaluation import default_basins, mode_mass
from ..core.usp import write_particles
from ..models import ExperimentConfig, ExperimentOutcome, ProposalConfig, TrainMethod
from ..utils.config import get_settings
from ..utils.io import write_array_csv, write_csv
from ..utils.rng import stream


def build_domain(config: ExperimentConfig) -> BoxDomain:
    return BoxDomain(np.asarray(config.domain.lo), np.asarray(config.domain.hi))


def build_target(config: ExperimentConfig) -> GaussianMixture:
    target = config.target
    if target.name == "two-gaussians-1d":
        return two_gaussians_1d(stddev=target.stddev or 0.05)
    if target.name == "six-mode-ring-2d":
        return six_mode_ring_2d(stddev=target.stddev or 0.1)
    return GaussianMixture(
        weights=np.asarray(target.weights),
        means=np.asarray(target.means),
        stddevs=np.asarray(target.stddevs),
    )


def build_proposal(
    proposal: ProposalConfig, domain: BoxDomain, target: GaussianMixture
) -> Proposal:
    if proposal.kind == "uniform-box":
        return Proposal.uniform(domain)
    if proposal.kind == "uniform-subinterval":
        lo = domain.lo[0] if proposal.lo is None else proposal.lo
        hi = domain.hi[0] if proposal.hi is None else proposal.hi
        return Proposal.subinterval(lo, hi)
    if proposal.kind == "gaussian":
        mean = proposal.mean if proposal.mean is not None else [0.0] * domain.dim
        return Proposal.gaussian(mean, proposal.std)
    return Proposal.mixture_component(target, proposal.component)


def build_model(config: ExperimentConfig, target: GaussianMixture) -> EnergyModel:
    """Fresh model, or the configured checkpoint"""
    if config.checkpoint:
        logger.info(f"Loading model checkpoint {config.checkpoint}")
        model = read_checkpoint(config.checkpoint)
        if model.input_dim != config.domain.dim:
            raise ValueError(
                f"Checkpoint model is {model.input_dim}-D "
                f"but the domain is {config.domain.dim}-D"
            )
        return model
    spec = config.model
    dim = config.domain.dim
    if spec.family == "mlp":
        return MlpEnergy.initialize(
            dim,
            spec.hidden,
            stream(config.seed, "model"),
            slope=spec.slope,
            head=spec.head,
        )
    if spec.family == "grid":
        if dim != 1:
            raise ValueError("The grid energy family is 1-D only")
        return GridEnergy(
            config.domain.lo[0], config.domain.hi[0], np.zeros(spec.n_knots)
        )
    return QuadraticEnergy(np.zeros(dim), spec.scale)


def tempering_ratio(config: ExperimentConfig) -> float:
    lmc = config.train.srlmc.lmc
    return lmc.alpha_at(0) / lmc.beta_at(0) if lmc.beta_at(0) > 0 else float("inf")


class TrainingComponent:
    """
    Trains an EBM on the configured mixture target and writes its density
    curves, samples, trace and checkpoint into the run directory.
    """

    def __init__(self, run_dir: Path):
        self.run_dir = Path(run_dir)
        self.settings = get_settings()

    def fit(self, config: ExperimentConfig) -> TrainResult:
        target = build_target(config)
        domain = build_domain(config)
        model = build_model(config, target)
        proposal = build_proposal(config.train.srlmc.proposal, domain, target)
        return train(model, target, config.train, domain, config.seed, proposal)

    def write_density_artifacts(
        self, config: ExperimentConfig, result: TrainResult
    ) -> Dict[str, Any]:
        """Learned, target and tempered density grids plus summary metrics"""
        target = build_target(config)
        domain = build_domain(config)
        model = result.model
        resolution = config.train.resolved_density_resolution(domain.dim)
        results: Dict[str, Any] = {}

        learned = quadrature_normalize(model, 1.0, domain, resolution)
        reference = target_grid(target, domain, resolution)
        learned.to_csv(self.run_dir / "density_learned.csv")
        reference.to_csv(self.run_dir / "density_target.csv")
        results["log_partition"] = learned.log_partition
        results["tv_to_target"] = tv_distance(learned, reference)

        rho = tempering_ratio(config)
        if np.isfinite(rho):
            tempered = quadrature_normalize(model, rho, domain, resolution)
            tempered.to_csv(self.run_dir / "density_tempered.csv")
            results["tempering_rho"] = rho
            results["tempered_tv_to_target"] = tv_distance(tempered, reference)

        centers = cell_centers(domain, resolution)
        energies = model_energies(model, centers)
        header = [f"x{a}" for a in range(domain.dim)] + [
            "energy", "unnormalized_density"
        ]
        write_array_csv(
            self.run_dir / "energy_learned.csv",
            header,
            np.column_stack([centers, energies, np.exp(-energies)]),
        )

        report = mode_mass(learned, default_basins(target, reference), reference)
        results["mode_mass"] = report.to_dict()

        if result.samples.shape[0]:
            bins = config.train.histogram_resolution
            generated = histogram_grid(result.samples, domain, bins, label="generated")
            results["samples_tv_to_data"] = tv_distance(
                generated, binned_mixture_grid(target, domain, bins)
            )
        return results

    def process(self, config: ExperimentConfig) -> ExperimentOutcome:
        """Train, then write trace.csv, density CSVs, samples.csv and model.json"""
        try:
            logger.info(
                f"Processing {config.experiment.value} "
                f"with method {config.train.method.value}"
            )
            self.run_dir.mkdir(parents=True, exist_ok=True)
            result = self.fit(config)
            trace = result.trace
            trace.to_csv(self.run_dir / "trace.csv", self.settings.trace_wall_time)

            dim = config.domain.dim
            write_array_csv(
                self.run_dir / "samples.csv",
                [f"x{a}" for a in range(dim)],
                result.samples,
            )
            save_checkpoint(result.model, self.run_dir / "model.json")
            if trace.snapshots:
                reference = target_grid(
                    build_target(config),
                    build_domain(config),
                    trace.snapshots[0][1].resolution,
                )
                write_csv(
                    self.run_dir / "snapshots.csv",
                    ["iteration", "tv_to_target", "log_partition"],
                    (
                        [it, tv_distance(g, reference), g.log_partition]
                        for it, g in trace.snapshots
                    ),
                )
            if trace.buffer_tv:
                write_csv(
                    self.run_dir / "buffer_tv.csv",
                    ["iteration", "tv_to_data"],
                    trace.buffer_tv,
                )
            if result.particles is not None:
                write_particles(
                    self.run_dir / "particles.csv",
                    result.particles,
                    result.model.energy(result.particles.points),
                )
                write_csv(
                    self.run_dir / "particle_stats.csv",
                    ["iteration", "min_distance", "violations"],
                    (
                        [s["iteration"], s["min_distance"], s["violations"]]
                        for s in trace.particle_stats
                    ),
                )

            results = {
                "method": config.train.method.value,
                "iterations_run": trace.iterations,
                "stopped_early": trace.stopped_early,
                "stop_iteration": trace.stop_iteration,
                "skipped_updates": trace.skipped_updates,
                "final_grad_norm": trace.grad_norms[-1] if trace.grad_norms else None,
            }
            if dim <= 2:
                results.update(self.write_density_artifacts(config, result))
            if result.buffer is not None:
                results["buffer_size"] = len(result.buffer)
            if result.particles is not None and trace.particle_stats:
                results["particle_min_distance"] = trace.particle_stats[-1][
                    "min_distance"
                ]

            passed: Optional[bool] = None
            if config.train.method == TrainMethod.RIEMANN and "tv_to_target" in results:
                passed = results["tv_to_target"] < 0.05

            logger.info(
                f"Training finished: tv_to_target={results.get('tv_to_target')}, "
                f"diverged chains={trace.total_diverged}"
            )
            return ExperimentOutcome(
                results=results,
                artifacts=self.list_artifacts(),
                passed=passed,
                diverged_chains=trace.total_diverged,
            )
        except Exception as e:
            logger.error(f"Error in training: {e}")
            raise

    def list_artifacts(self) -> List[str]:
        return sorted(p.name for p in self.run_dir.iterdir() if p.is_file())
