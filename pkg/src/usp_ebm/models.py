"""
Data models for usp-ebm

Experiment configurations and run reports. Every experiment config is a JSON
object validated by `ExperimentConfig`; experiment-specific defaults are
merged in before validation so a config file only has to name what differs.
"""

import copy
from enum import Enum
from typing import Any, Dict, List, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

SCHEMA_VERSION = 1


class ExperimentKind(str, Enum):
    """Experiments the runner knows how to execute"""

    TRAIN_1D = "train-1d"
    TRAIN_2D = "train-2d"
    VERIFY_PROP1 = "verify-prop1"
    VERIFY_PROP2 = "verify-prop2"
    VERIFY_PROP3 = "verify-prop3"
    SRLMC_DIAGNOSTICS = "srlmc-diagnostics"
    OOD_EVAL = "ood-eval"


class TrainMethod(str, Enum):
    """Estimators for the first term of the MLE gradient"""

    SRLMC = "srlmc"
    RIEMANN = "riemann"
    PSUSP = "psusp"


class OptimizerKind(str, Enum):
    SGD = "sgd"
    ADAM = "adam"


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


# Problem definition
class DomainConfig(StrictModel):
    """Axis-aligned box Omega"""

    lo: List[float] = Field(..., description="Per-axis lower bounds")
    hi: List[float] = Field(..., description="Per-axis upper bounds")

    @model_validator(mode="after")
    def _check_bounds(self):
        if len(self.lo) != len(self.hi) or not self.lo:
            raise ValueError("lo and hi must be nonempty and of equal length")
        if any(a >= b for a, b in zip(self.lo, self.hi)):
            raise ValueError("lo must be < hi on every axis")
        return self

    @property
    def dim(self) -> int:
        return len(self.lo)


class TargetConfig(StrictModel):
    """Gaussian-mixture data law p"""

    name: Literal["two-gaussians-1d", "six-mode-ring-2d", "custom"] = Field(
        "two-gaussians-1d",
        description="Preset mixture, or custom to give the components",
    )
    stddev: Optional[float] = Field(
        None, gt=0, description="Override of the preset stddev"
    )
    weights: Optional[List[float]] = Field(None, description="Custom mixture weights")
    means: Optional[List[List[float]]] = Field(
        None, description="Custom component means"
    )
    stddevs: Optional[List[float]] = Field(None, description="Custom component stddevs")

    @model_validator(mode="after")
    def _check_custom(self):
        if self.name == "custom" and not (self.weights and self.means and self.stddevs):
            raise ValueError("custom target needs weights, means and stddevs")
        return self


class ProposalConfig(StrictModel):
    """Initialization law q_0"""

    kind: Literal[
        "uniform-box", "gaussian", "uniform-subinterval", "mixture-component"
    ] = Field("uniform-box", description="Proposal family")
    lo: Optional[float] = Field(None, description="Lower end for uniform-subinterval")
    hi: Optional[float] = Field(None, description="Upper end for uniform-subinterval")
    mean: Optional[List[float]] = Field(None, description="Mean for gaussian")
    std: float = Field(1.0, gt=0, description="Stddev for gaussian")
    component: int = Field(0, ge=0, description="Component index for mixture-component")


class ModelConfig(StrictModel):
    """Energy family and its hyperparameters"""

    family: Literal["mlp", "grid", "quadratic"] = Field(
        "mlp", description="Energy family"
    )
    hidden: List[int] = Field(
        default_factory=lambda: [64, 64, 64, 64], description="MLP hidden widths"
    )
    slope: float = Field(0.2, gt=0, lt=1, description="Leaky-ReLU negative slope")
    head: Literal["scalar", "reconstruction"] = Field(
        "scalar", description="MLP output head"
    )
    n_knots: int = Field(256, ge=2, description="Knot count for the grid family")
    scale: float = Field(1.0, gt=0, description="Scale s of the quadratic family")

    @field_validator("hidden")
    @classmethod
    def _positive_widths(cls, value: List[int]) -> List[int]:
        if any(w < 1 for w in value):
            raise ValueError("hidden widths must be >= 1")
        return value


# Samplers
class LmcConfig(StrictModel):
    """Modified Langevin dynamics x <- x - (alpha/2) grad E + sqrt(beta) eps"""

    T: int = Field(40, ge=1, description="Iterations per chain")
    alpha: Union[float, List[float]] = Field(
        0.001, description="Step size, constant or per-step"
    )
    beta: Union[float, List[float]] = Field(
        0.0001, description="Noise scale, constant or per-step"
    )
    rho: Optional[float] = Field(
        None, gt=0, description="Declared alpha/beta ratio, checked on every step"
    )
    grad_clip: Optional[float] = Field(
        None,
        gt=0,
        description="Clip per-chain input gradients to this norm; off by default",
    )
    data_noise: float = Field(
        0.0, ge=0, description="Stddev of Gaussian noise added to data"
    )

    @model_validator(mode="after")
    def _check_schedules(self):
        for name in ("alpha", "beta"):
            value = getattr(self, name)
            if isinstance(value, list) and len(value) != self.T:
                raise ValueError(
                    f"{name} schedule has {len(value)} entries, expected T={self.T}"
                )
        alphas = [self.alpha_at(t) for t in range(self.T)]
        betas = [self.beta_at(t) for t in range(self.T)]
        if any(not a > 0 for a in alphas):
            raise ValueError("alpha must be > 0 at every step")
        if any(b < 0 for b in betas):
            raise ValueError("beta must be >= 0 at every step")
        if self.rho is not None:
            for t, (a, b) in enumerate(zip(alphas, betas)):
                if b == 0 or abs(a / b - self.rho) >= 1e-12:
                    raise ValueError(
                        f"alpha/beta at step {t} differs from declared rho={self.rho}"
                    )
        return self

    def alpha_at(self, t: int) -> float:
        return float(self.alpha[t] if isinstance(self.alpha, list) else self.alpha)

    def beta_at(self, t: int) -> float:
        return float(self.beta[t] if isinstance(self.beta, list) else self.beta)


class ReplayConfig(StrictModel):
    """Replay buffer used to initialize SRLMC chains"""

    use_buffer: bool = Field(True, description="Initialize chains from the buffer")
    capacity: int = Field(50000, ge=1, description="Maximum stored samples")
    reinit_rate: float = Field(
        0.05, ge=0, le=1, description="Probability of a fresh proposal draw"
    )


class SrlmcConfig(StrictModel):
    lmc: LmcConfig = Field(default_factory=LmcConfig, description="Chain dynamics")
    replay: ReplayConfig = Field(
        default_factory=ReplayConfig, description="Replay buffer"
    )
    proposal: ProposalConfig = Field(default_factory=ProposalConfig, description="q_0")
    n_chains: Optional[int] = Field(
        None, ge=1, description="Chains per iteration; defaults to the batch size"
    )


class RiemannConfig(StrictModel):
    resolution: int = Field(1024, ge=16, description="Midpoint grid size per axis (1D)")
    n_points: int = Field(4096, ge=1, description="Uniform draws per iteration (2D)")


class UspConfig(StrictModel):
    """Persistent stochastic uniform support partitioning"""

    n_particles: int = Field(5000, ge=1, description="Number of partition points n")
    epsilon: float = Field(0.05, gt=0, description="Minimum pairwise separation")
    n_m: int = Field(1, ge=1, description="Maximization PGA steps per round")
    n_r: int = Field(1, ge=1, description="Repulsion PGA steps per round")
    N: int = Field(50, ge=0, description="Rounds per EBM update")
    lambda_size: int = Field(1000, ge=1, description="|Lambda|")
    gamma_size: Optional[int] = Field(
        None, ge=0, description="|Gamma|; defaults to |Lambda| capped by n - |Lambda|"
    )
    n_s: int = Field(5000, ge=1, description="Estimation subset size")
    step_max: Optional[float] = Field(
        None, gt=0, description="Maximization PGA step; defaults to 1e-3 * diam(Omega)"
    )
    step_rep: Optional[float] = Field(
        None, gt=0, description="Repulsion PGA step; defaults to epsilon / 10"
    )
    fused: bool = Field(
        False, description="Single pass: repel constraint violators, maximize the rest"
    )
    init: Literal["proposal", "data", "rightmost-mode"] = Field(
        "proposal", description="Particle initialization"
    )
    neighbor_index: bool = Field(
        False, description="Use a k-d tree for repulsion neighbors"
    )

    @model_validator(mode="after")
    def _check_sizes(self):
        if self.lambda_size > self.n_particles:
            raise ValueError("lambda_size must be <= n_particles")
        if self.n_s > self.n_particles:
            raise ValueError("n_s must be <= n_particles")
        return self

    def resolved_gamma_size(self) -> int:
        free = self.n_particles - self.lambda_size
        size = self.lambda_size if self.gamma_size is None else self.gamma_size
        return min(size, free)

    def resolved_step_max(self, diameter: float) -> float:
        return self.step_max if self.step_max is not None else 1e-3 * diameter

    def resolved_step_rep(self) -> float:
        return self.step_rep if self.step_rep is not None else self.epsilon / 10.0


class OptimizerConfig(StrictModel):
    kind: OptimizerKind = Field(OptimizerKind.SGD, description="Parameter optimizer")
    lr: float = Field(0.01, gt=0, description="Learning rate")
    beta1: float = Field(0.9, ge=0, lt=1, description="Adam first-moment decay")
    beta2: float = Field(0.999, ge=0, lt=1, description="Adam second-moment decay")
    eps: float = Field(1e-8, gt=0, description="Adam denominator offset")


class TrainConfig(StrictModel):
    """EBM maximum-likelihood training"""

    method: TrainMethod = Field(TrainMethod.SRLMC, description="First-term estimator")
    iterations: int = Field(5000, ge=0, description="Parameter updates")
    batch_size: int = Field(1000, ge=1, description="Data batch size")
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    srlmc: SrlmcConfig = Field(default_factory=SrlmcConfig)
    riemann: RiemannConfig = Field(default_factory=RiemannConfig)
    usp: UspConfig = Field(default_factory=UspConfig)
    snapshot_every: int = Field(100, ge=1, description="Density snapshot cadence")
    log_every: int = Field(100, ge=1, description="Progress log cadence")
    early_stop: bool = Field(True, description="Stop on a gradient-norm plateau")
    early_stop_window: int = Field(
        500, ge=1, description="Plateau window in iterations"
    )
    early_stop_tol: float = Field(1e-3, gt=0, description="Relative change threshold")
    density_resolution: Optional[int] = Field(
        None,
        ge=16,
        description="Grid size for density snapshots; 1024 in 1D, 256 in 2D",
    )
    histogram_resolution: int = Field(
        64, ge=16, description="Bins per axis when comparing samples to the data law"
    )

    def resolved_density_resolution(self, dim: int) -> int:
        if self.density_resolution is not None:
            return self.density_resolution
        return 1024 if dim == 1 else 256


# Verification and analysis experiments
class Prop1Config(StrictModel):
    dims: List[int] = Field(default_factory=lambda: [2, 10, 100, 1000])
    laws: List[Literal["uniform", "gaussian", "constant"]] = Field(
        default_factory=lambda: ["uniform", "gaussian", "constant"]
    )
    count: int = Field(10000, ge=1, description="Monte Carlo samples per dimension")
    eps: float = Field(0.05, gt=0, description="Relative shell half-width")
    pass_probability: float = Field(
        0.99, gt=0, le=1, description="Bar at the largest dimension"
    )
    tolerance: float = Field(0.01, ge=0, description="Monotonicity slack")


class Prop2Config(StrictModel):
    rhos: List[float] = Field(default_factory=lambda: [0.5, 1.0, 2.0, 10.0])
    beta: float = Field(1e-4, gt=0, description="Noise scale; alpha = rho * beta")
    scale: float = Field(1.0, gt=0, description="QuadraticEnergy scale s")
    n_chains: int = Field(2048, ge=2, description="Independent parallel chains")
    time_horizon: float = Field(
        30.0, gt=0, description="Chain length in units of 1/alpha steps"
    )
    burn_in: float = Field(0.3, ge=0, lt=1, description="Discarded fraction of steps")
    max_steps: int = Field(1_000_000, ge=1, description="Cap on steps per rho")
    tolerance: float = Field(0.05, gt=0, description="Relative variance band")


class Prop3Config(StrictModel):
    rho: float = Field(10.0, gt=0)
    resolution: int = Field(1024, ge=16, description="Quadrature cells on Omega")
    perturbation: float = Field(
        0.05, gt=0, description="Relative parameter perturbation"
    )
    ratio_bar: float = Field(
        1e-3, gt=0, description="Pass bar for the gradient-norm ratio"
    )
    consistency_counts: List[int] = Field(default_factory=lambda: [64, 256, 1024, 4096])
    consistency_repeats: int = Field(32, ge=1, description="Repeats per point count")


class DiagnosticsConfig(StrictModel):
    n_chains: int = Field(1000, ge=1, description="Chains per initialization set")
    rhos: List[float] = Field(
        default_factory=lambda: [1.0, 10.0, 100.0], description="Temperature sweep"
    )
    sweep_T: int = Field(40, ge=1, description="Chain length in the temperature sweep")
    histogram_resolution: int = Field(128, ge=16)
    mass_threshold: float = Field(0.95, gt=0, le=1, description="Same-side pass bar")
    crossing_threshold: float = Field(0.05, ge=0, le=1, description="Crossing pass bar")


class OodConfig(StrictModel):
    n_in: int = Field(10000, ge=1)
    n_out: int = Field(10000, ge=1)
    sets: List[Literal["constant", "noise", "ood-region"]] = Field(
        default_factory=lambda: ["constant", "noise", "ood-region"]
    )
    tpr: float = Field(0.95, gt=0, le=1)
    ood_radius: float = Field(
        3.0, gt=0, description="OOD region: beyond this many stddevs"
    )


def _deep_merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


_SRLMC_1D = {
    "method": "srlmc",
    "iterations": 5000,
    "batch_size": 1000,
    "optimizer": {"kind": "sgd", "lr": 0.01},
    "srlmc": {
        "lmc": {"T": 40, "alpha": 0.001, "beta": 0.0001},
        "replay": {"use_buffer": True, "capacity": 50000, "reinit_rate": 0.05},
        "proposal": {"kind": "uniform-box"},
    },
    "riemann": {"resolution": 1024},
}

_ONE_D = {
    "target": {"name": "two-gaussians-1d"},
    "domain": {"lo": [-1.0], "hi": [1.0]},
    "model": {"family": "mlp", "head": "reconstruction"},
    "train": _SRLMC_1D,
}

EXPERIMENT_DEFAULTS: Dict[str, Dict[str, Any]] = {
    "train-1d": _ONE_D,
    "train-2d": {
        "target": {"name": "six-mode-ring-2d"},
        "domain": {"lo": [-1.5, -1.5], "hi": [1.5, 1.5]},
        "model": {"family": "mlp", "head": "scalar"},
        "train": {
            "method": "psusp",
            "iterations": 5000,
            "batch_size": 1000,
            "optimizer": {"kind": "sgd", "lr": 0.001},
            "srlmc": {"lmc": {"T": 40, "alpha": 0.001, "beta": 0.0001}},
            "riemann": {"n_points": 4096},
            "usp": {
                "n_m": 1,
                "n_r": 1,
                "N": 50,
                "epsilon": 0.05,
                "n_particles": 5000,
                "lambda_size": 1000,
                "n_s": 5000,
                "fused": True,
                "init": "rightmost-mode",
                "neighbor_index": True,
            },
        },
    },
    "verify-prop1": {},
    "verify-prop2": {},
    "verify-prop3": {
        "target": {"name": "two-gaussians-1d"}, "domain": {"lo": [-1.0], "hi": [1.0]}
    },
    "srlmc-diagnostics": _ONE_D,
    "ood-eval": _ONE_D,
}


class ExperimentConfig(StrictModel):
    """One experiment run"""

    schema_version: Literal[1] = Field(
        SCHEMA_VERSION, description="Config schema version"
    )
    experiment: ExperimentKind = Field(..., description="Experiment to run")
    seed: int = Field(
        ..., ge=0, lt=2**64, description="Root seed for every random stream"
    )
    output_dir: Optional[str] = Field(None, description="Run directory")
    checkpoint: Optional[str] = Field(
        None, description="Model checkpoint to analyze instead of training one"
    )
    target: TargetConfig = Field(default_factory=TargetConfig)
    domain: DomainConfig = Field(
        default_factory=lambda: DomainConfig(lo=[-1.0], hi=[1.0]), description="Omega"
    )
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    prop1: Prop1Config = Field(default_factory=Prop1Config)
    prop2: Prop2Config = Field(default_factory=Prop2Config)
    prop3: Prop3Config = Field(default_factory=Prop3Config)
    diagnostics: DiagnosticsConfig = Field(default_factory=DiagnosticsConfig)
    ood: OodConfig = Field(default_factory=OodConfig)

    @model_validator(mode="before")
    @classmethod
    def _apply_experiment_defaults(cls, data: Any) -> Any:
        if not isinstance(data, dict):
            return data
        defaults = EXPERIMENT_DEFAULTS.get(str(data.get("experiment", "")), {})
        return _deep_merge(defaults, data)

    @model_validator(mode="after")
    def _check_dimensions(self):
        target_dim = {"two-gaussians-1d": 1, "six-mode-ring-2d": 2}.get(
            self.target.name
        )
        if self.target.name == "custom":
            target_dim = len(self.target.means[0])
        if self.experiment not in (
            ExperimentKind.VERIFY_PROP1, ExperimentKind.VERIFY_PROP2
        ):
            if target_dim != self.domain.dim:
                raise ValueError(
                    f"target is {target_dim}-D but domain is {self.domain.dim}-D"
                )
        if self.experiment == ExperimentKind.TRAIN_1D and self.domain.dim != 1:
            raise ValueError("train-1d needs a 1-D domain")
        if self.experiment == ExperimentKind.TRAIN_2D and self.domain.dim != 2:
            raise ValueError("train-2d needs a 2-D domain")
        return self


# Reports
class MetricReport(BaseModel):
    """OOD detection metrics for one OOD set"""

    dataset: str = Field(..., description="OOD set name")
    fpr95: float = Field(..., description="FPR at the configured TPR, fraction")
    aupr: float = Field(..., description="Area under the PR curve, fraction")
    n_in: int = Field(..., description="In-distribution sample count")
    n_out: int = Field(..., description="OOD sample count")
    seed: int = Field(..., description="Root seed")

    def as_percent(self) -> Dict[str, float]:
        return {"fpr95": 100.0 * self.fpr95, "aupr": 100.0 * self.aupr}


class ExperimentOutcome(BaseModel):
    """What an experiment component hands back to the runner"""

    results: Dict[str, Any] = Field(
        default_factory=dict, description="Metrics and verdicts"
    )
    artifacts: List[str] = Field(
        default_factory=list, description="Files written, run-relative"
    )
    passed: Optional[bool] = Field(
        None, description="Pass/fail for checks with a pass bar"
    )
    diverged_chains: int = Field(0, description="Chains flagged non-finite")


class RunManifest(BaseModel):
    """Summary written to manifest.json in every run directory"""

    schema_version: int = Field(SCHEMA_VERSION, description="Manifest schema version")
    experiment: str = Field(..., description="Experiment kind")
    version: str = Field(..., description="usp-ebm version")
    seed: int = Field(..., description="Root seed")
    config: Dict[str, Any] = Field(..., description="Echo of the validated config")
    status: Literal["ok", "failed"] = Field("ok", description="Run status")
    passed: Optional[bool] = Field(None, description="Pass/fail for verification runs")
    diverged_chains: int = Field(
        0, description="Chains flagged non-finite during the run"
    )
    results: Dict[str, Any] = Field(
        default_factory=dict, description="Experiment results"
    )
    artifacts: List[str] = Field(
        default_factory=list, description="Files in the run directory"
    )
    wall_time_seconds: Optional[float] = Field(None, description="Elapsed time")
    memory_mb: Optional[float] = Field(
        None, description="Process RSS at the end of the run"
    )
