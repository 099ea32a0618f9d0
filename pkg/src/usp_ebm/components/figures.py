"""
Figure Component for usp-ebm

Turns a finished training run into one CSV per figure panel: gradient-norm
trace, log-density curves with OOD-region flags, sample histograms against
the data law, and the negative-energy curve. Nothing is plotted here.
"""

from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
from loguru import logger

from ..core.distributions import binned_mixture_grid, histogram_grid
from ..core.evaluation import ood_region_mask
from ..models import ExperimentConfig
from ..utils.config import parse_experiment_config
from ..utils.io import read_json, read_numeric_csv, write_array_csv
from .training import build_domain, build_target

FIGURE_INPUTS = ("manifest.json", "trace.csv", "density_learned.csv", "samples.csv")
OOD_RADIUS = 3.0


class MissingArtifactsError(FileNotFoundError):
    """Figure inputs are absent; `missing` names them, `written` lists emitted panels"""

    def __init__(self, missing: List[str], written: Optional[List[Path]] = None):
        super().__init__(f"Missing figure inputs: {', '.join(missing)}")
        self.missing = missing
        self.written = written or []


class FigureEmitter:
    def __init__(self, run_dir: Path):
        self.run_dir = Path(run_dir)
        self.out_dir = self.run_dir / "figures"

    def missing_inputs(self) -> List[str]:
        return [name for name in FIGURE_INPUTS if not (self.run_dir / name).is_file()]

    def _config(self) -> Optional[ExperimentConfig]:
        path = self.run_dir / "manifest.json"
        if not path.is_file():
            return None
        return parse_experiment_config(read_json(path)["config"])

    def grad_norm_panel(self) -> Path:
        header, data = read_numeric_csv(self.run_dir / "trace.csv")
        cols = [header.index("iteration"), header.index("grad_norm")]
        return write_array_csv(
            self.out_dir / "grad_norm.csv", ["iteration", "grad_norm"], data[:, cols]
        )

    def log_density_panel(self, config: ExperimentConfig) -> Path:
        header, data = read_numeric_csv(self.run_dir / "density_learned.csv")
        coords = data[:, [i for i, h in enumerate(header) if h.startswith("x")]]
        target = build_target(config)
        learned = data[:, header.index("log_density")]
        ood = ood_region_mask(coords, target, OOD_RADIUS).astype(np.float64)
        names = [h for h in header if h.startswith("x")]
        return write_array_csv(
            self.out_dir / "log_density.csv",
            names + ["log_density_learned", "log_density_target", "ood_region"],
            np.column_stack([coords, learned, target.log_density(coords), ood]),
        )

    def histogram_panel(self, config: ExperimentConfig) -> Path:
        """Generated and data bin masses; each column sums to one"""
        _, samples = read_numeric_csv(self.run_dir / "samples.csv")
        domain = build_domain(config)
        bins = config.train.histogram_resolution
        data_law = binned_mixture_grid(build_target(config), domain, bins)
        generated = histogram_grid(samples, domain, bins, label="generated")
        generated = generated.cell_masses()
        names = [f"x{a}" for a in range(domain.dim)]
        return write_array_csv(
            self.out_dir / "histogram.csv",
            names + ["generated_mass", "data_mass"],
            np.column_stack([data_law.centers, generated, data_law.cell_masses()]),
        )

    def negative_energy_panel(self, log_partition: float) -> Path:
        """-E(x) = log q(x) + log Z"""
        header, data = read_numeric_csv(self.run_dir / "density_learned.csv")
        idx = [i for i, h in enumerate(header) if h.startswith("x")]
        negative_energy = data[:, header.index("log_density")] + log_partition
        return write_array_csv(
            self.out_dir / "negative_energy.csv",
            [header[i] for i in idx] + ["negative_energy"],
            np.column_stack([data[:, idx], negative_energy]),
        )

    def emit(self) -> List[Path]:
        """Write every panel with its inputs; MissingArtifactsError if any are absent"""
        missing = self.missing_inputs()
        have = set(FIGURE_INPUTS) - set(missing)
        config = self._config() if "manifest.json" in have else None
        written: List[Path] = []
        if "trace.csv" in have:
            written.append(self.grad_norm_panel())
        if config is not None and "density_learned.csv" in have:
            written.append(self.log_density_panel(config))
            results: Dict = read_json(self.run_dir / "manifest.json").get("results", {})
            if results.get("log_partition") is not None:
                written.append(
                    self.negative_energy_panel(float(results["log_partition"]))
                )
        if config is not None and "samples.csv" in have:
            written.append(self.histogram_panel(config))
        for path in written:
            logger.info(f"Wrote figure panel {path}")
        if missing:
            logger.error(f"Missing figure inputs in {self.run_dir}: {missing}")
            raise MissingArtifactsError(missing, written)
        return written
