"""
OOD Evaluation Component for usp-ebm

Scores in-distribution samples and synthetic OOD sets by -E(x) and reports
FPR at the configured TPR and AUPR for each set.
"""

from pathlib import Path
from typing import List

import numpy as np
from loguru import logger

from ..core.energy import save_checkpoint
from ..core.evaluation import ScoreSet, aupr, fpr_at_tpr, make_ood_set
from ..models import ExperimentConfig, ExperimentOutcome, MetricReport
from ..utils.io import write_array_csv, write_json
from ..utils.rng import stream
from .training import TrainingComponent, build_domain, build_model, build_target


class OodComponent:
    """Runs the ood-eval experiment"""

    def __init__(self, run_dir: Path):
        self.run_dir = Path(run_dir)

    def process(self, config: ExperimentConfig) -> ExperimentOutcome:
        try:
            logger.info("Processing ood-eval")
            self.run_dir.mkdir(parents=True, exist_ok=True)
            target = build_target(config)
            domain = build_domain(config)
            if config.checkpoint:
                model = build_model(config, target)
                diverged = 0
            else:
                logger.info("No checkpoint configured; training a model first")
                result = TrainingComponent(self.run_dir).fit(config)
                model = result.model
                diverged = result.trace.total_diverged
                save_checkpoint(model, self.run_dir / "model.json")

            spec = config.ood
            in_points = target.sample(spec.n_in, stream(config.seed, "ood/in"))
            reports: List[MetricReport] = []
            for name in spec.sets:
                out_points = make_ood_set(
                    name,
                    spec.n_out,
                    domain,
                    target,
                    stream(config.seed, f"ood/{name}"),
                    spec.ood_radius,
                )
                scores = ScoreSet.from_energies(model, in_points, out_points)
                labels, values = scores.labeled()
                write_array_csv(
                    self.run_dir / f"scores_{name}.csv",
                    ["in_distribution", "score"],
                    np.column_stack([labels, values]),
                )
                report = MetricReport(
                    dataset=name,
                    fpr95=fpr_at_tpr(scores, spec.tpr),
                    aupr=aupr(scores),
                    n_in=spec.n_in,
                    n_out=spec.n_out,
                    seed=config.seed,
                )
                percent = report.as_percent()
                logger.info(
                    f"OOD set {name}: FPR95 {percent['fpr95']:.1f}, "
                    f"AUPR {percent['aupr']:.1f}"
                )
                reports.append(report)

            payload = {"reports": [r.model_dump() for r in reports]}
            write_json(self.run_dir / "ood_metrics.json", payload)
            return ExperimentOutcome(
                results=payload,
                artifacts=sorted(p.name for p in self.run_dir.iterdir() if p.is_file()),
                diverged_chains=diverged,
            )
        except Exception as e:
            logger.error(f"Error in OOD evaluation: {e}")
            raise
