"""
Full-scale reproductions of the two-mode and six-mode experiments

These run the shipped configs end to end and take minutes to hours on a CPU.
They are skipped unless USP_EBM_RUN_SLOW=1.
"""

import json
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent.parent / "src"))

from usp_ebm.cli import main
from usp_ebm.components.training import build_domain, build_target
from usp_ebm.core.evaluation import voronoi_basins
from usp_ebm.core.usp import read_particles
from usp_ebm.utils.config import load_experiment_config
from usp_ebm.utils.io import read_json

CONFIGS = Path(__file__).parent.parent / "configs"

pytestmark = pytest.mark.slow


def run_config(name: str, out: Path, seed: int = 0, **overrides) -> dict:
    """Run a shipped config, optionally patched, and return its manifest"""
    config_path = CONFIGS / name
    if overrides:
        payload = json.loads(config_path.read_text())
        payload.update(overrides)
        config_path = out.parent / f"{out.name}-config.json"
        config_path.write_text(json.dumps(payload))
    args = ["run", "--config", str(config_path), "--seed", str(seed), "--out", str(out)]
    assert main(args) == 0
    return read_json(out / "manifest.json")


@pytest.fixture(scope="module")
def srlmc_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("srlmc")
    runs = {}
    for seed in (0, 1, 2):
        out = root / f"seed{seed}"
        runs[seed] = (out, run_config("train_1d_srlmc.json", out, seed))
    return runs


class TestVerificationRuns:
    """Shipped verification configs pass their bars"""

    @pytest.mark.parametrize(
        "name", ["verify_prop1.json", "verify_prop2.json", "verify_prop3.json"]
    )
    def test_passes(self, tmp_path, name):
        manifest = run_config(name, tmp_path / "run")
        assert manifest["passed"] is True


class TestTwoModeTraining:
    """1-D two-Gaussian target"""

    def test_riemann_recovers_target(self, tmp_path):
        """Exact first-term estimate learns the target density"""
        manifest = run_config("train_1d_riemann.json", tmp_path / "run")
        assert manifest["results"]["tv_to_target"] < 0.05
        assert manifest["passed"] is True

    def test_short_run_samples_fit_while_density_does_not(self, srlmc_runs):
        """Samples match the data but the normalized EBM misweights the modes"""
        pathological = 0
        for _, manifest in srlmc_runs.values():
            results = manifest["results"]
            fits_samples = results["samples_tv_to_data"] < 0.1
            if fits_samples and results["mode_mass"]["max_min_ratio"] > 1.5:
                pathological += 1
        assert pathological >= 2

    def test_riemann_is_reproducible(self, tmp_path):
        a = tmp_path / "a"
        b = tmp_path / "b"
        run_config("train_1d_riemann.json", a)
        run_config("train_1d_riemann.json", b)
        for path in sorted(a.glob("*.csv")):
            assert path.read_bytes() == (b / path.name).read_bytes(), path.name

    def test_srlmc_is_reproducible(self, tmp_path, srlmc_runs):
        reference, _ = srlmc_runs[0]
        again = tmp_path / "again"
        run_config("train_1d_srlmc.json", again, 0)
        for path in sorted(reference.glob("*.csv")):
            assert path.read_bytes() == (again / path.name).read_bytes(), path.name


class TestShortRunDiagnostics:
    """Chains on the short-run-trained EBM stay in their starting basin"""

    def test_chains_keep_their_side(self, tmp_path, srlmc_runs):
        model_dir, _ = srlmc_runs[0]
        manifest = run_config(
            "srlmc_diagnostics.json", tmp_path / "diag", checkpoint=str(
                model_dir / "model.json"
            )
        )
        results = manifest["results"]
        assert results["left_same_side_fraction"] > 0.95
        assert results["right_same_side_fraction"] > 0.95
        assert results["data_crossing_fraction"] < 0.05


class TestSixModeTraining:
    """2-D six-mode ring with chains or partition points started in one mode"""

    def test_partition_points_cover_every_mode(self, tmp_path):
        out = tmp_path / "run"
        manifest = run_config("train_2d_psusp.json", out)

        config = load_experiment_config(CONFIGS / "train_2d_psusp.json")
        target = build_target(config)
        particles = read_particles(
            out / "particles.csv", config.train.usp.epsilon, build_domain(config)
        )
        for basin in voronoi_basins(target):
            assert np.mean(basin.contains(particles.points)) >= 0.05, basin.name

        for basin in manifest["results"]["mode_mass"]["basins"]:
            assert abs(basin["mass"] - 1 / 6) <= 0.05, basin["name"]

    def test_srlmc_from_one_mode_misweights_the_ring(self, tmp_path):
        """Chains seeded in the rightmost mode leave some basin far from 1/6"""
        config = load_experiment_config(CONFIGS / "train_2d_srlmc.json")
        rightmost = build_target(config).means[config.train.srlmc.proposal.component]
        assert rightmost[0] == pytest.approx(1.0)

        manifest = run_config("train_2d_srlmc.json", tmp_path / "run")
        masses = [basin["mass"] for basin in manifest["results"]["mode_mass"]["basins"]]
        assert len(masses) == 6
        assert max(abs(mass - 1 / 6) for mass in masses) > 0.05

    def test_psusp_is_reproducible(self, tmp_path):
        a = tmp_path / "a"
        b = tmp_path / "b"
        run_config("train_2d_psusp.json", a)
        run_config("train_2d_psusp.json", b)
        for path in sorted(a.glob("*.csv")):
            assert path.read_bytes() == (b / path.name).read_bytes(), path.name


if __name__ == "__main__":
    pytest.main([__file__])
