"""Tests for montages and the HTML run report."""

import numpy as np
import pytest

from src.analysis import CellAssignment
from src.cell_types import CellInstance
from src.config import ModelConfig, TrainingConfig
from src.nn import build_networks
from src.report import (
    ReportSection,
    cluster_montages,
    generate_report_html,
    generator_montage,
    tile,
    z_walk_montage,
)


@pytest.fixture
def generator():
    """A tiny untrained generator with K = 3 and dim_z = 4."""
    cfg = TrainingConfig(batch_size=4, K=3, dim_z=4, precision="float64", model=ModelConfig(
        gen_seed_channels=4, gen_seed_size=8, gen_widths=(4, 4), disc_widths=(4, 8))).validate()
    return build_networks(cfg).generator


def solid(value, n=1, size=4):
    return np.full((n, size, size, 3), value, dtype=np.uint8)


class TestTile:
    """Tests for grid layout."""

    def test_grid_geometry(self):
        """Test canvas size and placement with padding."""
        images = np.concatenate([solid(10), solid(20), solid(30)])
        canvas = tile(images, columns=2, pad=1)
        assert canvas.shape == (2 * 5 + 1, 2 * 5 + 1, 3)
        assert canvas[1, 1, 0] == 10
        assert canvas[1, 6, 0] == 20
        assert canvas[6, 1, 0] == 30
        assert canvas[6, 6, 0] == 255
        assert canvas[0, 0, 0] == 255

    def test_empty(self):
        """Test that an empty montage is rejected."""
        with pytest.raises(ValueError, match="at least one"):
            tile(np.zeros((0, 4, 4, 3)), columns=2)

    def test_columns(self):
        """Test that columns must be positive."""
        with pytest.raises(ValueError, match="columns"):
            tile(solid(0), columns=0)


class TestGeneratorMontages:
    """Tests for sampling montages from G."""

    def test_code_grid(self, generator):
        """Test one column per code and one row per z draw."""
        canvas = generator_montage(generator, K=3, dim_z=4, rows=2)
        assert canvas.shape == (2 * 34 + 2, 3 * 34 + 2, 3)
        assert generator.training

    def test_code_grid_reproducible(self, generator):
        """Test that the montage seed fixes the pixels."""
        np.testing.assert_array_equal(generator_montage(generator, 3, 4, rows=2, seed=1),
                                      generator_montage(generator, 3, 4, rows=2, seed=1))

    def test_z_walk(self, generator):
        """Test one row per code and one column per walk step."""
        canvas = z_walk_montage(generator, K=3, dim_z=4, steps=4)
        assert canvas.shape == (3 * 34 + 2, 4 * 34 + 2, 3)


class TestClusterMontages:
    """Tests for per-cluster instance montages."""

    def test_only_nonempty_clusters(self):
        """Test that empty clusters are skipped and membership is respected."""
        instances = [CellInstance(solid(v, size=32)[0], "s", i + 1, (0, 0, 32, 32), 100, (16.0, 16.0))
                     for i, v in enumerate([0, 50, 100])]
        assignments = [CellAssignment(inst.instance_id, "s", k, np.eye(3)[k])
                       for inst, k in zip(instances, [0, 2, 2])]
        montages = cluster_montages(instances, assignments, K=3, per_cluster=5)
        assert set(montages) == {0, 2}
        assert montages[0].shape == (36, 36, 3)
        assert montages[2].shape == (36, 2 * 34 + 2, 3)
        assert set(np.unique(montages[2][2:34, 2:34, 0])) == {50}

    def test_per_cluster_limit(self):
        """Test that large clusters are subsampled."""
        instances = [CellInstance(solid(i, size=32)[0], "s", i + 1, (0, 0, 32, 32), 100, (16.0, 16.0))
                     for i in range(12)]
        assignments = [CellAssignment(inst.instance_id, "s", 0, np.array([1.0])) for inst in instances]
        montage = cluster_montages(instances, assignments, K=1, per_cluster=4, columns=4)[0]
        assert montage.shape == (36, 4 * 34 + 2, 3)


class TestReportHtml:
    """Tests for the standalone HTML page."""

    def test_sections(self, tmp_path):
        """Test that metrics, tables and images appear escaped in the page."""
        sections = [
            ReportSection("Clusters", metrics={"purity": 0.91234, "N": 12}),
            ReportSection("Folds", table=(["fold", "fscore"], [[0, 0.5]])),
            ReportSection("Samples <G>", images=[("codes", "montages/generator.png")]),
        ]
        out = tmp_path / "report" / "index.html"
        page = generate_report_html("Run & results", sections, output_path=out)
        assert out.read_text() == page
        assert "<title>Run &amp; results</title>" in page
        assert "0.9123" in page
        assert "<td>0.5000</td>" in page
        assert "Samples &lt;G&gt;" in page
        assert 'src="montages/generator.png"' in page
        assert page.rstrip().endswith("</html>")

    def test_without_output_path(self, tmp_path):
        """Test that the page is returned without writing anything."""
        page = generate_report_html("Empty", [])
        assert "Empty" in page
        assert list(tmp_path.iterdir()) == []
