"""Tests for slide, mask, instance and table I/O."""

import json

import numpy as np
import pytest

from src.analysis import CellAssignment, CellProportionProfile
from src.cell_types import CellInstance
from src.config import DataError
from src.dataset_io import (
    InputError,
    list_images,
    read_assignments,
    read_cell_classes,
    read_image,
    read_instances,
    read_label_image,
    read_profiles,
    read_slide_labels,
    write_assignments,
    write_cell_classes,
    write_image,
    write_instances,
    write_json,
    write_label_image,
    write_pca,
    write_profiles,
    write_slide_labels,
)


def make_instance(label: int, source_id: str = "slide_a", cell_class=None) -> CellInstance:
    rng = np.random.default_rng(label)
    return CellInstance(
        image=rng.integers(0, 256, size=(32, 32, 3), dtype=np.uint8),
        source_id=source_id,
        label=label,
        bbox=(3, 4, 20, 18),
        mask_area=250,
        centroid=(13.25, 12.5),
        cell_class=cell_class,
    )


class TestImages:
    """Tests for PNG reading and writing."""

    def test_list_images_sorted(self, tmp_path):
        """Test that only PNG files are listed, in name order."""
        for name in ("b.png", "a.png", "notes.txt"):
            (tmp_path / name).write_bytes(b"")
        assert [p.name for p in list_images(tmp_path)] == ["a.png", "b.png"]

    def test_list_images_missing_directory(self, tmp_path):
        """Test that a missing directory is an input error."""
        with pytest.raises(InputError, match="Directory not found"):
            list_images(tmp_path / "absent")

    def test_rgb_lossless(self, tmp_path):
        """Test that PNG storage is lossless."""
        img = np.random.default_rng(0).integers(0, 256, size=(7, 9, 3), dtype=np.uint8)
        np.testing.assert_array_equal(read_image(write_image(tmp_path / "x.png", img)), img)

    def test_grayscale_promoted_to_rgb(self, tmp_path):
        """Test that grayscale files load as three channels."""
        write_image(tmp_path / "g.png", np.full((4, 4), 77, dtype=np.uint8))
        assert read_image(tmp_path / "g.png").shape == (4, 4, 3)

    def test_unreadable_image(self, tmp_path):
        """Test that a corrupt file is an input error."""
        (tmp_path / "bad.png").write_bytes(b"not a png")
        with pytest.raises(InputError, match="Cannot read image"):
            read_image(tmp_path / "bad.png")

    def test_label_image_beyond_255(self, tmp_path):
        """Test that instance labels above 255 survive storage."""
        labels = np.zeros((5, 5), dtype=np.int32)
        labels[0, 0], labels[4, 4] = 300, 1
        loaded = read_label_image(write_label_image(tmp_path / "m.png", labels))
        assert loaded.dtype == np.int32
        assert loaded[0, 0] == 300 and loaded[4, 4] == 1

    def test_label_image_range(self, tmp_path):
        """Test that negative labels are rejected."""
        with pytest.raises(ValueError, match="16 bits"):
            write_label_image(tmp_path / "m.png", np.array([[-1]]))


class TestInstances:
    """Tests for the instance directory layout."""

    def test_write_then_read(self, tmp_path):
        """Test that images and metadata come back unchanged."""
        instances = [make_instance(1, cell_class="lymphocyte"), make_instance(2, source_id="slide_b")]
        csv_path = write_instances(instances, tmp_path)
        assert csv_path == tmp_path / "instances.csv"
        assert (tmp_path / "slide_a" / "slide_a_0001.png").exists()

        loaded = read_instances(tmp_path)
        assert [i.instance_id for i in loaded] == ["slide_a_0001", "slide_b_0002"]
        np.testing.assert_array_equal(loaded[1].image, instances[1].image)
        assert loaded[0].bbox == (3, 4, 20, 18)
        assert loaded[0].centroid == (13.25, 12.5)
        assert loaded[0].cell_class == "lymphocyte"
        assert loaded[1].cell_class is None

    def test_missing_table(self, tmp_path):
        """Test that a directory without instances.csv is an input error."""
        with pytest.raises(InputError, match="not found"):
            read_instances(tmp_path)

    def test_missing_column(self, tmp_path):
        """Test that the missing column is named."""
        (tmp_path / "instances.csv").write_text("instance_id,source_id\n")
        with pytest.raises(InputError, match="label"):
            read_instances(tmp_path)

    def test_malformed_row(self, tmp_path):
        """Test that a non-integer field names the line."""
        write_instances([make_instance(1)], tmp_path)
        path = tmp_path / "instances.csv"
        path.write_text(path.read_text().replace(",250,", ",many,"))
        with pytest.raises(InputError, match="line 2"):
            read_instances(tmp_path)

    def test_input_error_is_data_error(self):
        """Test the exit-code family of input errors."""
        assert issubclass(InputError, DataError)


class TestTables:
    """Tests for CSV tables."""

    def test_slide_labels(self, tmp_path):
        """Test slide label tables are sorted by slide."""
        path = write_slide_labels(tmp_path / "labels.csv", {"b": "abnormal", "a": "normal"})
        assert path.read_text().splitlines() == ["slide_id,label", "a,normal", "b,abnormal"]
        assert read_slide_labels(path) == {"a": "normal", "b": "abnormal"}

    def test_cell_classes_keyed_by_slide_and_label(self, tmp_path):
        """Test that cell classes are keyed by (slide, integer label)."""
        path = write_cell_classes(tmp_path / "classes.csv", {("s", 2): "monocyte", ("s", 1): "lymphocyte"})
        assert read_cell_classes(path) == {("s", 1): "lymphocyte", ("s", 2): "monocyte"}

    def test_assignments(self, tmp_path):
        """Test posterior columns and optional class."""
        assignments = [CellAssignment("s_0001", "s", 1, np.array([0.25, 0.75]), "monocyte")]
        path = write_assignments(tmp_path / "assignments.csv", assignments, K=2)
        assert path.read_text().splitlines()[0] == "instance_id,source_id,cluster,q_0,q_1,cell_class"
        (loaded,) = read_assignments(path)
        assert loaded.cluster == 1
        np.testing.assert_allclose(loaded.posterior, [0.25, 0.75])
        assert loaded.cell_class == "monocyte"

    def test_profiles(self, tmp_path):
        """Test counts and proportions columns."""
        profile = CellProportionProfile("s", np.array([2, 3, 5]), np.array([0.2, 0.3, 0.5]), "normal")
        path = write_profiles(tmp_path / "profiles.csv", [profile], K=3)
        assert path.read_text().splitlines()[1] == "s,2,3,5,0.2,0.3,0.5,normal"
        (loaded,) = read_profiles(path)
        np.testing.assert_array_equal(loaded.counts, [2, 3, 5])
        assert loaded.label == "normal"

    def test_pca(self, tmp_path):
        """Test the projected-coordinates table."""
        path = write_pca(tmp_path / "pca.csv", ["a", "b"], np.array([[1.0, -0.5], [0.0, 2.0]]), ["x", None])
        assert path.read_text().splitlines() == ["slide_id,pc1,pc2,label", "a,1,-0.5,x", "b,0,2,"]

    def test_json_numpy_values(self, tmp_path):
        """Test that numpy scalars and arrays serialize."""
        path = write_json(tmp_path / "m.json", {"b": np.float64(0.5), "a": np.arange(2), "n": np.int64(3)})
        text = path.read_text()
        assert text.endswith("\n")
        assert json.loads(text) == {"a": [0, 1], "b": 0.5, "n": 3}
        assert text.index('"a"') < text.index('"b"')
