# tests/test_convert_mat_to_hsc.py

import sys
from pathlib import Path

PROJECT_ROOT = Path(__file__).resolve().parents[1]
if str(PROJECT_ROOT) not in sys.path:
    sys.path.insert(0, str(PROJECT_ROOT))

import numpy as np
import pytest
import scipy.io as sio

from main import main
from services.cube_service import load_cube
from utils.convert_mat_to_hsc import convert_mat_to_cube, parse_band_spec
from utils.error_handler import ConfigurationError, FormatError


@pytest.fixture
def mat_pair(tmp_path: Path):
    rng = np.random.default_rng(0)
    data = rng.uniform(0, 1000, size=(6, 5, 10)).astype(np.float64)
    gt = rng.integers(0, 4, size=(6, 5)).astype(np.uint8)
    gt[0, 0] = 3
    sio.savemat(tmp_path / "Tiny.mat", {"tiny": data})
    sio.savemat(tmp_path / "Tiny_gt.mat", {"tiny_gt": gt})
    return tmp_path / "Tiny.mat", tmp_path / "Tiny_gt.mat", data, gt


def test_parse_band_spec():
    assert parse_band_spec("2-4,7", 10) == [1, 2, 3, 6]
    assert parse_band_spec(None, 10) == []
    with pytest.raises(ConfigurationError):
        parse_band_spec("9-12", 10)
    with pytest.raises(ConfigurationError):
        parse_band_spec("a-b", 10)


def test_convert_drops_bands_and_keeps_labels(mat_pair):
    data_path, gt_path, data, gt = mat_pair
    cube = convert_mat_to_cube(data_path, gt_path, drop_bands="1,9-10")
    assert (cube.height, cube.width, cube.bands) == (6, 5, 7)
    assert cube.num_classes == 3
    np.testing.assert_allclose(cube.data, data[:, :, 1:8].astype(np.float32))
    np.testing.assert_array_equal(cube.labels, gt)


def test_convert_reads_class_names(mat_pair, tmp_path: Path):
    data_path, gt_path, _, _ = mat_pair
    names = tmp_path / "names.txt"
    names.write_text("Alfalfa\nCorn-notill\n\nGrass-pasture\n", encoding="utf-8")
    cube = convert_mat_to_cube(data_path, gt_path, names_path=names)
    assert cube.class_names == ["Alfalfa", "Corn-notill", "Grass-pasture"]


def test_explicit_keys_and_shape_checks(mat_pair, tmp_path: Path):
    data_path, gt_path, _, _ = mat_pair
    with pytest.raises(ConfigurationError):
        convert_mat_to_cube(data_path, gt_path, data_key="missing")

    sio.savemat(tmp_path / "wrong_gt.mat", {"gt": np.zeros((4, 4), dtype=np.uint8)})
    with pytest.raises(ConfigurationError):
        convert_mat_to_cube(data_path, tmp_path / "wrong_gt.mat")


def test_non_mat_input_is_a_format_error(mat_pair, tmp_path: Path):
    _, gt_path, _, _ = mat_pair
    bogus = tmp_path / "bogus.mat"
    bogus.write_bytes(b"this is not a MATLAB file at all" * 8)
    with pytest.raises(FormatError):
        convert_mat_to_cube(bogus, gt_path)


def test_convert_command(mat_pair, tmp_path: Path):
    data_path, gt_path, _, _ = mat_pair
    out = tmp_path / "tiny.hsc"
    code = main(["--logs-dir", str(tmp_path / "logs"), "convert", "--data", str(data_path), "--gt", str(gt_path),
                 "--out", str(out), "--drop-bands", "10"])
    assert code == 0
    assert load_cube(out).bands == 9
