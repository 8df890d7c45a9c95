import json
import numpy as np
import pytest
from guided_wost.image import (
    CSV_HEADER,
    SolutionImage,
    compute_relmse,
    eval_grid,
    read_field_output,
    relmse_delta,
    write_field_output,
)
from guided_wost.utils import read_png, read_rows
from guided_wost.errors import ImageError


def test_relmse_examples():
    ref = np.array([[1.0, 1.0], [1.0, 1.0]])
    assert compute_relmse(ref * 1.1, ref) == pytest.approx(0.01 / 1.0001, rel=1e-9)
    assert compute_relmse(ref * 1.1, ref) == pytest.approx(0.009999, abs=1e-6)
    assert compute_relmse(ref, ref) == 0.0


def test_relmse_zero_reference_cell():
    ref = np.array([[0.0, 2.0]])
    est = np.array([[0.1, 2.0]])
    delta = relmse_delta(ref)
    assert delta == pytest.approx(4e-4)
    assert compute_relmse(est, ref) == pytest.approx(0.5 * 0.01 / delta)


def test_relmse_all_zero_reference_is_finite():
    ref = np.zeros((3, 3))
    assert np.isfinite(compute_relmse(np.full((3, 3), 1e-3), ref))


def test_relmse_mask():
    ref = np.ones((2, 2))
    est = np.array([[1.0, 3.0], [1.0, 1.0]])
    mask = np.array([[True, False], [True, True]])
    assert compute_relmse(est, ref, mask) == 0.0
    assert compute_relmse(est, ref) > 0.0


def test_relmse_shape_mismatch():
    with pytest.raises(ImageError):
        compute_relmse(np.ones((2, 3)), np.ones((3, 2)))


def test_relmse_accepts_images():
    ref = SolutionImage.exact(2, 1, [1.0, 2.0])
    est = SolutionImage.exact(2, 1, [1.0, 2.2])
    expected = 0.5 * 0.04 / (4.0 + relmse_delta(ref))
    assert compute_relmse(est, ref) == pytest.approx(expected)


def test_welford_statistics(rng):
    samples = rng.normal(size=(50, 6))
    img = SolutionImage.blank(3, 2)
    for row in samples:
        img.add(row)
    assert img.samples == 50
    assert np.allclose(img.mean, samples.mean(axis=0))
    assert np.allclose(img.variance_of_mean, samples.var(axis=0, ddof=1) / 50)
    assert img.values.shape == (2, 3)


def test_single_sample_has_zero_variance():
    img = SolutionImage.blank(2, 2)
    img.add([1.0, 2.0, 3.0, 4.0])
    assert not np.any(img.variance_of_mean)


def test_add_checks_size():
    with pytest.raises(ImageError):
        SolutionImage.blank(2, 2).add([1.0, 2.0])
    with pytest.raises(ImageError):
        SolutionImage.exact(2, 2, [1.0])


def test_eval_grid_order():
    points = eval_grid(((0.0, 0.0), (2.0, 1.0)), 2, 2)
    assert np.allclose(points, [[0.5, 0.25], [1.5, 0.25], [0.5, 0.75], [1.5, 0.75]])


def test_single_cell_csv(tmp_path):
    img = SolutionImage.exact(1, 1, [0.5])
    filename = write_field_output(img, str(tmp_path / "one.csv"))
    header, rows = read_rows(filename)
    assert tuple(header) == CSV_HEADER
    assert rows[0][:3] == ["0", "0", "0.5"]


def test_csv_round_trip(tmp_path, rng):
    img = SolutionImage.blank(4, 3)
    for _ in range(5):
        img.add(rng.random(12))
    again = read_field_output(write_field_output(img, str(tmp_path / "sol.csv")))
    assert (again.width, again.height) == (4, 3)
    assert np.array_equal(again.mean, img.mean)
    assert np.array_equal(again.count, img.count)
    assert np.allclose(again.variance_of_mean, img.variance_of_mean)


def test_pfm_is_bit_exact(tmp_path, rng):
    values = rng.normal(size=(5, 7)).astype(np.float32)
    img = SolutionImage.exact(7, 5, values)
    filename = str(tmp_path / "sol.pfm")
    write_field_output(img, filename)
    data = (tmp_path / "sol.pfm").read_bytes()
    assert data.startswith(b"Pf\n7 5\n-1.0\n")
    assert np.array_equal(read_field_output(filename).values.astype(np.float32), values)


def test_constant_png(tmp_path):
    img = SolutionImage.exact(3, 2, np.full(6, 0.7))
    filename = str(tmp_path / "sol.png")
    write_field_output(img, filename)
    pixels = read_png(filename)
    assert pixels.shape == (2, 3)
    assert np.all(pixels == pixels[0, 0])
    sidecar = json.loads((tmp_path / "sol.json").read_text())
    assert sidecar == {"tonemap": "linear", "min": 0.7, "max": 0.7}


def test_png_orientation_and_range(tmp_path):
    img = SolutionImage.exact(2, 2, [0.0, 0.5, 1.0, 2.0])
    filename = str(tmp_path / "sol.png")
    write_field_output(img, filename, vmin=0.0, vmax=1.0)
    pixels = read_png(filename)
    assert pixels.tolist() == [[0, 128], [255, 255]]


def test_unsupported_formats(tmp_path):
    img = SolutionImage.exact(1, 1, [0.0])
    with pytest.raises(ImageError):
        write_field_output(img, str(tmp_path / "sol.exr"))
    write_field_output(img, str(tmp_path / "sol.png"))
    with pytest.raises(ImageError):
        read_field_output(str(tmp_path / "sol.png"))
