import json
import math

import numpy as np
import pytest

from mcrmri.analysis import (
    KineticProfile,
    distribution_maps,
    estimate_center,
    export_maps,
    kinetic_profiles,
    radial_series,
    read_map_csv,
    read_map_pgm16,
    write_kinetics_csv,
    write_radial_csv,
)
from mcrmri.cubeio import ForegroundMask, build_multiset, unfold
from mcrmri.engine import ConstraintSpec, DecompositionResult, match_components, split_concentrations
from mcrmri.errors import ConfigError
from mcrmri.numkit import FitDiagnostics
from support import make_cube

PX = 0.1


def _stack(masks, n_echoes=4):
    tables = []
    for i, bits in enumerate(masks):
        h, w = bits.shape
        cube = make_cube(np.ones((h, w, n_echoes)), t=float(i))
        tables.append(unfold(cube, ForegroundMask(bits)))
    return build_multiset(tables, range(len(masks)))


def _result(C_aug, stack, n_echoes=4):
    k = C_aug.shape[1]
    return DecompositionResult(
        C_aug=np.asarray(C_aug, dtype=float),
        S=np.eye(n_echoes, k),
        diagnostics=FitDiagnostics.from_sums(1.0, 0.0),
        lof_trace=(0.0,),
        status="converged",
        constraints=ConstraintSpec(),
        block_offsets=stack.row_offsets,
        best_iteration=0,
    )


def _disk(h, w, cx, cy, r):
    yy, xx = np.mgrid[0:h, 0:w]
    return (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r


# ---------------------------------------------------------------- maps


def test_all_ones_map_is_the_mask():
    bits = _disk(7, 9, 4, 3, 2.5)
    stack = _stack([bits])
    (img,) = distribution_maps(_result(np.ones((stack.n_rows, 1)), stack), stack)
    np.testing.assert_array_equal(img[:, :, 0], bits.astype(float))


def test_map_mean_equals_column_mean(rng):
    bits = rng.random((6, 6)) < 0.5
    bits[0, 0] = True
    stack = _stack([bits])
    C = rng.uniform(0, 1, (stack.n_rows, 2))
    (img,) = distribution_maps(_result(C, stack), stack)
    np.testing.assert_allclose(img[bits].mean(axis=0), C.mean(axis=0), rtol=1e-14)


def test_bath_map_matches_truth_on_first_frame(phantom_run):
    result, stack, _, truth = phantom_run
    perm, _ = match_components(result.S, truth.S_true)
    img = distribution_maps(result, stack)[0][:, :, perm[2]]
    ref = truth.C_maps[0][:, :, 2]
    rmse = math.sqrt(float(np.mean((img - ref) ** 2)))
    assert rmse <= 0.05 * np.ptp(ref)


# ---------------------------------------------------------------- kinetics


def test_constant_concentrations_give_flat_profile():
    stack = _stack([np.ones((3, 3), bool)] * 4)
    (p,) = kinetic_profiles(_result(np.full((stack.n_rows, 1), 0.7), stack), stack)
    np.testing.assert_array_equal(p.mean_concentration, 0.7)
    np.testing.assert_array_equal(p.times_h, [0, 1, 2, 3])


def test_kinetics_are_exact_column_means(phantom_run):
    result, stack, _, _ = phantom_run
    blocks = split_concentrations(result, stack)
    for p in kinetic_profiles(result, stack):
        j = p.component_id
        expected = [math.fsum(b[:, j]) / b.shape[0] for b in blocks]
        np.testing.assert_allclose(p.mean_concentration, expected, rtol=1e-13, atol=0)


def test_phantom_kinetics_directions(phantom_run):
    result, stack, _, truth = phantom_run
    perm, _ = match_components(result.S, truth.S_true)
    profiles = kinetic_profiles(result, stack)
    slow, fast, bath = (profiles[perm[i]].mean_concentration for i in range(3))
    assert np.all(np.diff(bath) < 0)
    assert slow[-1] > slow[0] and fast[-1] > fast[0]


def test_profile_validation():
    with pytest.raises(ValueError):
        KineticProfile(0, np.array([1.0, 0.5]), np.zeros(2))


# ---------------------------------------------------------------- centre


def test_centre_of_symmetric_disk():
    cx, cy = estimate_center(ForegroundMask(_disk(41, 41, 20, 20, 12)))
    assert abs(cx - 20) <= 0.5 and abs(cy - 20) <= 0.5


def test_centre_of_single_pixel():
    bits = np.zeros((5, 6), bool)
    bits[3, 1] = True
    assert estimate_center(ForegroundMask(bits)) == (1.0, 3.0)


def test_half_disk_centroid_offset():
    r = 60.0
    bits = _disk(201, 201, 100, 100, r)
    bits[:, :100] = False  # keep x >= 100
    cx, _ = estimate_center(ForegroundMask(bits))
    expected = 4 * r / (3 * math.pi)
    assert abs((cx - 100) - expected) <= 0.02 * expected


# ---------------------------------------------------------------- radial


def test_centre_pixel_value():
    stack = _stack([np.ones((5, 5), bool)])
    C = np.arange(25, dtype=float)[:, None]
    (s,) = radial_series(_result(C, stack), stack, (2.0, 2.0), 0.0, PX)
    assert s.values[0] == 12.0 and s.pixel_counts[0] == 1


def test_centre_between_four_pixels():
    stack = _stack([np.ones((4, 4), bool)])
    C = np.arange(16, dtype=float)[:, None]
    (s,) = radial_series(_result(C, stack), stack, (1.5, 1.5), 0.0, PX)
    assert s.values[0] == pytest.approx(np.mean([5, 6, 9, 10]))
    assert s.pixel_counts[0] == 4


@pytest.mark.parametrize("d", [0.0, 0.1, 0.25, 0.4])
def test_uniform_concentration_gives_constant_series(d):
    stack = _stack([np.ones((11, 11), bool)] * 3)
    C = np.full((stack.n_rows, 2), 0.25)
    for s in radial_series(_result(C, stack), stack, (5.0, 5.0), d, PX):
        np.testing.assert_array_equal(s.values, 0.25)


def test_wide_annulus_equals_kinetics(rng):
    stack = _stack([np.ones((6, 6), bool)] * 2)
    res = _result(rng.uniform(0, 1, (stack.n_rows, 1)), stack)
    (s,) = radial_series(res, stack, (2.5, 2.5), 1e-9, PX, annulus_width_px=100.0)
    (p,) = kinetic_profiles(res, stack)
    np.testing.assert_allclose(s.values, p.mean_concentration, rtol=1e-14)


def test_empty_annulus_is_nan():
    stack = _stack([np.ones((5, 5), bool)])
    (s,) = radial_series(_result(np.ones((25, 1)), stack), stack, (2.0, 2.0), 5.0, PX)
    assert math.isnan(s.values[0]) and s.pixel_counts[0] == 0


def test_centre_outside_image():
    stack = _stack([np.ones((5, 5), bool)])
    with pytest.raises(ConfigError):
        radial_series(_result(np.ones((25, 1)), stack), stack, (7.0, 2.0), 0.0, PX)


def test_interior_fast_front_arrives_before_centre(phantom_run):
    result, stack, masks, truth = phantom_run
    perm, _ = match_components(result.S, truth.S_true)
    centre = estimate_center(masks[0])
    px = truth.spec.pixel_size_mm

    def first_half_rise(d):
        v = radial_series(result, stack, centre, d, px, single_pixel=True)[perm[1]].values
        return int(np.argmax(v >= 0.5 * v[-1]))

    assert first_half_rise(1.72) < first_half_rise(0.0)


# ---------------------------------------------------------------- export


def test_constant_map_pgm(tmp_path):
    (path,) = export_maps(np.full((3, 4), 2.5), tmp_path / "m.pgm")
    np.testing.assert_array_equal(read_map_pgm16(path), 2.5)
    side = json.loads(path.with_suffix(".json").read_text())
    assert side["scale"] == 0.0 and side["offset"] == 2.5


def test_csv_round_trip_is_exact(tmp_path, rng):
    img = rng.normal(size=(5, 7)) * 1e-3
    (path,) = export_maps(img, tmp_path / "m.csv", fmt="csv")
    np.testing.assert_array_equal(read_map_csv(path), img)


def test_pgm_quantisation_bound(tmp_path, rng):
    img = rng.uniform(-3, 8, (16, 16))
    (path,) = export_maps(img, tmp_path / "m.pgm")
    err = np.abs(read_map_pgm16(path) - img).max()
    assert err <= np.ptp(img) / 65535


def test_component_stack_file_names(tmp_path):
    paths = export_maps(np.zeros((2, 2, 3)), tmp_path / "f.csv", fmt="csv")
    assert [p.name for p in paths] == ["f_c0.csv", "f_c1.csv", "f_c2.csv"]


def test_export_rejects_bad_input(tmp_path):
    with pytest.raises(ConfigError):
        export_maps(np.array([[np.nan]]), tmp_path / "x.csv", fmt="csv")
    with pytest.raises(ConfigError):
        export_maps(np.zeros((2, 2)), tmp_path / "x.tif", fmt="tiff")


def test_csv_writers(tmp_path):
    stack = _stack([np.ones((5, 5), bool)] * 2)
    res = _result(np.ones((50, 1)), stack)
    write_kinetics_csv(kinetic_profiles(res, stack), tmp_path / "k.csv")
    assert (tmp_path / "k.csv").read_text().splitlines() == [
        "component,time_h,mean_concentration", "0,0,1", "0,1,1",
    ]
    write_radial_csv(radial_series(res, stack, (2.0, 2.0), 9.0, PX), tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "component,distance_mm,time_h,value,n_pixels"
    assert lines[1] == "0,9,0,nan,0"
