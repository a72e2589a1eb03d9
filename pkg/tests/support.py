"""Small builders shared by the test modules."""

import numpy as np

from mcrmri.cubeio import AcquisitionMeta, HyperCube


def make_meta(width=4, height=3, n_echoes=6, t=0.0, delta=5.0):
    return AcquisitionMeta(
        te1_ms=5.0,
        delta_te_ms=delta,
        n_echoes=n_echoes,
        matrix_size=(width, height),
        fov_mm=(0.5 * width, 0.5 * height),
        frame_time_h=t,
    )


def make_cube(data, t=0.0, delta=5.0):
    data = np.asarray(data, dtype=np.float64)
    h, w, e = data.shape
    return HyperCube(make_meta(w, h, e, t, delta), data)


ACCEPTANCE_LINES: list[str] = []


def report(number, passed, detail):
    """Record and print one acceptance line, then assert it."""
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert passed, line
