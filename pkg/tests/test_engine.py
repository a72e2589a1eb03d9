import numpy as np
import pytest

from mcrmri.cubeio import ForegroundMask, build_multiset, unfold
from mcrmri.engine import (
    CONVERGED,
    AlsOptions,
    ConstraintSpec,
    als_decompose,
    als_fit,
    cosine_similarity,
    match_components,
    split_concentrations,
)
from mcrmri.errors import ConfigError, NumericError
from mcrmri.ilt import FixedLambda, IltParams
from oracles import decay_matrix
from support import make_cube

TE = 5.0 + 5.0 * np.arange(32)
UNCONSTRAINED = ConstraintSpec(nonneg_C=False, nonneg_S=False, normalize_S="none")


def _stack_from(D_frames, h=4, w=5):
    tables = []
    for i, D in enumerate(D_frames):
        cube = make_cube(D.reshape(h, w, -1), t=float(i))
        tables.append(unfold(cube, ForegroundMask(np.ones((h, w), bool))))
    return build_multiset(tables, range(len(D_frames)))


def _two_component(rng, n=60):
    S = decay_matrix(TE, [9.0, 45.0])
    S /= np.linalg.norm(S, axis=0)
    C = rng.uniform(0, 1, (n, 2))
    C[:5] = [[1.0, 0.0]] * 5
    C[5:10] = [[0.0, 1.0]] * 5
    return C, S


def test_rank_one_exact(rng):
    s = np.exp(-TE / 20.0)
    s /= np.linalg.norm(s)
    c = rng.uniform(0.1, 2.0, 20)
    stack = _stack_from([np.outer(c, s)])
    S0 = np.exp(-TE / 50.0)[:, None]
    res = als_decompose(stack, S0)
    assert np.linalg.norm(res.S[:, 0] - s) <= 1e-8
    assert res.diagnostics.explained_variance_pct >= 99.9999
    assert res.n_iterations <= 5


def test_noiseless_two_component_recovery(rng):
    C, S = _two_component(rng)
    S0 = decay_matrix(TE, [15.0, 30.0])
    res = als_fit(C @ S.T, S0, opts=AlsOptions(lof_rel_tol_pct=1e-6, max_iterations=2000))
    _, cos = match_components(res.S, S)
    assert np.all(cos >= 0.9999)


def test_unconstrained_lof_never_increases():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        D = rng.uniform(0, 1, (50, 3)) @ rng.uniform(0, 1, (3, 12)) + rng.normal(0, 0.01, (50, 12))
        res = als_fit(D, rng.uniform(0, 1, (12, 3)), UNCONSTRAINED,
                      AlsOptions(max_iterations=40, lof_rel_tol_pct=1e-9))
        t = np.asarray(res.lof_trace)
        assert np.all(t[1:] <= t[:-1] * (1 + 1e-12))


def test_normalisation_moves_scale_into_c(rng):
    C, S = _two_component(rng)
    D = C @ S.T
    raw = als_fit(D, 3.0 * S, ConstraintSpec(normalize_S="none"), AlsOptions(max_iterations=1))
    norm = als_fit(D, 3.0 * S, ConstraintSpec(), AlsOptions(max_iterations=1))
    np.testing.assert_allclose(np.linalg.norm(norm.S, axis=0), 1.0, rtol=1e-14)
    a, b = raw.C_aug @ raw.S.T, norm.C_aug @ norm.S.T
    assert np.linalg.norm(a - b) <= 1e-12 * np.linalg.norm(a)


def test_nonnegative_entries(rng):
    D = rng.normal(size=(40, 10))
    res = als_fit(D, rng.uniform(0.1, 1, (10, 3)))
    assert np.all(res.C_aug >= 0) and np.all(res.S >= 0)


def test_shape_constrained_spectra_are_monotone(rng):
    C, S = _two_component(rng)
    D = C @ S.T + rng.normal(0, 0.01, (60, 32))
    spec = ConstraintSpec(shape_decay=(True, True))
    res = als_fit(D, decay_matrix(TE, [15.0, 30.0]), spec, echo_times_ms=TE)
    assert np.all(np.diff(res.S, axis=0) <= 0)


def test_best_iterate_is_returned(rng):
    C, S = _two_component(rng)
    D = C @ S.T + rng.normal(0, 0.05, (60, 32))
    res = als_fit(D, decay_matrix(TE, [15.0, 30.0]), opts=AlsOptions(max_iterations=15))
    assert res.lof_trace[res.best_iteration] == min(res.lof_trace)
    assert res.diagnostics.lack_of_fit_pct == pytest.approx(min(res.lof_trace), rel=1e-12)


def test_sequential_runs_are_bit_identical(rng):
    D = rng.uniform(0, 1, (80, 12))
    S0 = rng.uniform(0.1, 1, (12, 3))
    a, b = als_fit(D, S0), als_fit(D, S0)
    assert np.array_equal(a.C_aug, b.C_aug) and np.array_equal(a.S, b.S)
    assert a.lof_trace == b.lof_trace


def test_parallel_matches_sequential(rng):
    D = rng.uniform(0, 1, (500, 12))
    S0 = rng.uniform(0.1, 1, (12, 3))
    a = als_fit(D, S0)
    b = als_fit(D, S0, opts=AlsOptions(threads=3))
    assert np.linalg.norm(a.C_aug - b.C_aug) <= 1e-10 * np.linalg.norm(a.C_aug)
    assert np.linalg.norm(a.S - b.S) <= 1e-10 * np.linalg.norm(a.S)


def test_fixed_point(rng):
    C, S = _two_component(rng)
    D = C @ S.T + rng.normal(0, 0.01, (60, 32))
    first = als_fit(D, decay_matrix(TE, [15.0, 30.0]))
    assert first.status == CONVERGED
    again = als_fit(D, first.S)
    change = abs(again.lof_trace[0] - first.diagnostics.lack_of_fit_pct) / first.diagnostics.lack_of_fit_pct
    assert change * 100 < AlsOptions().lof_rel_tol_pct


def test_split_concentrations(rng):
    frames = [rng.uniform(0, 1, (20, 6)) for _ in range(3)]
    stack = _stack_from(frames)
    res = als_decompose(stack, rng.uniform(0.1, 1, (6, 2)))
    blocks = split_concentrations(res, stack)
    assert [b.shape[0] for b in blocks] == [20, 20, 20]
    np.testing.assert_array_equal(np.vstack(blocks), res.C_aug)


def test_split_single_frame(rng):
    stack = _stack_from([rng.uniform(0, 1, (20, 6))])
    res = als_decompose(stack, rng.uniform(0.1, 1, (6, 2)))
    (block,) = split_concentrations(res, stack)
    np.testing.assert_array_equal(block, res.C_aug)


def test_split_rejects_foreign_stack(rng):
    a = _stack_from([rng.uniform(0, 1, (20, 6))])
    b = _stack_from([rng.uniform(0, 1, (20, 6))] * 2)
    with pytest.raises(NumericError):
        split_concentrations(als_decompose(a, rng.uniform(0.1, 1, (6, 2))), b)


def test_zero_column_initial_spectrum(rng):
    S0 = rng.uniform(0.1, 1, (6, 2))
    S0[:, 1] = 0
    with pytest.raises(NumericError, match="rank deficient"):
        als_fit(rng.uniform(0, 1, (10, 6)), S0)


def test_more_components_than_echoes(rng):
    with pytest.raises(ConfigError):
        als_fit(rng.uniform(0, 1, (10, 3)), rng.uniform(0.1, 1, (3, 4)))


def test_shape_flags_must_match_k(rng):
    with pytest.raises(ConfigError):
        als_fit(rng.uniform(0, 1, (10, 6)), rng.uniform(0.1, 1, (6, 2)),
                ConstraintSpec(shape_decay=(True,)), echo_times_ms=TE[:6])


def test_constraint_spec_round_trip():
    spec = ConstraintSpec(shape_decay=(True, False),
                          ilt_projection=IltParams(lambda_policy=FixedLambda(0.01)))
    assert ConstraintSpec.from_dict(spec.to_dict()) == spec


def test_cosine_and_matching():
    ref = np.eye(3)
    est = ref[:, [2, 0, 1]]
    perm, cos = match_components(est, ref)
    np.testing.assert_array_equal(perm, [1, 2, 0])
    np.testing.assert_allclose(cos, 1.0)
    np.testing.assert_allclose(cosine_similarity(ref, ref), np.eye(3))
