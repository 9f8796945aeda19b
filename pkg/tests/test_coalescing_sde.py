import numpy as np
import pytest
from scipy import stats

from coalflow.coeff_dsl import make_field
from coalflow.coalescing_sde import (
    DomainError,
    QuadraticModelParams,
    StepTooLarge,
    analytic_transition_cdf,
    log_transform_check,
    max_step,
    quadratic_model_cdf,
    simulate_batch,
    simulate_ensemble,
    simulate_quadratic_model,
    write_ensemble_csv,
)

BROWNIAN = make_field("1", "0")
SINE = make_field("1 + 0.3*sin(2*pi*x)", "0.5*cos(2*pi*x)")


def test_max_step():
    assert max_step(BROWNIAN) == 1e-3
    assert max_step(make_field("1", "2")) == 1e-3
    assert max_step(make_field("1", "20")) == pytest.approx(1 / 4001)


def test_step_too_large():
    with pytest.raises(StepTooLarge):
        simulate_ensemble(BROWNIAN, [(0, 0)], 2e-3, 1.0, 0)
    with pytest.raises(StepTooLarge):
        simulate_ensemble(make_field("1", "20"), [(0, 0)], 1e-3, 0.1, 0)


def test_brownian_marginal():
    b = simulate_batch(BROWNIAN, [(0, 0)], 1e-4, 1.0, 10_000, seed=1, record_every=10_000)
    X = b.paths[:, 0, -1]
    assert b.times[-1] == 1.0
    assert abs(X.mean()) <= 2.5758 * X.std(ddof=1) / np.sqrt(X.size)
    assert X.var(ddof=1) == pytest.approx(1.0, rel=0.03)


def test_drift_enters_mean():
    f = make_field("1", "0.7")
    b = simulate_batch(f, [(0, 0)], 1e-3, 1.0, 4000, seed=2, record_every=1000)
    X = b.paths[:, 0, -1]
    assert abs(X.mean() - 0.7) < 4 / np.sqrt(X.size)


def test_same_start_coalesces_at_time_zero():
    e = simulate_ensemble(BROWNIAN, [(0, 0.3), (0, 0.3)], 1e-3, 0.5, seed=3)
    assert e.collision_time(0, 1) == 0.0
    assert np.array_equal(e.paths[0], e.paths[1])
    assert e.coalescence[(0, 1)] == (0.0, 0)


def test_starts_differing_by_an_integer_coalesce():
    e = simulate_ensemble(BROWNIAN, [(0, 0.3), (0, 1.3)], 1e-3, 0.2, seed=3)
    assert e.collision_time(0, 1) == 0.0
    assert np.all(e.merged_gap(1) == 0.0)
    # exact on the stored representation, up to rounding on the raw difference
    assert np.allclose(e.paths[1] - e.paths[0], 1.0, rtol=0, atol=1e-14)


def test_late_start_waits():
    e = simulate_ensemble(BROWNIAN, [(0, 0.1), (0.5, 0.6)], 1e-3, 1.0, seed=4)
    before = e.times < 0.5 - 1e-12
    assert np.all(e.paths[1, before] == 0.6)
    assert np.any(e.paths[1, ~before] != 0.6)


def test_non_crossing_and_exact_post_coalescence():
    starts = [(0, 0.0), (0, 0.2), (0, 0.5), (0, 0.8)]
    b = simulate_batch(SINE, starts, 1e-3, 1.0, 200, seed=5)
    n_merged = 0
    for i in range(len(b)):
        e = b.ensemble(i)
        for j in range(4):
            for k in range(j + 1, 4):
                T = e.collision_time(j, k)
                floors = np.floor(e.paths[j] - e.paths[k])
                pre = e.times < T if T is not None else np.ones(e.times.size, bool)
                # the circular order cannot flip before the collision
                assert np.all(floors[pre] == floors[0])
                if T is not None:
                    n_merged += 1
                    gap = e.paths[j, ~pre] - e.paths[k, ~pre]
                    assert np.allclose(gap, np.round(gap[0]), rtol=0, atol=1e-12)
        for k in range(4):
            assert np.all(e.merged_gap(k) == 0.0)
    assert n_merged > 100


def test_survivor_is_lower_index():
    b = simulate_batch(BROWNIAN, [(0, 0.0), (0, 0.05)], 1e-3, 1.0, 100, seed=6)
    merged = ~np.isnan(b.collision_times[:, 0, 1])
    assert merged.sum() > 50
    assert np.all(b.merged_into[merged, 1] == 0)
    assert np.all(b.merged_into[:, 0] == 0)


def test_batch_row_zero_is_ensemble():
    starts = [(0, 0.1), (0, 0.4)]
    b = simulate_batch(SINE, starts, 1e-3, 0.3, 1, seed=7)
    e = simulate_ensemble(SINE, starts, 1e-3, 0.3, seed=7)
    assert np.array_equal(b.paths[0], e.paths)


def test_ensemble_csv(tmp_path):
    e = simulate_ensemble(BROWNIAN, [(0, 0.1), (0, 0.4)], 1e-3, 0.01, seed=8)
    write_ensemble_csv(tmp_path / "e.csv", [(8, e)])
    lines = (tmp_path / "e.csv").read_text().splitlines()
    assert lines[0] == "seed,path_index,time,position,merged_into"
    assert len(lines) == 1 + 2 * e.times.size


# -- quadratic model -----------------------------------------------------------------


def test_balanced_drift_gives_one_half():
    p = QuadraticModelParams(a=1.3, a_prime=0.5, b=0.125, h=0.01, y=0.2)
    assert analytic_transition_cdf(p, 0.2) == pytest.approx(0.5, abs=1e-15)


def test_constant_coefficients_reduce_to_gaussian():
    p = QuadraticModelParams(a=2.0, a_prime=0.0, b=0.3, h=0.01)
    x, z = 0.05, -0.02
    expected = stats.norm.sf(z, loc=x + 0.3 * 0.01, scale=np.sqrt(2.0 * 0.01))
    assert quadratic_model_cdf(p, x, z) == pytest.approx(expected, rel=1e-12)


def test_cdf_monotone_with_limits():
    p = QuadraticModelParams(a=1.0, a_prime=0.5, b=0.0, h=0.01)
    # admissible range is x > y - 2a/a' = -4
    xs = np.linspace(-3.9, 1.0, 100)
    F = analytic_transition_cdf(p, xs)
    assert np.all(np.diff(F) >= 0)
    assert F[0] < 1e-12 and F[-1] > 1 - 1e-12


def test_domain_error():
    p = QuadraticModelParams(a=1.0, a_prime=0.5, b=0.0, h=0.01)
    with pytest.raises(DomainError):
        analytic_transition_cdf(p, -4.0)
    with pytest.raises(DomainError):
        analytic_transition_cdf(p, -10.0)


def test_cdf_against_simulation():
    p = QuadraticModelParams(a=1.0, a_prime=0.5, b=0.0, h=0.01)
    X = simulate_quadratic_model(p, 0.02, 20_000, seed=9, n_steps=200)
    zs = np.linspace(-0.25, 0.3, 56)
    emp = (X[:, None] > zs).mean(axis=0)
    assert np.max(np.abs(emp - quadratic_model_cdf(p, 0.02, zs))) < 0.015


def test_log_transform_balanced_drift():
    p = QuadraticModelParams(a=1.0, a_prime=0.5, b=0.125, h=0.01)
    rep = log_transform_check(p, n_samples=20_000, seed=10, n_steps=200, ks_tol=0.02)
    assert rep.mean_target == pytest.approx(0.0, abs=1e-15)
    assert rep.ok


def test_log_transform_requires_gradient():
    with pytest.raises(ValueError):
        log_transform_check(QuadraticModelParams(1.0, 0.0, 0.0, 0.01))
