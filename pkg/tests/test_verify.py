import numpy as np
import pytest
from scipy import stats

from coalflow.coeff_dsl import make_field
from coalflow.coalescing_sde import simulate_batch
from coalflow.disturbance import build_reversed_disturbance_flow, flow_seed
from coalflow.flow_core import extract_path
from coalflow.verify import (
    DriftTable,
    InsufficientSamples,
    cross_product_test,
    ks_two_sample,
    martingale_residual_test,
    reversal_drift_experiment,
    single_path_convergence_test,
    slot_increments,
)

BROWNIAN = make_field("1", "0")
DRIFT1 = make_field("1", "1")
SINE = make_field("1 + 0.3*sin(2*pi*x)", "0")


def gaussian_paths(rng, n, n_times=101, drift=0.0):
    times = np.linspace(0, 1, n_times)
    dt = np.diff(times)
    inc = drift * dt + np.sqrt(dt) * rng.standard_normal((n, n_times - 1))
    return np.concatenate((np.zeros((n, 1)), np.cumsum(inc, axis=1)), axis=1), times


# -- martingale residuals ------------------------------------------------------------


def test_martingale_on_euler_paths():
    b = simulate_batch(BROWNIAN, [(0, 0)], 1e-3, 1.0, 2000, seed=1, record_every=10)
    assert martingale_residual_test(b, BROWNIAN).ok


def test_martingale_detects_missing_compensator():
    b = simulate_batch(DRIFT1, [(0, 0)], 1e-3, 1.0, 1000, seed=2, record_every=10)
    assert martingale_residual_test(b, BROWNIAN).max_abs_z > 10
    assert martingale_residual_test(b, DRIFT1).ok


def test_martingale_needs_samples():
    with pytest.raises(InsufficientSamples):
        martingale_residual_test(np.zeros((0, 11)), BROWNIAN, times=np.linspace(0, 1, 11))
    with pytest.raises(InsufficientSamples):
        martingale_residual_test(np.zeros((999, 11)), BROWNIAN, times=np.linspace(0, 1, 11))


def test_martingale_calibration():
    rng = np.random.default_rng(3)
    rejections = 0
    for _ in range(100):
        Z, t = gaussian_paths(rng, 1000)
        rejections += not martingale_residual_test(Z, BROWNIAN, times=t).ok
    assert rejections <= 5


def test_martingale_calibration_with_drift():
    rng = np.random.default_rng(4)
    rejections = 0
    for _ in range(100):
        Z, t = gaussian_paths(rng, 1000, drift=1.0)
        rejections += not martingale_residual_test(Z, DRIFT1, times=t).ok
    assert rejections <= 5


# -- cross products ------------------------------------------------------------------


def test_cross_product_far_apart_pair():
    b = simulate_batch(BROWNIAN, [(0, 0.0), (0, 0.5)], 1e-3, 0.01, 2000, seed=5)
    rep = cross_product_test(b, BROWNIAN)
    # the difference must travel 1/2 at standard deviation 0.14: rare
    assert rep.post_samples <= 10
    assert rep.pre_ok and rep.ok


def test_cross_product_same_start():
    b = simulate_batch(BROWNIAN, [(0, 0.2), (0, 0.2)], 1e-3, 0.2, 1000, seed=6)
    rep = cross_product_test(b, BROWNIAN)
    assert rep.post_samples == 1000 and rep.post_steps >= 10_000
    assert rep.post_ok and rep.ok
    assert rep.pre_rate == 0.0
    assert np.max(np.abs(rep.z_uncompensated)) > 10


def test_cross_product_calibration():
    rejections = 0
    for rep_i in range(100):
        b = simulate_batch(BROWNIAN, [(0, 0.0), (0, 0.1)], 1e-3, 0.1, 1000, seed=[7, rep_i], record_every=1)
        rep = cross_product_test(b, BROWNIAN)
        rejections += rep.max_abs_z >= rep.threshold
    assert rejections <= 5


def test_cross_product_needs_samples():
    b = simulate_batch(BROWNIAN, [(0, 0.0), (0, 0.5)], 1e-3, 0.01, 10, seed=8)
    with pytest.raises(InsufficientSamples):
        cross_product_test(b, BROWNIAN)


# -- KS --------------------------------------------------------------------------------


def test_ks_identical_samples():
    x = np.random.default_rng(0).standard_normal(2000)
    assert ks_two_sample(x, x).statistic == 0.0


def test_ks_power():
    rng = np.random.default_rng(1)
    r = ks_two_sample(rng.standard_normal(10_000), rng.normal(0.5, 1, 10_000))
    assert r.pvalue < 1e-6


def test_ks_calibration():
    rng = np.random.default_rng(2)
    res = [ks_two_sample(rng.standard_normal(10_000), rng.standard_normal(10_000)) for _ in range(100)]
    assert sum(r.statistic >= 0.027 for r in res) <= 5
    # p-values under the null are close to uniform
    assert stats.kstest([r.pvalue for r in res], "uniform").pvalue > 1e-3


def test_ks_needs_samples():
    with pytest.raises(InsufficientSamples):
        ks_two_sample(np.zeros(999), np.zeros(5000))


# -- convergence ---------------------------------------------------------------------


def test_convergence_report_is_deterministic():
    args = (BROWNIAN, [1e-2, 1e-3], (0.0, 0.5), 0.2, 1000)
    a = single_path_convergence_test(*args, seed=3, dt=1e-3)
    b = single_path_convergence_test(*args, seed=3, dt=1e-3)
    c = single_path_convergence_test(*args, seed=3, dt=1e-3, jobs=2)
    assert a.as_rows() == b.as_rows() == c.as_rows()
    assert len(a.hs) == 2 and all(0 <= k <= 1 for k in a.ks)


def test_decreasing_flag():
    from coalflow.verify import ConvergenceReport

    assert ConvergenceReport([1e-2, 1e-3, 1e-4], [0.1, 0.05, 0.01], [0, 0, 0], 1, 1.0, (0, 0)).decreasing
    assert not ConvergenceReport([1e-2, 1e-3, 1e-4], [0.1, 0.11, 0.01], [0, 0, 0], 1, 1.0, (0, 0)).decreasing


# -- reversal ------------------------------------------------------------------------


def test_slot_increments_match_reversed_flow_paths():
    h, window, delta = 1e-2, (0.0, 0.4), 0.1
    seeds = [flow_seed(4, i) for i in range(6)]
    xs = np.array([0.0, 0.3, 0.7])
    inc, starts = slot_increments(BROWNIAN, h, window, seeds, delta, xs)
    assert np.allclose(starts, [-0.4, -0.3, -0.2, -0.1])
    for i, s in enumerate(seeds):
        f = build_reversed_disturbance_flow(BROWNIAN, h, window, s)
        for j, u in enumerate(starts):
            for k, x in enumerate(xs):
                p = extract_path(f, (u, x))
                assert p(u + delta - 1e-12) - x == pytest.approx(inc[i, j, k], abs=1e-12)


def test_reversed_paths_stay_together():
    f = build_reversed_disturbance_flow(BROWNIAN, 1e-3, (0.0, 1.0), flow_seed(5, 0))
    p = extract_path(f, (-1.0, 0.1))
    q = extract_path(f, (-1.0, 0.15))
    gap = q.positions - p.positions
    met = np.flatnonzero(np.abs(gap - np.round(gap)) == 0.0)
    assert met.size
    assert np.all(gap[met[0]:] == gap[met[0]])


def test_reversal_sign_of_drift():
    table = reversal_drift_experiment(SINE, 1e-3, (0.0, 1.0), 400, bins=(1, 4), seed=6)
    for b in table.bins:
        ap = SINE.a_prime(-b.t_center, b.x_center)
        if abs(ap) > 2 * b.ci_radius:
            assert np.sign(b.drift_rate) == np.sign(ap)


def test_reversal_table_is_deterministic_across_jobs(tmp_path):
    kw = dict(bins=(2, 2), seed=7, block=50)
    a = reversal_drift_experiment(BROWNIAN, 1e-3, (0.0, 0.5), 200, jobs=1, **kw)
    b = reversal_drift_experiment(BROWNIAN, 1e-3, (0.0, 0.5), 200, jobs=2, **kw)
    a.to_csv(tmp_path / "a.csv")
    b.to_csv(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    header = (tmp_path / "a.csv").read_text().splitlines()[0]
    assert header == ",".join(DriftTable.CSV_FIELDS)
    assert all(bin_.n >= 30 for bin_ in a.bins)
