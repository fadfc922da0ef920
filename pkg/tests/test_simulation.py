import csv
import datetime as dt
import io
import json

import numpy as np
import pytest

from jointcal.objective import SurfaceObjective
from jointcal.pricing import bs_price, implied_vols
from jointcal.simulation import (
    APPROX_VS,
    BUCKETS,
    DRAW_LOWER,
    DRAW_UPPER,
    EXACT_VIX,
    SimulationSpec,
    SimulationWarning,
    bucket_errors,
    bucket_of,
    draw_params,
    generate_surface,
    run_recovery_study,
    synthetic_panel,
)
from jointcal.types import THETA_0, BatesParams, OptimizerSettings
from jointcal.variance import bates_variance_swap, bates_vix_squared


def test_draw_degenerate_ranges_gives_base():
    t = tuple(THETA_0.to_array())
    spec = SimulationSpec(draw_lower=t, draw_upper=t)
    assert draw_params(spec, 0) == THETA_0
    assert draw_params(spec, 17) == THETA_0


def test_draws_stay_in_ranges_and_are_reproducible():
    spec = SimulationSpec(seed=9)
    x = np.array([draw_params(spec, i).to_array() for i in range(10_000)])
    assert np.all(x.min(axis=0) >= np.array(DRAW_LOWER))
    assert np.all(x.max(axis=0) <= np.array(DRAW_UPPER))
    assert np.all(np.abs(x[:, 4]) <= 1)
    # the sample should actually cover each range
    span = (x.max(axis=0) - x.min(axis=0)) / (np.array(DRAW_UPPER) - np.array(DRAW_LOWER))
    assert np.all(span > 0.99)
    assert draw_params(spec, 123) == draw_params(SimulationSpec(seed=9), 123)
    assert draw_params(spec, 123) != draw_params(SimulationSpec(seed=10), 123)


def test_spec_validation_and_roundtrip():
    with pytest.raises(ValueError):
        SimulationSpec(n_draws=0)
    with pytest.raises(ValueError, match="alpha_grid"):
        SimulationSpec(alpha_grid=(0.5, 1.5))
    with pytest.raises(ValueError, match="mode"):
        SimulationSpec(mode="fast")
    spec = SimulationSpec(n_draws=3, alpha_grid=(0.1,), mode=APPROX_VS, optimizer=OptimizerSettings(seed=4))
    assert SimulationSpec.from_dict(json.loads(json.dumps(spec.to_dict()))) == spec
    with pytest.raises(ValueError, match="unknown"):
        SimulationSpec.from_dict({"draws": 3})


def test_generate_surface_theta0():
    spec = SimulationSpec()
    surface, vix_ts, vs_ts = generate_surface(THETA_0, spec)
    assert surface.maturities == spec.maturities
    assert np.all(surface.counts() > 0)
    for s in surface.slices:
        assert np.all(s.strikes[s.is_call] >= spec.spot)
        assert np.all(s.strikes[~s.is_call] < spec.spot)
        assert np.all(s.mids >= spec.min_price)
        vols, status = implied_vols(surface.env, s.strikes, s.maturity, s.is_call, s.mids)
        assert np.all(status == 0)
        assert np.max(np.abs(vols - s.ivs)) < 1e-8
    assert vix_ts.levels == tuple(bates_vix_squared(THETA_0, t) for t in spec.maturities)
    assert vs_ts.levels == tuple(bates_variance_swap(THETA_0, t) for t in spec.maturities)


def test_generate_surface_low_variance_drops_wings():
    p = BatesParams(1e-4, 2.0, 1e-4, 0.01, 0.0, 0.0, 0.0, 0.0)
    spec = SimulationSpec()
    with pytest.warns(SimulationWarning):
        surface, _, _ = generate_surface(p, spec)
    assert 7 / 365 not in surface.maturities or surface.slice(7 / 365).size < len(spec.strikes) // 4
    # the floor alone decides which short-dated quotes survive
    surface_full, _, _ = generate_surface(THETA_0, spec)
    assert len(surface) < len(surface_full)


def test_bucket_examples():
    assert bucket_errors([0.005], [0.3]) == {"ATM": pytest.approx(0.5), "OTM": None, "DOTM": None}
    assert bucket_errors([0.01, 0.03], [1.2, -1.7])["OTM"] == pytest.approx(2.0)
    assert bucket_of([0.0, 0.999, 1.0, -1.5, 2.0, -7.0]).tolist() == [0, 0, 1, 1, 2, 2]


def test_study_single_draw_at_theta0_recovers():
    t = tuple(THETA_0.to_array())
    spec = SimulationSpec(n_draws=1, draw_lower=t, draw_upper=t, alpha_grid=(0.5,))
    summary = run_recovery_study(spec)
    assert summary.recovery_rate[0.5] == 1.0
    assert summary.failed_draws == ()
    assert summary.recovered_draws(0.5) == {0}
    mae = summary.mae_by_bucket[0.5]
    assert all(v is None or 0 <= v < 1e-4 for v in mae.values())
    assert all(e < 1e-8 for e in summary.vix_error_by_maturity[0.5])


def test_study_deterministic_and_serializable():
    spec = SimulationSpec(n_draws=2, alpha_grid=(0.0, 0.5), optimizer=OptimizerSettings(max_evaluations=60))
    a = run_recovery_study(spec)
    b = run_recovery_study(spec)
    assert a.to_json() == b.to_json()
    d = json.loads(a.to_json())
    assert set(d["recovery_rate"]) == {"0.0", "0.5"}
    for r in d["recovery_rate"].values():
        assert 0.0 <= r <= 1.0
    rows = list(csv.DictReader(io.StringIO(a.to_csv())))
    assert len(rows) == 2 * len(BUCKETS)
    assert {r["mode"] for r in rows} == {EXACT_VIX}


def test_approx_mode_penalty_at_truth_is_spread():
    truth = draw_params(SimulationSpec(), 5)
    surface, _, vs_ts = generate_surface(truth, SimulationSpec())
    obj = SurfaceObjective(surface, vs_ts, alpha=0.0, ts_kind=APPROX_VS)
    want = np.sum(
        surface.counts() * (np.sqrt(np.array(vs_ts.levels)) - np.sqrt(bates_vix_squared(truth, vs_ts.maturities))) ** 2
    )
    assert obj.value(truth) == pytest.approx(want, rel=1e-12)
    assert obj.value(truth) > 0


def test_failed_draws_are_excluded(monkeypatch):
    import jointcal.simulation as sim

    real = sim._run_draw

    def flaky(spec, i):
        if i == 1:
            raise RuntimeError("boom")
        return real(spec, i)

    monkeypatch.setattr(sim, "_run_draw", flaky)
    t = tuple(THETA_0.to_array())
    spec = SimulationSpec(n_draws=2, draw_lower=t, draw_upper=t, alpha_grid=(1.0,))
    summary = sim.run_recovery_study(spec)
    assert summary.failed_draws == (1,)
    assert summary.recovery_rate[1.0] == 1.0


def test_synthetic_panel_prices():
    rows = synthetic_panel(THETA_0.replace(lam=0.0, v0=0.04, theta=0.04, sigma_v=1e-6), dt.date(2024, 1, 2),
                           expiry_days=(30,), strikes=[90.0, 100.0], half_spread=0.05)
    assert len(rows) == 4
    r = rows[0]
    assert r.expiry_date == dt.date(2024, 2, 1)
    want = bs_price(r.env, 90.0, 30 / 365, 0.2, "call")
    assert r.mid == pytest.approx(want, rel=1e-5)
    assert r.ask - r.bid == pytest.approx(0.1)
