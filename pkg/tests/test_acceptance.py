"""Acceptance criteria, one test per criterion.

Each test records a PASS/FAIL line that is printed in the terminal summary.
"""

import datetime as dt
import json
import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from oracles import bates_mc_paths, conditional_black_prices
from jointcal.calibration import (
    sjd_calibrate_univariate,
    sjd_iv_sse,
    sjd_lambda_from_vix,
    sjd_lambda_from_vs,
)
from jointcal.cli import main
from jointcal.dataio import ASK_LE_MIN, MONEYNESS_GT_MAX, PanelRow, apply_filters
from jointcal.objective import SurfaceObjective
from jointcal.pricing import bs_price, implied_vol, implied_vols, price_european, sjd_price
from jointcal.simulation import (
    APPROX_VS,
    DRAW_LOWER,
    DRAW_UPPER,
    EXACT_VIX,
    SimulationSpec,
    draw_params,
    generate_surface,
    run_recovery_study,
    synthetic_panel,
)
from jointcal.types import THETA_0, BatesParams, CalibrationResult, MarketEnv, OptionQuote, SjdParams, VolSurface
from jointcal.variance import (
    StrikeGrid,
    bates_variance_swap,
    bates_vix_squared,
    log_contract_multiplier,
    replicate_vix_squared,
    sjd_variance_swap,
    sjd_vix_squared,
    vs_vix_spread,
)

pytestmark = pytest.mark.slow


def record(number, title, checks, started):
    """Log one line per criterion and fail the test if any sub-check failed."""
    ok = all(passed for _, passed in checks)
    failed = [name for name, passed in checks if not passed]
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} ({time.perf_counter() - started:.1f}s)"
    if failed:
        line += " failed: " + "; ".join(failed)
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


# ---------------------------------------------------------------------------


def test_criterion_1_zero_objective_at_truth():
    t0 = time.perf_counter()
    spec = SimulationSpec(seed=2024)
    worst = 0.0
    for i in range(100):
        truth = draw_params(spec, i)
        surface, vix_ts, vs_ts = generate_surface(truth, spec)
        for ts in (vix_ts, vs_ts):
            for alpha in (0.0, 0.25, 0.5, 0.75, 1.0):
                worst = max(worst, SurfaceObjective(surface, ts, alpha).value(truth))
    elapsed = time.perf_counter() - t0
    record(
        1,
        f"joint objective at truth, 100 draws x 5 alphas x 2 kinds, max {worst:.2e}",
        [(f"max objective {worst:.2e} < 1e-8", worst < 1e-8), (f"runtime {elapsed:.0f}s < 300s", elapsed < 300)],
        t0,
    )


def sjd_surface(params):
    env = MarketEnv(100.0, 0.0, 0.0)
    strikes = np.arange(90.0, 111.0)
    tau = 1 / 12
    is_call = strikes >= env.spot
    prices = np.where(
        is_call, sjd_price(params, env, strikes, tau, "call"), sjd_price(params, env, strikes, tau, "put")
    )
    vols, _ = implied_vols(env, strikes, tau, is_call, prices)
    quotes = tuple(
        OptionQuote(float(k), tau, "call" if c else "put", float(p), implied_vol=float(v))
        for k, c, p, v in zip(strikes, is_call, prices, vols)
    )
    return VolSurface(env, quotes)


def test_criterion_2_sjd_reduction():
    t0 = time.perf_counter()
    truth = SjdParams(0.16, 1.0, -0.05)
    surface = sjd_surface(truth)
    checks = []
    rules = {
        "variance swap": sjd_lambda_from_vs(sjd_variance_swap(truth), 0.16),
        "VIX": sjd_lambda_from_vix(sjd_vix_squared(truth), 0.16),
    }
    for name, rule in rules.items():
        fit = sjd_calibrate_univariate(surface, 0.16, rule)
        err = max(abs(fit.lam - 1.0), abs(fit.jump + 0.05))
        checks.append((f"{name} rule error {err:.1e} <= 1e-3", err <= 1e-3))
    lams = np.linspace(0.0, 2.0, 101)
    jumps = np.linspace(-0.1, 0.1, 101)
    grid = np.array([[sjd_iv_sse(surface, 0.16, lam, j) for j in jumps] for lam in lams])
    i, k = np.unravel_index(np.argmin(grid), grid.shape)
    # truth sits on a grid node up to rounding in linspace
    grid_err = max(abs(lams[i] - 1.0), abs(jumps[k] + 0.05))
    checks.append((f"101x101 grid minimizer off truth by {grid_err:.1e}", grid_err < 1e-12))
    elapsed = time.perf_counter() - t0
    checks.append((f"runtime {elapsed:.0f}s < 60s", elapsed < 60))
    record(2, "SJD univariate reductions recover (lambda, J) = (1, -0.05)", checks, t0)


def test_criterion_3_scaled_simulation_study():
    t0 = time.perf_counter()
    exact = run_recovery_study(SimulationSpec(n_draws=50, alpha_grid=(0.0, 0.1, 0.5, 1.0), mode=EXACT_VIX))
    approx = run_recovery_study(SimulationSpec(n_draws=50, alpha_grid=(0.1,), mode=APPROX_VS))
    checks = []
    for a in (0.1, 0.5, 1.0):
        atm = exact.mae_by_bucket[a]["ATM"]
        checks.append((f"alpha={a} ATM MAE {atm:.3f}% < 0.5%", atm < 0.5))
    atm0 = exact.mae_by_bucket[0.0]["ATM"]
    checks.append((f"alpha=0 ATM MAE {atm0:.3f}% > 1%", atm0 > 1.0))
    checks.append((f"alpha=0 recovery {exact.recovery_rate[0.0]:.2f} == 0", exact.recovery_rate[0.0] == 0.0))
    paired = sorted(set(range(50)) - set(exact.failed_draws) - set(approx.failed_draws))
    ex_rate = len(exact.recovered_draws(0.1) & set(paired)) / len(paired)
    ap_rate = len(approx.recovered_draws(0.1) & set(paired)) / len(paired)
    checks.append(
        (
            f"alpha=0.1 paired recovery exact {ex_rate:.2f} vs approx {ap_rate:.2f} over {len(paired)} draws",
            ex_rate - ap_rate >= 0.10,
        )
    )
    elapsed = time.perf_counter() - t0
    checks.append((f"runtime {elapsed:.0f}s < 1800s", elapsed < 1800))
    summary = ", ".join(
        f"a={a}: ATM {exact.mae_by_bucket[a]['ATM']:.3f}% rec {exact.recovery_rate[a]:.2f}" for a in exact.alpha_grid
    )
    record(3, f"scaled study, 50 draws [{summary}; approx a=0.1 rec {ap_rate:.2f}]", checks, t0)


def test_criterion_4_closed_form_identities():
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    lo, hi = np.array(DRAW_LOWER), np.array(DRAW_UPPER)
    worst_q = worst_spread = 0.0
    for _ in range(10_000):
        p = BatesParams.from_array(lo + (hi - lo) * rng.random(8))
        tau = float(rng.uniform(1 / 365, 2.0))
        vs, vix2 = bates_variance_swap(p, tau), bates_vix_squared(p, tau)
        worst_q = max(worst_q, abs(log_contract_multiplier(p, tau) * vix2 / 2 / vs - 1))
        worst_spread = max(worst_spread, abs(vs_vix_spread(p, tau) - (vs - vix2)))
    taus = np.array([7, 30, 91, 182, 365]) / 365
    no_jump = all(
        np.all(log_contract_multiplier(THETA_0.replace(lam=0.0, mu_j=float(m)), taus) == 2.0)
        for m in np.linspace(-0.1, 0.1, 21)
    )
    neg = all(
        np.all(log_contract_multiplier(THETA_0.replace(mu_j=float(m), sigma_j=0.01), taus) > 2)
        for m in np.linspace(-0.1, -0.005, 20)
    )
    pos = all(
        np.all(log_contract_multiplier(THETA_0.replace(mu_j=float(m), sigma_j=1e-4), taus) < 2)
        for m in np.linspace(0.005, 0.1, 20)
    )
    record(
        4,
        "closed-form identities over 10^4 parameter/maturity pairs",
        [
            (f"Q VIX^2/2 = VS rel err {worst_q:.1e} <= 1e-12", worst_q <= 1e-12),
            (f"spread = VS - VIX^2 err {worst_spread:.1e} <= 1e-14", worst_spread <= 1e-14),
            ("Q == 2 at lambda = 0", no_jump),
            ("Q > 2 on negative-skew sweep", neg),
            ("Q < 2 on positive-skew sweep", pos),
        ],
        t0,
    )


def test_criterion_5_replication_accuracy():
    t0 = time.perf_counter()
    checks = []
    env0 = MarketEnv(100.0, 0.0, 0.0)
    k = np.arange(50.0, 200.01, 0.5)
    tau = 30 / 365
    grid = StrikeGrid(tuple(k), tuple(bs_price(env0, k, tau, 0.2, np.where(k < 100, "put", "call"))), 100.0)
    rel = abs(replicate_vix_squared(grid, tau) / 0.04 - 1)
    checks.append((f"BS dense grid rel err {rel:.2e} < 0.5%", rel < 0.005))

    env = MarketEnv(100.0, 0.02, 0.03)
    for days, (k_lo, k_hi) in {30: (20, 400), 91: (20, 400), 182: (10, 600), 365: (5, 1000)}.items():
        tau = days / 365
        fwd = float(env.forward(tau))
        errs = []
        for h in (2.0, 1.0, 0.5):
            # grid anchored on the forward so the put/call switch sits on a node
            strikes = fwd + h * np.arange(math.ceil((k_lo - fwd) / h), math.floor((k_hi - fwd) / h) + 1)
            kinds = np.where(strikes < fwd, "put", "call")
            prices = price_european(THETA_0, env, strikes, tau, kinds)
            g = StrikeGrid(tuple(strikes), tuple(prices), fwd, math.exp(-env.rate * tau))
            errs.append(abs(replicate_vix_squared(g, tau) - bates_vix_squared(THETA_0, tau)))
        ratios = [errs[0] / errs[1], errs[1] / errs[2]]
        checks.append((f"{days}d halving ratios {ratios[0]:.2f}, {ratios[1]:.2f} >= 2", min(ratios) >= 2))
    elapsed = time.perf_counter() - t0
    checks.append((f"runtime {elapsed:.0f}s < 60s", elapsed < 60))
    record(5, "replication accuracy and spacing convergence", checks, t0)


def test_criterion_6_pricer_validation():
    t0 = time.perf_counter()
    checks = []
    env = MarketEnv(100.0, 0.02, 0.03)
    taus = [30 / 365, 91 / 365, 1.0]
    state = bates_mc_paths(THETA_0, env.spot, env.rate, env.dividend_yield, taus, 1_000_000, seed=1)
    worst = 0.0
    for tau in taus:
        mean, var = state[tau]
        for strike in (90.0, 100.0, 110.0):
            kind = "put" if strike < env.spot else "call"
            samples = conditional_black_prices(mean, var, strike, tau, env.rate, kind)
            se = samples.std(ddof=1) / math.sqrt(samples.size)
            z = abs(price_european(THETA_0, env, strike, tau, kind) - samples.mean()) / se
            worst = max(worst, z)
    checks.append((f"MC oracle: worst |z| = {worst:.2f} over 9 points <= 3", worst <= 3))

    rng = np.random.default_rng(6)
    lo, hi = np.array(DRAW_LOWER), np.array(DRAW_UPPER)
    strikes = np.arange(50.0, 151.0)
    parity_worst = 0.0
    for _ in range(50):
        p = BatesParams.from_array(lo + (hi - lo) * rng.random(8))
        for days in (7, 30, 91, 182, 365):
            tau = days / 365
            c = price_european(p, env, strikes, tau, "call")
            q = price_european(p, env, strikes, tau, "put")
            gap = c - q - (env.spot * math.exp(-env.dividend_yield * tau) - strikes * math.exp(-env.rate * tau))
            parity_worst = max(parity_worst, float(np.max(np.abs(gap))))
    checks.append((f"parity residual {parity_worst:.1e} < 1e-8 * spot", parity_worst < 1e-8 * env.spot))

    k = rng.uniform(70, 130, 100)
    tau = rng.uniform(7 / 365, 2.0, 100)
    vol = rng.uniform(0.05, 1.0, 100)
    kinds = np.where(k >= env.spot, "call", "put")
    prices = bs_price(env, k, tau, vol, kinds)
    iv_worst = max(abs(implied_vol(env, a, b, c, d) - v) for a, b, c, d, v in zip(k, tau, kinds, prices, vol))
    checks.append((f"implied vol round trip {iv_worst:.1e} < 1e-8", iv_worst < 1e-8))
    elapsed = time.perf_counter() - t0
    checks.append((f"runtime {elapsed:.0f}s < 600s", elapsed < 600))
    record(6, "pricer against Monte Carlo, parity and implied-vol round trip", checks, t0)


def test_criterion_7_data_filters_and_report(tmp_path):
    t0 = time.perf_counter()
    checks = []
    trade = dt.date(2024, 3, 1)
    panel = synthetic_panel(THETA_0, trade, half_spread=0.01)
    first = apply_filters(panel)
    second = apply_filters(first.retained)
    checks.append(("filters idempotent", second.retained == first.retained and second.rejects == ()))
    seen = [id(r) for r in first.retained] + [id(r.row) for r in first.rejects]
    checks.append(("rows partitioned", len(seen) == len(panel) and set(seen) == {id(r) for r in panel}))

    def row(strike, ask):
        return PanelRow(trade, trade + dt.timedelta(days=30), strike, "call", 0.01, ask, 100.0, 0.02, 0.03)

    tau, vix = 30 / 365, 0.2
    at = lambda k: 100.0 * math.exp(k * vix * math.sqrt(tau))
    res = apply_filters([row(120.0, 0.10), row(at(6.01), 0.3), row(at(6.0) * (1 - 1e-12), 0.3)], {tau: vix})
    reasons = [r.reason for r in res.rejects]
    checks.append(("ask = 0.10 removed", reasons.count(ASK_LE_MIN) == 1))
    checks.append(("|k| = 6.01 removed, |k| = 6 kept", reasons.count(MONEYNESS_GT_MAX) == 1 and len(res.retained) == 1))

    results = tmp_path / "results"
    results.mkdir()
    for i in range(30):
        p = THETA_0.replace(mu_j=-0.01 - 0.002 * i, lam=0.2 + 0.1 * i)
        d = CalibrationResult(p, 0.9, 0.0, 0.0, 0.0, (), (), (), True, 1).to_dict()
        d["trade_date"] = (trade + dt.timedelta(days=i)).isoformat()
        (results / f"r{i}.json").write_text(json.dumps(d))
    out = tmp_path / "out"
    code = main(["--output-dir", str(out), "report", "--results-dir", str(results)])
    rows = (out / "multiplier_spread.csv").read_text().splitlines()[1:] if code == 0 else []
    signs = [
        float(r.split(",")[1]) > 2 and float(r.split(",")[2]) > 0 for r in rows
    ]
    checks.append((f"report: Q > 2 and spread > 0 on {len(signs)} dates with mu_j < 0", code == 0 and len(signs) == 30 and all(signs)))
    record(7, "synthetic-panel filter suite and report sign properties", checks, t0)
