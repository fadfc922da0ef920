import csv
import datetime as dt
import json
import math

import numpy as np
import pytest

from jointcal.cli import main, moving_average
from jointcal.dataio import save_panel
from jointcal.pricing import bs_price, price_european
from jointcal.simulation import SimulationSpec, generate_surface, synthetic_panel
from jointcal.types import THETA_0, CalibrationResult, MarketEnv, to_json


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def run(tmp_path, *args):
    return main(["--output-dir", str(tmp_path), *args])


def test_price_bs_passthrough(tmp_path):
    assert run(tmp_path, "price", "--model", "bs", "--vol", "0.2", "--strikes", "90,100,110", "--maturities", "0.5",
               "--rate", "0.02", "--dividend-yield", "0.03") == 0
    rows = read_csv(tmp_path / "prices.csv")
    env = MarketEnv(100.0, 0.02, 0.03)
    for r in rows:
        want = bs_price(env, float(r["strike_ccy"]), 0.5, 0.2, r["kind"])
        assert float(r["price_ccy"]) == want
        assert float(r["implied_vol_pct"]) == pytest.approx(20.0, abs=1e-8)
    manifest = json.loads((tmp_path / "price_manifest.json").read_text())
    assert manifest["command"] == "price" and manifest["outputs"] == ["prices.csv"]


def test_price_bates_passthrough(tmp_path):
    params = tmp_path / "theta0.json"
    params.write_text(to_json(THETA_0))
    assert run(tmp_path, "--format", "json", "price", "--model", "bates", "--params", str(params),
               "--strikes", "95,105", "--days", "30") == 0
    rows = json.loads((tmp_path / "prices.json").read_text())
    env = MarketEnv(100.0)
    got = [r["price_ccy"] for r in rows]
    assert got == price_european(THETA_0, env, np.array([95.0, 105.0]), 30 / 365, np.array(["put", "call"])).tolist()


def test_price_malformed_params_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert run(tmp_path, "price", "--model", "bates", "--params", str(bad), "--strikes", "100", "--days", "30") == 2
    assert "not valid JSON" in capsys.readouterr().err
    bad.write_text(json.dumps({"v0": 0.04}))
    assert run(tmp_path, "price", "--model", "bates", "--params", str(bad), "--strikes", "100", "--days", "30") == 2


def test_iv_command(tmp_path):
    env = MarketEnv(100.0)
    p = bs_price(env, 110.0, 0.25, 0.3, "call")
    assert run(tmp_path, "iv", "--strikes", "110", "--prices", repr(p), "--maturities", "0.25") == 0
    assert float(read_csv(tmp_path / "implied_vols.csv")[0]["implied_vol_pct"]) == pytest.approx(30.0, abs=1e-8)
    assert run(tmp_path, "iv", "--strikes", "110", "--prices", "200", "--maturities", "0.25") == 3


@pytest.fixture(scope="module")
def multi_date_panel(tmp_path_factory):
    path = tmp_path_factory.mktemp("panel") / "panel.csv"
    rows = []
    for i, day in enumerate((dt.date(2024, 3, 1), dt.date(2024, 3, 4), dt.date(2024, 3, 5))):
        p = THETA_0.replace(v0=0.04 + 0.01 * i)
        rows += synthetic_panel(p, day, expiry_days=(9, 30, 61, 91), strikes=np.arange(50.0, 151.0, 2.5), half_spread=0.01)
    save_panel(rows, path)
    return path


def test_vix_multi_date(tmp_path, multi_date_panel, capsys):
    assert run(tmp_path, "vix", "--quotes", str(multi_date_panel), "--horizons", "9,30,91,365") == 0
    rows = read_csv(tmp_path / "vix_term_structure.csv")
    assert {r["trade_date"] for r in rows} == {"2024-03-01", "2024-03-04", "2024-03-05"}
    summary = read_csv(tmp_path / "vix_summary.csv")
    assert [int(r["horizon_days"]) for r in summary] == [9, 30, 91, 365]
    assert all(int(r["n_dates"]) == 3 for r in summary)
    assert all(float(r["std_vix_vol_pct"]) > 0 for r in summary)


def test_vix_missing_window_warns(tmp_path, tmp_path_factory, capsys):
    path = tmp_path_factory.mktemp("one") / "one.csv"
    save_panel(synthetic_panel(THETA_0, dt.date(2024, 3, 1), expiry_days=(30,)), path)
    assert run(tmp_path, "vix", "--quotes", str(path), "--horizons", "9,30") == 0
    rows = read_csv(tmp_path / "vix_term_structure.csv")
    assert [int(r["horizon_days"]) for r in rows] == [30]
    assert "9-day" in capsys.readouterr().err


def surface_file(tmp_path):
    surface, vix_ts, _ = generate_surface(THETA_0, SimulationSpec())
    path = tmp_path / "surface.json"
    path.write_text(json.dumps({"label": "theta0", "surface": surface.to_dict(), "term_structure": vix_ts.to_dict()}))
    return path


def test_calibrate_surface_near_zero(tmp_path):
    path = surface_file(tmp_path)
    out = tmp_path / "out"
    assert run(out, "calibrate", "--surface", str(path), "--alpha", "0.9") == 0
    result = CalibrationResult.from_dict(json.loads((out / "result_theta0_alpha0.9.json").read_text()))
    assert result.objective_value < 1e-8
    smile = read_csv(out / "smile_theta0_alpha0.9.csv")
    assert max(abs(float(r["market_iv_vol_pct"]) - float(r["model_iv_vol_pct"])) for r in smile) < 1e-3
    assert (out / "term_structure_theta0_alpha0.9.csv").exists()


def test_calibrate_alpha_sweep_table(tmp_path):
    path = surface_file(tmp_path)
    out = tmp_path / "out"
    assert run(out, "calibrate", "--surface", str(path), "--alphas", "0.5,1.0") == 0
    rows = read_csv(out / "mae_by_bucket.csv")
    assert [(r["alpha"], r["bucket"]) for r in rows] == [
        (a, b) for a in ("0.5", "1.0") for b in ("ATM", "OTM", "DOTM")
    ]


def test_calibrate_bad_alpha_exit_2(tmp_path, capsys):
    path = surface_file(tmp_path)
    assert run(tmp_path, "calibrate", "--surface", str(path), "--alpha", "1.2") == 2
    assert "alpha" in capsys.readouterr().err


def test_calibrate_from_quotes(tmp_path, multi_date_panel):
    out = tmp_path / "out"
    assert run(out, "calibrate", "--quotes", str(multi_date_panel), "--trade-date", "2024-03-01", "--alpha", "0.5") == 0
    assert (out / "result_2024-03-01_alpha0.5.json").exists()
    assert (out / "rejects_2024-03-01.csv").exists()


def test_simulate_smoke_and_invalid(tmp_path):
    t = list(THETA_0.to_array())
    spec = SimulationSpec(n_draws=1, draw_lower=t, draw_upper=t, alpha_grid=(0.5,))
    path = tmp_path / "spec.json"
    path.write_text(json.dumps(spec.to_dict()))
    out = tmp_path / "out"
    assert run(out, "simulate", "--spec", str(path), "--modes", "exact_vix,approx_vs") == 0
    d = json.loads((out / "recovery_exact_vix.json").read_text())
    assert d["recovery_rate"]["0.5"] == 1.0
    paired = read_csv(out / "paired_recovery.csv")
    assert paired[0]["exact_vix_recovery_frac"] == "1.0"
    assert run(out, "simulate", "--spec", str(path), "--alphas", "0.5,1.5") == 2


def write_results(directory, params_by_date):
    directory.mkdir()
    for date, p in params_by_date.items():
        r = CalibrationResult(p, 0.5, 0.0, 0.0, 0.0, (), (), (), True, 1)
        d = r.to_dict()
        d["trade_date"] = date
        (directory / f"result_{date}.json").write_text(json.dumps(d))


def test_report_signs(tmp_path):
    dates = [(dt.date(2024, 1, 1) + dt.timedelta(days=i)).isoformat() for i in range(25)]
    write_results(tmp_path / "nojump", {d: THETA_0.replace(lam=0.0) for d in dates})
    assert run(tmp_path / "o1", "report", "--results-dir", str(tmp_path / "nojump")) == 0
    rows = read_csv(tmp_path / "o1" / "multiplier_spread.csv")
    assert all(float(r["multiplier_q_ratio"]) == 2.0 and float(r["spread_vol_pct"]) == 0.0 for r in rows)

    write_results(tmp_path / "neg", {d: THETA_0.replace(mu_j=-0.02 - 0.001 * i) for i, d in enumerate(dates)})
    (tmp_path / "neg" / "corrupt.json").write_text("{")
    assert run(tmp_path / "o2", "report", "--results-dir", str(tmp_path / "neg")) == 0
    rows = read_csv(tmp_path / "o2" / "multiplier_spread.csv")
    assert len(rows) == 25
    assert all(float(r["multiplier_q_ratio"]) > 2 and float(r["spread_vol_pct"]) > 0 for r in rows)
    assert rows[19]["multiplier_q_ratio_ma21"] == "" and rows[20]["multiplier_q_ratio_ma21"] != ""


def test_report_empty_dir_exit_2(tmp_path):
    (tmp_path / "empty").mkdir()
    assert run(tmp_path, "report", "--results-dir", str(tmp_path / "empty")) == 2


def test_moving_average():
    assert moving_average([1.0, 2.0, 3.0], 2)[1:] == [1.5, 2.5]
    assert math.isnan(moving_average([1.0, 2.0, 3.0], 2)[0])


def test_outputs_reproducible(tmp_path):
    args = ("price", "--model", "bs", "--vol", "0.25", "--strikes", "80,120", "--days", "30,91")
    run(tmp_path / "a", *args)
    run(tmp_path / "b", *args)
    assert (tmp_path / "a" / "prices.csv").read_bytes() == (tmp_path / "b" / "prices.csv").read_bytes()
    ma = json.loads((tmp_path / "a" / "price_manifest.json").read_text())
    mb = json.loads((tmp_path / "b" / "price_manifest.json").read_text())
    assert ma["config_hash"] != mb["config_hash"]  # output dir differs
    assert ma["library_version"] == mb["library_version"]
