"""Synthetic-surface recovery study.

Draw Bates parameters uniformly, price the OTM surface on a fixed
strike/maturity grid, calibrate from THETA_0 for each alpha and summarize
implied-vol errors by standardized-moneyness bucket together with the rate of
exact parameter recovery.
"""

from __future__ import annotations

import csv
import datetime as dt
import io
import json
import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .calibration import calibrate, recovery_errors
from .dataio import PanelRow, standardized_moneyness
from .objective import SurfaceObjective
from .pricing import implied_vols, price_european
from .types import (
    VARIANCE_SWAP,
    VIX_SQUARED,
    BATES_FIELDS,
    THETA_0,
    BatesParams,
    CalibrationConfig,
    MarketEnv,
    OptimizerSettings,
    OptionQuote,
    VarianceTermStructure,
    VolSurface,
    year_fraction,
)
from .variance import bates_variance_swap, bates_vix_squared

log = logging.getLogger(__name__)

EXACT_VIX = "exact_vix"
APPROX_VS = "approx_vs"
BUCKETS = ("ATM", "OTM", "DOTM")
BUCKET_EDGES = (0.0, 1.0, 2.0, math.inf)

# absolute uniform ranges; kappa and theta read with the source table's columns swapped
DRAW_LOWER = (0.01, 1.0, 0.01, 0.1, -1.0, 0.0, -0.1, 0.0)
DRAW_UPPER = (0.1, 5.0, 0.1, 0.5, 1.0, 5.0, 0.1, 0.1)


class SimulationWarning(UserWarning):
    pass


@dataclass(frozen=True)
class SimulationSpec:
    n_draws: int = 50
    seed: int = 0
    base_params: BatesParams = THETA_0
    draw_lower: tuple[float, ...] = DRAW_LOWER
    draw_upper: tuple[float, ...] = DRAW_UPPER
    alpha_grid: tuple[float, ...] = (0.0, 0.1, 0.25, 0.5, 0.75, 0.9, 1.0)
    maturity_days: tuple[int, ...] = (7, 30, 91, 182, 365)
    strikes: tuple[float, ...] = tuple(float(k) for k in range(75, 126))
    spot: float = 100.0
    rate: float = 0.02
    dividend_yield: float = 0.03
    min_price: float = 0.10
    mode: str = EXACT_VIX
    recovery_tolerance: float = 1e-4
    optimizer: OptimizerSettings = field(default_factory=OptimizerSettings)

    def __post_init__(self):
        if self.n_draws < 1:
            raise ValueError(f"n_draws must be >= 1, got {self.n_draws}")
        lo, hi = tuple(map(float, self.draw_lower)), tuple(map(float, self.draw_upper))
        if len(lo) != 8 or len(hi) != 8:
            raise ValueError("draw ranges need 8 lower and 8 upper values")
        bad = [n for n, a, b in zip(BATES_FIELDS, lo, hi) if not a <= b]
        if bad:
            raise ValueError(f"draw ranges need lower <= upper for {bad}")
        object.__setattr__(self, "draw_lower", lo)
        object.__setattr__(self, "draw_upper", hi)
        alphas = tuple(float(a) for a in self.alpha_grid)
        if not alphas or any(not 0.0 <= a <= 1.0 for a in alphas):
            raise ValueError(f"alpha_grid must be a nonempty list in [0, 1], got {self.alpha_grid}")
        object.__setattr__(self, "alpha_grid", alphas)
        k = tuple(float(x) for x in self.strikes)
        if not k or k[0] <= 0 or any(b <= a for a, b in zip(k, k[1:])):
            raise ValueError("strikes must be positive and strictly increasing")
        object.__setattr__(self, "strikes", k)
        if not self.maturity_days or any(d <= 0 for d in self.maturity_days):
            raise ValueError("maturity_days must be positive")
        if self.mode not in (EXACT_VIX, APPROX_VS):
            raise ValueError(f"mode must be {EXACT_VIX!r} or {APPROX_VS!r}, got {self.mode!r}")
        MarketEnv(self.spot, self.rate, self.dividend_yield)

    @property
    def env(self) -> MarketEnv:
        return MarketEnv(self.spot, self.rate, self.dividend_yield)

    @property
    def maturities(self) -> tuple[float, ...]:
        return tuple(year_fraction(d) for d in self.maturity_days)

    def to_dict(self) -> dict:
        return {
            "n_draws": self.n_draws,
            "seed": self.seed,
            "base_params": self.base_params.to_dict(),
            "draw_ranges": {n: [a, b] for n, a, b in zip(BATES_FIELDS, self.draw_lower, self.draw_upper)},
            "alpha_grid": list(self.alpha_grid),
            "maturity_days": list(self.maturity_days),
            "strikes": list(self.strikes),
            "spot": self.spot,
            "rate": self.rate,
            "dividend_yield": self.dividend_yield,
            "min_price": self.min_price,
            "mode": self.mode,
            "recovery_tolerance": self.recovery_tolerance,
            "optimizer": self.optimizer.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SimulationSpec":
        d = dict(d)
        kw = {}
        if "draw_ranges" in d:
            ranges = d.pop("draw_ranges")
            missing = [n for n in BATES_FIELDS if n not in ranges]
            if missing:
                raise ValueError(f"draw_ranges missing {missing}")
            kw["draw_lower"] = tuple(ranges[n][0] for n in BATES_FIELDS)
            kw["draw_upper"] = tuple(ranges[n][1] for n in BATES_FIELDS)
        if "base_params" in d:
            kw["base_params"] = BatesParams.from_dict(d.pop("base_params"))
        if "optimizer" in d:
            kw["optimizer"] = OptimizerSettings.from_dict(d.pop("optimizer"))
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown simulation spec keys: {sorted(unknown)}")
        for name in ("alpha_grid", "maturity_days", "strikes"):
            if name in d:
                d[name] = tuple(d[name])
        return cls(**kw, **d)


def draw_params(spec: SimulationSpec, draw_index: int, max_tries: int = 100) -> BatesParams:
    """Uniform draw from the SimulationSpec ranges, reproducible from (seed, draw_index)."""
    rng = np.random.default_rng([spec.seed, draw_index])
    lo, hi = np.array(spec.draw_lower), np.array(spec.draw_upper)
    for _ in range(max_tries):
        x = lo + (hi - lo) * rng.random(8)
        try:
            return BatesParams.from_array(x)
        except ValueError:
            continue
    raise ValueError(f"no valid parameter vector after {max_tries} draws")


def generate_surface(params: BatesParams, spec: SimulationSpec):
    """Model OTM surface plus closed-form VIX^2 and variance-swap curves.

    OTM is judged against spot (calls for K >= S).  Quotes priced below
    ``spec.min_price`` are dropped, as is any maturity left empty.
    """
    env = spec.env
    strikes = np.array(spec.strikes)
    is_call = strikes >= env.spot
    quotes = []
    for tau in spec.maturities:
        prices = price_european(params, env, strikes, tau, np.where(is_call, "call", "put"))
        keep = prices >= spec.min_price
        vols, status = implied_vols(env, strikes[keep], tau, is_call[keep], prices[keep])
        vix = math.sqrt(bates_vix_squared(params, tau))
        fwd = float(env.forward(tau))
        n_before = len(quotes)
        for k, c, p, v, st in zip(strikes[keep], is_call[keep], prices[keep], vols, status):
            if st != 0:
                continue
            quotes.append(
                OptionQuote(
                    strike=float(k),
                    maturity=tau,
                    kind="call" if c else "put",
                    mid=float(p),
                    forward=fwd,
                    std_moneyness=standardized_moneyness(k, env.spot, tau, vix),
                    implied_vol=float(v),
                )
            )
        if len(quotes) == n_before:
            warnings.warn(f"no quotes retained at tau={tau:.4f}; maturity excluded", SimulationWarning, stacklevel=2)
    surface = VolSurface(env, tuple(quotes))
    mats = spec.maturities
    vix_ts = VarianceTermStructure(VIX_SQUARED, mats, tuple(bates_vix_squared(params, t) for t in mats))
    vs_ts = VarianceTermStructure(VARIANCE_SWAP, mats, tuple(bates_variance_swap(params, t) for t in mats))
    return surface, vix_ts, vs_ts


def bucket_of(std_moneyness) -> np.ndarray:
    """Bucket index 0/1/2 (ATM/OTM/DOTM) from |k|."""
    return np.digitize(np.abs(np.asarray(std_moneyness, float)), BUCKET_EDGES[1:-1])


def bucket_errors(abs_errors, std_moneyness) -> dict[str, float | None]:
    """Mean absolute IV error per bucket in percentage points; None for an empty bucket."""
    err = np.asarray(abs_errors, float)
    b = bucket_of(std_moneyness)
    out = {}
    for i, name in enumerate(BUCKETS):
        sel = b == i
        out[name] = float(100.0 * err[sel].mean()) if sel.any() else None
    return out


@dataclass(frozen=True)
class DrawOutcome:
    draw_index: int
    alpha: float
    recovered: bool
    max_param_error: float
    objective_value: float
    evaluations: int
    abs_iv_errors: tuple[float, ...]
    std_moneyness: tuple[float, ...]
    vix_errors: tuple[float, ...]


@dataclass(frozen=True)
class RecoverySummary:
    mode: str
    alpha_grid: tuple[float, ...]
    maturities: tuple[float, ...]
    n_draws: int
    failed_draws: tuple[int, ...]
    mae_by_bucket: dict  # alpha -> {bucket: pct or None}
    recovery_rate: dict  # alpha -> fraction
    vix_error_by_maturity: dict  # alpha -> tuple of mean |VIX_fit - VIX_true| in vol points
    outcomes: tuple[DrawOutcome, ...] = field(repr=False, default=())

    def recovered_draws(self, alpha: float) -> set[int]:
        return {o.draw_index for o in self.outcomes if o.alpha == alpha and o.recovered}

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "alpha_grid": list(self.alpha_grid),
            "maturities": list(self.maturities),
            "n_draws": self.n_draws,
            "failed_draws": list(self.failed_draws),
            "mae_vol_pct_by_bucket": {str(a): self.mae_by_bucket[a] for a in self.alpha_grid},
            "recovery_rate": {str(a): self.recovery_rate[a] for a in self.alpha_grid},
            "vix_error_vol_pct_by_maturity": {
                str(a): [100.0 * e for e in self.vix_error_by_maturity[a]] for a in self.alpha_grid
            },
            "draws": [
                {
                    "draw_index": o.draw_index,
                    "alpha": o.alpha,
                    "recovered": o.recovered,
                    "max_param_error": o.max_param_error,
                    "objective_value": o.objective_value,
                    "evaluations": o.evaluations,
                }
                for o in self.outcomes
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["mode", "alpha", "bucket", "mae_vol_pct", "recovery_rate_frac"])
        for a in self.alpha_grid:
            for b in BUCKETS:
                mae = self.mae_by_bucket[a][b]
                w.writerow([self.mode, repr(a), b, "" if mae is None else repr(mae), repr(self.recovery_rate[a])])
        return buf.getvalue()


def _run_draw(spec: SimulationSpec, draw_index: int) -> list[DrawOutcome]:
    truth = draw_params(spec, draw_index)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", SimulationWarning)
        surface, vix_ts, vs_ts = generate_surface(truth, spec)
    if len(surface) == 0:
        raise ValueError("draw produced an empty surface")
    observed = vix_ts if spec.mode == EXACT_VIX else vs_ts
    ts_kind = VIX_SQUARED if spec.mode == EXACT_VIX else APPROX_VS
    k = np.concatenate([s.std_moneyness for s in surface.slices])
    true_vix = np.sqrt(np.array(vix_ts.levels))
    out = []
    for alpha in spec.alpha_grid:
        config = CalibrationConfig(
            alpha=alpha, initial_guess=spec.base_params, optimizer=spec.optimizer, ts_kind=ts_kind
        )
        result = calibrate(surface, observed, config)
        fit = result.params
        obj = SurfaceObjective(surface, None)
        vols, failed = obj.model_ivs(fit)
        err = np.where(failed, np.nan, np.abs(vols - obj.market_iv))
        fit_vix = np.sqrt(np.array([bates_vix_squared(fit, t) for t in vix_ts.maturities]))
        max_err = float(np.max(recovery_errors(fit, truth)))
        out.append(
            DrawOutcome(
                draw_index=draw_index,
                alpha=alpha,
                recovered=max_err < spec.recovery_tolerance,
                max_param_error=max_err,
                objective_value=result.objective_value,
                evaluations=result.evaluations,
                abs_iv_errors=tuple(err.tolist()),
                std_moneyness=tuple(k.tolist()),
                vix_errors=tuple(np.abs(fit_vix - true_vix).tolist()),
            )
        )
    return out


def _safe_run_draw(args):
    spec, i = args
    try:
        return i, _run_draw(spec, i), None
    except Exception as exc:  # a failed draw is reported, not fatal
        return i, None, f"{type(exc).__name__}: {exc}"


def run_recovery_study(spec: SimulationSpec, jobs: int = 1, progress=None) -> RecoverySummary:
    """Calibrate every draw at every alpha and aggregate errors and recovery rates."""
    tasks = [(spec, i) for i in range(spec.n_draws)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_safe_run_draw, tasks))
    else:
        results = []
        for t in tasks:
            results.append(_safe_run_draw(t))
            if progress:
                progress(t[1], results[-1])
    results.sort(key=lambda r: r[0])
    failed = tuple(i for i, res, _ in results if res is None)
    for i, _, msg in results:
        if msg:
            log.warning("draw %d failed: %s", i, msg)
    outcomes = tuple(o for _, res, _ in results if res is not None for o in res)
    mae, rate, vix_err = {}, {}, {}
    for a in spec.alpha_grid:
        sel = [o for o in outcomes if o.alpha == a]
        errs = np.array([e for o in sel for e in o.abs_iv_errors])
        ks = np.array([x for o in sel for x in o.std_moneyness])
        ok = np.isfinite(errs)
        mae[a] = bucket_errors(errs[ok], ks[ok]) if sel else {b: None for b in BUCKETS}
        rate[a] = float(np.mean([o.recovered for o in sel])) if sel else 0.0
        vix_err[a] = tuple(np.mean([o.vix_errors for o in sel], axis=0).tolist()) if sel else ()
    return RecoverySummary(
        mode=spec.mode,
        alpha_grid=spec.alpha_grid,
        maturities=spec.maturities,
        n_draws=spec.n_draws,
        failed_draws=failed,
        mae_by_bucket=mae,
        recovery_rate=rate,
        vix_error_by_maturity=vix_err,
        outcomes=outcomes,
    )


def synthetic_panel(
    params: BatesParams,
    trade_date,
    expiry_days=(9, 30, 61, 91, 182, 365),
    strikes=None,
    spot: float = 100.0,
    rate: float = 0.02,
    dividend_yield: float = 0.03,
    half_spread: float = 0.0,
) -> list:
    """Calls and puts at every strike and expiry, priced under Bates, as panel rows.

    Bid and ask sit ``half_spread`` either side of the model price (bid
    floored at zero).
    """
    env = MarketEnv(spot, rate, dividend_yield)
    strikes = np.arange(50.0, 151.0, 1.0) if strikes is None else np.asarray(strikes, float)
    rows = []
    for days in expiry_days:
        tau = year_fraction(days)
        expiry = trade_date + dt.timedelta(days=int(days))
        for kind in ("call", "put"):
            prices = np.atleast_1d(price_european(params, env, strikes, tau, kind))
            for k, p in zip(strikes, prices):
                rows.append(
                    PanelRow(
                        trade_date=trade_date,
                        expiry_date=expiry,
                        strike=float(k),
                        kind=kind,
                        bid=max(float(p) - half_spread, 0.0),
                        ask=float(p) + half_spread,
                        underlying_close=spot,
                        rate=rate,
                        dividend_yield=dividend_yield,
                    )
                )
    return rows
