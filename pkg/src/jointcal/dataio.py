"""Option-panel loading, quote filters, standardized moneyness and market VIX curves.

Filters run in a fixed order and the first one that fires is recorded as
the reject reason, so every input row ends up either retained or in the
reject report exactly once.
"""

from __future__ import annotations

import csv
import datetime as dt
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .pricing import implied_vols
from .types import (
    CALL,
    DAYS_PER_YEAR,
    PUT,
    VIX_SQUARED,
    MarketEnv,
    OptionQuote,
    VarianceTermStructure,
    VolSurface,
    year_fraction,
)
from .variance import StrikeGrid, replicate_vix_squared

# reject reasons, in the order the filters run
BID_GT_ASK = "bid_gt_ask"
MATURITY_GT_1Y = "maturity_gt_1y"
PARITY = "parity_violation"
ASK_LE_MIN = "ask_le_min"
NOT_OTM = "not_otm"
NO_VIX = "vix_unavailable"
MONEYNESS_GT_MAX = "moneyness_gt_max"
IV_FAILURE = "iv_failure"

MONTHLY_HORIZONS = tuple(range(1, 13))
NINE_DAY = 9


class DataError(ValueError):
    pass


class DataWarning(UserWarning):
    pass


@dataclass(frozen=True)
class PanelRow:
    trade_date: dt.date
    expiry_date: dt.date
    strike: float
    kind: str
    bid: float
    ask: float
    underlying_close: float
    rate: float
    dividend_yield: float

    def __post_init__(self):
        if self.kind not in (CALL, PUT):
            raise DataError(f"kind must be call or put, got {self.kind!r}")
        if not self.strike > 0:
            raise DataError(f"strike must be > 0, got {self.strike}")
        if not self.underlying_close > 0:
            raise DataError(f"underlying_close must be > 0, got {self.underlying_close}")
        for name in ("strike", "bid", "ask", "underlying_close", "rate", "dividend_yield"):
            if not math.isfinite(getattr(self, name)):
                raise DataError(f"{name} must be finite")

    @property
    def mid(self) -> float:
        return 0.5 * (self.bid + self.ask)

    @property
    def days(self) -> int:
        return (self.expiry_date - self.trade_date).days

    @property
    def maturity(self) -> float:
        return year_fraction(self.days)

    @property
    def env(self) -> MarketEnv:
        return MarketEnv(self.underlying_close, self.rate, self.dividend_yield)


@dataclass(frozen=True)
class PanelSchema:
    """Maps PanelRow fields to CSV columns and declares value conventions."""

    columns: dict = field(
        default_factory=lambda: {
            "trade_date": "trade_date",
            "expiry_date": "expiry_date",
            "strike": "strike",
            "kind": "kind",
            "bid": "bid",
            "ask": "ask",
            "underlying_close": "underlying_close",
            "rate": "rate",
            "dividend_yield": "dividend_yield",
        }
    )
    date_format: str = "%Y-%m-%d"
    call_codes: tuple[str, ...] = ("call", "c")
    put_codes: tuple[str, ...] = ("put", "p")
    strike_divisor: float = 1.0

    @classmethod
    def from_dict(cls, d: dict) -> "PanelSchema":
        base = cls()
        cols = dict(base.columns)
        cols.update(d.get("columns", {}))
        unknown = set(cols) - set(base.columns)
        if unknown:
            raise DataError(f"unknown panel fields in schema: {sorted(unknown)}")
        return cls(
            columns=cols,
            date_format=d.get("date_format", base.date_format),
            call_codes=tuple(c.lower() for c in d.get("call_codes", base.call_codes)),
            put_codes=tuple(c.lower() for c in d.get("put_codes", base.put_codes)),
            strike_divisor=float(d.get("strike_divisor", base.strike_divisor)),
        )


@dataclass(frozen=True)
class Rejection:
    reason: str
    row: PanelRow | None = None
    line: int | None = None
    detail: str = ""


def _parse_row(raw: dict, schema: PanelSchema) -> PanelRow:
    c = schema.columns
    kind_code = raw[c["kind"]].strip().lower()
    if kind_code in schema.call_codes:
        kind = CALL
    elif kind_code in schema.put_codes:
        kind = PUT
    else:
        raise DataError(f"unrecognized option kind {raw[c['kind']]!r}")
    return PanelRow(
        trade_date=dt.datetime.strptime(raw[c["trade_date"]].strip(), schema.date_format).date(),
        expiry_date=dt.datetime.strptime(raw[c["expiry_date"]].strip(), schema.date_format).date(),
        strike=float(raw[c["strike"]]) / schema.strike_divisor,
        kind=kind,
        bid=float(raw[c["bid"]]),
        ask=float(raw[c["ask"]]),
        underlying_close=float(raw[c["underlying_close"]]),
        rate=float(raw[c["rate"]]),
        dividend_yield=float(raw[c["dividend_yield"]]),
    )


def load_panel(path, schema: PanelSchema | None = None) -> tuple[list[PanelRow], list[Rejection]]:
    """Parse a quote CSV; rows that fail to parse go to the reject list with their line number."""
    schema = schema or PanelSchema()
    rows: list[PanelRow] = []
    rejects: list[Rejection] = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [col for col in schema.columns.values() if col not in header]
        if missing:
            raise DataError(f"{path}: missing mandatory columns {missing}")
        for line, raw in enumerate(reader, start=2):
            try:
                rows.append(_parse_row(raw, schema))
            except (ValueError, TypeError, AttributeError) as exc:
                rejects.append(Rejection("parse_error", None, line, str(exc)))
    return rows, rejects


def save_panel(rows, path, schema: PanelSchema | None = None) -> None:
    schema = schema or PanelSchema()
    c = schema.columns
    fields = list(c.values())
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(
                {
                    c["trade_date"]: r.trade_date.strftime(schema.date_format),
                    c["expiry_date"]: r.expiry_date.strftime(schema.date_format),
                    c["strike"]: repr(r.strike * schema.strike_divisor),
                    c["kind"]: schema.call_codes[0] if r.kind == CALL else schema.put_codes[0],
                    c["bid"]: repr(r.bid),
                    c["ask"]: repr(r.ask),
                    c["underlying_close"]: repr(r.underlying_close),
                    c["rate"]: repr(r.rate),
                    c["dividend_yield"]: repr(r.dividend_yield),
                }
            )


def save_rejects(rejects, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["line", "trade_date", "expiry_date", "strike", "kind", "bid_ccy", "ask_ccy", "reason", "detail"])
        for rj in rejects:
            r = rj.row
            if r is None:
                w.writerow([rj.line, "", "", "", "", "", "", rj.reason, rj.detail])
            else:
                w.writerow(
                    [rj.line or "", r.trade_date, r.expiry_date, r.strike, r.kind, r.bid, r.ask, rj.reason, rj.detail]
                )


def standardized_moneyness(strike, spot, maturity, vix_tau):
    """k = ln(K/S) / (VIX(tau) sqrt(tau)), VIX as a decimal volatility."""
    if np.any(np.asarray(vix_tau) <= 0):
        raise ValueError("vix_tau must be > 0")
    if np.any(np.asarray(maturity) <= 0):
        raise ValueError("maturity must be > 0")
    k = np.log(np.asarray(strike, float) / spot) / (np.asarray(vix_tau, float) * np.sqrt(maturity))
    return float(k) if np.ndim(k) == 0 else k


def parity_check(call_row: PanelRow, put_row: PanelRow, env: MarketEnv | None = None, tolerance: float = 0.005) -> bool:
    """True when mid-quotes violate put-call parity by more than ``tolerance * spot``."""
    env = env or call_row.env
    tau = call_row.maturity
    gap = call_row.mid - put_row.mid - (
        env.spot * math.exp(-env.dividend_yield * tau) - call_row.strike * math.exp(-env.rate * tau)
    )
    return abs(gap) > tolerance * env.spot


def _is_otm(row: PanelRow) -> bool:
    # calls at or above spot, puts strictly below
    s = row.underlying_close
    return row.strike >= s if row.kind == CALL else row.strike < s


def _forward_otm_grid(strikes, kinds, prices, env: MarketEnv, tau: float) -> StrikeGrid | None:
    """Forward-OTM price per strike (puts below F, calls at or above), using parity where needed."""
    fwd = float(env.forward(tau))
    disc = float(env.discount(tau))
    by_strike: dict[float, dict[str, float]] = {}
    for k, kind, p in zip(strikes, kinds, prices):
        by_strike.setdefault(float(k), {})[kind] = float(p)
    ks, ps = [], []
    for k in sorted(by_strike):
        q = by_strike[k]
        want = CALL if k >= fwd else PUT
        if want in q:
            p = q[want]
        elif want == PUT:
            p = q[CALL] - disc * (fwd - k)
        else:
            p = q[PUT] + disc * (fwd - k)
        ks.append(k)
        ps.append(max(p, 0.0))
    if len(ks) < 2:
        return None
    return StrikeGrid(tuple(ks), tuple(ps), fwd, disc)


def replicated_vix(strikes, kinds, prices, env: MarketEnv, tau: float) -> float | None:
    """Replicated VIX (decimal vol) from one maturity's quotes, or None with fewer than 2 strikes."""
    grid = _forward_otm_grid(strikes, kinds, prices, env, tau)
    if grid is None:
        return None
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        v2 = replicate_vix_squared(grid, tau)
    return math.sqrt(v2) if v2 > 0 else None


@dataclass(frozen=True)
class FilterResult:
    surface: VolSurface
    retained: tuple[PanelRow, ...]
    rejects: tuple[Rejection, ...]
    vix: dict  # maturity (years) -> VIX used for moneyness


def apply_filters(
    rows,
    vix_by_maturity: dict | None = None,
    min_ask: float = 0.10,
    max_maturity: float = 1.0,
    max_abs_moneyness: float = 6.0,
    parity_tolerance: float = 0.005,
) -> FilterResult:
    """Quote filters for one trade date.

    ``vix_by_maturity`` maps maturity (years) to VIX as a decimal vol; when a
    maturity is missing, its VIX is replicated from the quotes that survive
    the bid/ask check, before any other filter.
    """
    rows = list(rows)
    if not rows:
        return FilterResult(VolSurface(MarketEnv(1.0), ()), (), (), {})
    dates = {r.trade_date for r in rows}
    if len(dates) != 1:
        raise DataError(f"apply_filters needs rows from one trade date, got {len(dates)}")
    env = rows[0].env
    rejected: dict[int, str] = {}

    def reject(i, reason):
        rejected.setdefault(i, reason)

    for i, r in enumerate(rows):
        if r.bid > r.ask:
            reject(i, BID_GT_ASK)
    live = [i for i in range(len(rows)) if i not in rejected]

    vix = dict(vix_by_maturity or {})
    by_tau: dict[float, list[int]] = {}
    for i in live:
        by_tau.setdefault(rows[i].maturity, []).append(i)
    for tau, idx in by_tau.items():
        if tau in vix or tau <= 0:
            continue
        otm = [i for i in idx if _is_otm(rows[i])]
        v = replicated_vix(
            [rows[i].strike for i in otm], [rows[i].kind for i in otm], [rows[i].mid for i in otm], env, tau
        )
        if v is not None:
            vix[tau] = v

    for i in live:
        if not 0 < rows[i].maturity <= max_maturity:
            reject(i, MATURITY_GT_1Y)

    pairs: dict[tuple, dict[str, int]] = {}
    for i in live:
        if i not in rejected:
            r = rows[i]
            pairs.setdefault((r.expiry_date, r.strike), {})[r.kind] = i
    for pair in pairs.values():
        if CALL in pair and PUT in pair and parity_check(rows[pair[CALL]], rows[pair[PUT]], env, parity_tolerance):
            reject(pair[CALL], PARITY)
            reject(pair[PUT], PARITY)

    for i in live:
        if i in rejected:
            continue
        r = rows[i]
        if r.ask <= min_ask:
            reject(i, ASK_LE_MIN)
        elif not _is_otm(r):
            reject(i, NOT_OTM)
        elif r.maturity not in vix:
            reject(i, NO_VIX)
        elif abs(standardized_moneyness(r.strike, env.spot, r.maturity, vix[r.maturity])) > max_abs_moneyness:
            reject(i, MONEYNESS_GT_MAX)

    keep = [i for i in live if i not in rejected]
    if keep:
        strikes = np.array([rows[i].strike for i in keep])
        taus = np.array([rows[i].maturity for i in keep])
        calls = np.array([rows[i].kind == CALL for i in keep])
        mids = np.array([rows[i].mid for i in keep])
        vols, status = implied_vols(env, strikes, taus, calls, mids)
        quotes = []
        retained = []
        for i, v, st in zip(keep, vols, status):
            if st != 0:
                reject(i, IV_FAILURE)
                continue
            r = rows[i]
            quotes.append(
                OptionQuote(
                    strike=r.strike,
                    maturity=r.maturity,
                    kind=r.kind,
                    mid=r.mid,
                    bid=r.bid,
                    ask=r.ask,
                    forward=float(env.forward(r.maturity)),
                    std_moneyness=standardized_moneyness(r.strike, env.spot, r.maturity, vix[r.maturity]),
                    implied_vol=float(v),
                )
            )
            retained.append(r)
    else:
        quotes, retained = [], []
    rejects = tuple(Rejection(reason, rows[i]) for i, reason in sorted(rejected.items()))
    return FilterResult(VolSurface(env, tuple(quotes)), tuple(retained), rejects, vix)


def horizon_days(months: int) -> int:
    return int(round(DAYS_PER_YEAR * months / 12.0))


DEFAULT_HORIZONS = (NINE_DAY,) + tuple(horizon_days(m) for m in MONTHLY_HORIZONS)
DEFAULT_WINDOWS = {NINE_DAY: (8, 10)}


def select_maturity(maturities, target_days: int, window=None) -> float | None:
    """Nearest maturity (in days) to the target; ties go to the shorter maturity."""
    best = None
    for tau in sorted(maturities):
        days = tau * DAYS_PER_YEAR
        if window is not None and not window[0] - 1e-9 <= days <= window[1] + 1e-9:
            continue
        dist = abs(days - target_days)
        if best is None or dist < best[0] - 1e-9:
            best = (dist, tau)
    return None if best is None else best[1]


def market_vix_points(surface: VolSurface, horizons=DEFAULT_HORIZONS, windows=None):
    """(horizon_days, matched maturity, replicated VIX^2) per horizon that finds a maturity."""
    windows = DEFAULT_WINDOWS if windows is None else windows
    out = []
    for h in horizons:
        tau = select_maturity(surface.maturities, h, windows.get(h))
        if tau is None:
            warnings.warn(f"no option maturity for the {h}-day horizon; point omitted", DataWarning, stacklevel=2)
            continue
        s = surface.slice(tau)
        grid = _forward_otm_grid(s.strikes, np.where(s.is_call, CALL, PUT), s.mids, surface.env, tau)
        if grid is None:
            warnings.warn(f"fewer than 2 strikes at tau={tau:.4f}; {h}-day point omitted", DataWarning, stacklevel=2)
            continue
        out.append((h, tau, replicate_vix_squared(grid, tau)))
    return out


def build_market_ts(surface: VolSurface, target_days=DEFAULT_HORIZONS, windows=None) -> VarianceTermStructure:
    """Replicated VIX^2 at the option maturities matched to each horizon.

    Points sit at the matched option maturity, so horizons that share a
    maturity contribute one point.
    """
    if len(surface) == 0:
        raise DataError("surface has no quotes")
    pts = {tau: v2 for _, tau, v2 in market_vix_points(surface, target_days, windows)}
    return VarianceTermStructure.from_points(VIX_SQUARED, pts.items())
