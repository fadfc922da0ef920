"""Command-line interface: price, iv, vix, calibrate, simulate, report.

Exit codes: 0 success, 2 invalid input, 3 numerical failure.  Every command
writes a ``<command>_manifest.json`` next to its outputs.
"""

from __future__ import annotations

import argparse
import csv
import datetime as dt
import hashlib
import io
import json
import logging
import math
import sys
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .calibration import CalibrationError, calibrate
from .dataio import (
    DataError,
    PanelSchema,
    apply_filters,
    build_market_ts,
    load_panel,
    market_vix_points,
    save_rejects,
)
from .objective import SurfaceObjective
from .pricing import ImpliedVolError, PricingError, bs_price, implied_vols, price_european, sjd_price
from .simulation import (
    APPROX_VS,
    BUCKETS,
    EXACT_VIX,
    SimulationSpec,
    bucket_errors,
    draw_params,
    generate_surface,
    run_recovery_study,
)
from .types import (
    CALL,
    PUT,
    BatesParams,
    CalibrationConfig,
    CalibrationResult,
    MarketEnv,
    SjdParams,
    VarianceTermStructure,
    VolSurface,
)
from .variance import NonPhysicalVixError, bates_variance_swap, bates_vix_squared, log_contract_multiplier

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 2, 3
MA_WINDOW = 21

log = logging.getLogger("jointcal")


class UsageError(Exception):
    pass


@dataclass(frozen=True)
class RunManifest:
    command: str
    config_hash: str
    seed: int | None
    library_version: str
    input_digests: dict
    outputs: list
    timestamp: str


def _digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


class _Run:
    """Output bookkeeping for one command invocation."""

    def __init__(self, args, command: str):
        self.args = args
        self.command = command
        self.out_dir = Path(args.output_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.inputs: dict[str, str] = {}
        self.outputs: list[str] = []
        self.config: dict = {k: v for k, v in vars(args).items() if k != "func"}

    def add_input(self, path):
        self.inputs[str(path)] = _digest(path)

    def write_text(self, name: str, text: str):
        path = self.out_dir / name
        path.write_text(text)
        self.outputs.append(name)
        return path

    def write_table(self, stem: str, rows: list[dict], fmt: str | None = None):
        fmt = fmt or self.args.format
        if fmt == "json":
            return self.write_text(f"{stem}.json", json.dumps(rows, indent=2) + "\n")
        buf = io.StringIO()
        if rows:
            w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            w.writerows({k: _fmt(v) for k, v in r.items()} for r in rows)
        return self.write_text(f"{stem}.csv", buf.getvalue())

    def finish(self):
        config_text = json.dumps(self.config, sort_keys=True, default=str)
        manifest = RunManifest(
            command=self.command,
            config_hash=hashlib.sha256(config_text.encode()).hexdigest(),
            seed=self.args.seed,
            library_version=__version__,
            input_digests=self.inputs,
            outputs=list(self.outputs),
            timestamp=dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds"),
        )
        (self.out_dir / f"{self.command}_manifest.json").write_text(json.dumps(asdict(manifest), indent=2) + "\n")


def _fmt(v):
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return v


def _floats(text: str, what: str) -> list[float]:
    try:
        vals = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"{what}: expected comma-separated numbers, got {text!r}") from None
    if not vals:
        raise UsageError(f"{what}: empty list")
    return vals


def _read_json(path, what: str) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise UsageError(f"cannot read {what} {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{what} {path} is not valid JSON: {exc}") from None


def _env(args) -> MarketEnv:
    return MarketEnv(args.spot, args.rate, args.dividend_yield)


def _maturities(args) -> list[float]:
    if args.days:
        return [d / 365.0 for d in _floats(args.days, "--days")]
    if args.maturities:
        return _floats(args.maturities, "--maturities")
    raise UsageError("give --maturities (years) or --days")


# ---------------------------------------------------------------------------
# price / iv
# ---------------------------------------------------------------------------


def _load_model(args, run: _Run):
    if args.model == "bs":
        if args.vol is None:
            raise UsageError("--model bs needs --vol")
        return None
    if args.params is None:
        raise UsageError(f"--model {args.model} needs --params FILE")
    run.add_input(args.params)
    d = _read_json(args.params, "params file")
    try:
        return BatesParams.from_dict(d) if args.model == "bates" else SjdParams.from_dict(d)
    except (KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"invalid {args.model} parameters in {args.params}: {exc}") from None


def cmd_price(args) -> int:
    run = _Run(args, "price")
    env = _env(args)
    model = _load_model(args, run)
    strikes = np.array(_floats(args.strikes, "--strikes"))
    rows = []
    for tau in _maturities(args):
        kinds = np.where(strikes >= env.spot, CALL, PUT) if args.kind == "otm" else np.full(strikes.size, args.kind)
        if args.model == "bs":
            prices = bs_price(env, strikes, tau, args.vol, kinds)
        elif args.model == "sjd":
            prices = np.array([sjd_price(model, env, k, tau, c) for k, c in zip(strikes, kinds)])
        else:
            prices = price_european(model, env, strikes, tau, kinds)
        vols, _ = implied_vols(env, strikes, tau, kinds == CALL, np.atleast_1d(prices))
        for k, c, p, v in zip(strikes, kinds, np.atleast_1d(prices), vols):
            rows.append(
                {
                    "model": args.model,
                    "kind": str(c),
                    "strike_ccy": float(k),
                    "maturity_yrs": tau,
                    "price_ccy": float(p),
                    "implied_vol_pct": 100.0 * float(v),
                }
            )
    run.write_table("prices", rows)
    run.finish()
    return EXIT_OK


def cmd_iv(args) -> int:
    run = _Run(args, "iv")
    env = _env(args)
    strikes = _floats(args.strikes, "--strikes")
    prices = _floats(args.prices, "--prices")
    taus = _maturities(args)
    n = max(len(strikes), len(prices), len(taus))
    try:
        k, p, t = (np.broadcast_to(np.array(x), (n,)) for x in (strikes, prices, taus))
    except ValueError:
        raise UsageError("--strikes, --prices and maturities must have equal length or length 1") from None
    if args.kind == "otm":
        calls = k >= env.spot
    else:
        calls = np.full(n, args.kind == CALL)
    vols, status = implied_vols(env, k, t, calls, p)
    reasons = {0: "ok", 1: "unattainable_price", 2: "not_converged"}
    rows = [
        {
            "kind": CALL if c else PUT,
            "strike_ccy": float(a),
            "maturity_yrs": float(b),
            "price_ccy": float(c_),
            "implied_vol_pct": 100.0 * float(v),
            "status": reasons[int(s)],
        }
        for a, b, c_, c, v, s in zip(k, t, p, calls, vols, status)
    ]
    run.write_table("implied_vols", rows)
    run.finish()
    return EXIT_OK if np.all(status == 0) else EXIT_NUMERICAL


# ---------------------------------------------------------------------------
# vix / calibrate
# ---------------------------------------------------------------------------


def _load_rows(args, run: _Run):
    schema = PanelSchema()
    if args.schema:
        run.add_input(args.schema)
        try:
            schema = PanelSchema.from_dict(_read_json(args.schema, "schema file"))
        except DataError as exc:
            raise UsageError(str(exc)) from None
    run.add_input(args.quotes)
    try:
        rows, rejects = load_panel(args.quotes, schema)
    except OSError as exc:
        raise UsageError(f"cannot read quotes file {args.quotes}: {exc}") from None
    for rj in rejects:
        print(f"warning: line {rj.line}: {rj.detail}", file=sys.stderr)
    by_date: dict = {}
    for r in rows:
        by_date.setdefault(r.trade_date, []).append(r)
    return by_date, rejects


def cmd_vix(args) -> int:
    run = _Run(args, "vix")
    by_date, _ = _load_rows(args, run)
    if not by_date:
        raise UsageError(f"no parseable quotes in {args.quotes}")
    horizons = tuple(int(h) for h in _floats(args.horizons, "--horizons")) if args.horizons else None
    rows = []
    per_h: dict[int, list[float]] = {}
    for date in sorted(by_date):
        res = apply_filters(by_date[date])
        if len(res.surface) == 0:
            print(f"warning: {date}: no quotes survive the filters", file=sys.stderr)
            continue
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            pts = market_vix_points(res.surface, horizons) if horizons else market_vix_points(res.surface)
        for w in caught:
            print(f"warning: {date}: {w.message}", file=sys.stderr)
        for h, tau, v2 in pts:
            rows.append(
                {
                    "trade_date": date.isoformat(),
                    "horizon_days": h,
                    "maturity_yrs": tau,
                    "vix2_var_ann": v2,
                    "vix_vol_pct": 100.0 * math.sqrt(v2),
                }
            )
            per_h.setdefault(h, []).append(100.0 * math.sqrt(v2))
    run.write_table("vix_term_structure", rows)
    summary = []
    for h in sorted(per_h):
        v = np.array(per_h[h])
        summary.append(
            {
                "horizon_days": h,
                "n_dates": int(v.size),
                "mean_vix_vol_pct": float(v.mean()),
                "std_vix_vol_pct": float(v.std(ddof=1)) if v.size > 1 else math.nan,
                "stderr_vix_vol_pct": float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else math.nan,
            }
        )
    run.write_table("vix_summary", summary)
    run.finish()
    return EXIT_OK


def _calibration_inputs(args, run: _Run):
    """(label, surface, term structure) triples from --surface JSON or a quotes panel."""
    if args.surface:
        run.add_input(args.surface)
        d = _read_json(args.surface, "surface file")
        try:
            surface = VolSurface.from_dict(d["surface"])
            ts = VarianceTermStructure.from_dict(d["term_structure"]) if d.get("term_structure") else None
        except (KeyError, TypeError, ValueError) as exc:
            raise UsageError(f"invalid surface file {args.surface}: {exc}") from None
        return [(d.get("label", Path(args.surface).stem), surface, ts)]
    if not args.quotes:
        raise UsageError("give --quotes FILE or --surface FILE")
    by_date, _ = _load_rows(args, run)
    if args.trade_date:
        wanted = dt.date.fromisoformat(args.trade_date)
        by_date = {k: v for k, v in by_date.items() if k == wanted}
    if not by_date:
        raise UsageError("no quotes for the requested trade date(s)")
    out = []
    for date in sorted(by_date):
        res = apply_filters(by_date[date])
        save_rejects(res.rejects, run.out_dir / f"rejects_{date.isoformat()}.csv")
        run.outputs.append(f"rejects_{date.isoformat()}.csv")
        if len(res.surface) == 0:
            print(f"warning: {date}: no quotes survive the filters", file=sys.stderr)
            continue
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            ts = build_market_ts(res.surface)
        out.append((date.isoformat(), res.surface, ts))
    return out


def _calibration_config(args, run: _Run) -> CalibrationConfig:
    config = CalibrationConfig()
    if args.config:
        run.add_input(args.config)
        try:
            config = CalibrationConfig.from_dict(_read_json(args.config, "config file"))
        except (KeyError, TypeError, ValueError) as exc:
            raise UsageError(f"invalid calibration config {args.config}: {exc}") from None
    if args.seed is not None:
        config = config.replace(optimizer=type(config.optimizer)(**{**config.optimizer.to_dict(), "seed": args.seed}))
    return config


def cmd_calibrate(args) -> int:
    run = _Run(args, "calibrate")
    config = _calibration_config(args, run)
    if args.alphas:
        alphas = _floats(args.alphas, "--alphas")
    elif args.alpha is not None:
        alphas = [args.alpha]
    else:
        alphas = [config.alpha]
    bad = [a for a in alphas if not 0.0 <= a <= 1.0]
    if bad:
        raise UsageError(f"alpha must lie in [0, 1], got {bad}")
    inputs = _calibration_inputs(args, run)
    if not inputs:
        raise UsageError("nothing to calibrate")
    mae_rows = []
    for label, surface, ts in inputs:
        for alpha in alphas:
            cfg = config.replace(alpha=alpha)
            if ts is None and alpha < 1:
                raise UsageError("alpha < 1 needs a term structure")
            result = calibrate(surface, ts, cfg)
            tag = f"{label}_alpha{alpha:g}"
            doc = result.to_dict()
            doc["trade_date"] = label
            run.write_text(f"result_{tag}.json", json.dumps(doc, indent=2) + "\n")
            obj = SurfaceObjective(surface, None)
            vols, failed = obj.model_ivs(result.params)
            smile = [
                {
                    "maturity_yrs": float(t),
                    "strike_ccy": float(k),
                    "kind": CALL if c else PUT,
                    "std_moneyness": float(m),
                    "market_iv_vol_pct": 100.0 * float(mk),
                    "model_iv_vol_pct": 100.0 * float(v),
                }
                for t, k, c, mk, v, m in zip(
                    obj.flat_maturities,
                    obj.flat_strikes,
                    obj.is_call,
                    obj.market_iv,
                    vols,
                    np.concatenate([s.std_moneyness for s in surface.slices]),
                )
            ]
            run.write_table(f"smile_{tag}", smile)
            if ts is not None:
                model_ts = [bates_vix_squared(result.params, t) for t in ts.maturities]
                run.write_table(
                    f"term_structure_{tag}",
                    [
                        {
                            "maturity_yrs": t,
                            "market_var_ann": v,
                            "model_vix2_var_ann": m,
                            "market_vol_pct": 100.0 * math.sqrt(v),
                            "model_vix_vol_pct": 100.0 * math.sqrt(m),
                        }
                        for t, v, m in zip(ts.maturities, ts.levels, model_ts)
                    ],
                )
            err = np.abs(vols - obj.market_iv)
            k = np.concatenate([s.std_moneyness for s in surface.slices])
            ok = np.isfinite(err) & np.isfinite(k)
            buckets = bucket_errors(err[ok], k[ok])
            for b in BUCKETS:
                mae_rows.append(
                    {
                        "trade_date": label,
                        "alpha": alpha,
                        "bucket": b,
                        "mae_vol_pct": math.nan if buckets[b] is None else buckets[b],
                        "objective": result.objective_value,
                    }
                )
    run.write_table("mae_by_bucket", mae_rows)
    run.finish()
    return EXIT_OK


# ---------------------------------------------------------------------------
# simulate / report
# ---------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    run = _Run(args, "simulate")
    d = {}
    spec_path = args.spec or args.config
    if spec_path:
        run.add_input(spec_path)
        d = _read_json(spec_path, "simulation spec")
    if args.n_draws is not None:
        d["n_draws"] = args.n_draws
    if args.seed is not None:
        d["seed"] = args.seed
    if args.alphas:
        d["alpha_grid"] = _floats(args.alphas, "--alphas")
    modes = args.modes.split(",") if args.modes else [d.get("mode", EXACT_VIX)]
    summaries = {}
    for mode in modes:
        try:
            spec = SimulationSpec.from_dict({**d, "mode": mode})
        except (TypeError, ValueError) as exc:
            raise UsageError(f"invalid simulation spec: {exc}") from None
        if args.emit_surfaces:
            _emit_surfaces(spec, run)
        summary = run_recovery_study(spec, jobs=args.jobs)
        summaries[mode] = summary
        run.write_text(f"recovery_{mode}.json", summary.to_json() + "\n")
        run.write_text(f"recovery_{mode}.csv", summary.to_csv())
        if summary.failed_draws:
            print(f"warning: {mode}: {len(summary.failed_draws)} draws failed", file=sys.stderr)
    if EXACT_VIX in summaries and APPROX_VS in summaries:
        ex, ap = summaries[EXACT_VIX], summaries[APPROX_VS]
        rows = []
        for a in ex.alpha_grid:
            if a not in ap.alpha_grid:
                continue
            e_set, a_set = ex.recovered_draws(a), ap.recovered_draws(a)
            rows.append(
                {
                    "alpha": a,
                    "exact_vix_recovery_frac": ex.recovery_rate[a],
                    "approx_vs_recovery_frac": ap.recovery_rate[a],
                    "exact_only_draws": len(e_set - a_set),
                    "approx_only_draws": len(a_set - e_set),
                }
            )
        run.write_table("paired_recovery", rows, "csv")
    run.finish()
    return EXIT_OK


def _emit_surfaces(spec: SimulationSpec, run: _Run):
    for i in range(spec.n_draws):
        truth = draw_params(spec, i)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            surface, vix_ts, vs_ts = generate_surface(truth, spec)
        ts = vix_ts if spec.mode == EXACT_VIX else vs_ts
        doc = {"label": f"draw{i}", "params": truth.to_dict(), "surface": surface.to_dict(), "term_structure": ts.to_dict()}
        run.write_text(f"surface_{spec.mode}_draw{i}.json", json.dumps(doc) + "\n")


def moving_average(values, window: int = MA_WINDOW) -> list[float]:
    """Trailing mean over ``window`` observations; NaN until the window fills."""
    v = np.asarray(values, float)
    out = np.full(v.size, np.nan)
    if v.size >= window:
        c = np.cumsum(np.insert(v, 0, 0.0))
        out[window - 1 :] = (c[window:] - c[:-window]) / window
    return out.tolist()


def cmd_report(args) -> int:
    run = _Run(args, "report")
    root = Path(args.results_dir)
    if not root.is_dir():
        raise UsageError(f"{root} is not a directory")
    files = sorted(root.glob("*.json"))
    if not files:
        raise UsageError(f"no result files in {root}")
    tau = 1.0 / 12.0
    records = []
    for path in files:
        try:
            d = json.loads(path.read_text())
            result = CalibrationResult.from_dict(d)
        except (OSError, ValueError, KeyError, TypeError) as exc:
            print(f"warning: skipping {path.name}: {exc}", file=sys.stderr)
            continue
        run.add_input(path)
        p = result.params
        try:
            q = log_contract_multiplier(p, tau)
            spread = math.sqrt(bates_variance_swap(p, tau)) - math.sqrt(bates_vix_squared(p, tau))
        except NonPhysicalVixError as exc:
            print(f"warning: skipping {path.name}: {exc}", file=sys.stderr)
            continue
        records.append((str(d.get("trade_date", path.stem)), q, spread, p.mu_j))
    if not records:
        raise UsageError(f"no readable result files in {root}")
    records.sort(key=lambda r: r[0])
    q_ma = moving_average([r[1] for r in records])
    s_ma = moving_average([r[2] for r in records])
    rows = [
        {
            "trade_date": date,
            "multiplier_q_ratio": q,
            "spread_vol_pct": 100.0 * s,
            "mu_j_frac": mu,
            "multiplier_q_ratio_ma21": qm,
            "spread_vol_pct_ma21": 100.0 * sm,
        }
        for (date, q, s, mu), qm, sm in zip(records, q_ma, s_ma)
    ]
    run.write_table("multiplier_spread", rows)
    run.finish()
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    # subcommands repeat the global flags with suppressed defaults so a flag
    # given before the subcommand is not overwritten
    def default(value):
        return argparse.SUPPRESS if suppress else value

    g = argparse.ArgumentParser(add_help=False)
    g.add_argument("--config", default=default(None), help="JSON config file")
    g.add_argument("--seed", type=int, default=default(None))
    g.add_argument("--jobs", type=int, default=default(1), help="worker processes")
    g.add_argument("--output-dir", default=default("."), help="directory for outputs and the manifest")
    g.add_argument("--format", choices=("csv", "json"), default=default("csv"))
    return g


def _market_flags(p):
    p.add_argument("--spot", type=float, default=100.0)
    p.add_argument("--rate", type=float, default=0.0)
    p.add_argument("--dividend-yield", type=float, default=0.0)
    p.add_argument("--maturities", help="comma-separated maturities in years")
    p.add_argument("--days", help="comma-separated maturities in days (ACT/365)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="jointcal", description=__doc__.splitlines()[0], parents=[_global_flags(False)]
    )
    g = _global_flags(True)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("price", parents=[g], help="price options under bs, sjd or bates")
    p.add_argument("--model", choices=("bs", "sjd", "bates"), required=True)
    p.add_argument("--params", help="JSON parameter file (sjd or bates)")
    p.add_argument("--vol", type=float, help="Black-Scholes vol (decimal)")
    p.add_argument("--strikes", required=True)
    p.add_argument("--kind", choices=(CALL, PUT, "otm"), default="otm")
    _market_flags(p)
    p.set_defaults(func=cmd_price)

    p = sub.add_parser("iv", parents=[g], help="Black-Scholes implied vols of option prices")
    p.add_argument("--strikes", required=True)
    p.add_argument("--prices", required=True)
    p.add_argument("--kind", choices=(CALL, PUT, "otm"), default="otm")
    _market_flags(p)
    p.set_defaults(func=cmd_iv)

    p = sub.add_parser("vix", parents=[g], help="replicated VIX term structure from a quote panel")
    p.add_argument("--quotes", required=True)
    p.add_argument("--schema", help="JSON column-mapping file")
    p.add_argument("--horizons", help="comma-separated horizons in days")
    p.set_defaults(func=cmd_vix)

    p = sub.add_parser("calibrate", parents=[g], help="calibrate Bates to a surface and VIX curve")
    p.add_argument("--quotes", help="quote panel CSV")
    p.add_argument("--schema", help="JSON column-mapping file")
    p.add_argument("--surface", help="JSON with 'surface' and 'term_structure'")
    p.add_argument("--trade-date", help="calibrate only this date (YYYY-MM-DD)")
    p.add_argument("--alpha", type=float)
    p.add_argument("--alphas", help="comma-separated alpha sweep")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("simulate", parents=[g], help="synthetic recovery study")
    p.add_argument("--spec", help="simulation spec JSON (defaults to --config)")
    p.add_argument("--n-draws", type=int)
    p.add_argument("--alphas", help="comma-separated alpha grid")
    p.add_argument("--modes", help="exact_vix, approx_vs or both comma-separated")
    p.add_argument("--emit-surfaces", action="store_true", help="also write each draw's surface JSON")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("report", parents=[g], help="multiplier and VS-VIX spread series")
    p.add_argument("--results-dir", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INVALID if exc.code else EXIT_OK
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (CalibrationError, ImpliedVolError, NonPhysicalVixError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DataError, PricingError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
