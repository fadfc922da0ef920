"""Domain types shared by pricing, variance, objective, calibration and I/O.

All types are frozen dataclasses.  Variance levels are annualized variance
(decimal squared); maturities are year fractions (ACT/365).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

import numpy as np

DAYS_PER_YEAR = 365.0

CALL = "call"
PUT = "put"
VIX_SQUARED = "vix_squared"
VARIANCE_SWAP = "variance_swap"

# order of the 8-dimensional Bates parameter vector
BATES_FIELDS = ("v0", "kappa", "theta", "sigma_v", "rho", "lambda", "mu_j", "sigma_j")


def year_fraction(days: float) -> float:
    """ACT/365 year fraction for a day count."""
    return float(days) / DAYS_PER_YEAR


def _finite(name: str, value: float) -> float:
    value = float(value)
    if not math.isfinite(value):
        raise ValueError(f"{name} must be finite, got {value!r}")
    return value


def _check_kind(kind: str) -> str:
    if kind not in (CALL, PUT):
        raise ValueError(f"option kind must be 'call' or 'put', got {kind!r}")
    return kind


@dataclass(frozen=True)
class MarketEnv:
    spot: float
    rate: float = 0.0
    dividend_yield: float = 0.0

    def __post_init__(self):
        spot = _finite("spot", self.spot)
        if spot <= 0:
            raise ValueError(f"spot must be > 0, got {spot}")
        object.__setattr__(self, "spot", spot)
        object.__setattr__(self, "rate", _finite("rate", self.rate))
        object.__setattr__(self, "dividend_yield", _finite("dividend_yield", self.dividend_yield))

    def forward(self, maturity):
        return self.spot * np.exp((self.rate - self.dividend_yield) * np.asarray(maturity, dtype=float))

    def discount(self, maturity):
        return np.exp(-self.rate * np.asarray(maturity, dtype=float))

    def to_dict(self) -> dict:
        return {"spot": self.spot, "rate": self.rate, "dividend_yield": self.dividend_yield}

    @classmethod
    def from_dict(cls, d: dict) -> "MarketEnv":
        return cls(spot=d["spot"], rate=d.get("rate", 0.0), dividend_yield=d.get("dividend_yield", 0.0))


@dataclass(frozen=True)
class BatesParams:
    """Bates parameter vector (V0, kappa, theta, sigma_v, rho, lambda, mu_J, sigma_J).

    ``mu_j`` is the mean relative jump E[e^J - 1]; log-jumps are normal with
    mean log(1 + mu_j) - sigma_j**2 / 2 and variance sigma_j**2.
    """

    v0: float
    kappa: float
    theta: float
    sigma_v: float
    rho: float
    lam: float
    mu_j: float
    sigma_j: float

    def __post_init__(self):
        for name in ("v0", "kappa", "theta", "sigma_v", "rho", "lam", "mu_j", "sigma_j"):
            object.__setattr__(self, name, _finite(name, getattr(self, name)))
        problems = []
        for name in ("v0", "kappa", "theta", "sigma_v"):
            if getattr(self, name) <= 0:
                problems.append(f"{name} must be > 0 (got {getattr(self, name)})")
        if not -1.0 <= self.rho <= 1.0:
            problems.append(f"rho must lie in [-1, 1] (got {self.rho})")
        if self.lam < 0:
            problems.append(f"lambda must be >= 0 (got {self.lam})")
        if self.sigma_j < 0:
            problems.append(f"sigma_j must be >= 0 (got {self.sigma_j})")
        if self.mu_j <= -1:
            problems.append(f"mu_j must be > -1 (got {self.mu_j})")
        if problems:
            raise ValueError("invalid BatesParams: " + "; ".join(problems))

    @property
    def jump_mean(self) -> float:
        """Mean of the log-jump size."""
        return math.log1p(self.mu_j) - 0.5 * self.sigma_j**2

    def to_array(self) -> np.ndarray:
        return np.array(
            [self.v0, self.kappa, self.theta, self.sigma_v, self.rho, self.lam, self.mu_j, self.sigma_j]
        )

    @classmethod
    def from_array(cls, x: Sequence[float]) -> "BatesParams":
        x = [float(v) for v in x]
        if len(x) != 8:
            raise ValueError(f"expected 8 parameters, got {len(x)}")
        return cls(*x)

    def to_dict(self) -> dict:
        return dict(zip(BATES_FIELDS, self.to_array().tolist()))

    @classmethod
    def from_dict(cls, d: dict) -> "BatesParams":
        missing = [k for k in BATES_FIELDS if k not in d]
        if missing:
            raise ValueError(f"missing Bates parameters: {missing}")
        return cls.from_array([d[k] for k in BATES_FIELDS])

    def replace(self, **changes) -> "BatesParams":
        d = self.to_dict()
        if "lam" in changes:
            changes["lambda"] = changes.pop("lam")
        d.update(changes)
        return BatesParams.from_dict(d)


# Table of initial parameters used as the starting point of the simulation study.
THETA_0 = BatesParams(v0=0.0576, kappa=2.03, theta=0.04, sigma_v=0.38, rho=-0.7, lam=0.59, mu_j=-0.05, sigma_j=0.07)


@dataclass(frozen=True)
class SjdParams:
    """Simple jump diffusion: constant vol ``sigma`` plus fixed log-jumps of size ``jump``."""

    sigma: float
    lam: float
    jump: float

    def __post_init__(self):
        for name in ("sigma", "lam", "jump"):
            object.__setattr__(self, name, _finite(name, getattr(self, name)))
        if self.sigma <= 0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")

    def to_dict(self) -> dict:
        return {"sigma": self.sigma, "lambda": self.lam, "jump": self.jump}

    @classmethod
    def from_dict(cls, d: dict) -> "SjdParams":
        return cls(sigma=d["sigma"], lam=d["lambda"], jump=d["jump"])


@dataclass(frozen=True)
class OptionQuote:
    strike: float
    maturity: float
    kind: str
    mid: float
    bid: float | None = None
    ask: float | None = None
    forward: float | None = None
    std_moneyness: float | None = None
    implied_vol: float | None = None

    def __post_init__(self):
        _check_kind(self.kind)
        if _finite("strike", self.strike) <= 0:
            raise ValueError(f"strike must be > 0, got {self.strike}")
        if _finite("maturity", self.maturity) <= 0:
            raise ValueError(f"maturity must be > 0, got {self.maturity}")
        _finite("mid", self.mid)
        if self.bid is not None and self.ask is not None:
            if self.bid > self.ask:
                raise ValueError(f"bid {self.bid} exceeds ask {self.ask}")
            if not math.isclose(self.mid, 0.5 * (self.bid + self.ask), rel_tol=1e-12, abs_tol=1e-12):
                raise ValueError("mid must equal (bid + ask) / 2 when both are quoted")

    @classmethod
    def from_bid_ask(cls, strike, maturity, kind, bid, ask, **kw) -> "OptionQuote":
        return cls(strike=strike, maturity=maturity, kind=kind, mid=0.5 * (bid + ask), bid=bid, ask=ask, **kw)

    @property
    def is_call(self) -> bool:
        return self.kind == CALL

    def to_dict(self) -> dict:
        return {
            "strike": self.strike,
            "maturity": self.maturity,
            "kind": self.kind,
            "bid": self.bid,
            "ask": self.ask,
            "mid": self.mid,
            "forward": self.forward,
            "std_moneyness": self.std_moneyness,
            "implied_vol": self.implied_vol,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "OptionQuote":
        return cls(
            strike=d["strike"],
            maturity=d["maturity"],
            kind=d["kind"],
            mid=d["mid"],
            bid=d.get("bid"),
            ask=d.get("ask"),
            forward=d.get("forward"),
            std_moneyness=d.get("std_moneyness"),
            implied_vol=d.get("implied_vol"),
        )


@dataclass(frozen=True)
class SurfaceSlice:
    """Quotes of one maturity as arrays (the form the pricers consume)."""

    maturity: float
    strikes: np.ndarray
    is_call: np.ndarray
    mids: np.ndarray
    ivs: np.ndarray
    std_moneyness: np.ndarray

    @property
    def size(self) -> int:
        return int(self.strikes.size)


@dataclass(frozen=True)
class VolSurface:
    """Option quotes grouped by maturity; quotes carry implied vols."""

    env: MarketEnv
    quotes: tuple[OptionQuote, ...]
    maturities: tuple[float, ...] = field(init=False)
    slices: tuple[SurfaceSlice, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        ordered = tuple(sorted(self.quotes, key=lambda q: (q.maturity, q.strike, q.kind)))
        object.__setattr__(self, "quotes", ordered)
        maturities = tuple(sorted({q.maturity for q in ordered}))
        object.__setattr__(self, "maturities", maturities)
        slices = []
        for tau in maturities:
            group = [q for q in ordered if q.maturity == tau]
            slices.append(
                SurfaceSlice(
                    maturity=tau,
                    strikes=np.array([q.strike for q in group]),
                    is_call=np.array([q.is_call for q in group]),
                    mids=np.array([q.mid for q in group]),
                    ivs=np.array([np.nan if q.implied_vol is None else q.implied_vol for q in group]),
                    std_moneyness=np.array(
                        [np.nan if q.std_moneyness is None else q.std_moneyness for q in group]
                    ),
                )
            )
        object.__setattr__(self, "slices", tuple(slices))

    def __len__(self) -> int:
        return len(self.quotes)

    def counts(self) -> np.ndarray:
        """N(tau_j): number of quotes per maturity."""
        return np.array([s.size for s in self.slices], dtype=float)

    def slice(self, maturity: float) -> SurfaceSlice:
        return self.slices[self.maturities.index(maturity)]

    def to_dict(self) -> dict:
        return {
            "env": self.env.to_dict(),
            "maturities": list(self.maturities),
            "quotes": [[q.to_dict() for q in self.quotes if q.maturity == tau] for tau in self.maturities],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VolSurface":
        groups = d["quotes"]
        flat = [q for group in groups for q in group] if groups and isinstance(groups[0], list) else groups
        return cls(env=MarketEnv.from_dict(d["env"]), quotes=tuple(OptionQuote.from_dict(q) for q in flat))


@dataclass(frozen=True)
class VarianceTermStructure:
    kind: str
    maturities: tuple[float, ...]
    levels: tuple[float, ...]

    def __post_init__(self):
        if self.kind not in (VIX_SQUARED, VARIANCE_SWAP):
            raise ValueError(f"kind must be {VIX_SQUARED!r} or {VARIANCE_SWAP!r}, got {self.kind!r}")
        mats = tuple(float(t) for t in self.maturities)
        levels = tuple(float(v) for v in self.levels)
        if len(mats) != len(levels):
            raise ValueError("maturities and levels differ in length")
        if any(b <= a for a, b in zip(mats, mats[1:])):
            raise ValueError("maturities must be strictly increasing")
        if any(not math.isfinite(v) or v < 0 for v in levels):
            raise ValueError("variance levels must be finite and >= 0")
        object.__setattr__(self, "maturities", mats)
        object.__setattr__(self, "levels", levels)

    @classmethod
    def from_points(cls, kind: str, points: Iterable[tuple[float, float]]) -> "VarianceTermStructure":
        pts = sorted(points)
        return cls(kind, tuple(p[0] for p in pts), tuple(p[1] for p in pts))

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.maturities, self.levels))

    def vols(self) -> np.ndarray:
        return np.sqrt(np.array(self.levels))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "points": [list(p) for p in self.points]}

    @classmethod
    def from_dict(cls, d: dict) -> "VarianceTermStructure":
        return cls.from_points(d["kind"], [tuple(p) for p in d["points"]])


@dataclass(frozen=True)
class ParamBounds:
    lower: BatesParams
    upper: BatesParams

    def __post_init__(self):
        lo, hi = self.lower.to_array(), self.upper.to_array()
        bad = [n for n, a, b in zip(BATES_FIELDS, lo, hi) if not a < b]
        if bad:
            raise ValueError(f"bounds need lower < upper for: {bad}")

    def contains(self, params: BatesParams) -> bool:
        x = params.to_array()
        return bool(np.all(x >= self.lower.to_array()) and np.all(x <= self.upper.to_array()))

    def to_dict(self) -> dict:
        return {"lower": self.lower.to_dict(), "upper": self.upper.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "ParamBounds":
        return cls(BatesParams.from_dict(d["lower"]), BatesParams.from_dict(d["upper"]))


# Wide enough to hold every simulation draw; lambda and sigma_j stay off zero
# because the search runs on log scales.
DEFAULT_BOUNDS = ParamBounds(
    lower=BatesParams(v0=1e-4, kappa=1e-2, theta=1e-4, sigma_v=1e-2, rho=-1.0, lam=1e-6, mu_j=-0.5, sigma_j=1e-6),
    upper=BatesParams(v0=1.0, kappa=30.0, theta=1.0, sigma_v=3.0, rho=1.0, lam=20.0, mu_j=0.5, sigma_j=0.5),
)


@dataclass(frozen=True)
class OptimizerSettings:
    method: str = "least-squares"
    tolerance: float = 1e-10
    xtol: float = 1e-8
    max_evaluations: int = 4000
    restarts: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.method not in ("nelder-mead", "least-squares", "hybrid"):
            raise ValueError(f"unknown optimizer method {self.method!r}")
        if self.max_evaluations < 1 or self.restarts < 0:
            raise ValueError("max_evaluations must be >= 1 and restarts >= 0")

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "tolerance": self.tolerance,
            "xtol": self.xtol,
            "max_evaluations": self.max_evaluations,
            "restarts": self.restarts,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "OptimizerSettings":
        return cls(**d)


@dataclass(frozen=True)
class CalibrationConfig:
    """Everything that defines one calibration run.

    ``contract_weights`` is ``"equal"`` or an explicit sequence (one weight per
    quote in surface order); ``ts_weights`` is ``"n_quotes"`` (N(tau_j)),
    ``"equal"`` or an explicit sequence.  ``ts_kind`` selects which model
    curve is compared against the observed term structure: ``"vix_squared"``,
    ``"variance_swap"`` or ``"approx_vs"`` (model VIX^2 against observed
    variance-swap rates).
    """

    alpha: float = 0.9
    contract_weights: str | tuple[float, ...] = "equal"
    ts_weights: str | tuple[float, ...] = "n_quotes"
    bounds: ParamBounds = DEFAULT_BOUNDS
    initial_guess: BatesParams = THETA_0
    optimizer: OptimizerSettings = OptimizerSettings()
    ts_kind: str = VIX_SQUARED

    def __post_init__(self):
        alpha = _finite("alpha", self.alpha)
        if not 0.0 <= alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
        if self.ts_kind not in (VIX_SQUARED, VARIANCE_SWAP, "approx_vs"):
            raise ValueError(f"unknown ts_kind {self.ts_kind!r}")
        for name in ("contract_weights", "ts_weights"):
            w = getattr(self, name)
            if isinstance(w, str):
                allowed = ("equal",) if name == "contract_weights" else ("equal", "n_quotes")
                if w not in allowed:
                    raise ValueError(f"{name} rule must be one of {allowed}, got {w!r}")
            else:
                w = tuple(float(v) for v in w)
                if any(not math.isfinite(v) or v < 0 for v in w):
                    raise ValueError(f"{name} must be finite and >= 0")
                object.__setattr__(self, name, w)
        if not self.bounds.contains(self.initial_guess):
            raise ValueError("initial_guess lies outside the parameter bounds")

    def replace(self, **changes) -> "CalibrationConfig":
        d = {
            "alpha": self.alpha,
            "contract_weights": self.contract_weights,
            "ts_weights": self.ts_weights,
            "bounds": self.bounds,
            "initial_guess": self.initial_guess,
            "optimizer": self.optimizer,
            "ts_kind": self.ts_kind,
        }
        d.update(changes)
        return CalibrationConfig(**d)

    def to_dict(self) -> dict:
        def weights(w):
            return w if isinstance(w, str) else list(w)

        return {
            "alpha": self.alpha,
            "contract_weights": weights(self.contract_weights),
            "ts_weights": weights(self.ts_weights),
            "bounds": self.bounds.to_dict(),
            "initial_guess": self.initial_guess.to_dict(),
            "optimizer": self.optimizer.to_dict(),
            "ts_kind": self.ts_kind,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CalibrationConfig":
        known = {"alpha", "contract_weights", "ts_weights", "bounds", "initial_guess", "optimizer", "ts_kind", "seed"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown calibration config keys: {sorted(unknown)}")
        kw: dict[str, Any] = {}
        if "alpha" in d:
            kw["alpha"] = d["alpha"]
        for name in ("contract_weights", "ts_weights"):
            if name in d:
                kw[name] = d[name] if isinstance(d[name], str) else tuple(d[name])
        if "bounds" in d:
            kw["bounds"] = ParamBounds.from_dict(d["bounds"])
        if "initial_guess" in d:
            kw["initial_guess"] = BatesParams.from_dict(d["initial_guess"])
        opt = dict(d.get("optimizer", {}))
        if "seed" in d:
            opt.setdefault("seed", d["seed"])
        if opt:
            kw["optimizer"] = OptimizerSettings.from_dict(opt)
        if "ts_kind" in d:
            kw["ts_kind"] = d["ts_kind"]
        return cls(**kw)


@dataclass(frozen=True)
class CalibrationResult:
    params: BatesParams
    alpha: float
    objective_value: float
    iv_sse: float
    ts_penalty: float
    iv_mae_by_maturity: tuple[float, ...]
    ts_error_by_maturity: tuple[float, ...]
    maturities: tuple[float, ...]
    converged: bool
    evaluations: int
    iv_failures: int = 0
    message: str = ""

    def to_dict(self) -> dict:
        return {
            "params": self.params.to_dict(),
            "alpha": self.alpha,
            "objective_value": self.objective_value,
            "iv_sse": self.iv_sse,
            "ts_penalty": self.ts_penalty,
            "maturities": list(self.maturities),
            "iv_mae_by_maturity": list(self.iv_mae_by_maturity),
            "ts_error_by_maturity": list(self.ts_error_by_maturity),
            "converged": self.converged,
            "evaluations": self.evaluations,
            "iv_failures": self.iv_failures,
            "message": self.message,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CalibrationResult":
        return cls(
            params=BatesParams.from_dict(d["params"]),
            alpha=d["alpha"],
            objective_value=d["objective_value"],
            iv_sse=d["iv_sse"],
            ts_penalty=d["ts_penalty"],
            iv_mae_by_maturity=tuple(d["iv_mae_by_maturity"]),
            ts_error_by_maturity=tuple(d["ts_error_by_maturity"]),
            maturities=tuple(d["maturities"]),
            converged=d["converged"],
            evaluations=d["evaluations"],
            iv_failures=d.get("iv_failures", 0),
            message=d.get("message", ""),
        )


def to_json(obj, **kw) -> str:
    return json.dumps(obj.to_dict(), **kw)


def from_json(cls, text: str):
    return cls.from_dict(json.loads(text))
