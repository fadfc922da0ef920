"""IV-surface SSE, term-structure penalties and the alpha-weighted joint objective.

    total = alpha * sum_ij w_ij (sigma_mod - sigma_mkt)^2
          + (1 - alpha) * sum_j w^v_j (sqrt(V_mod(tau_j)) - sqrt(V_mkt(tau_j)))^2

Model implied vols come from inverting COS prices.  A contract whose model
price cannot be inverted contributes ``SIGMA_CAP**2`` to the SSE.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .pricing import DEFAULT_SETTINGS, PricerSettings, cos_put_prices, implied_vols
from .types import (
    VARIANCE_SWAP,
    VIX_SQUARED,
    BatesParams,
    CalibrationConfig,
    VarianceTermStructure,
    VolSurface,
)
from .variance import bates_variance_swap, bates_vix_squared

SIGMA_CAP = 5.0
APPROX_VS = "approx_vs"


@dataclass(frozen=True)
class ObjectiveBreakdown:
    alpha: float
    iv_sse: float
    ts_penalty: float
    total: float
    maturities: tuple[float, ...]
    iv_sse_by_maturity: tuple[float, ...]
    ts_maturities: tuple[float, ...]
    ts_penalty_by_maturity: tuple[float, ...]
    iv_failures: int = 0


def model_term_structure(params: BatesParams, maturities, kind: str) -> np.ndarray:
    """Model variance levels of the given kind (``approx_vs`` uses VIX^2)."""
    tau = np.asarray(maturities, float)
    if kind == VARIANCE_SWAP:
        return np.asarray(bates_variance_swap(params, tau), float)
    if kind in (VIX_SQUARED, APPROX_VS):
        return np.asarray(bates_vix_squared(params, tau), float)
    raise ValueError(f"unknown term-structure kind {kind!r}")


def _ts_terms(params, observed: VarianceTermStructure, weights, model_kind) -> np.ndarray:
    w = _as_weights(weights, len(observed.maturities), "term-structure weights")
    model = model_term_structure(params, observed.maturities, model_kind)
    return w * (np.sqrt(model) - observed.vols()) ** 2


def ts_penalty(params: BatesParams, observed: VarianceTermStructure, weights=None) -> float:
    """sum_j w^v_j (sqrt(V_mod) - sqrt(V_mkt))^2, model curve of the observed kind."""
    return float(np.sum(_ts_terms(params, observed, weights, observed.kind)))


def approx_vs_penalty(params: BatesParams, observed_vs: VarianceTermStructure, weights=None) -> float:
    """Model VIX^2 held against observed variance-swap rates."""
    if observed_vs.kind != VARIANCE_SWAP:
        raise ValueError(f"approx_vs_penalty needs a variance_swap term structure, got {observed_vs.kind!r}")
    return float(np.sum(_ts_terms(params, observed_vs, weights, APPROX_VS)))


def _as_weights(weights, n: int, what: str) -> np.ndarray:
    if weights is None:
        return np.ones(n)
    w = np.broadcast_to(np.asarray(weights, float), (n,)).copy()
    if np.any(~np.isfinite(w)) or np.any(w < 0):
        raise ValueError(f"{what} must be finite and >= 0")
    return w


class SurfaceObjective:
    """Joint objective bound to one surface and term structure.

    Holds the flattened quote arrays so repeated evaluations during a
    calibration only pay for pricing and inversion.
    """

    def __init__(
        self,
        surface: VolSurface,
        observed_ts: VarianceTermStructure | None,
        alpha: float = 1.0,
        contract_weights=None,
        ts_weights=None,
        ts_kind: str | None = None,
        settings: PricerSettings | None = None,
    ):
        if len(surface) == 0:
            raise ValueError("surface has no quotes")
        if not 0.0 <= alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
        self.surface = surface
        self.env = surface.env
        self.alpha = float(alpha)
        self.settings = settings or DEFAULT_SETTINGS
        slices = surface.slices
        self.maturities = surface.maturities
        self.strikes = [tuple(s.strikes.tolist()) for s in slices]
        self.is_call = np.concatenate([s.is_call for s in slices])
        self.market_iv = np.concatenate([s.ivs for s in slices])
        if np.any(~np.isfinite(self.market_iv)):
            raise ValueError("every surface quote needs a finite implied vol")
        self.flat_strikes = np.concatenate([s.strikes for s in slices])
        self.flat_maturities = np.concatenate([np.full(s.size, s.maturity) for s in slices])
        self.bounds = np.cumsum([0] + [s.size for s in slices])
        if isinstance(contract_weights, str):
            contract_weights = None if contract_weights == "equal" else contract_weights
        self.weights = _as_weights(contract_weights, len(surface), "contract weights")

        self.observed_ts = observed_ts
        if observed_ts is None:
            self.ts_kind = None
            self.ts_weights = np.zeros(0)
        else:
            self.ts_kind = ts_kind or observed_ts.kind
            if self.ts_kind == APPROX_VS and observed_ts.kind != VARIANCE_SWAP:
                raise ValueError("approx_vs penalty needs an observed variance_swap term structure")
            if self.ts_kind != APPROX_VS and self.ts_kind != observed_ts.kind:
                raise ValueError(f"ts_kind {self.ts_kind!r} does not match observed kind {observed_ts.kind!r}")
            self.ts_weights = self._resolve_ts_weights(ts_weights, observed_ts)
            self.market_ts_vol = observed_ts.vols()
        self._sqrt_w = np.sqrt(self.weights)
        self._sqrt_wv = np.sqrt(self.ts_weights)

    def _resolve_ts_weights(self, rule, observed) -> np.ndarray:
        n = len(observed.maturities)
        if rule is None or (isinstance(rule, str) and rule == "n_quotes"):
            # N(tau_j): quote count at the surface maturity nearest tau_j
            mats = np.asarray(self.maturities)
            counts = self.surface.counts()
            return np.array([counts[np.argmin(np.abs(mats - t))] for t in observed.maturities])
        if isinstance(rule, str) and rule == "equal":
            return np.ones(n)
        return _as_weights(rule, n, "term-structure weights")

    @classmethod
    def from_config(cls, surface, observed_ts, config: CalibrationConfig, settings=None):
        return cls(
            surface,
            observed_ts,
            alpha=config.alpha,
            contract_weights=config.contract_weights,
            ts_weights=config.ts_weights,
            ts_kind=config.ts_kind,
            settings=settings,
        )

    def model_prices(self, params: BatesParams) -> np.ndarray:
        out = np.empty(self.flat_strikes.size)
        env = self.env
        for j, tau in enumerate(self.maturities):
            lo, hi = self.bounds[j], self.bounds[j + 1]
            puts = cos_put_prices(params, env, self.strikes[j], tau, self.settings)
            calls = puts + math.exp(-env.rate * tau) * (float(env.forward(tau)) - self.flat_strikes[lo:hi])
            out[lo:hi] = np.where(self.is_call[lo:hi], calls, puts)
        return out

    def model_ivs(self, params: BatesParams) -> tuple[np.ndarray, np.ndarray]:
        """Model implied vols (NaN where inversion fails) and the failure mask."""
        prices = self.model_prices(params)
        vols, status = implied_vols(
            self.env, self.flat_strikes, self.flat_maturities, self.is_call, prices, guess=self.market_iv
        )
        return vols, status != 0

    def iv_errors(self, params: BatesParams) -> tuple[np.ndarray, np.ndarray]:
        """sigma_mod - sigma_mkt per quote, ``SIGMA_CAP`` where inversion fails."""
        vols, failed = self.model_ivs(params)
        err = np.where(failed, SIGMA_CAP, vols - self.market_iv)
        return err, failed

    def ts_errors(self, params: BatesParams) -> np.ndarray:
        if self.observed_ts is None:
            return np.zeros(0)
        model = model_term_structure(params, self.observed_ts.maturities, self.ts_kind)
        return np.sqrt(model) - self.market_ts_vol

    def residuals(self, params: BatesParams) -> np.ndarray:
        """Vector r with sum(r**2) equal to the total objective."""
        parts = []
        if self.alpha > 0:
            err, _ = self.iv_errors(params)
            parts.append(math.sqrt(self.alpha) * self._sqrt_w * err)
        if self.alpha < 1 and self.observed_ts is not None:
            parts.append(math.sqrt(1.0 - self.alpha) * self._sqrt_wv * self.ts_errors(params))
        return np.concatenate(parts) if parts else np.zeros(0)

    def value(self, params: BatesParams) -> float:
        r = self.residuals(params)
        return float(r @ r)

    def breakdown(self, params: BatesParams) -> ObjectiveBreakdown:
        err, failed = self.iv_errors(params)
        sq = self.weights * err * err
        by_mat = tuple(float(np.sum(sq[self.bounds[j] : self.bounds[j + 1]])) for j in range(len(self.maturities)))
        iv_sse = float(sum(by_mat))
        if self.observed_ts is None:
            ts_by, ts_mats = (), ()
        else:
            e = self.ts_errors(params)
            ts_by = tuple((self.ts_weights * e * e).tolist())
            ts_mats = self.observed_ts.maturities
        ts_pen = float(sum(ts_by))
        return ObjectiveBreakdown(
            alpha=self.alpha,
            iv_sse=iv_sse,
            ts_penalty=ts_pen,
            total=self.alpha * iv_sse + (1.0 - self.alpha) * ts_pen,
            maturities=self.maturities,
            iv_sse_by_maturity=by_mat,
            ts_maturities=ts_mats,
            ts_penalty_by_maturity=ts_by,
            iv_failures=int(failed.sum()),
        )


def sse_iv(params: BatesParams, surface: VolSurface, weights=None, settings: PricerSettings | None = None) -> float:
    """sum_ij w_ij (sigma_mod - sigma_mkt)^2 over every quote of the surface."""
    return SurfaceObjective(surface, None, 1.0, contract_weights=weights, settings=settings).breakdown(params).iv_sse


def joint_objective(
    params: BatesParams,
    surface: VolSurface,
    observed_ts: VarianceTermStructure,
    config: CalibrationConfig,
    settings: PricerSettings | None = None,
) -> ObjectiveBreakdown:
    return SurfaceObjective.from_config(surface, observed_ts, config, settings).breakdown(params)
