"""European option prices and Black-Scholes implied volatilities.

Three price models live here: Black-Scholes, the simple jump diffusion
(fixed log-jump size, priced as a Poisson mixture of Black-Scholes prices)
and Bates, priced by a Fourier-cosine (COS) expansion of the log-return
density recovered from its characteristic function.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import ndtr
from scipy.stats import poisson

from .types import CALL, PUT, BatesParams, MarketEnv, SjdParams
from .variance import bates_variance_swap

IV_LOWER = 1e-4
IV_UPPER = 5.0
_IV_LOWER_WIDE = 1e-6
_IV_UPPER_WIDE = 10.0
_SQRT_2PI = math.sqrt(2.0 * math.pi)


class PricingError(ValueError):
    pass


class ImpliedVolError(PricingError):
    """Implied-vol inversion failed to converge."""


class UnattainablePriceError(ImpliedVolError):
    """Price lies outside the static no-arbitrage band."""


class TruncationWarning(RuntimeWarning):
    """COS truncation looks too tight (forward not reproduced)."""


@dataclass(frozen=True)
class PricerSettings:
    fourier_grid_size: int = 512
    truncation_width: float = 16.0
    quadrature: str = "cos"
    parity_tolerance: float = 1e-8

    def __post_init__(self):
        n = self.fourier_grid_size
        if n < 64 or n & (n - 1):
            raise ValueError(f"fourier_grid_size must be a power of two >= 64, got {n}")
        if not self.truncation_width >= 6:
            raise ValueError(f"truncation_width must be >= 6, got {self.truncation_width}")
        if self.quadrature != "cos":
            raise ValueError(f"unsupported quadrature scheme {self.quadrature!r}")


DEFAULT_SETTINGS = PricerSettings()


def _is_call_mask(kind, shape) -> np.ndarray:
    if isinstance(kind, str):
        if kind not in (CALL, PUT):
            raise ValueError(f"option kind must be 'call' or 'put', got {kind!r}")
        return np.full(shape, kind == CALL)
    kind = np.asarray(kind)
    if kind.dtype == bool:
        return np.broadcast_to(kind, shape)
    bad = set(np.unique(kind)) - {CALL, PUT}
    if bad:
        raise ValueError(f"option kind must be 'call' or 'put', got {sorted(bad)}")
    return np.broadcast_to(kind == CALL, shape)


def _require_finite(**arrays):
    for name, a in arrays.items():
        if not np.all(np.isfinite(a)):
            raise ValueError(f"{name} must be finite")


def _scalar_or_array(x):
    return float(x) if np.ndim(x) == 0 else x


# ---------------------------------------------------------------------------
# Black-Scholes
# ---------------------------------------------------------------------------


def black(forward, strike, total_sd, discount, is_call):
    """Black price from forward, strike and total standard deviation sigma*sqrt(tau)."""
    forward, strike, total_sd = np.broadcast_arrays(
        np.asarray(forward, float), np.asarray(strike, float), np.asarray(total_sd, float)
    )
    with np.errstate(divide="ignore", invalid="ignore"):
        d1 = np.log(forward / strike) / total_sd + 0.5 * total_sd
    d2 = d1 - total_sd
    call = forward * ndtr(d1) - strike * ndtr(d2)
    put = strike * ndtr(-d2) - forward * ndtr(-d1)
    return discount * np.where(is_call, call, put)


def bs_price(env: MarketEnv, strike, maturity, vol, kind=CALL):
    """Black-Scholes price with continuous rate and dividend yield."""
    strike, maturity, vol = (np.asarray(a, float) for a in (strike, maturity, vol))
    _require_finite(strike=strike, maturity=maturity, vol=vol)
    if np.any(strike <= 0) or np.any(maturity <= 0) or np.any(vol <= 0):
        raise ValueError("strike, maturity and vol must be > 0")
    shape = np.broadcast_shapes(strike.shape, maturity.shape, vol.shape)
    is_call = _is_call_mask(kind, shape)
    out = black(env.forward(maturity), strike, vol * np.sqrt(maturity), env.discount(maturity), is_call)
    return _scalar_or_array(out)


def bs_vega(env: MarketEnv, strike, maturity, vol):
    strike, maturity, vol = (np.asarray(a, float) for a in (strike, maturity, vol))
    forward = env.forward(maturity)
    sd = vol * np.sqrt(maturity)
    d1 = np.log(forward / strike) / sd + 0.5 * sd
    out = env.discount(maturity) * forward * np.exp(-0.5 * d1 * d1) / _SQRT_2PI * np.sqrt(maturity)
    return _scalar_or_array(out)


# ---------------------------------------------------------------------------
# Implied volatility
# ---------------------------------------------------------------------------

# status codes returned by implied_vols
IV_OK, IV_UNATTAINABLE, IV_NOT_CONVERGED = 0, 1, 2


def _otm_value(forward, strike, sd):
    """Undiscounted out-of-the-money Black value (call above the forward) and its vega in sd."""
    d1 = np.log(forward / strike) / sd + 0.5 * sd
    d2 = d1 - sd
    otm_call = strike >= forward
    value = np.where(otm_call, forward * ndtr(d1) - strike * ndtr(d2), strike * ndtr(-d2) - forward * ndtr(-d1))
    vega = forward * np.exp(-0.5 * d1 * d1) / _SQRT_2PI
    return value, vega


def _newton_bisect(F, K, rt, tgt, lo, hi, sig, done, max_iter):
    """In-place safeguarded Newton on the OTM value; bisects when a step leaves the bracket."""
    for _ in range(max_iter):
        idx = np.flatnonzero(~done)
        if idx.size == 0:
            return
        s = sig[idx]
        value, vega_sd = _otm_value(F[idx], K[idx], s * rt[idx])
        diff = value - tgt[idx]
        conv = np.abs(diff) <= 1e-13 * tgt[idx]
        above = diff > 0
        hi[idx] = np.where(above, s, hi[idx])
        lo[idx] = np.where(above, lo[idx], s)
        vega = vega_sd * rt[idx]
        # far from the root a Newton step on log(value) behaves better in the wings
        ratio = value / tgt[idx]
        far = (ratio < 0.5) | (ratio > 2.0)
        new = s - np.where(far, np.log(ratio) * value / vega, diff / vega)
        inside = np.isfinite(new) & (new > lo[idx]) & (new < hi[idx])
        new = np.where(inside, new, 0.5 * (lo[idx] + hi[idx]))
        sig[idx] = np.where(conv, s, new)
        done[idx] = conv | (np.abs(new - s) <= 1e-15 * s)


def implied_vols(env: MarketEnv, strikes, maturities, is_call, prices, guess=None, max_iter=100):
    """Vectorized implied vols.

    Returns ``(vols, status)``; failed entries hold NaN and a nonzero status
    (``IV_UNATTAINABLE`` outside the no-arbitrage band, ``IV_NOT_CONVERGED``
    when no vol in [1e-6, 10] reproduces the price).
    """
    strikes, maturities, prices = np.broadcast_arrays(
        np.asarray(strikes, float), np.asarray(maturities, float), np.asarray(prices, float)
    )
    shape = strikes.shape
    strikes, maturities, prices = strikes.ravel(), maturities.ravel(), prices.ravel()
    is_call = np.broadcast_to(np.asarray(is_call, bool), shape).ravel()
    forward = env.forward(maturities)
    disc = env.discount(maturities)
    sqrt_t = np.sqrt(maturities)

    undiscounted = prices / disc
    intrinsic = np.where(is_call, np.maximum(forward - strikes, 0.0), np.maximum(strikes - forward, 0.0))
    target = undiscounted - intrinsic  # time value == out-of-the-money option value
    upper = np.minimum(forward, strikes)
    status = np.where(
        np.isfinite(target) & (target > 0) & (target < upper), IV_OK, IV_UNATTAINABLE
    ).astype(int)

    vols = np.full(strikes.size, np.nan)
    active = np.flatnonzero(status == IV_OK)
    if active.size == 0:
        return vols.reshape(shape), status.reshape(shape)

    F, K, rt, tgt = forward[active], strikes[active], sqrt_t[active], target[active]
    lo = np.full(active.size, IV_LOWER)
    hi = np.full(active.size, IV_UPPER)
    v_lo, _ = _otm_value(F, K, lo * rt)
    v_hi, _ = _otm_value(F, K, hi * rt)
    widen = (v_lo > tgt) | (v_hi < tgt)
    if np.any(widen):
        lo[widen] = _IV_LOWER_WIDE
        hi[widen] = _IV_UPPER_WIDE
        v_lo, _ = _otm_value(F, K, lo * rt)
        v_hi, _ = _otm_value(F, K, hi * rt)
    ok = (v_lo <= tgt) & (v_hi >= tgt)

    if guess is not None:
        sig = np.broadcast_to(np.asarray(guess, float), shape).ravel()[active].copy()
    else:
        sig = np.sqrt(2.0 * np.abs(np.log(F / K))) / rt
        atm = _SQRT_2PI * tgt / (np.sqrt(F * K) * rt)
        sig = np.where(sig < 0.05, atm, sig)
    bad = ~np.isfinite(sig) | (sig <= lo) | (sig >= hi)
    sig[bad] = np.sqrt(lo[bad] * hi[bad])

    done = ~ok
    with np.errstate(all="ignore"):
        _newton_bisect(F, K, rt, tgt, lo, hi, sig, done, max_iter)
    value, _ = _otm_value(F, K, sig * rt)
    good = ok & (np.abs(value - tgt) <= 1e-11 * tgt)
    vols[active[good]] = sig[good]
    status[active[~good]] = IV_NOT_CONVERGED
    return vols.reshape(shape), status.reshape(shape)


def implied_vol(env: MarketEnv, strike: float, maturity: float, kind: str, price: float, guess=None) -> float:
    """Black-Scholes implied vol of a single option price."""
    _require_finite(strike=strike, maturity=maturity, price=price)
    if strike <= 0 or maturity <= 0:
        raise ValueError("strike and maturity must be > 0")
    is_call = _is_call_mask(kind, ())
    vol, status = implied_vols(env, strike, maturity, is_call, price, guess=guess)
    if status == IV_UNATTAINABLE:
        raise UnattainablePriceError(
            f"price {price} outside the no-arbitrage band for {kind} K={strike} tau={maturity}"
        )
    if status != IV_OK:
        raise ImpliedVolError(f"implied vol did not converge for {kind} K={strike} tau={maturity} price={price}")
    return float(vol)


# ---------------------------------------------------------------------------
# Bates characteristic function and COS pricer
# ---------------------------------------------------------------------------


def _log1p_over_z(z):
    # log(1 + z) / z, accurate for small complex z
    w = 1.0 + z
    small = w == 1.0
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(w) / (w - 1.0)
    return np.where(small, 1.0, out)


def log_char_fn(params: BatesParams, rate: float, dividend_yield: float, maturity, u):
    """log E[exp(i u log(S_tau / S_0))] under Bates; broadcasts over ``maturity`` and ``u``."""
    u = np.asarray(u, dtype=complex)
    tau = np.asarray(maturity, dtype=float)
    kappa, theta, sv, rho = params.kappa, params.theta, params.sigma_v, params.rho
    iu = 1j * u
    quad = iu + u * u  # i u + u^2
    beta = kappa - rho * sv * iu
    d = np.sqrt(beta * beta + sv * sv * quad)
    bpd = beta + d
    # g = (beta - d) / (beta + d), written so sigma_v -> 0 stays accurate
    g = -sv * sv * quad / (bpd * bpd)
    e = np.exp(-d * tau)
    one_minus_e = -np.expm1(-d * tau)
    denom = 1.0 - g * e
    D = -quad / bpd * one_minus_e / denom
    # log((1 - g e) / (1 - g)) / sigma_v^2 = log1p(z)/z * z/sigma_v^2, z = g(1 - e)/(1 - g)
    z = g * one_minus_e / (1.0 - g)
    z_over_s2 = -quad / (bpd * bpd) * one_minus_e / (1.0 - g)
    log_ratio_over_s2 = _log1p_over_z(z) * z_over_s2
    C = kappa * theta * (-quad / bpd * tau - 2.0 * log_ratio_over_s2)

    m = params.jump_mean
    jump = params.lam * tau * (np.exp(iu * m - 0.5 * params.sigma_j**2 * u * u) - 1.0)
    drift = iu * (rate - dividend_yield - params.lam * params.mu_j) * tau
    return drift + C + D * params.v0 + jump


def bates_char_fn(params: BatesParams, env: MarketEnv, maturity, u):
    """Characteristic function of log(S_tau / S_0) under Bates with drift r - q."""
    maturity = np.asarray(maturity, float)
    if np.any(maturity <= 0):
        raise ValueError("maturity must be > 0")
    out = np.exp(log_char_fn(params, env.rate, env.dividend_yield, maturity, u))
    return complex(out) if np.ndim(out) == 0 else out


def _log_return_scale(params: BatesParams, rate: float, dividend_yield: float, tau: float):
    # mean and standard deviation proxies for log(S_tau/S_0)
    var = bates_variance_swap(params, tau)
    mean = (rate - dividend_yield) * tau - 0.5 * var * tau
    sd = math.sqrt(max(var * tau, 1e-10))
    return mean, sd


def cos_range(params: BatesParams, env: MarketEnv, tau: float, settings: PricerSettings = DEFAULT_SETTINGS):
    """Truncation interval [a, b] for log(S_tau/S_0).

    Half-width and center are snapped to a coarse ladder so nearby parameter
    vectors share an interval (and its cached cosine basis); the interval is a
    deterministic function of the parameters.
    """
    mean, sd = _log_return_scale(params, env.rate, env.dividend_yield, tau)
    half = settings.truncation_width * sd
    # jumps can put mass well away from the diffusive bulk
    m, sj = params.jump_mean, params.sigma_j
    if params.lam > 0:
        half = max(half, abs(m) + 8.0 * sj + 4.0 * sd)
    half = 2.0 ** (math.ceil(4.0 * math.log2(half)) / 4.0)
    step = half / 8.0
    center = round(mean / step) * step
    return center - half, center + half


@lru_cache(maxsize=512)
def _put_basis(a: float, b: float, n: int, spot: float, strikes: tuple[float, ...]) -> np.ndarray:
    """Matrix M (n x len(strikes)) with undiscounted put = A @ M for cosine coefficients A."""
    K = np.asarray(strikes)
    k = np.arange(n)[:, None]
    w = np.pi * k / (b - a)
    # payoff K(1 - e^{x+R})^+ is nonzero for R < log(K/S0)
    d = np.clip(np.log(K / spot), a, b)[None, :]
    arg = w * (d - a)
    cos_d, sin_d = np.cos(arg), np.sin(arg)
    exp_d, exp_a = np.exp(d), math.exp(a)
    chi = (cos_d * exp_d - exp_a + w * sin_d * exp_d) / (1.0 + w * w)
    with np.errstate(divide="ignore", invalid="ignore"):
        psi = np.where(k == 0, d - a, sin_d / w)
    basis = K[None, :] * psi - spot * chi
    basis[0, :] *= 0.5
    basis.setflags(write=False)
    return basis


def _cos_coefficients(params: BatesParams, env: MarketEnv, tau: float, a: float, b: float, n: int):
    u = np.pi * np.arange(n) / (b - a)
    phi = np.exp(log_char_fn(params, env.rate, env.dividend_yield, tau, u) - 1j * u * a)
    return 2.0 / (b - a) * phi.real, u


def _forward_residual(A, a: float, b: float, u, env: MarketEnv, tau: float) -> float:
    """|COS estimate of E[S_tau/S_0] - exp((r-q) tau)| scaled to spot."""
    w = u
    chi = ((-1.0) ** np.arange(u.size) * math.exp(b) - math.exp(a)) / (1.0 + w * w)
    chi[0] *= 0.5
    est = float(A @ chi)
    return env.spot * abs(est - math.exp((env.rate - env.dividend_yield) * tau))


def cos_put_prices(params, env, strikes, tau, settings=DEFAULT_SETTINGS, with_residual=False):
    """Put prices for one maturity and an array of strikes."""
    a, b = cos_range(params, env, tau, settings)
    n = settings.fourier_grid_size
    A, u = _cos_coefficients(params, env, tau, a, b, n)
    basis = _put_basis(a, b, n, env.spot, tuple(np.asarray(strikes, float).tolist()))
    puts = math.exp(-env.rate * tau) * (A @ basis)
    if with_residual:
        return puts, _forward_residual(A, a, b, u, env, tau)
    return puts


def price_european(params: BatesParams, env: MarketEnv, strike, maturity, kind=CALL, settings=None):
    """European option prices under Bates.

    ``strike`` may be an array (one maturity per call, or a matching array of
    maturities).  Puts come from the COS expansion; calls from exact put-call
    parity.  A ``TruncationWarning`` is issued when the expansion fails to
    reproduce the forward to ``settings.parity_tolerance * spot``.
    """
    settings = settings or DEFAULT_SETTINGS
    strike = np.asarray(strike, float)
    maturity = np.asarray(maturity, float)
    _require_finite(strike=strike, maturity=maturity)
    if np.any(strike <= 0) or np.any(maturity <= 0):
        raise ValueError("strike and maturity must be > 0")
    strike_b, maturity_b = np.broadcast_arrays(strike, maturity)
    is_call = _is_call_mask(kind, strike_b.shape)
    flat_k, flat_t, flat_c = strike_b.ravel(), maturity_b.ravel(), is_call.ravel()
    out = np.empty(flat_k.size)
    for tau in np.unique(flat_t):
        sel = flat_t == tau
        tau = float(tau)
        puts, resid = cos_put_prices(params, env, flat_k[sel], tau, settings, with_residual=True)
        if resid > settings.parity_tolerance * env.spot:
            warnings.warn(
                f"COS truncation residual {resid:.2e} at tau={tau:.4f} exceeds tolerance", TruncationWarning, stacklevel=2
            )
        disc = math.exp(-env.rate * tau)
        fwd = float(env.forward(tau))
        calls = puts + disc * (fwd - flat_k[sel])
        out[sel] = np.where(flat_c[sel], calls, puts)
    out = np.maximum(out, 0.0)
    return _scalar_or_array(out.reshape(strike_b.shape))


# ---------------------------------------------------------------------------
# Simple jump diffusion
# ---------------------------------------------------------------------------

_POISSON_TAIL = 1e-12


def sjd_price(params: SjdParams, env: MarketEnv, strike, maturity: float, kind=CALL):
    """SJD price as a Poisson mixture of Black-Scholes prices over the jump count."""
    if maturity <= 0:
        raise ValueError("maturity must be > 0")
    if params.lam == 0 or params.jump == 0:
        return bs_price(env, strike, maturity, params.sigma, kind)
    strike = np.asarray(strike, float)
    _require_finite(strike=strike)
    is_call = _is_call_mask(kind, strike.shape)
    mean_jumps = params.lam * maturity
    # jump counts carrying all but _POISSON_TAIL of the mass on each side
    n_min = int(poisson.ppf(_POISSON_TAIL, mean_jumps))
    n_max = int(poisson.isf(_POISSON_TAIL, mean_jumps)) + 1
    counts = np.arange(n_min, n_max + 1)
    weights = poisson.pmf(counts, mean_jumps)
    compensator = params.lam * maturity * math.expm1(params.jump)
    fwd = float(env.forward(maturity))
    sd = params.sigma * math.sqrt(maturity)
    disc = math.exp(-env.rate * maturity)
    shape = (-1,) + (1,) * strike.ndim
    fwds = fwd * np.exp(counts * params.jump - compensator).reshape(shape)
    total = np.tensordot(weights, black(fwds, strike, sd, disc, is_call), axes=1)
    return _scalar_or_array(total)
