"""Downlink achievable rates, power allocation, and net throughput.

Rates follow the channel-statistics bound: users decode against the mean
effective gain D_k, with beamforming-gain uncertainty B_k and inter-user
interference U_kk' estimated by sample averaging over paired (true,
acquired) channel realizations at fixed large-scale fading.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import StatisticsWarning
from .scheduler import overhead_factor
from .seeding import complex_normal, rng_for

MIN_RATE_SAMPLES = 1000


@dataclass
class SystemParams:
    """Normalized powers and frame constants shared by all schemes."""

    p_d: float              # downlink power / noise power
    rho: float              # pilot power / noise power
    tau: int                # CI length in symbols
    tau_c: int              # pilot symbols per CE phase
    bandwidth_hz: float

    def __post_init__(self):
        if self.tau_c > self.tau:
            raise ValueError(f"tau_c={self.tau_c} exceeds tau={self.tau}")
        if self.p_d < 0 or self.rho < 0:
            raise ValueError("powers must be non-negative")


@dataclass
class PowerAllocation:
    eta: np.ndarray  # (M, K), equal across users per AP


def equal_power(gbar_second_moments: np.ndarray) -> PowerAllocation:
    """Equal power allocation: eta_{m,k} = 1 / sum_k' E|gbar_{m,k'}|^2."""
    mom = np.asarray(gbar_second_moments, dtype=float)
    col = mom.sum(axis=1)
    if np.any(~np.isfinite(col)) or np.any(col <= 0):
        raise ValueError("degenerate deployment: non-positive per-AP moment sum")
    eta = np.repeat((1.0 / col)[:, None], mom.shape[1], axis=1)
    return PowerAllocation(eta=eta)


@dataclass
class RateEstimate:
    """Monte-Carlo rate estimate for one window position."""

    rate: np.ndarray        # (K,) bits/s/Hz
    stderr: np.ndarray      # (K,) jackknife standard errors
    d: np.ndarray           # (K,) complex coherent gains
    b2: np.ndarray          # (K,) beamforming-uncertainty powers
    u2: np.ndarray          # (K,) total interference powers
    n_samples: int
    sum_rate: float = 0.0
    sum_stderr: float = 0.0


def _position_moments(g_samples, gbar_samples, sqrt_eta, groups):
    """Per-group sums of the statistics entering the SINR."""
    g = np.asarray(g_samples)
    gbar = np.asarray(gbar_samples)
    weighted = sqrt_eta[None, :, :] * np.conj(gbar)
    x = np.einsum("smk,smk->sk", g, weighted)            # effective gain samples
    a = np.einsum("smk,sml->skl", g, weighted)           # symbol-coupling matrix
    a2 = np.abs(a) ** 2
    k = x.shape[1]
    u = a2.sum(axis=2) - a2[:, np.arange(k), np.arange(k)]

    labels, inverse = np.unique(groups, return_inverse=True)
    n_groups = labels.size
    sx = np.zeros((n_groups, k), dtype=complex)
    sxx = np.zeros((n_groups, k))
    su = np.zeros((n_groups, k))
    counts = np.bincount(inverse, minlength=n_groups).astype(float)
    np.add.at(sx, inverse, x)
    np.add.at(sxx, inverse, np.abs(x) ** 2)
    np.add.at(su, inverse, u)
    return sx, sxx, su, counts


def _rates_from_sums(sx, sxx, su, count, p_d):
    mean_x = sx / count
    d = np.sqrt(p_d) * mean_x
    b2 = p_d * np.maximum(sxx / count - np.abs(mean_x) ** 2, 0.0)
    u2 = p_d * su / count
    sinr = np.abs(d) ** 2 / (b2 + u2 + 1.0)
    return np.log2(1.0 + sinr), d, b2, u2


def achievable_rate(
    g_samples,
    gbar_samples,
    p_d: float,
    eta: np.ndarray,
    groups=None,
    min_samples: int = MIN_RATE_SAMPLES,
) -> RateEstimate:
    """Per-user achievable rate from paired (g, gbar) realizations.

    ``g_samples`` and ``gbar_samples`` have shape (S, M, K) and hold
    realizations of one window position with large-scale fading fixed.
    ``groups`` labels independent realizations for the jackknife standard
    error (defaults to contiguous batches).  Emits a StatisticsWarning
    when fewer than ``min_samples`` samples are supplied.
    """
    g = np.asarray(g_samples)
    n_samples = g.shape[0]
    if n_samples < min_samples:
        warnings.warn(
            f"rate estimated from {n_samples} samples (< {min_samples}); "
            "standard errors reported",
            StatisticsWarning,
            stacklevel=2,
        )
    if groups is None:
        n_batches = min(n_samples, 20)
        groups = (np.arange(n_samples) * n_batches) // n_samples
    sx, sxx, su, counts = _position_moments(g, gbar_samples, np.sqrt(eta), groups)

    rate, d, b2, u2 = _rates_from_sums(
        sx.sum(0), sxx.sum(0), su.sum(0), counts.sum(), p_d
    )
    stderr, sum_stderr = _jackknife([(sx, sxx, su, counts)], p_d)
    return RateEstimate(
        rate=rate, stderr=stderr, d=d, b2=b2, u2=u2,
        n_samples=int(n_samples),
        sum_rate=float(rate.sum()), sum_stderr=sum_stderr,
    )


def _jackknife(position_sums, p_d):
    """Leave-one-group-out errors of the position-averaged per-user rates."""
    n_groups = position_sums[0][3].size
    k = position_sums[0][0].shape[1]
    if n_groups < 2:
        return np.zeros(k), 0.0
    loo = np.empty((n_groups, k))
    for j in range(n_groups):
        rates = []
        for sx, sxx, su, counts in position_sums:
            tot_c = counts.sum() - counts[j]
            r, *_ = _rates_from_sums(
                sx.sum(0) - sx[j], sxx.sum(0) - sxx[j], su.sum(0) - su[j], tot_c, p_d
            )
            rates.append(r)
        loo[j] = np.mean(rates, axis=0)
    mean_loo = loo.mean(axis=0)
    factor = (n_groups - 1) / n_groups
    stderr = np.sqrt(factor * np.sum((loo - mean_loo) ** 2, axis=0))
    sums = loo.sum(axis=1)
    sum_stderr = float(np.sqrt(factor * np.sum((sums - sums.mean()) ** 2)))
    return stderr, sum_stderr


@dataclass
class WindowRateResult:
    """Rates averaged uniformly over the window positions of one scheme."""

    rate: np.ndarray
    stderr: np.ndarray
    sum_rate: float
    sum_stderr: float
    per_position: list
    n_samples: int


def window_rates(position_samples, p_d: float, eta: np.ndarray,
                 min_samples: int = MIN_RATE_SAMPLES) -> WindowRateResult:
    """Average per-position rates uniformly over the scheme's window.

    ``position_samples`` is a list of (g_samples, gbar_samples, groups)
    triples, one per window position, with a common group labeling so the
    jackknife accounts for cross-position correlation.
    """
    sqrt_eta = np.sqrt(eta)
    sums = []
    per_position = []
    total = 0
    for g_s, gb_s, groups in position_samples:
        total += g_s.shape[0]
        parts = _position_moments(g_s, gb_s, sqrt_eta, groups)
        sums.append(parts)
        r, d, b2, u2 = _rates_from_sums(
            parts[0].sum(0), parts[1].sum(0), parts[2].sum(0), parts[3].sum(), p_d
        )
        per_position.append(
            RateEstimate(
                rate=r, stderr=np.zeros_like(r), d=d, b2=b2, u2=u2,
                n_samples=g_s.shape[0], sum_rate=float(r.sum()),
            )
        )
    if total < min_samples * len(position_samples):
        warnings.warn(
            f"window rates from {total} samples across {len(position_samples)} "
            "positions; standard errors reported",
            StatisticsWarning,
            stacklevel=2,
        )
    rate = np.mean([p.rate for p in per_position], axis=0)
    stderr, sum_stderr = _jackknife(sums, p_d)
    return WindowRateResult(
        rate=rate, stderr=stderr,
        sum_rate=float(rate.sum()), sum_stderr=sum_stderr,
        per_position=per_position, n_samples=total,
    )


def net_throughput(sum_rate: float, scheme: str, params: SystemParams, alpha: float) -> float:
    """Overhead-discounted throughput B * factor * sum rate (bits/s)."""
    if sum_rate < 0:
        raise ValueError("sum rate must be non-negative")
    return params.bandwidth_hz * overhead_factor(scheme, alpha, params.tau_c, params.tau) * sum_rate


@dataclass
class DownlinkSamples:
    received: np.ndarray  # (K, S)
    symbols: np.ndarray   # (K, S)


def simulate_downlink(g_slice, gbar_slice, eta, p_d: float, n_symbols: int, seed) -> DownlinkSamples:
    """Symbol-level conjugate-beamforming synthesis for one CI.

    x_m = sqrt(p_d) sum_k sqrt(eta_{m,k}) conj(gbar_{m,k}) s_k;
    r_k = sum_m g_{m,k} x_m + n_k with unit-variance noise and unit-power
    Gaussian codebook symbols.  Used to cross-check the statistical SINR.
    """
    g = np.asarray(g_slice)
    gbar = np.asarray(gbar_slice)
    rng = rng_for(seed)
    symbols = complex_normal(rng, (g.shape[1], n_symbols))
    precoder = np.sqrt(p_d) * np.sqrt(eta) * np.conj(gbar)   # (M, K)
    x = precoder @ symbols                                    # (M, S)
    noise = complex_normal(rng, (g.shape[1], n_symbols))
    received = g.T @ x + noise
    return DownlinkSamples(received=received, symbols=symbols)
