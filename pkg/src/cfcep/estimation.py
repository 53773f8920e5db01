"""Uplink pilot transmission and per-AP MMSE channel estimation.

Pilots are orthonormal, so projecting the received block onto a user's
pilot yields y_bar = sqrt(rho*tau_c)*g + noise with unit noise variance,
and estimation is a per-link scalar MMSE gain.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .seeding import complex_normal, rng_for

# Projected-noise variance: pilots are unit-energy and uplink noise has
# identity covariance, so projection preserves unit variance.  Transmit
# powers are pre-normalized by the noise power.
NOISE_VAR = 1.0


@dataclass
class PilotBook:
    """K mutually orthogonal unit-energy pilot vectors of length tau_c."""

    tau_c: int
    pilots: np.ndarray  # (tau_c, K) complex, orthonormal columns


def make_pilots(k_users: int, tau_c: int) -> PilotBook:
    """Build an orthonormal pilot book (normalized DFT columns)."""
    if tau_c < k_users:
        raise ConfigError(
            f"tau_c={tau_c} < K={k_users}: orthogonal pilots require tau_c >= K"
        )
    n = np.arange(tau_c)
    cols = np.exp(-2j * np.pi * np.outer(n, np.arange(k_users)) / tau_c)
    return PilotBook(tau_c=int(tau_c), pilots=cols / np.sqrt(tau_c))


@dataclass
class MmseLinkStats:
    """Closed-form MMSE statistics for one or more links.

    beta_bar  -- variance of the true channel, sigma_h^2 * beta
    gamma     -- variance of the MMSE estimate
    est_coeff -- scalar gain applied to the projected observation
    """

    beta_bar: np.ndarray
    gamma: np.ndarray
    est_coeff: np.ndarray


def link_stats(beta, sigma2_h, rho: float, tau_c: int) -> MmseLinkStats:
    """Per-link MMSE statistics for pilot SNR rho*tau_c*beta_bar.

    Uses the statistically consistent gain c = sqrt(rho*tau_c)*beta_bar /
    (rho*tau_c*beta_bar + sigma^2), under which the estimation error
    variance equals beta_bar - gamma.
    """
    beta_bar = np.asarray(beta, dtype=float) * np.asarray(sigma2_h, dtype=float)
    snr = rho * tau_c * beta_bar
    est_coeff = np.sqrt(rho * tau_c) * beta_bar / (snr + NOISE_VAR)
    gamma = rho * tau_c * beta_bar**2 / (snr + NOISE_VAR)
    return MmseLinkStats(beta_bar=beta_bar, gamma=gamma, est_coeff=est_coeff)


@dataclass
class UplinkObservation:
    """Received pilot block and its per-user projections at every AP."""

    y: np.ndarray       # (M, tau_c)
    y_bar: np.ndarray   # (M, K), q_k^H y_m
    rho: float
    sigma2: float = NOISE_VAR


def receive_pilots(
    g_slice: np.ndarray,
    pilots: PilotBook,
    rho: float,
    seed,
    noise_std: float = 1.0,
) -> UplinkObservation:
    """Simulate one CI of uplink pilot transmission at every AP.

    y_m = sqrt(rho*tau_c) * sum_k g_{m,k} q_k + n with identity-covariance
    circularly symmetric noise; also returns all projections
    y_bar_{m,k} = q_k^H y_m.  ``noise_std=0`` disables noise.
    """
    g = np.asarray(g_slice)
    m, k = g.shape
    q = pilots.pilots
    if q.shape[1] != k:
        raise ValueError(f"pilot book has {q.shape[1]} users, channel slice has {k}")
    y = np.sqrt(rho * pilots.tau_c) * (g @ q.T)
    if noise_std > 0:
        rng = rng_for(seed)
        y = y + noise_std * complex_normal(rng, (m, pilots.tau_c))
    y_bar = y @ np.conj(q)
    return UplinkObservation(y=y, y_bar=y_bar, rho=float(rho))


def mmse_estimate(y_bar, stats: MmseLinkStats, rho: float, tau_c: int):
    """MMSE channel estimate from the projected observation: c * y_bar."""
    return stats.est_coeff * np.asarray(y_bar)


def projected_pilot_observation(g_slice, rho: float, tau_c: int, rng) -> np.ndarray:
    """Projected observations for one CI without materializing the block.

    With orthonormal pilots the K projections of identity-covariance noise
    are i.i.d. unit-variance complex Gaussians, so
    y_bar = sqrt(rho*tau_c)*g + nu is drawn directly.
    """
    nu = complex_normal(rng, np.asarray(g_slice).shape)
    return np.sqrt(rho * tau_c) * np.asarray(g_slice) + nu
