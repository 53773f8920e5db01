"""Temporally correlated fading and cell-free deployment geometry.

Small-scale fading follows an AR(Q) recursion whose coefficients are fitted
to the Jakes autocorrelation J0(2*pi*f_n*lag) via the Yule-Walker equations.
Large-scale fading uses the standard three-slope path-loss model with
log-normal shadowing beyond the far breakpoint.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import toeplitz

from .errors import NumericalError
from .seeding import TAG_TRACE, complex_normal, rng_for, substream

# ---------------------------------------------------------------------------
# Bessel J0 (Cephes-style rational/asymptotic approximation)
# ---------------------------------------------------------------------------

_DR1 = 5.78318596294678452118e0
_DR2 = 3.04712623436620863991e1

_RP = np.array([
    -4.79443220978201773821e9,
    1.95617491946556577543e12,
    -2.49248344360967716204e14,
    9.70862251047306323952e15,
])
_RQ = np.array([
    1.0,
    4.99563147152651017219e2,
    1.73785401676374683123e5,
    4.84409658339962045305e7,
    1.11855537045356834862e10,
    2.11277520115489217587e12,
    3.10518229857422583814e14,
    3.18121955943204943306e16,
    1.71086294081043136091e18,
])
_PP = np.array([
    7.96936729297347051624e-4,
    8.28352392107440799803e-2,
    1.23953371646414299388e0,
    5.44725003058768775090e0,
    8.74716500199817011941e0,
    5.30324038235394892183e0,
    9.99999999999999997821e-1,
])
_PQ = np.array([
    9.24408810558863637013e-4,
    8.56288474354474431428e-2,
    1.25352743901058953537e0,
    5.47097740330417105182e0,
    8.76190883237069594232e0,
    5.30605288235394617618e0,
    1.00000000000000000218e0,
])
_QP = np.array([
    -1.13663838898469149931e-2,
    -1.28252718670509318512e0,
    -1.95539544257735972385e1,
    -9.32060152123768231369e1,
    -1.77681167980488050595e2,
    -1.47077505154951170175e2,
    -5.14105326766599330220e1,
    -6.05014350600728481186e0,
])
_QQ = np.array([
    1.0,
    6.43178256118178023184e1,
    8.56430025976980587198e2,
    3.88240183605401609683e3,
    7.24046774195652478189e3,
    5.93072701187316984827e3,
    2.06209331660327847417e3,
    2.42005740240291393179e2,
])
_SQ2OPI = 7.9788456080286535587989e-1  # sqrt(2/pi)
_PIO4 = 7.85398163397448309616e-1


def _polevl(x, coef):
    ans = np.full_like(x, coef[0])
    for c in coef[1:]:
        ans = ans * x + c
    return ans


def bessel_j0(x):
    """Zeroth-order Bessel function of the first kind.

    Accepts a scalar or array; absolute error below 1e-8 for |x| <= 1e3
    (power series near zero, rational approximation on [0, 5], Hankel
    asymptotic expansion beyond).
    """
    arr = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ValueError("bessel_j0 requires finite input")
    scalar = arr.ndim == 0
    ax = np.abs(np.atleast_1d(arr))
    out = np.empty_like(ax)

    tiny = ax < 1e-5
    mid = (~tiny) & (ax <= 5.0)
    big = ax > 5.0

    if np.any(tiny):
        z = ax[tiny]
        out[tiny] = 1.0 - z * z / 4.0
    if np.any(mid):
        z = ax[mid] ** 2
        p = (z - _DR1) * (z - _DR2)
        out[mid] = p * _polevl(z, _RP) / _polevl(z, _RQ)
    if np.any(big):
        xx = ax[big]
        w = 5.0 / xx
        q = 25.0 / (xx * xx)
        p = _polevl(q, _PP) / _polevl(q, _PQ)
        qq = _polevl(q, _QP) / _polevl(q, _QQ)
        xn = xx - _PIO4
        out[big] = _SQ2OPI * (p * np.cos(xn) - w * qq * np.sin(xn)) / np.sqrt(xx)

    return float(out[0]) if scalar else out.reshape(arr.shape)


def acf(f_n, lag):
    """Fading autocorrelation J0(2*pi*f_n*|lag|) between coherence intervals."""
    if np.any(np.asarray(f_n) < 0):
        raise ValueError("normalized Doppler must be non-negative")
    return bessel_j0(2.0 * np.pi * f_n * np.abs(lag))


# ---------------------------------------------------------------------------
# AR(Q) fit to the Jakes ACF
# ---------------------------------------------------------------------------

YW_RESIDUAL_TOL = 1e-8
COND_MAX = 1e12
# Loading ladder: start at the nominal 1e-9 and shrink until the Yule-Walker
# residual meets tolerance; the J0 Toeplitz matrices are rank-deficient for
# large Q, so the residual scales as loading * |a|.
_LOADINGS = (1e-9, 1e-11, 1e-13)

GREENS_TAIL_TOL = 1e-10
GREENS_MAX_TERMS = 100_000


@dataclass
class AgingProfile:
    """Fitted AR(Q) description of one normalized-Doppler value."""

    f_n: float
    q: int
    acf: np.ndarray            # R[0..Q]
    coeffs: np.ndarray         # a[1..Q]
    innovation_var: float      # sigma_w^2
    stationary_var: float      # sigma_h^2


def fit_ar(f_n: float, q: int) -> AgingProfile:
    """Fit AR(q) coefficients to the Jakes ACF via Yule-Walker.

    Solves a = -R^-1 u as a linear system (LU with partial pivoting),
    applying diagonal loading when R is numerically singular, and computes
    the innovation variance sigma_w^2 = R[0] + sum_q a_q R[q] plus the
    stationary variance of the fitted recursion.
    """
    if q < 1:
        raise ValueError("AR order must be >= 1")
    if not f_n > 0:
        raise ValueError("normalized Doppler must be positive")

    r = acf(f_n, np.arange(q + 1))
    big_r = toeplitz(r[:q])
    u = r[1 : q + 1]

    if q == 1:
        a = np.array([-u[0] / r[0]])
        resid = 0.0
    else:
        cond = np.linalg.cond(big_r)
        if cond <= COND_MAX:
            a = np.linalg.solve(big_r, -u)
            resid = np.max(np.abs(big_r @ a + u))
        else:
            a = None
            resid = np.inf
            for loading in _LOADINGS:
                loaded = big_r + loading * r[0] * np.eye(q)
                try:
                    cand = np.linalg.solve(loaded, -u)
                except np.linalg.LinAlgError:
                    continue
                cand_resid = np.max(np.abs(big_r @ cand + u))
                if cand_resid < resid:
                    a, resid = cand, cand_resid
                if resid < YW_RESIDUAL_TOL:
                    break
        if a is None or not np.all(np.isfinite(a)):
            raise NumericalError(
                f"Yule-Walker solve failed for f_n={f_n}, Q={q} (residual {resid:.2e})"
            )

    innovation_var = float(r[0] + np.dot(a, u))
    profile = AgingProfile(
        f_n=float(f_n),
        q=int(q),
        acf=r,
        coeffs=a,
        innovation_var=innovation_var,
        stationary_var=0.0,
    )
    profile.stationary_var = stationary_variance(profile)
    return profile


def stationary_variance(profile: AgingProfile) -> float:
    """Stationary variance of the fitted AR process via its impulse response.

    Accumulates sigma_h^2 = sum_j F_j^2 * sigma_w^2 with F_0 = 1 and
    F_j = -sum_q a_q F_{j-q}; the sign follows the recursion convention of
    the generator, which is the one that reproduces generated-trace
    variance.  Truncates once a trailing window contributes less than
    GREENS_TAIL_TOL of the running sum.
    """
    if profile.innovation_var == 0.0:
        return 0.0
    a = profile.coeffs
    q = profile.q
    f = np.zeros(GREENS_MAX_TERMS)
    f[0] = 1.0
    total = 1.0
    for j in range(1, GREENS_MAX_TERMS):
        k = min(j, q)
        fj = -np.dot(a[:k], f[j - 1 :: -1][:k])
        if not np.isfinite(fj) or abs(fj) > 1e12:
            raise NumericalError("impulse response diverges: non-stationary AR fit")
        f[j] = fj
        total += fj * fj
        if j > 2 * q and np.sum(f[j - q : j + 1] ** 2) < GREENS_TAIL_TOL * total:
            return float(total * profile.innovation_var)
    raise NumericalError(
        f"impulse-response sum did not converge within {GREENS_MAX_TERMS} terms"
    )


# ---------------------------------------------------------------------------
# Trace generation
# ---------------------------------------------------------------------------

BURN_IN_FACTOR = 10


def _stationary_init_factor(profile: AgingProfile) -> np.ndarray:
    """Factor F with F F^T = sigma_h^2 * R_Q, for drawing the initial state.

    The fitted AR has modes very close to the unit circle, so a zero start
    would need an impractically long burn-in; drawing the initial window
    from the (scaled) target covariance makes the trace stationary from the
    first kept sample.
    """
    big_r = toeplitz(profile.acf[: profile.q])
    lam, vec = np.linalg.eigh(big_r)
    lam = np.clip(lam, 0.0, None)
    return vec * np.sqrt(lam * profile.stationary_var)


def generate_trace(profile: AgingProfile, n_links: int, length: int, seed) -> np.ndarray:
    """Generate correlated small-scale fading, one row per link.

    Runs the AR recursion h[t] = -sum_q a_q h[t-q] + w[t] with i.i.d.
    circularly symmetric innovations of variance sigma_w^2, independently
    per link (one RNG stream per link), discarding a burn-in prefix of
    10*Q samples.  Deterministic given (profile, n_links, length, seed).

    Returns a complex array of shape (n_links, length).
    """
    if length < 1:
        raise ValueError("trace length must be >= 1")
    if n_links < 1:
        raise ValueError("need at least one link")
    q = profile.q
    a_rev = profile.coeffs[::-1].copy()
    burn = BURN_IN_FACTOR * q
    total = burn + length
    init_factor = _stationary_init_factor(profile)

    streams = substream(seed, TAG_TRACE).spawn(n_links)
    init = np.empty((n_links, q), dtype=complex)
    w = np.empty((n_links, total), dtype=complex)
    for i, child in enumerate(streams):
        rng = np.random.default_rng(child)
        init[i] = init_factor @ complex_normal(rng, q)
        w[i] = complex_normal(rng, total, var=profile.innovation_var)

    h = np.empty((n_links, q + total), dtype=complex)
    h[:, :q] = init  # oldest..newest
    for t in range(total):
        h[:, q + t] = -(h[:, t : t + q] @ a_rev) + w[:, t]
    return h[:, q + burn :]


# ---------------------------------------------------------------------------
# Deployment geometry and large-scale fading
# ---------------------------------------------------------------------------


@dataclass
class PathLossParams:
    """Three-slope path-loss constants (COST-231 Hata reference loss)."""

    d0_m: float = 10.0
    d1_m: float = 50.0
    carrier_ghz: float = 1.9
    ap_height_m: float = 15.0
    user_height_m: float = 1.65
    shadow_sigma_db: float = 8.0

    def reference_loss_db(self) -> float:
        f_mhz = self.carrier_ghz * 1e3
        return (
            46.3
            + 33.9 * np.log10(f_mhz)
            - 13.82 * np.log10(self.ap_height_m)
            - (1.1 * np.log10(f_mhz) - 0.7) * self.user_height_m
            + (1.56 * np.log10(f_mhz) - 0.8)
        )


def path_gain_db(dist_m: np.ndarray, params: PathLossParams) -> np.ndarray:
    """Distance-dependent gain in dB (no shadowing) under the three-slope model."""
    d_km = np.maximum(np.asarray(dist_m, dtype=float), 1e-3) / 1e3
    d0_km = params.d0_m / 1e3
    d1_km = params.d1_m / 1e3
    loss = params.reference_loss_db()
    far = -loss - 35.0 * np.log10(np.maximum(d_km, d1_km))
    mid = -loss - 15.0 * np.log10(d1_km) - 20.0 * np.log10(np.maximum(d_km, d0_km))
    near = -loss - 15.0 * np.log10(d1_km) - 20.0 * np.log10(d0_km)
    out = np.where(d_km > d1_km, far, np.where(d_km > d0_km, mid, near))
    return out


@dataclass
class Deployment:
    """Random AP/user geometry with per-link large-scale gains."""

    area_side: float
    ap_positions: np.ndarray   # (M, 2) meters
    user_positions: np.ndarray  # (K, 2) meters
    beta: np.ndarray           # (M, K) linear power gains
    doppler: np.ndarray        # (K,) normalized Doppler per user
    seed: int

    @property
    def n_aps(self) -> int:
        return self.ap_positions.shape[0]

    @property
    def n_users(self) -> int:
        return self.user_positions.shape[0]


F_N_MAX_DEFAULT = 0.2


def make_deployment(
    m_aps: int,
    k_users: int,
    area_side: float,
    doppler_spec,
    seed,
    pathloss: PathLossParams | None = None,
) -> Deployment:
    """Draw a uniform random deployment over [0, area_side]^2.

    ``doppler_spec`` is ("fixed", value) or ("uniform", lo, hi); per-user
    normalized Doppler values are drawn accordingly.  Shadowing is
    log-normal with ``pathloss.shadow_sigma_db`` and applies only beyond
    the far breakpoint d1.
    """
    if m_aps < 1 or k_users < 1:
        raise ValueError("deployment needs at least one AP and one user")
    if area_side <= 0:
        raise ValueError("area side must be positive")
    params = pathloss if pathloss is not None else PathLossParams()
    rng = rng_for(seed)
    ap_pos = rng.uniform(0.0, area_side, size=(m_aps, 2))
    user_pos = rng.uniform(0.0, area_side, size=(k_users, 2))

    dist = np.linalg.norm(ap_pos[:, None, :] - user_pos[None, :, :], axis=2)
    gain_db = path_gain_db(dist, params)
    if params.shadow_sigma_db > 0:
        shadow = rng.standard_normal(size=dist.shape) * params.shadow_sigma_db
        gain_db = gain_db + np.where(dist > params.d1_m, shadow, 0.0)
    beta = 10.0 ** (gain_db / 10.0)

    kind = doppler_spec[0]
    if kind == "fixed":
        doppler = np.full(k_users, float(doppler_spec[1]))
    elif kind == "uniform":
        lo, hi = float(doppler_spec[1]), float(doppler_spec[2])
        doppler = rng.uniform(lo, hi, size=k_users)
        # keep draws strictly inside the supported band (lo is excluded)
        doppler = np.maximum(doppler, np.nextafter(lo, np.inf))
    else:
        raise ValueError(f"unknown doppler spec kind: {kind!r}")

    return Deployment(
        area_side=float(area_side),
        ap_positions=ap_pos,
        user_positions=user_pos,
        beta=beta,
        doppler=doppler,
        seed=int(as_int_seed(seed)),
    )


def as_int_seed(seed) -> int:
    if isinstance(seed, np.random.SeedSequence):
        return int(seed.entropy or 0)
    return int(seed)


@dataclass
class ChannelTrace:
    """True channels for every link over a run of coherence intervals.

    ``h`` and ``g`` have shape (L, M, K); g = sqrt(beta) * h.
    """

    h: np.ndarray
    g: np.ndarray
    profiles: list = field(default_factory=list)  # per-user AgingProfile

    @property
    def length(self) -> int:
        return self.h.shape[0]


def simulate_channels(
    deployment: Deployment,
    profiles,
    length: int,
    seed,
) -> ChannelTrace:
    """Generate one realization of all M*K link channels over ``length`` CIs."""
    m, k = deployment.beta.shape
    h = np.empty((length, m, k), dtype=complex)
    for ki in range(k):
        hk = generate_trace(profiles[ki], m, length, substream(seed, ki))
        h[:, :, ki] = hk.T
    g = np.sqrt(deployment.beta)[None, :, :] * h
    return ChannelTrace(h=h, g=g, profiles=list(profiles))
