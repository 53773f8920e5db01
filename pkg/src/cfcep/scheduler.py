"""Per-CI channel acquisition under the CEP, identity, and TDD schemes.

Every scheme produces the beamforming channel gbar for each CI: the MMSE
estimate at estimate-and-transmit (ET) CIs, and at predict-and-transmit
(PT) CIs either a neural prediction (CEP), a copy of the window's estimate
(identity), or nothing special (TDD estimates everywhere).

Pilot noise is drawn from a per-CI substream of the run seed, so schemes
given the same seed see identical estimates at coinciding ET CIs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .channel import ChannelTrace, Deployment
from .errors import UnsupportedDopplerError
from .estimation import PilotBook, link_stats, projected_pilot_observation
from .predictor import ModelBank, build_features, forward, history_len, select_model
from .seeding import TAG_PILOT_NOISE, rng_for, substream

INFERENCE_CHUNK = 16384

SCHEME_CEP = "cep"
SCHEME_IDENTITY = "identity"
SCHEME_TDD = "tdd"
SCHEME_PERFECT = "perfect"


@dataclass
class Schedule:
    """1:N estimate-to-predict pattern; CI l is ET iff l mod (N+1) == 0."""

    n_pt: int

    @property
    def window_len(self) -> int:
        return self.n_pt + 1

    @property
    def alpha(self) -> float:
        return 1.0 / self.n_pt

    def is_et(self, ci) -> np.ndarray:
        return np.asarray(ci) % self.window_len == 0

    def roles(self, length: int) -> np.ndarray:
        return self.is_et(np.arange(length))

    def pilot_count(self, length: int) -> int:
        return math.ceil(length / self.window_len)


def make_schedule(n_pt: int) -> Schedule:
    if n_pt < 1:
        raise ValueError("E2P ratio 1:N requires N >= 1")
    return Schedule(n_pt=int(n_pt))


def overhead_factor(scheme: str, alpha: float, tau_c: int, tau: int) -> float:
    """Fraction of the CI left for data after pilot overhead.

    CEP/identity spend tau_c pilot symbols once per window of (1+alpha)/alpha
    CIs: 1 - alpha*tau_c/((1+alpha)*tau).  TDD pays every CI: 1 - tau_c/tau.
    """
    if tau_c > tau:
        raise ValueError(f"tau_c={tau_c} exceeds CI length tau={tau}")
    if scheme in (SCHEME_CEP, SCHEME_IDENTITY):
        return 1.0 - alpha * tau_c / ((1.0 + alpha) * tau)
    if scheme == SCHEME_TDD:
        return 1.0 - tau_c / tau
    if scheme == SCHEME_PERFECT:
        return 1.0
    raise ValueError(f"unknown scheme {scheme!r}")


@dataclass
class AcquisitionRun:
    """Per-CI beamforming channels and roles for one scheme realization."""

    scheme: str
    n_pt: int | None
    gbar: np.ndarray       # (L, M, K) complex
    is_et: np.ndarray      # (L,) bool
    predicted: np.ndarray  # (L,) bool, True where the DNN filled the CI
    warmup_cis: int        # CIs before the first fully predicted window
    n_pilot_cis: int

    @property
    def length(self) -> int:
        return self.gbar.shape[0]


def _link_statistics(trace: ChannelTrace, deployment: Deployment, rho: float, tau_c: int):
    sigma2_h = np.array([p.stationary_var for p in trace.profiles])
    return link_stats(deployment.beta, sigma2_h[None, :], rho, tau_c)


def _estimate_cis(trace, stats, rho, tau_c, seed, ci_indices) -> np.ndarray:
    """MMSE estimates at the given CIs, noise drawn from per-CI substreams."""
    out = np.empty((len(ci_indices),) + trace.g.shape[1:], dtype=complex)
    for i, ci in enumerate(ci_indices):
        rng = rng_for(substream(seed, TAG_PILOT_NOISE, int(ci)))
        y_bar = projected_pilot_observation(trace.g[ci], rho, tau_c, rng)
        out[i] = stats.est_coeff * y_bar
    return out


def run_tdd(trace: ChannelTrace, deployment: Deployment, pilots: PilotBook, params, seed) -> AcquisitionRun:
    """Full-TDD baseline: MMSE estimation at every CI."""
    length = trace.length
    stats = _link_statistics(trace, deployment, params.rho, pilots.tau_c)
    gbar = _estimate_cis(trace, stats, params.rho, pilots.tau_c, seed, range(length))
    return AcquisitionRun(
        scheme=SCHEME_TDD, n_pt=None, gbar=gbar,
        is_et=np.ones(length, dtype=bool),
        predicted=np.zeros(length, dtype=bool),
        warmup_cis=0, n_pilot_cis=length,
    )


def run_perfect(trace: ChannelTrace) -> AcquisitionRun:
    """Oracle upper bound: the beamformer sees the true channel everywhere."""
    length = trace.length
    return AcquisitionRun(
        scheme=SCHEME_PERFECT, n_pt=None, gbar=trace.g.copy(),
        is_et=np.zeros(length, dtype=bool),
        predicted=np.zeros(length, dtype=bool),
        warmup_cis=0, n_pilot_cis=0,
    )


def _window_layout(length: int, n_pt: int):
    window = n_pt + 1
    et_cis = np.arange(0, length, window)
    return window, et_cis


def run_identity(
    trace: ChannelTrace,
    deployment: Deployment,
    pilots: PilotBook,
    params,
    n_pt: int,
    seed,
) -> AcquisitionRun:
    """Identity-mapping baseline: PT CIs reuse the window's ET estimate."""
    schedule = make_schedule(n_pt)
    length = trace.length
    _, et_cis = _window_layout(length, n_pt)
    stats = _link_statistics(trace, deployment, params.rho, pilots.tau_c)
    ghat = _estimate_cis(trace, stats, params.rho, pilots.tau_c, seed, et_cis)

    gbar = np.empty_like(trace.g)
    for i, et in enumerate(et_cis):
        gbar[et : min(et + n_pt + 1, length)] = ghat[i]
    return AcquisitionRun(
        scheme=SCHEME_IDENTITY, n_pt=n_pt, gbar=gbar,
        is_et=schedule.roles(length),
        predicted=np.zeros(length, dtype=bool),
        warmup_cis=0, n_pilot_cis=len(et_cis),
    )


def run_cep(
    trace: ChannelTrace,
    deployment: Deployment,
    bank: ModelBank,
    pilots: PilotBook,
    params,
    n_pt: int,
    seed,
    pt_oracle: bool = False,
) -> AcquisitionRun:
    """Alternating estimation/prediction acquisition.

    At each ET CI every link is MMSE-estimated and pushed into that link's
    history; at each PT CI the user's band model predicts the channel from
    the normalized estimate history.  Until enough ET CIs have occurred
    the PT CIs fall back to the identity mapping.  All state is per-link;
    no AP consumes another AP's data.  With ``pt_oracle`` the predictions
    are replaced by the true channels (diagnostic upper bound).
    """
    schedule = make_schedule(n_pt)
    length = trace.length
    m_aps, k_users = deployment.beta.shape
    window, et_cis = _window_layout(length, n_pt)
    q = trace.profiles[0].q
    h_len = history_len(q, n_pt)

    stats = _link_statistics(trace, deployment, params.rho, pilots.tau_c)
    ghat = _estimate_cis(trace, stats, params.rho, pilots.tau_c, seed, et_cis)

    # identity fallback first; predictions overwrite post-warmup windows
    gbar = np.empty_like(trace.g)
    for i, et in enumerate(et_cis):
        gbar[et : min(et + window, length)] = ghat[i]
    predicted = np.zeros(length, dtype=bool)

    pred_windows = [
        i for i in range(h_len - 1, len(et_cis)) if et_cis[i] + 1 < length
    ]
    warmup_cis = int(et_cis[h_len - 1] + 1) if h_len - 1 < len(et_cis) else length

    if pred_windows:
        if pt_oracle:
            for i in pred_windows:
                et = et_cis[i]
                hi = min(et + window, length)
                gbar[et + 1 : hi] = trace.g[et + 1 : hi]
                predicted[et + 1 : hi] = True
        else:
            _fill_predictions(
                gbar, predicted, trace, deployment, bank, stats,
                ghat, et_cis, pred_windows, n_pt, h_len, length,
            )

    return AcquisitionRun(
        scheme=SCHEME_CEP, n_pt=n_pt, gbar=gbar,
        is_et=schedule.roles(length),
        predicted=predicted,
        warmup_cis=warmup_cis, n_pilot_cis=len(et_cis),
    )


def _fill_predictions(
    gbar, predicted, trace, deployment, bank, stats,
    ghat, et_cis, pred_windows, n_pt, h_len, length,
):
    """Batched band-model inference for all predictable windows."""
    m_aps, k_users = deployment.beta.shape
    scale = np.sqrt(stats.beta_bar)          # (M, K)
    uhat = ghat / scale[None, :, :]          # normalized estimate history
    a1 = np.array([p.coeffs[0] for p in trace.profiles])
    f_n = deployment.doppler

    from .predictor import band_index  # local import to keep module load light

    bands = {}
    for k in range(k_users):
        bands.setdefault(band_index(f_n[k]), []).append(k)

    win_arr = np.asarray(pred_windows)
    # history stack: (n_win, H, M, K), most recent ET first
    hist_idx = win_arr[:, None] - np.arange(h_len)[None, :]
    hist = uhat[hist_idx]  # (n_win, H, M, K)

    for b_idx, users in bands.items():
        users = np.asarray(users)
        model = bank.get(b_idx, n_pt)
        hb = np.transpose(hist[:, :, :, users], (0, 2, 3, 1))  # (n_win, M, Kb, H)
        feats = build_features(hb, a1[users][None, None, :])
        flat = feats.reshape(-1, feats.shape[-1])
        outs = np.empty((flat.shape[0], 2 * n_pt))
        for start in range(0, flat.shape[0], INFERENCE_CHUNK):
            outs[start : start + INFERENCE_CHUNK] = forward(
                model, flat[start : start + INFERENCE_CHUNK]
            )
        preds = (outs[:, 0::2] + 1j * outs[:, 1::2]).reshape(
            len(pred_windows), m_aps, len(users), n_pt
        )
        preds = preds * scale[:, users][None, :, :, None]
        for wi, i in enumerate(pred_windows):
            et = et_cis[i]
            n_fill = min(n_pt, length - 1 - et)
            for j in range(n_fill):
                gbar[et + 1 + j][:, users] = preds[wi, :, :, j]

    for i in pred_windows:
        et = et_cis[i]
        predicted[et + 1 : min(et + 1 + n_pt, length)] = True


# ---------------------------------------------------------------------------
# Steady-state sampling layout for rate evaluation
# ---------------------------------------------------------------------------


def steady_position_cis(run: AcquisitionRun) -> list:
    """CI indices per window position usable for steady-state rate statistics.

    Returns [(position, ci_array), ...]: position 0 is the ET slot.  TDD and
    perfect runs pool every CI as a single position; CEP uses only complete,
    fully predicted windows; identity uses every complete window.
    """
    length = run.length
    if run.scheme in (SCHEME_TDD, SCHEME_PERFECT):
        return [(0, np.arange(length))]
    n_pt = run.n_pt
    window = n_pt + 1
    et_cis = np.arange(0, length, window)
    complete = et_cis[et_cis + n_pt <= length - 1]
    if run.scheme == SCHEME_CEP:
        complete = complete[[bool(run.predicted[et + 1]) for et in complete]]
    return [(p, complete + p) for p in range(window)]
