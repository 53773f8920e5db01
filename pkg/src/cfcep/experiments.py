"""Experiment harness: scheme evaluation, sweeps, training, CSV emission.

One evaluation task covers a single (grid point, deployment) pair and all
configured schemes, sharing channel traces and pilot noise across schemes
(common random numbers).  Tasks run in worker processes with BLAS pinned
to one thread, so outputs are byte-identical regardless of --threads.
"""

from __future__ import annotations

import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import threadpoolctl

from .channel import fit_ar, make_deployment, simulate_channels
from .config import ExperimentConfig
from .errors import ConfigError
from .estimation import make_pilots
from .evaluation import equal_power, net_throughput, window_rates
from .predictor import (
    ModelBank,
    band_interval,
    band_midpoint,
    bank_filename,
    generate_training_data,
    identity_mapping_mse,
    load_bank,
    mlp_dims,
    save_dataset,
    save_model,
    train,
)
from .scheduler import (
    run_cep,
    run_identity,
    run_perfect,
    run_tdd,
    steady_position_cis,
)
from .seeding import TAG_DATASET, TAG_DEPLOYMENT, TAG_MC, TAG_RUN_NOISE, TAG_TRAIN, substream

ALL_BANK_PAIRS = [(b, n) for b in range(3) for n in (1, 2)]


@dataclass
class SchemeOutcome:
    scheme: str
    n_pt: int
    rate: np.ndarray
    stderr: np.ndarray
    sum_rate: float
    sum_stderr: float
    net_throughput_bps: float
    n_samples: int


def _profiles_for(doppler: np.ndarray, q: int) -> list:
    cache = {}
    out = []
    for f_n in doppler:
        key = float(f_n)
        if key not in cache:
            cache[key] = fit_ar(key, q)
        out.append(cache[key])
    return out


def required_bank_pairs(cfg: ExperimentConfig) -> list:
    if "cep" not in cfg.schemes:
        return []
    return [(b, n) for b in range(3) for n in cfg.e2p_ratios]


def evaluate_deployment(
    cfg: ExperimentConfig,
    m_aps: int,
    k_users: int,
    doppler_spec,
    dep_idx: int,
    bank: ModelBank | None,
) -> dict:
    """Evaluate every configured scheme on one random deployment.

    Traces and pilot-noise streams are keyed by (master seed, deployment,
    realization) only, so all schemes see the same randomness.
    """
    master = cfg.master_seed
    deployment = make_deployment(
        m_aps, k_users, cfg.area_side_m, doppler_spec,
        substream(master, TAG_DEPLOYMENT, dep_idx, m_aps, k_users),
        cfg.pathloss_params(),
    )
    params = cfg.system_params(k_users)
    pilots = make_pilots(k_users, params.tau_c)
    profiles = _profiles_for(deployment.doppler, cfg.ar_order)
    scheme_keys = cfg.scheme_keys()

    samples = {key: {} for key in scheme_keys}  # key -> pos -> [(g, gbar, r), ...]
    for r in range(cfg.mc_realizations):
        trace = simulate_channels(
            deployment, profiles, cfg.n_cis, substream(master, TAG_MC, dep_idx, r)
        )
        noise_seed = substream(master, TAG_RUN_NOISE, dep_idx, r)
        for scheme, n_pt in scheme_keys:
            if scheme == "tdd":
                run = run_tdd(trace, deployment, pilots, params, noise_seed)
            elif scheme == "perfect":
                run = run_perfect(trace)
            elif scheme == "identity":
                run = run_identity(trace, deployment, pilots, params, n_pt, noise_seed)
            elif scheme == "cep":
                if bank is None:
                    raise ConfigError("CEP scheme requires a trained model bank")
                run = run_cep(trace, deployment, bank, pilots, params, n_pt, noise_seed)
            else:
                raise ConfigError(f"unknown scheme {scheme!r}")
            for pos, cis in steady_position_cis(run):
                samples[(scheme, n_pt)].setdefault(pos, []).append(
                    (trace.g[cis], run.gbar[cis], r)
                )

    outcomes = {}
    for (scheme, n_pt), by_pos in samples.items():
        position_samples = []
        mom_sum = np.zeros(deployment.beta.shape)
        mom_count = 0
        for pos in sorted(by_pos):
            g_s = np.concatenate([g for g, _, _ in by_pos[pos]], axis=0)
            gb_s = np.concatenate([gb for _, gb, _ in by_pos[pos]], axis=0)
            groups = np.concatenate(
                [np.full(g.shape[0], r) for g, _, r in by_pos[pos]]
            )
            position_samples.append((g_s, gb_s, groups))
            mom_sum += np.sum(np.abs(gb_s) ** 2, axis=0)
            mom_count += gb_s.shape[0]
        eta = equal_power(mom_sum / mom_count).eta
        result = window_rates(position_samples, params.p_d, eta)
        alpha = 1.0 / n_pt if n_pt else 1.0
        outcomes[(scheme, n_pt)] = SchemeOutcome(
            scheme=scheme,
            n_pt=n_pt,
            rate=result.rate,
            stderr=result.stderr,
            sum_rate=result.sum_rate,
            sum_stderr=result.sum_stderr,
            net_throughput_bps=net_throughput(result.sum_rate, scheme, params, alpha),
            n_samples=result.n_samples,
        )
    return outcomes


# ---------------------------------------------------------------------------
# Parallel task execution
# ---------------------------------------------------------------------------

_WORKER = {}


def _init_worker(model_dir, pairs):
    _WORKER["limiter"] = threadpoolctl.threadpool_limits(1)
    _WORKER["bank"] = load_bank(model_dir, pairs) if pairs else None


def _run_point_task(args):
    cfg, m_aps, k_users, doppler_spec, point_idx, dep_idx = args
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        outcomes = evaluate_deployment(
            cfg, m_aps, k_users, doppler_spec, dep_idx, _WORKER.get("bank")
        )
    return point_idx, dep_idx, outcomes


def _execute_tasks(cfg: ExperimentConfig, tasks, model_dir, threads: int):
    pairs = required_bank_pairs(cfg)
    results = {}
    if threads <= 1:
        _init_worker(model_dir, pairs)
        try:
            for task in tasks:
                point_idx, dep_idx, out = _run_point_task(task)
                results[(point_idx, dep_idx)] = out
        finally:
            _WORKER.clear()
    else:
        with ProcessPoolExecutor(
            max_workers=threads,
            initializer=_init_worker,
            initargs=(model_dir, pairs),
        ) as pool:
            for point_idx, dep_idx, out in pool.map(_run_point_task, tasks, chunksize=1):
                results[(point_idx, dep_idx)] = out
    return results


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------


@dataclass
class SweepRow:
    sweep_value: float
    scheme: str
    n_pt: int
    sum_rate_bps_hz: float
    net_throughput_bps: float
    stderr_bps: float


def _combine_deployments(cfg, per_dep_outcomes, params_for_point):
    """Average scheme outcomes over deployment repetitions."""
    rows = []
    keys = cfg.scheme_keys()
    n_dep = len(per_dep_outcomes)
    for scheme, n_pt in keys:
        sums = np.array([o[(scheme, n_pt)].sum_rate for o in per_dep_outcomes])
        nets = np.array(
            [o[(scheme, n_pt)].net_throughput_bps for o in per_dep_outcomes]
        )
        mean_net = float(nets.mean())
        if n_dep > 1:
            stderr = float(nets.std(ddof=1) / np.sqrt(n_dep))
        else:
            o = per_dep_outcomes[0][(scheme, n_pt)]
            factor = o.net_throughput_bps / o.sum_rate if o.sum_rate > 0 else 0.0
            stderr = float(o.sum_stderr * factor)
        rows.append((scheme, n_pt, float(sums.mean()), mean_net, stderr))
    return rows


def run_sweep(cfg: ExperimentConfig, axis: str, model_dir, threads: int) -> list:
    """Evaluate all schemes across one sweep axis; returns SweepRow list."""
    if axis == "fn":
        grid = cfg.fn_grid
        specs = [(cfg.m_aps, cfg.k_users, ("fixed", v)) for v in grid]
    elif axis == "users":
        grid = cfg.k_grid
        specs = [(cfg.m_aps, int(k), cfg.doppler) for k in grid]
    elif axis == "aps":
        grid = cfg.m_grid
        specs = [(int(m), cfg.k_users, cfg.doppler) for m in grid]
    else:
        raise ValueError(f"unknown sweep axis {axis!r}")

    tasks = [
        (cfg, m, k, dop, point_idx, dep_idx)
        for point_idx, (m, k, dop) in enumerate(specs)
        for dep_idx in range(cfg.n_deployments)
    ]
    results = _execute_tasks(cfg, tasks, model_dir, threads)

    rows = []
    for point_idx, value in enumerate(grid):
        per_dep = [results[(point_idx, d)] for d in range(cfg.n_deployments)]
        for scheme, n_pt, sum_rate, net, stderr in _combine_deployments(
            cfg, per_dep, None
        ):
            rows.append(
                SweepRow(
                    sweep_value=float(value), scheme=scheme, n_pt=n_pt,
                    sum_rate_bps_hz=sum_rate, net_throughput_bps=net,
                    stderr_bps=stderr,
                )
            )
    return rows


def _fmt(x) -> str:
    """Full-precision, round-trippable float formatting for CSV cells."""
    return repr(float(x))


def write_sweep_csv(rows, cfg: ExperimentConfig, path) -> None:
    fingerprint = cfg.fingerprint()
    lines = ["sweep_value,scheme,n,sum_rate_bps_hz,net_throughput_bps,stderr,seed,config_hash"]
    for r in rows:
        lines.append(
            f"{_fmt(r.sweep_value)},{r.scheme},{r.n_pt},{_fmt(r.sum_rate_bps_hz)},"
            f"{_fmt(r.net_throughput_bps)},{_fmt(r.stderr_bps)},{cfg.master_seed},{fingerprint}"
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def cmd_sweep(cfg: ExperimentConfig, axis: str, out_path, model_dir=None, threads=None) -> list:
    model_dir = model_dir if model_dir is not None else cfg.model_dir
    threads = threads if threads is not None else (os.cpu_count() or 1)
    rows = run_sweep(cfg, axis, model_dir, threads)
    write_sweep_csv(rows, cfg, out_path)
    return rows


# ---------------------------------------------------------------------------
# Single-point evaluation
# ---------------------------------------------------------------------------


def cmd_eval(cfg: ExperimentConfig, out_path, model_dir=None, threads=None) -> dict:
    """Evaluate all configured schemes on deployment 0 with a per-user breakdown."""
    model_dir = model_dir if model_dir is not None else cfg.model_dir
    pairs = required_bank_pairs(cfg)
    bank = load_bank(model_dir, pairs) if pairs else None
    with threadpoolctl.threadpool_limits(1), warnings.catch_warnings():
        warnings.simplefilter("ignore")
        outcomes = evaluate_deployment(
            cfg, cfg.m_aps, cfg.k_users, cfg.doppler, 0, bank
        )
    fingerprint = cfg.fingerprint()
    lines = [
        "scheme,n,user,rate_bps_hz,rate_stderr,sum_rate_bps_hz,net_throughput_bps,seed,config_hash"
    ]
    for (scheme, n_pt) in cfg.scheme_keys():
        o = outcomes[(scheme, n_pt)]
        for k in range(o.rate.size):
            lines.append(
                f"{scheme},{n_pt},{k},{_fmt(o.rate[k])},{_fmt(o.stderr[k])},"
                f"{_fmt(o.sum_rate)},{_fmt(o.net_throughput_bps)},{cfg.master_seed},{fingerprint}"
            )
    Path(out_path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return outcomes


# ---------------------------------------------------------------------------
# Dataset generation and training
# ---------------------------------------------------------------------------


def cmd_gen_data(cfg: ExperimentConfig, band_idx: int, n_pt: int, out_path):
    """Generate and persist a training dataset for one (band, N) pair."""
    if not 0 <= band_idx <= 2:
        raise ConfigError(f"band index must be 1..3 (got {band_idx + 1})")
    tau_c = cfg.resolved_tau_c()
    rho_train = cfg.train_pilot_snr / tau_c
    samples = generate_training_data(
        band_interval(band_idx), n_pt, cfg.ar_order,
        cfg.train_traces, cfg.train_trace_len,
        rho_train, tau_c,
        substream(cfg.master_seed, TAG_DATASET, band_idx, n_pt),
    )
    save_dataset(samples, out_path)
    return samples


def train_band_model(cfg: ExperimentConfig, band_idx: int, n_pt: int, dataset=None):
    """Train the predictor for one (band, N) pair; returns a TrainResult."""
    if dataset is None:
        tau_c = cfg.resolved_tau_c()
        rho_train = cfg.train_pilot_snr / tau_c
        dataset = generate_training_data(
            band_interval(band_idx), n_pt, cfg.ar_order,
            cfg.train_traces, cfg.train_trace_len,
            rho_train, tau_c,
            substream(cfg.master_seed, TAG_DATASET, band_idx, n_pt),
        )
    else:
        dataset.band = band_interval(band_idx)
        dataset.e2p_n = n_pt
        dataset.q = cfg.ar_order
    return train(
        dataset,
        mlp_dims(cfg.ar_order, n_pt),
        cfg.train_hyper(),
        substream(cfg.master_seed, TAG_TRAIN, band_idx, n_pt),
    )


def cmd_train(cfg: ExperimentConfig, band_idx: int, n_pt: int, model_dir=None, dataset_path=None):
    """Train one band model, save it into the bank directory, report MSEs."""
    from .predictor import load_dataset

    model_dir = Path(model_dir if model_dir is not None else cfg.model_dir)
    model_dir.mkdir(parents=True, exist_ok=True)
    dataset = load_dataset(dataset_path) if dataset_path else None
    result = train_band_model(cfg, band_idx, n_pt, dataset)
    out = model_dir / bank_filename(band_idx, n_pt)
    save_model(result.model, out)
    oracle = identity_mapping_mse(band_midpoint(band_idx), 1.0, n_pt)
    print(
        f"band {band_idx + 1} (1:{n_pt}): train_mse={result.train_mse:.6f} "
        f"val_mse={result.val_mse:.6f} identity_oracle={oracle:.6f} "
        f"epochs={result.epochs_run} -> {out}"
    )
    return result, out
