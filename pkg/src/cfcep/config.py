"""Experiment configuration: flat key=value files, validation, fingerprint.

Unknown keys and malformed values are rejected with the offending line
number.  Every key has a default mirroring the reference setup (64 APs,
40 users, 1 km^2, Q=63, 150 CIs, 1.9 GHz, 20 MHz, 0.1 W powers).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields, replace

from .channel import PathLossParams
from .errors import ConfigError
from .evaluation import SystemParams
from .predictor import TrainHyper


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "yes", "1"):
        return True
    if t in ("false", "no", "0"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_doppler(text: str):
    parts = text.strip().split(":")
    if parts[0] == "fixed" and len(parts) == 2:
        v = float(parts[1])
        if not 0 < v:
            raise ValueError("fixed doppler must be positive")
        return ("fixed", v)
    if parts[0] == "uniform" and len(parts) == 2:
        lo, hi = (float(x) for x in parts[1].split(","))
        if not 0 < lo < hi:
            raise ValueError("uniform doppler needs 0 < lo < hi")
        return ("uniform", lo, hi)
    raise ValueError(f"doppler spec must be fixed:<v> or uniform:<lo>,<hi>, got {text!r}")


def _int_list(text: str):
    return [int(x) for x in text.split(",") if x.strip()]


def _float_list(text: str):
    return [float(x) for x in text.split(",") if x.strip()]


def _scheme_list(text: str):
    out = []
    for item in text.split(","):
        name = item.strip().lower()
        if not name:
            continue
        if name not in ("tdd", "cep", "identity", "perfect"):
            raise ValueError(f"unknown scheme {name!r}")
        out.append(name)
    if not out:
        raise ValueError("scheme list is empty")
    return out


@dataclass
class ExperimentConfig:
    m_aps: int = 64
    k_users: int = 40
    area_side_m: float = 1000.0
    ar_order: int = 63
    n_cis: int = 150
    doppler: tuple = ("uniform", 0.05, 0.2)
    e2p_ratios: list = field(default_factory=lambda: [1, 2])
    schemes: list = field(default_factory=lambda: ["tdd", "cep", "identity"])
    tau: int = 200
    tau_c: int = 0                    # 0 means "auto": track the user count
    bandwidth_hz: float = 20e6
    carrier_ghz: float = 1.9
    rho_w: float = 0.1
    p_d_w: float = 0.1
    noise_psd_dbw_hz: float = -195.0  # thermal floor plus 9 dB noise figure
    mc_realizations: int = 8
    n_deployments: int = 5
    master_seed: int = 12345
    model_dir: str = "models"
    fn_grid: list = field(default_factory=lambda: [0.06, 0.08, 0.10, 0.12, 0.14, 0.16, 0.18, 0.20])
    k_grid: list = field(default_factory=lambda: [10, 20, 30, 40, 50, 60])
    m_grid: list = field(default_factory=lambda: [16, 32, 48, 64, 96])
    pl_d0_m: float = 10.0
    pl_d1_m: float = 50.0
    pl_ap_height_m: float = 15.0
    pl_user_height_m: float = 1.65
    pl_shadow_sigma_db: float = 8.0
    train_traces: int = 500
    train_trace_len: int = 150
    train_pilot_snr: float = 100.0    # effective rho*tau_c during data generation
    train_lr: float = 1e-4
    train_batch_size: int = 256
    train_max_epochs: int = 200
    train_patience: int = 20
    train_val_fraction: float = 0.1

    # ------------------------------------------------------------------
    def validate(self) -> None:
        if self.m_aps < 1 or self.k_users < 1:
            raise ConfigError("m_aps and k_users must be >= 1")
        if self.ar_order < 1:
            raise ConfigError("ar_order must be >= 1")
        if self.n_cis < 1:
            raise ConfigError("n_cis must be >= 1")
        if any(n < 1 for n in self.e2p_ratios):
            raise ConfigError("e2p_ratios entries must be >= 1")
        if self.tau < 1:
            raise ConfigError("tau must be >= 1")
        if self.resolved_tau_c(self.k_users) > self.tau:
            raise ConfigError(
                f"tau_c={self.resolved_tau_c(self.k_users)} exceeds tau={self.tau}"
            )
        if self.rho_w < 0 or self.p_d_w < 0:
            raise ConfigError("powers must be non-negative")
        if self.bandwidth_hz <= 0:
            raise ConfigError("bandwidth must be positive")
        if self.mc_realizations < 1 or self.n_deployments < 1:
            raise ConfigError("mc_realizations and n_deployments must be >= 1")
        if not 0.0 <= self.train_val_fraction < 1.0:
            raise ConfigError("train_val_fraction must be in [0, 1)")

    # ------------------------------------------------------------------
    def resolved_tau_c(self, k_users: int | None = None) -> int:
        k = self.k_users if k_users is None else k_users
        return k if self.tau_c == 0 else self.tau_c

    @property
    def noise_power_w(self) -> float:
        return 10.0 ** (self.noise_psd_dbw_hz / 10.0) * self.bandwidth_hz

    def system_params(self, k_users: int | None = None) -> SystemParams:
        noise = self.noise_power_w
        return SystemParams(
            p_d=self.p_d_w / noise,
            rho=self.rho_w / noise,
            tau=self.tau,
            tau_c=self.resolved_tau_c(k_users),
            bandwidth_hz=self.bandwidth_hz,
        )

    def pathloss_params(self) -> PathLossParams:
        return PathLossParams(
            d0_m=self.pl_d0_m,
            d1_m=self.pl_d1_m,
            carrier_ghz=self.carrier_ghz,
            ap_height_m=self.pl_ap_height_m,
            user_height_m=self.pl_user_height_m,
            shadow_sigma_db=self.pl_shadow_sigma_db,
        )

    def train_hyper(self) -> TrainHyper:
        return TrainHyper(
            lr=self.train_lr,
            batch_size=self.train_batch_size,
            max_epochs=self.train_max_epochs,
            patience=self.train_patience,
            val_fraction=self.train_val_fraction,
        )

    def scheme_keys(self) -> list:
        """Expand scheme names into (scheme, N) evaluation keys."""
        keys = []
        for name in self.schemes:
            if name in ("tdd", "perfect"):
                keys.append((name, 0))
            else:
                keys.extend((name, n) for n in self.e2p_ratios)
        return keys

    # ------------------------------------------------------------------
    def canonical_lines(self) -> list:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            lines.append(f"{f.name} = {_format_value(value)}")
        return lines

    def fingerprint(self) -> str:
        digest = hashlib.sha256("\n".join(self.canonical_lines()).encode()).hexdigest()
        return digest[:12]


def _format_value(value) -> str:
    if isinstance(value, tuple):  # doppler spec
        if value[0] == "fixed":
            return f"fixed:{value[1]:.12g}"
        return f"uniform:{value[1]:.12g},{value[2]:.12g}"
    if isinstance(value, list):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return f"{value:.12g}"
    return str(value)


_PARSERS = {
    "m_aps": int, "k_users": int, "area_side_m": float, "ar_order": int,
    "n_cis": int, "doppler": _parse_doppler, "e2p_ratios": _int_list,
    "schemes": _scheme_list, "tau": int, "tau_c": int,
    "bandwidth_hz": float, "carrier_ghz": float, "rho_w": float,
    "p_d_w": float, "noise_psd_dbw_hz": float, "mc_realizations": int,
    "n_deployments": int, "master_seed": int, "model_dir": str,
    "fn_grid": _float_list, "k_grid": _int_list, "m_grid": _int_list,
    "pl_d0_m": float, "pl_d1_m": float, "pl_ap_height_m": float,
    "pl_user_height_m": float, "pl_shadow_sigma_db": float,
    "train_traces": int, "train_trace_len": int, "train_pilot_snr": float,
    "train_lr": float, "train_batch_size": int, "train_max_epochs": int,
    "train_patience": int, "train_val_fraction": float,
}


def parse_config(path) -> ExperimentConfig:
    """Parse a flat ``key = value`` file; reject unknown keys and bad values."""
    cfg = ExperimentConfig()
    seen = set()
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = fh.readlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc

    for lineno, line in enumerate(raw, start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line.rstrip()!r}")
        key, _, value = text.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in _PARSERS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        seen.add(key)
        try:
            parsed = _PARSERS[key](value)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{path}:{lineno}: invalid value for {key}: {exc}") from exc
        cfg = replace(cfg, **{key: parsed})

    try:
        cfg.validate()
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return cfg


def write_config(cfg: ExperimentConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(cfg.canonical_lines()) + "\n")
