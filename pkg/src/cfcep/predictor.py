"""MLP channel predictor: features, training, inference, persistence.

One model is trained per (Doppler band, E2P ratio).  Inputs are the real
and imaginary parts of the most recent estimated channels at the
estimate-and-transmit CIs (spacing N+1), most recent first, plus two
correlation-hint features -a1*Re(g_hat(l)), -a1*Im(g_hat(l)); outputs are
the 2N real/imaginary parts of the N channels to predict.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np
import threadpoolctl

from .channel import acf, fit_ar, generate_trace
from .errors import FormatError, NumericalError, UnsupportedDopplerError, WarmupError
from .estimation import link_stats, projected_pilot_observation
from .seeding import TAG_DATASET, TAG_TRAIN, rng_for, substream

HIDDEN_WIDTH = 1024
N_HIDDEN = 3
LEAKY_SLOPE = 0.01

# Contiguous Doppler bands covering (0.05, 0.2].
BAND_EDGES = (0.05, 0.10, 0.16, 0.20)
N_BANDS = 3


def history_len(q: int, n_pt: int) -> int:
    """Number of past ET-CI estimates within the AR lookback window."""
    return math.ceil(q / (n_pt + 1))


def input_dim(q: int, n_pt: int) -> int:
    return 2 * history_len(q, n_pt) + 2


def output_dim(n_pt: int) -> int:
    return 2 * n_pt


def band_interval(band_idx: int) -> tuple[float, float]:
    return BAND_EDGES[band_idx], BAND_EDGES[band_idx + 1]


def band_midpoint(band_idx: int) -> float:
    lo, hi = band_interval(band_idx)
    return 0.5 * (lo + hi)


def band_index(f_n: float) -> int:
    """Map a normalized Doppler value to its model band."""
    if not (BAND_EDGES[0] < f_n <= BAND_EDGES[-1] + 1e-12):
        raise UnsupportedDopplerError(
            f"f_n={f_n} outside supported range ({BAND_EDGES[0]}, {BAND_EDGES[-1]}]"
        )
    if f_n <= BAND_EDGES[1]:
        return 0
    if f_n < BAND_EDGES[2]:
        return 1
    return 2


# ---------------------------------------------------------------------------
# Model container
# ---------------------------------------------------------------------------


@dataclass
class MlpModel:
    """Feed-forward predictor with frozen input/output normalization."""

    dims: list
    weights: list          # per layer, shape (d_in_l, d_out_l)
    biases: list           # per layer, shape (d_out_l,)
    leaky_slope: float
    input_mean: np.ndarray
    input_std: np.ndarray
    output_mean: np.ndarray
    output_std: np.ndarray
    band: tuple            # (f_lo, f_hi)
    e2p_n: int
    q: int

    def __post_init__(self):
        if self.dims[0] != input_dim(self.q, self.e2p_n):
            raise ValueError(
                f"d_in={self.dims[0]} inconsistent with Q={self.q}, N={self.e2p_n}"
            )
        if self.dims[-1] != output_dim(self.e2p_n):
            raise ValueError(f"d_out={self.dims[-1]} inconsistent with N={self.e2p_n}")
        if np.any(self.input_std <= 0) or np.any(self.output_std <= 0):
            raise ValueError("normalization standard deviations must be positive")


def mlp_dims(q: int, n_pt: int) -> list:
    return [input_dim(q, n_pt)] + [HIDDEN_WIDTH] * N_HIDDEN + [output_dim(n_pt)]


def init_params(dims, seed, scale_mode: str = "he"):
    """He-initialized weights and zero biases."""
    rng = rng_for(substream(seed, TAG_TRAIN))
    weights, biases = [], []
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        weights.append(rng.standard_normal((d_in, d_out)) * np.sqrt(2.0 / d_in))
        biases.append(np.zeros(d_out))
    return weights, biases


# ---------------------------------------------------------------------------
# Features
# ---------------------------------------------------------------------------


def build_features(est_history, a1: float) -> np.ndarray:
    """Interleave (Re, Im) of the estimate history and append the hint pair.

    ``est_history`` holds the most recent ET-CI estimates first, spaced
    N+1 CIs apart; accepts shape (H,) or (batch..., H).  Returns a float
    array of shape (batch..., 2H+2).
    """
    hist = np.asarray(est_history)
    if hist.shape[-1] < 1:
        raise WarmupError("estimate history is empty")
    out = np.empty(hist.shape[:-1] + (2 * hist.shape[-1] + 2,), dtype=float)
    out[..., 0:-2:2] = hist.real
    out[..., 1:-2:2] = hist.imag
    out[..., -2] = -a1 * hist[..., 0].real
    out[..., -1] = -a1 * hist[..., 0].imag
    return out


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------


def forward_core(weights, biases, slope, x: np.ndarray) -> np.ndarray:
    """Affine stack with leaky-rectifier hidden activations (no normalization)."""
    z = np.asarray(x, dtype=float)
    last = len(weights) - 1
    for i, (w, b) in enumerate(zip(weights, biases)):
        z = z @ w
        z += b
        if i < last:
            np.maximum(z, slope * z, out=z)
    return z


def forward(model: MlpModel, features) -> np.ndarray:
    """Normalized forward pass: z-score input, run the stack, de-normalize."""
    x = np.asarray(features, dtype=float)
    if x.shape[-1] != model.dims[0]:
        raise ValueError(f"expected {model.dims[0]} features, got {x.shape[-1]}")
    z = (x - model.input_mean) / model.input_std
    y = forward_core(model.weights, model.biases, model.leaky_slope, z)
    return y * model.output_std + model.output_mean


def loss_and_grads(weights, biases, slope, x, y):
    """MSE loss and its gradients with respect to every weight and bias."""
    acts = [np.asarray(x, dtype=float)]
    pres = []
    z = acts[0]
    last = len(weights) - 1
    for i, (w, b) in enumerate(zip(weights, biases)):
        pre = z @ w + b
        pres.append(pre)
        z = np.maximum(pre, slope * pre) if i < last else pre
        acts.append(z)
    err = acts[-1] - y
    loss = float(np.mean(err**2))

    grad_w = [None] * len(weights)
    grad_b = [None] * len(weights)
    d = 2.0 * err / err.size
    for i in range(last, -1, -1):
        grad_w[i] = acts[i].T @ d
        grad_b[i] = d.sum(axis=0)
        if i > 0:
            d = d @ weights[i].T
            d = np.where(pres[i - 1] > 0, d, slope * d)
    return loss, grad_w, grad_b


@dataclass
class AdamState:
    """Adaptive-moment optimizer state for one parameter set."""

    m_w: list
    v_w: list
    m_b: list
    v_b: list
    step: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, weights, biases, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        return cls(
            m_w=[np.zeros_like(w) for w in weights],
            v_w=[np.zeros_like(w) for w in weights],
            m_b=[np.zeros_like(b) for b in biases],
            v_b=[np.zeros_like(b) for b in biases],
            lr=lr, beta1=beta1, beta2=beta2, eps=eps,
        )

    def update(self, weights, biases, grad_w, grad_b):
        self.step += 1
        c1 = 1.0 - self.beta1**self.step
        c2 = 1.0 - self.beta2**self.step
        for p, g, m, v in zip(
            weights + biases, grad_w + grad_b,
            self.m_w + self.m_b, self.v_w + self.v_b,
        ):
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class TrainHyper:
    lr: float = 1e-4
    batch_size: int = 256
    max_epochs: int = 200
    patience: int = 20
    val_fraction: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class TrainingSamples:
    """Supervised (features, targets) pairs for one band and E2P ratio."""

    features: np.ndarray   # (n, d_in) float64
    targets: np.ndarray    # (n, d_out) float64
    band: tuple | None = None
    e2p_n: int | None = None
    q: int | None = None

    @property
    def n(self) -> int:
        return self.features.shape[0]


@dataclass
class TrainResult:
    model: "MlpModel"
    train_mse: float        # denormalized complex-channel MSE on the train split
    val_mse: float          # same on the validation split
    epochs_run: int
    val_history: list = field(default_factory=list)


def train(dataset: TrainingSamples, dims, hyper: TrainHyper, seed) -> TrainResult:
    """Mini-batch Adam on the MSE loss with early stopping.

    Normalization statistics come from the training split only and are
    frozen into the returned model; the parameters achieving the best
    validation MSE are kept.  Deterministic given (dataset, dims, hyper,
    seed); BLAS is pinned to one thread so reruns are bit-identical.
    """
    if dataset.n == 0:
        raise ValueError("training dataset is empty")
    if dataset.e2p_n is None or dataset.q is None or dataset.band is None:
        raise ValueError("dataset must carry band, e2p_n and q metadata")
    rng = rng_for(substream(seed, TAG_TRAIN, 1))
    perm = rng.permutation(dataset.n)
    n_val = max(1, int(round(hyper.val_fraction * dataset.n))) if dataset.n > 1 else 0
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    if train_idx.size == 0:
        train_idx, val_idx = perm, perm

    x_train = dataset.features[train_idx]
    y_train = dataset.targets[train_idx]
    x_val = dataset.features[val_idx] if val_idx.size else x_train
    y_val = dataset.targets[val_idx] if val_idx.size else y_train

    in_mean = x_train.mean(axis=0)
    in_std = np.maximum(x_train.std(axis=0), 1e-12)
    out_mean = y_train.mean(axis=0)
    out_std = np.maximum(y_train.std(axis=0), 1e-12)

    xn = (x_train - in_mean) / in_std
    yn = (y_train - out_mean) / out_std
    xv = (x_val - in_mean) / in_std
    yv = (y_val - out_mean) / out_std

    weights, biases = init_params(dims, seed)
    adam = AdamState.for_params(weights, biases, hyper.lr, hyper.beta1, hyper.beta2, hyper.eps)

    def val_loss():
        pred = forward_core(weights, biases, LEAKY_SLOPE, xv)
        return float(np.mean((pred - yv) ** 2))

    best_val = np.inf
    best_params = ([w.copy() for w in weights], [b.copy() for b in biases])
    stagnant = 0
    epochs_run = 0
    history = []
    n_train = xn.shape[0]

    with threadpoolctl.threadpool_limits(1):
        for epoch in range(hyper.max_epochs):
            order = rng.permutation(n_train)
            for start in range(0, n_train, hyper.batch_size):
                idx = order[start : start + hyper.batch_size]
                loss, gw, gb = loss_and_grads(weights, biases, LEAKY_SLOPE, xn[idx], yn[idx])
                if not np.isfinite(loss):
                    raise NumericalError(
                        f"training diverged (non-finite loss at epoch {epoch})"
                    )
                adam.update(weights, biases, gw, gb)
            v = val_loss()
            if not np.isfinite(v):
                raise NumericalError(
                    f"training diverged (non-finite validation loss at epoch {epoch})"
                )
            history.append(v)
            epochs_run = epoch + 1
            if v < best_val - 1e-12:
                best_val = v
                best_params = ([w.copy() for w in weights], [b.copy() for b in biases])
                stagnant = 0
            else:
                stagnant += 1
                if stagnant >= hyper.patience:
                    break

    weights, biases = best_params
    model = MlpModel(
        dims=list(dims),
        weights=weights,
        biases=biases,
        leaky_slope=LEAKY_SLOPE,
        input_mean=in_mean,
        input_std=in_std,
        output_mean=out_mean,
        output_std=out_std,
        band=tuple(dataset.band),
        e2p_n=int(dataset.e2p_n),
        q=int(dataset.q),
    )
    return TrainResult(
        model=model,
        train_mse=denormalized_mse(model, x_train, y_train),
        val_mse=denormalized_mse(model, x_val, y_val),
        epochs_run=epochs_run,
        val_history=history,
    )


def denormalized_mse(model: MlpModel, features, targets) -> float:
    """Mean squared complex-channel prediction error in channel units."""
    pred = forward(model, features)
    err = pred - np.asarray(targets, dtype=float)
    # each predicted CI contributes a (Re, Im) pair
    return float(np.mean(np.sum(err.reshape(err.shape[0], -1, 2) ** 2, axis=2)))


def identity_mapping_mse(f_n: float, sigma2_h: float = 1.0, n_pt: int = 1) -> float:
    """Closed-form MSE of reusing the last channel, E|h[l+j]-h[l]|^2 averaged
    over the window's predicted slots j = 1..N."""
    slots = np.arange(1, n_pt + 1)
    return float(np.mean(2.0 * sigma2_h * (1.0 - acf(f_n, slots))))


# ---------------------------------------------------------------------------
# Prediction API
# ---------------------------------------------------------------------------


def predict_channels(model: MlpModel, est_history, a1: float) -> np.ndarray:
    """Predict the N channels of the upcoming PT CIs, ordered by CI index."""
    hist = np.asarray(est_history)
    need = history_len(model.q, model.e2p_n)
    if hist.shape[-1] != need:
        raise WarmupError(
            f"need {need} past estimates for Q={model.q}, N={model.e2p_n}; "
            f"got {hist.shape[-1]}"
        )
    out = forward(model, build_features(hist, a1))
    return out[..., 0::2] + 1j * out[..., 1::2]


@dataclass
class ModelBank:
    """Predictor models keyed by (band index, E2P ratio N)."""

    models: dict
    band_edges: tuple = BAND_EDGES

    def get(self, band_idx: int, n_pt: int) -> MlpModel:
        try:
            return self.models[(band_idx, n_pt)]
        except KeyError:
            raise UnsupportedDopplerError(
                f"no model for band {band_idx}, 1:{n_pt} E2P ratio"
            ) from None


def select_model(bank: ModelBank, f_n: float, n_pt: int) -> MlpModel:
    """Return the model whose Doppler band contains f_n."""
    return bank.get(band_index(f_n), n_pt)


# ---------------------------------------------------------------------------
# Training-data generation
# ---------------------------------------------------------------------------


def generate_training_data(
    band,
    n_pt: int,
    q: int,
    n_traces: int,
    trace_len: int,
    rho: float,
    tau_c: int,
    seed,
) -> TrainingSamples:
    """Simulate unit-gain links and emit (features, targets) pairs.

    Each trace draws its own normalized Doppler uniformly within ``band``,
    generates ground-truth fading, simulates pilot reception and MMSE
    estimation at the ET CIs only, and slides the feature window over the
    trace.  Targets are the true channels of the PT CIs, never estimates.
    """
    lo, hi = float(band[0]), float(band[1])
    if not (0.0 < lo < hi):
        raise ValueError(f"invalid band {band}")
    h_len = history_len(q, n_pt)
    d_in = input_dim(q, n_pt)
    d_out = output_dim(n_pt)
    window = n_pt + 1

    feats, targs = [], []
    for trace_idx in range(n_traces):
        stream = substream(seed, TAG_DATASET, trace_idx)
        rng = np.random.default_rng(stream)
        f_n = max(rng.uniform(lo, hi), np.nextafter(lo, np.inf))
        profile = fit_ar(f_n, q)
        h = generate_trace(profile, 1, trace_len, substream(stream, 1))[0]

        et_idx = np.arange(0, trace_len, window)
        stats = link_stats(1.0, profile.stationary_var, rho, tau_c)
        y_bar = projected_pilot_observation(
            h[et_idx], rho, tau_c, np.random.default_rng(substream(stream, 2))
        )
        est = stats.est_coeff * y_bar

        # windows with a full history whose PT targets stay inside the trace
        first = h_len - 1
        valid = [i for i in range(first, et_idx.size) if et_idx[i] + n_pt < trace_len]
        if not valid:
            continue
        hist = np.stack([est[i : i - h_len : -1] if i >= h_len else est[i::-1] for i in valid])
        feats.append(build_features(hist, profile.coeffs[0]))
        tgt = np.empty((len(valid), d_out))
        for row, i in enumerate(valid):
            future = h[et_idx[i] + 1 : et_idx[i] + 1 + n_pt]
            tgt[row, 0::2] = future.real
            tgt[row, 1::2] = future.imag
        targs.append(tgt)

    if feats:
        features = np.concatenate(feats, axis=0)
        targets = np.concatenate(targs, axis=0)
    else:
        features = np.empty((0, d_in))
        targets = np.empty((0, d_out))
    return TrainingSamples(
        features=features, targets=targets, band=(lo, hi), e2p_n=n_pt, q=q
    )


# ---------------------------------------------------------------------------
# Binary persistence (field order documented in the README)
# ---------------------------------------------------------------------------

MODEL_MAGIC = b"CFCEPMDL"
DATASET_MAGIC = b"CFCEPDAT"
FORMAT_VERSION = 1


def save_model(model: MlpModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<dd", model.band[0], model.band[1]))
        fh.write(struct.pack("<II", model.e2p_n, model.q))
        fh.write(struct.pack("<d", model.leaky_slope))
        fh.write(struct.pack("<I", len(model.dims)))
        fh.write(struct.pack(f"<{len(model.dims)}I", *model.dims))
        for arr in (model.input_mean, model.input_std, model.output_mean, model.output_std):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        for w, b in zip(model.weights, model.biases):
            fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())


def _read_exact(fh, size: int, what: str) -> bytes:
    buf = fh.read(size)
    if len(buf) != size:
        raise FormatError(f"model file truncated while reading {what}")
    return buf


def load_model(path) -> MlpModel:
    with open(path, "rb") as fh:
        if _read_exact(fh, 8, "magic") != MODEL_MAGIC:
            raise FormatError("bad magic: not a predictor model file")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported model format version {version}")
        band = struct.unpack("<dd", _read_exact(fh, 16, "band"))
        e2p_n, q = struct.unpack("<II", _read_exact(fh, 8, "ratio/order"))
        (slope,) = struct.unpack("<d", _read_exact(fh, 8, "slope"))
        (n_layers,) = struct.unpack("<I", _read_exact(fh, 4, "layer count"))
        if not 2 <= n_layers <= 64:
            raise FormatError(f"implausible layer count {n_layers}")
        dims = list(struct.unpack(f"<{n_layers}I", _read_exact(fh, 4 * n_layers, "dims")))
        if dims[0] != input_dim(q, e2p_n) or dims[-1] != output_dim(e2p_n):
            raise FormatError(
                f"layer dims {dims[0]}/{dims[-1]} inconsistent with Q={q}, N={e2p_n}"
            )

        def read_vec(n, what):
            return np.frombuffer(_read_exact(fh, 8 * n, what), dtype="<f8").copy()

        in_mean = read_vec(dims[0], "input mean")
        in_std = read_vec(dims[0], "input std")
        out_mean = read_vec(dims[-1], "output mean")
        out_std = read_vec(dims[-1], "output std")
        weights, biases = [], []
        for d_in, d_out in zip(dims[:-1], dims[1:]):
            weights.append(read_vec(d_in * d_out, "weights").reshape(d_in, d_out))
            biases.append(read_vec(d_out, "bias"))
        if fh.read(1):
            raise FormatError("trailing bytes after model payload")
    return MlpModel(
        dims=dims, weights=weights, biases=biases, leaky_slope=slope,
        input_mean=in_mean, input_std=in_std,
        output_mean=out_mean, output_std=out_std,
        band=tuple(band), e2p_n=int(e2p_n), q=int(q),
    )


def save_dataset(samples: TrainingSamples, path) -> None:
    d_in = samples.features.shape[1]
    d_out = samples.targets.shape[1]
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<III", FORMAT_VERSION, d_in, d_out))
        fh.write(struct.pack("<Q", samples.n))
        rows = np.concatenate([samples.features, samples.targets], axis=1)
        fh.write(np.ascontiguousarray(rows, dtype="<f8").tobytes())


def load_dataset(path) -> TrainingSamples:
    with open(path, "rb") as fh:
        if _read_exact(fh, 8, "magic") != DATASET_MAGIC:
            raise FormatError("bad magic: not a training dataset file")
        version, d_in, d_out = struct.unpack("<III", _read_exact(fh, 12, "header"))
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported dataset format version {version}")
        (count,) = struct.unpack("<Q", _read_exact(fh, 8, "count"))
        rows = np.frombuffer(
            _read_exact(fh, 8 * count * (d_in + d_out), "rows"), dtype="<f8"
        ).reshape(count, d_in + d_out)
        if fh.read(1):
            raise FormatError("trailing bytes after dataset payload")
    return TrainingSamples(
        features=rows[:, :d_in].copy(), targets=rows[:, d_in:].copy()
    )


def bank_filename(band_idx: int, n_pt: int) -> str:
    return f"band{band_idx + 1}_n{n_pt}.cfm"


def load_bank(model_dir, pairs) -> ModelBank:
    """Load the models for every required (band index, N) pair from a directory."""
    from pathlib import Path

    from .errors import ConfigError

    models = {}
    for band_idx, n_pt in pairs:
        path = Path(model_dir) / bank_filename(band_idx, n_pt)
        if not path.exists():
            raise ConfigError(f"missing model file: {path}")
        model = load_model(path)
        models[(band_idx, n_pt)] = model
    return ModelBank(models=models)
