"""Cell-free massive-MIMO simulator with alternating channel
estimation/prediction, MLP-based channel prediction, and Monte-Carlo
net-throughput evaluation."""

__version__ = "0.1.0"

from .channel import (
    AgingProfile,
    ChannelTrace,
    Deployment,
    PathLossParams,
    acf,
    bessel_j0,
    fit_ar,
    generate_trace,
    make_deployment,
    simulate_channels,
    stationary_variance,
)
from .config import ExperimentConfig, parse_config
from .estimation import (
    MmseLinkStats,
    PilotBook,
    UplinkObservation,
    link_stats,
    make_pilots,
    mmse_estimate,
    receive_pilots,
)
from .evaluation import (
    PowerAllocation,
    RateEstimate,
    SystemParams,
    achievable_rate,
    equal_power,
    net_throughput,
    simulate_downlink,
    window_rates,
)
from .predictor import (
    MlpModel,
    ModelBank,
    TrainHyper,
    TrainingSamples,
    build_features,
    forward,
    generate_training_data,
    identity_mapping_mse,
    load_bank,
    load_dataset,
    load_model,
    mlp_dims,
    predict_channels,
    save_dataset,
    save_model,
    select_model,
    train,
)
from .scheduler import (
    AcquisitionRun,
    Schedule,
    make_schedule,
    overhead_factor,
    run_cep,
    run_identity,
    run_perfect,
    run_tdd,
    steady_position_cis,
)
