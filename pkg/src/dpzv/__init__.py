"""Differentially private zeroth-order vertical federated learning simulator."""

from .backend import backend_name
from .numerics import (
    DirectionSampler,
    SeededStream,
    derive_seed,
    sample_gaussian,
    sample_sphere,
    std_normal_cdf,
)
from .privacy import (
    PrivacySpec,
    clip_probability_bound,
    compose,
    gdp_to_delta,
    noise_scale,
    per_step_mu,
    realized_epsilon,
    solve_epsilon,
    solve_mu,
)
from .zo import (
    ScalarFeedback,
    ZoConfig,
    clip_scalar,
    device_apply_feedback,
    privatize_batch,
    server_fo_step,
    server_zo_step,
    two_point_delta,
    zo_gradient_estimate,
)
from .data import (
    VerticalDataset,
    batch_sample,
    from_features,
    load_csv,
    load_idx,
    make_synthetic,
    partition_features,
)
from .protocol import (
    CommLedger,
    EmbeddingCache,
    MetricsTrace,
    RoundRecord,
    RunConfig,
    baseline_fo_round,
    build_simulation,
    comm_volume,
    evaluate,
    round_dpzv,
    run_training,
    schedule_next,
    warmup,
)

__version__ = "0.1.0"
