"""Training engine with exact directional curvature and rescaled steps.

The differentiation core computes, next to the gradient, the exact curvature
of the batch loss along the chosen update direction via a third forward
("tangent") sweep, and uses it to scale the learning rate automatically.  A
divide-and-conquer execution schedule caps the resident activation stores at
about one net's worth for one extra sweep of compute.
"""

from .tensor import BatchView, ParamVec, ShapeError, Tensor, axpy, inner, norm_sq, scale
from .layers import (
    ContractError,
    DegenerateStatisticsError,
    LayerSaved,
    LayerSpec,
    activation,
    bias,
    centering,
    conv2d,
    cross_entropy_loss,
    dense,
    mse_loss,
    normalizing,
)
from .engine import (
    CheckpointRun,
    CostMeter,
    Network,
    NumericError,
    TapeStore,
    choose_split,
    hessian_vector_product,
    init_network,
    measure_costs,
    run_backward,
    run_checkpointed,
    run_forward,
    tangent_curvature,
    validate_network,
)
from .rescale import (
    RescaleOutput,
    RescaleState,
    VanishingCurvatureError,
    ZeroDirectionError,
    batch_curvature,
    rescale_factor,
    rescale_step,
    update_estimate,
)
from .optim import (
    PrecondState,
    RobbinsMonro,
    ScheduleSpec,
    annealing_schedule,
    apply_update,
    clamp_robbins_monro,
    constant_schedule,
    cosine_schedule,
    descent_fraction,
    direction_momentum,
    direction_rmsprop,
    direction_sgd,
    red_schedule,
    schedule_value,
    step_params,
)
from .data import (
    Dataset,
    FeatureMemory,
    IdxFormatError,
    batches,
    load_idx,
    memory_push_assemble,
    save_idx,
    synthetic_blobs,
)
from .harness import (
    ConfigError,
    MetricsRow,
    RunConfig,
    TrainResult,
    build_network,
    demo_newton_1d,
    demo_stochastic_mean,
    derive_seed,
    ema_report,
    evaluate,
    load_config,
    train,
    write_metrics_csv,
    write_summary_json,
)

__version__ = "0.1.0"
