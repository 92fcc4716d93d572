"""Mixture-of-physical-priors adapter engine.

Frequency-domain heat/wave/Poisson operators over 2D token grids, a
regularized softmax router, a matched-budget low-rank baseline, a minimal
reverse-mode autodiff tape, and the desk-scale regression harness that
compares the two adapters on a frozen transformer host.
"""

import os as _os

# The workload is many tiny matrix products; BLAS thread fan-out is slower
# here and voids byte-stability. Pin to one thread unless the user overrides.
# Takes effect only if set before numpy first loads its BLAS backend.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    _os.environ.setdefault(_var, "1")

from .adapters import (
    ALL_PATHS,
    BudgetMatch,
    LoraAdapter,
    LoraParams,
    MoppaUnit,
    dense_source_param_count,
    load_checkpoint,
    lora_forward,
    match_budget,
    moppa_param_count,
    poisson_param_count,
    restore_parameters,
    save_checkpoint,
)
from .autodiff import GradCheckResult, Parameter, Tape, grad_check
from .config import AdapterConfig, ExperimentConfig, OutputConfig, load_config
from .errors import (
    BudgetError,
    CheckpointError,
    ConfigError,
    DimensionError,
    DivergenceError,
    GradCheckError,
    LayoutError,
    MoppaError,
    OptimizerError,
    ParameterError,
    TapeError,
)
from .physics import (
    DEFAULT_ETA,
    HeadLayout,
    HeatParams,
    MoppaUnitParams,
    PoissonParams,
    WaveParams,
    expand_head_coeffs,
    heat_apply,
    moppa_forward,
    moppa_forward_unfused,
    pde_residual_heat,
    pde_residual_poisson,
    pde_residual_wave,
    poisson_apply,
    source_distribution,
    wave_apply,
)
from .routing import (
    RouterState,
    ScheduleConfig,
    route_regularization,
    route_weights,
    schedule_weight,
    total_loss,
)
from .spectral import (
    FrequencyGrid,
    dct2d,
    dct_basis,
    frequency_grid,
    idct2d,
    spectral_laplacian,
)
from .toymodel import ADAPTER_KINDS, BlockWeights, ModelConfig, ToyModel, build_model, forward
from .training import (
    AdamW,
    RegressionTask,
    RunMetrics,
    TrainConfig,
    make_task,
    run_ablation,
    run_regression,
    run_single,
    run_trial,
    summarize,
    train_adapters,
)

__version__ = "0.1.0"
