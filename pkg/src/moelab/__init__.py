"""moelab: a desk-scale mixture-of-experts routing laboratory.

Small, fully deterministic numpy models for studying expert load balancing:
conventional and top-1 balance losses, loss-free bias control, progressive
sparsification, and a simulated data-parallel reduction of load statistics.
"""

from .balance import (
    BalanceStrategy,
    balance_gradient,
    bias_update,
    conventional_lbl,
    global_batch_reduce,
    lbl_value,
    top1_lbl,
)
from .config import (
    GLOBAL_BATCH,
    MICRO_BATCH,
    LabConfig,
    LoadStats,
    TokenBatch,
    desk_lab_config,
    reference_lab_config,
    validate_config,
)
from .harness import (
    RunConfig,
    RunResult,
    TrainState,
    checkpoint_load,
    checkpoint_save,
    default_run_config,
    init_train_state,
    run_experiment,
)
from .metrics import (
    RunRecord,
    emit_csv,
    emit_plots,
    emit_snapshots_csv,
    max_min_deviation,
    read_svg_data,
    relative_deviation,
)
from .moe_layer import (
    ExpertParams,
    MoELayer,
    init_layer,
    moe_backward,
    moe_forward,
    swiglu_forward,
)
from .optim import OptimizerState, adamw_step, clip_gradients, global_grad_norm
from .parallel import DTYPE_BYTES, GroupShard, all_reduce_mean, ep_traffic, shard_batch
from .router import (
    RouterState,
    RoutingDecision,
    accumulate_load,
    compute_logits,
    init_router,
    select_top_k,
    softmax_probs,
)
from .schedule import (
    BatchRamp,
    LrSchedule,
    REFERENCE_NON_EXPERT_PARAMS,
    SparsitySchedule,
    activated_experts_at,
    activated_params,
    batch_size_at,
    learning_rate_at,
    resolve_token_budget,
)
from .task import SyntheticTask, TaskConfig, make_task, sample_batch

__version__ = "0.1.0"
