"""Run DNN inference under a hard memory budget by swapping model blocks."""
from .allocator import Allocation, BudgetRequest, allocate_budgets, performance_score
from .partitioner import (
    LookupTable,
    PartitionScheme,
    adapt_partition,
    block_count,
    build_lookup_table,
    predict_pipeline_latency,
    scheme_peak_memory,
    select_best,
)
from .profiler import DelayEstimate, DeviceProfile, ProfileSample, block_metrics, estimate_delays, fit_profile
from .registry import (
    Block,
    ModelInfoTable,
    ParameterFile,
    Skeleton,
    create_blocks,
    extract_skeleton,
    get_layers,
    load_model_table,
)
from .runtime import MemoryLedger, run_model_monolithic, run_model_swapped
from .simulator import simulate_adaptation, simulate_multi, simulate_single

__version__ = "0.1.0"
