"""Layer-pipelined offloaded LLM inference on an emulated device/host/disk hierarchy."""
from .errors import FormatError, InfeasibleError, IoError, LayoutError, OutOfMemory, PipoError
from .memory_model import (
    TOY_MODEL,
    LayerKind,
    MemoryReport,
    ModelSpec,
    Stage,
    WorkloadSpec,
    kv_cache_size,
    peak_memory,
    run_peak_bound,
    weight_sizes,
)
from .planner import BandwidthProfile, HardwareSpec, Plan, choose_block_size, choose_plan, probe_bandwidth
from .runtime import GenerationResult, RuntimeConfig, run_generation, run_sequential_baseline
from .storage import EmulationConfig, TierStore, pack_model
from .trace import Trace, compute_metrics, export_trace, load_trace, verify_trace
from .transfer import TransferEngine, TransferRequest

__version__ = "0.1.0"
