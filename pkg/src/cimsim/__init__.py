"""Bit-exact functional and cycle-level simulator of a digital SRAM
compute-in-memory self-attention accelerator: dual-banked bit-serial int8
MAC macro, LUT-based split fixed-point softmax, and encoder / decoder /
encoder-decoder attention mappings, with a batch CLI harness."""

from .attention import (
    AttentionConfig,
    AttentionWeights,
    KvCache,
    MappingPlan,
    Mode,
    ScaleSet,
    SoftmaxTables,
    calibrate_scales,
    decoder_step,
    encoder_attention,
    encoder_decoder_attention,
    make_mapping_plan,
    multi_head_attention,
    project_qkv,
)
from .cim_core import (
    CimError,
    CimMacro,
    EventLog,
    Partition,
    WeightBank,
    cycle_output,
    mac_cycle,
    matvec_int8,
    tiled_matmul,
    write_weights,
)
from .fxp import (
    AccTensor,
    FxpFormat,
    FxpValue,
    Q8_24,
    QuantTensor,
    dequantize,
    fxp_mul,
    quantize,
    requantize_32_to_8,
)
from .perf import (
    CostModel,
    CycleReport,
    Pipeline,
    SparsityProfile,
    count_ops,
    efficiency_proxy,
    latency_comparison,
    schedule_attention,
)
from .softmax import (
    ExpLut,
    Flow,
    RecipLut,
    SplitSoftmaxState,
    build_exp_lut,
    build_recip_lut,
    naive_softmax_ref,
    normalize_terms,
    rescale_accumulator,
    safe_softmax_ref,
    split_softmax_probs,
    split_softmax_row,
)

__version__ = "0.1.0"
