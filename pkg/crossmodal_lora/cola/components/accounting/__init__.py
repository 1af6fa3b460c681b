from .accounting import (
    FLOPS_HEADER,
    PATHWAY_ATTENTION,
    PATHWAY_FROZEN,
    PATHWAY_HYPERNET,
    PATHWAY_INTER,
    PATHWAY_INTRA,
    PATHWAY_LAMBDA,
    PATHWAY_POOL,
    ArchSpec,
    ComponentDims,
    EncoderArch,
    FlopsEntry,
    FlopsReport,
    ParamEntry,
    ParamReport,
    count_params,
    flops_forward,
    frozen_macs_per_layer,
    hypernet_params,
    matched_lora_rank,
    report_delta,
)
from .bench import (
    VARIANT_COLA,
    VARIANT_LORA,
    VARIANT_LORA_MATCHED,
    VARIANT_LORA_MERGED,
    BenchReport,
    TimingSummary,
    VariantTiming,
    merge_model,
    time_model,
    wallclock_bench,
)

__all__ = [
    "FLOPS_HEADER",
    "PATHWAY_ATTENTION",
    "PATHWAY_FROZEN",
    "PATHWAY_HYPERNET",
    "PATHWAY_INTER",
    "PATHWAY_INTRA",
    "PATHWAY_LAMBDA",
    "PATHWAY_POOL",
    "VARIANT_COLA",
    "VARIANT_LORA",
    "VARIANT_LORA_MATCHED",
    "VARIANT_LORA_MERGED",
    "ArchSpec",
    "BenchReport",
    "ComponentDims",
    "EncoderArch",
    "FlopsEntry",
    "FlopsReport",
    "ParamEntry",
    "ParamReport",
    "TimingSummary",
    "VariantTiming",
    "count_params",
    "flops_forward",
    "frozen_macs_per_layer",
    "hypernet_params",
    "matched_lora_rank",
    "merge_model",
    "report_delta",
    "time_model",
    "wallclock_bench",
]
