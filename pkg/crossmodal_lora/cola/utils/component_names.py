from typing import Final

# Adapter injection points of one encoder layer, in forward order.
QUERY: Final[str] = "q"
KEY: Final[str] = "k"
VALUE: Final[str] = "v"
OUT_PROJ: Final[str] = "o"
FFN_UP: Final[str] = "up"
FFN_DOWN: Final[str] = "down"

COMPONENTS: Final[tuple[str, ...]] = (QUERY, KEY, VALUE, OUT_PROJ, FFN_UP, FFN_DOWN)
ATTENTION_COMPONENTS: Final[tuple[str, ...]] = (QUERY, KEY, VALUE, OUT_PROJ)
FFN_COMPONENTS: Final[tuple[str, ...]] = (FFN_UP, FFN_DOWN)

ENCODER_M: Final[str] = "m"
ENCODER_C: Final[str] = "c"
ENCODERS: Final[tuple[str, ...]] = (ENCODER_M, ENCODER_C)

# Forward stages of one layer.
STAGE_ATTN: Final[str] = "attn"
STAGE_OUT_PROJ: Final[str] = "out_proj"
STAGE_FFN: Final[str] = "ffn"
STAGES: Final[tuple[str, ...]] = (STAGE_ATTN, STAGE_OUT_PROJ, STAGE_FFN)

# Checkpoint pathways.
PATH_BASE: Final[str] = "base"
PATH_LORA: Final[str] = "lora"
PATH_COLA: Final[str] = "cola"
PATH_HYPERNET: Final[str] = "hypernet"

CHECKPOINT_FORMAT_VERSION: Final[int] = 1
CHECKPOINT_VERSION_KEY: Final[str] = "__format_version__"

# CLI exit codes.
EXIT_OK: Final[int] = 0
EXIT_CONFIG_ERROR: Final[int] = 2
EXIT_NUMERIC_ABORT: Final[int] = 3
EXIT_VERIFICATION_FAILED: Final[int] = 4

# Output artifacts.
METRICS_FILE: Final[str] = "metrics.json"
TIMING_FILE: Final[str] = "timing.json"
LAMBDA_TRACE_FILE: Final[str] = "lambda_trace.csv"
CHECKPOINT_FILE: Final[str] = "checkpoint.npz"
PARAMS_FILE: Final[str] = "params.json"
FLOPS_FILE: Final[str] = "flops.json"
GRADCHECK_FILE: Final[str] = "gradcheck.json"
BENCH_FILE: Final[str] = "bench.json"
DATASET_FILE: Final[str] = "dataset.jsonl"
LAMBDA_TRACE_HEADER: Final[tuple[str, ...]] = (
    "epoch",
    "encoder",
    "layer",
    "component",
    "lambda",
)

MACS_TO_FLOPS: Final[int] = 2
