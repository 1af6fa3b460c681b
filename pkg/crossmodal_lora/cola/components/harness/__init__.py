from .dataset import Dataset, Split, gen_dataset, load_jsonl, render_tokens, save_jsonl
from .gradcheck import (
    GRADCHECK_TOLERANCE,
    ClassResult,
    GradcheckReport,
    gradcheck_suite,
    parameter_class,
)
from .optim import AdamW, ParamGroup, build_optimizer
from .training import (
    EpochMetrics,
    LambdaTrace,
    LinearHead,
    MetricsLog,
    TaskModel,
    build_task_model,
    evaluate,
    evaluate_loss,
    export_lambda,
    init_head,
    lambda_values,
    linear_head_ceiling,
    parse_lambda_csv,
    train,
)

__all__ = [
    "GRADCHECK_TOLERANCE",
    "AdamW",
    "ClassResult",
    "Dataset",
    "EpochMetrics",
    "GradcheckReport",
    "LambdaTrace",
    "LinearHead",
    "MetricsLog",
    "ParamGroup",
    "Split",
    "TaskModel",
    "build_optimizer",
    "build_task_model",
    "evaluate",
    "evaluate_loss",
    "export_lambda",
    "gen_dataset",
    "gradcheck_suite",
    "init_head",
    "lambda_values",
    "linear_head_ceiling",
    "load_jsonl",
    "parameter_class",
    "parse_lambda_csv",
    "render_tokens",
    "save_jsonl",
    "train",
]
