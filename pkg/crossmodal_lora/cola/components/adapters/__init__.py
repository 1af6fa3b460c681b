from .adapters import (
    AdaptedLinear,
    ColaPath,
    DeltaRank,
    Hypernet,
    LoraPath,
    adapted_forward,
    as_generator,
    hypernet_forward,
    init_adapted_linear,
    kaiming_uniform,
    materialize_deltas,
    merge_intra,
    numerical_rank,
    rank_of_delta,
    validate_adapter_dims,
    xavier_uniform,
)
from .serialization import (
    adapter_key,
    load_container,
    parse_adapter_key,
    restore_into,
    save_container,
)

__all__ = [
    "AdaptedLinear",
    "ColaPath",
    "DeltaRank",
    "Hypernet",
    "LoraPath",
    "adapted_forward",
    "as_generator",
    "adapter_key",
    "hypernet_forward",
    "init_adapted_linear",
    "kaiming_uniform",
    "load_container",
    "materialize_deltas",
    "merge_intra",
    "numerical_rank",
    "parse_adapter_key",
    "rank_of_delta",
    "restore_into",
    "save_container",
    "validate_adapter_dims",
    "xavier_uniform",
]
