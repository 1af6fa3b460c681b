from .dualenc import (
    DualEncoderModel,
    dual_forward,
    forward_tokens,
    frozen_hash,
    frozen_tensors,
    init_dual_encoder,
    load_checkpoint,
    randomize_adapters,
    save_checkpoint,
    set_lambdas,
    state_tensors,
    strategy_compare,
    trainable_parameters,
    unimodal_forward,
)

__all__ = [
    "DualEncoderModel",
    "dual_forward",
    "forward_tokens",
    "frozen_hash",
    "frozen_tensors",
    "init_dual_encoder",
    "load_checkpoint",
    "randomize_adapters",
    "save_checkpoint",
    "set_lambdas",
    "state_tensors",
    "strategy_compare",
    "trainable_parameters",
    "unimodal_forward",
]
