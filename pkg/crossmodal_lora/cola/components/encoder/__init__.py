from .encoder import (
    Encoder,
    EncoderLayer,
    attention_weights,
    attn_stage,
    ffn_stage,
    frozen_forward,
    init_encoder,
    init_encoder_layer,
    layer_forward,
    out_proj_stage,
    pool,
    position_rows,
)

__all__ = [
    "Encoder",
    "EncoderLayer",
    "attention_weights",
    "attn_stage",
    "ffn_stage",
    "frozen_forward",
    "init_encoder",
    "init_encoder_layer",
    "layer_forward",
    "out_proj_stage",
    "pool",
    "position_rows",
]
