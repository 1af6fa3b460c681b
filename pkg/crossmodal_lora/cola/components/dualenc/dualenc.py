"""Two encoder stacks exchanging pooled cross-modal features once per stage"""

from __future__ import annotations

from collections.abc import Iterable

import numpy as np

from ...scripts.instrumentation.base_classes import NotifierBaseClass, PoolEvent
from ...utils.component_names import (
    ENCODER_C,
    ENCODER_M,
    ENCODERS,
    STAGE_ATTN,
    STAGE_FFN,
    STAGE_OUT_PROJ,
)
from ...utils.definitions import AdapterConfig, EncoderConfig, PropagationStrategy
from ...utils.helpers import sha256_arrays
from .. import app_logger
from ..adapters import (
    AdaptedLinear,
    adapter_key,
    as_generator,
    load_container,
    restore_into,
    save_container,
)
from ..custom_exceptions import ConfigurationError, ShapeError, UsageError
from ..encoder import Encoder, attn_stage, ffn_stage, init_encoder, out_proj_stage, pool
from ..numcore import DEFAULT_DTYPE, Tensor, no_grad


class DualEncoderModel(NotifierBaseClass):
    """
    A pair of encoders, `m` and `c`, whose adapters read pooled features of each other.
    Observers attached to the model receive one PoolEvent per consumed pool.
    """

    def __init__(
        self,
        encoder_m: Encoder,
        encoder_c: Encoder,
        strategy: PropagationStrategy = PropagationStrategy.PROGRESSIVE,
    ) -> None:
        super().__init__()

        if len(encoder_m.layers) != len(encoder_c.layers):
            app_logger.error(
                "Layer counts differ: m=%s c=%s", len(encoder_m.layers), len(encoder_c.layers)
            )
            raise ConfigurationError(
                f"Both encoders need the same depth, got {len(encoder_m.layers)} "
                f"and {len(encoder_c.layers)}"
            )

        self.encoder_m = encoder_m
        self.encoder_c = encoder_c
        self.strategy = PropagationStrategy(strategy)

    @property
    def encoders(self) -> dict[str, Encoder]:
        return {ENCODER_M: self.encoder_m, ENCODER_C: self.encoder_c}

    @property
    def n_layers(self) -> int:
        return len(self.encoder_m.layers)

    def adapted_linears(self) -> list[tuple[str, int, str, AdaptedLinear]]:
        """(encoder, layer, component, layer) for all twelve injection points per depth"""
        return [
            (tag, index, name, al)
            for tag, encoder in self.encoders.items()
            for index, name, al in encoder.adapted_linears()
        ]

    def embed(self, tokens_m: np.ndarray, tokens_c: np.ndarray) -> tuple[Tensor, Tensor]:
        return self.encoder_m.embed(tokens_m), self.encoder_c.embed(tokens_c)

    def emit(self, layer: int, stage: str, encoder: str, source: str, pooled: Tensor) -> None:
        if not self.observed:
            return
        self.event = PoolEvent(
            layer=layer,
            stage=stage,
            encoder=encoder,
            source=source,
            pooled=pooled.data.copy(),
        )
        self.notify()


def init_dual_encoder(
    config_m: EncoderConfig,
    config_c: EncoderConfig,
    adapter_m: AdapterConfig,
    adapter_c: AdapterConfig | None = None,
    strategy: PropagationStrategy = PropagationStrategy.PROGRESSIVE,
    seed: int | np.random.Generator = 0,
    dtype: np.dtype | type = DEFAULT_DTYPE,
) -> DualEncoderModel:
    """Builds both stacks from one seed; each hypernet reads the other encoder's width

    Args:
        config_m (EncoderConfig): Dimensions of encoder m
        config_c (EncoderConfig): Dimensions of encoder c
        adapter_m (AdapterConfig): Adapters of encoder m
        adapter_c (AdapterConfig | None): Adapters of encoder c, `adapter_m` when omitted
        strategy (PropagationStrategy): Which pooled features each stage consumes
        seed (int | np.random.Generator): Source of all randomness
        dtype (np.dtype | type): Storage precision

    Returns:
        DualEncoderModel: The model, every B matrix zero
    """
    adapter_c = adapter_c or adapter_m
    if config_m.n_layers != config_c.n_layers:
        app_logger.error("Layer counts differ: m=%s c=%s", config_m.n_layers, config_c.n_layers)
        raise ConfigurationError(
            f"Both encoders need the same depth, got {config_m.n_layers} and {config_c.n_layers}"
        )
    for config, reader in ((config_m, adapter_c), (config_c, adapter_m)):
        if reader.inter and config.d_v != config.d_model:
            # the attention output is pooled and fed to a hypernet sized for d_model
            raise ConfigurationError(
                f"Cross-modal pooling needs d_v == d_model, got {config.d_v} and {config.d_model}"
            )

    rng = as_generator(seed)
    encoder_m = init_encoder(config_m, adapter_m, config_c.d_model, rng, dtype=dtype)
    encoder_c = init_encoder(config_c, adapter_c, config_m.d_model, rng, dtype=dtype)
    return DualEncoderModel(encoder_m, encoder_c, strategy)


def dual_forward(
    model: DualEncoderModel,
    x_m: Tensor,
    x_c: Tensor,
    strategy: PropagationStrategy | None = None,
) -> tuple[Tensor, Tensor]:
    """Runs both encoders layer by layer, exchanging pooled features at each stage

    Both encoders finish a stage before either starts the next. Progressive feeds the
    attention stage pool(x), the out-projection pool(a) and the FFN pool(o) of the other
    encoder; Uniform feeds pool(x) to all three; ModuleWise feeds pool(x) to attention
    and out-projection and pool(o) to the FFN.

    Args:
        model (DualEncoderModel): The model
        x_m (Tensor): Embedded tokens of m [..., N_m, d_m]
        x_c (Tensor): Embedded tokens of c [..., N_c, d_c]
        strategy (PropagationStrategy | None): Overrides the model's strategy

    Returns:
        tuple[Tensor, Tensor]: Final hidden states (h_m, h_c)
    """
    strategy = PropagationStrategy(strategy or model.strategy)
    cfg_m, cfg_c = model.encoder_m.config, model.encoder_c.config

    if x_m.ndim < 2 or x_m.shape[-1] != cfg_m.d_model:
        raise ShapeError(f"x_m must be [..., N, {cfg_m.d_model}], got {x_m.shape}")
    if x_c.ndim < 2 or x_c.shape[-1] != cfg_c.d_model:
        raise ShapeError(f"x_c must be [..., N, {cfg_c.d_model}], got {x_c.shape}")
    if x_m.shape[:-2] != x_c.shape[:-2]:
        raise ShapeError(f"Batch dims of x_m {x_m.shape} and x_c {x_c.shape} disagree")

    def pooled(tensor: Tensor, source: str) -> Tensor:
        mode = cfg_m.pooling if source == ENCODER_M else cfg_c.pooling
        return pool(tensor, mode)

    for index, (layer_m, layer_c) in enumerate(zip(model.encoder_m.layers, model.encoder_c.layers)):
        pool_x_m, pool_x_c = pooled(x_m, ENCODER_M), pooled(x_c, ENCODER_C)

        model.emit(index, STAGE_ATTN, ENCODER_M, "c:x", pool_x_c)
        model.emit(index, STAGE_ATTN, ENCODER_C, "m:x", pool_x_m)
        a_m = attn_stage(layer_m, x_m, pool_x_c)
        a_c = attn_stage(layer_c, x_c, pool_x_m)

        if strategy is PropagationStrategy.PROGRESSIVE:
            feed_m, feed_c, source = pooled(a_c, ENCODER_C), pooled(a_m, ENCODER_M), "a"
        else:
            feed_m, feed_c, source = pool_x_c, pool_x_m, "x"
        model.emit(index, STAGE_OUT_PROJ, ENCODER_M, f"c:{source}", feed_m)
        model.emit(index, STAGE_OUT_PROJ, ENCODER_C, f"m:{source}", feed_c)
        o_m = out_proj_stage(layer_m, a_m, feed_m, x_m)
        o_c = out_proj_stage(layer_c, a_c, feed_c, x_c)

        if strategy is PropagationStrategy.UNIFORM:
            feed_m, feed_c, source = pool_x_c, pool_x_m, "x"
        else:
            feed_m, feed_c, source = pooled(o_c, ENCODER_C), pooled(o_m, ENCODER_M), "o"
        model.emit(index, STAGE_FFN, ENCODER_M, f"c:{source}", feed_m)
        model.emit(index, STAGE_FFN, ENCODER_C, f"m:{source}", feed_c)
        x_m = ffn_stage(layer_m, o_m, feed_m)
        x_c = ffn_stage(layer_c, o_c, feed_c)

    return x_m, x_c


def forward_tokens(
    model: DualEncoderModel,
    tokens_m: np.ndarray,
    tokens_c: np.ndarray,
    strategy: PropagationStrategy | None = None,
) -> tuple[Tensor, Tensor]:
    x_m, x_c = model.embed(tokens_m, tokens_c)
    return dual_forward(model, x_m, x_c, strategy=strategy)


def _live_inter_paths(encoder: Encoder) -> list[str]:
    live = []
    for index, name, al in encoder.adapted_linears():
        if al.cola is None:
            continue
        if al.fully_shared or float(al.cola.lam.data) != 0.0:
            live.append(f"{index}/{name}")
    return live


def unimodal_forward(model: DualEncoderModel, which: str, x: Tensor) -> Tensor:
    """LoRA-adapted forward of one encoder alone

    Args:
        model (DualEncoderModel): The model
        which (str): "m" or "c"
        x (Tensor): Embedded tokens of that encoder

    Returns:
        Tensor: Final hidden states

    Raises:
        UsageError: If any inter-modal pathway of the encoder is still live
    """
    if which not in ENCODERS:
        raise ConfigurationError(f"Unknown encoder '{which}', expected one of {ENCODERS}")
    encoder = model.encoders[which]

    live = _live_inter_paths(encoder)
    if live:
        app_logger.error("Unimodal forward of %s with live inter-modal paths %s", which, live)
        raise UsageError(
            f"Encoder '{which}' has inter-modal pathways with non-zero gates ({', '.join(live[:4])}); "
            "set their lambdas to 0 first"
        )
    return encoder.forward(x, None, skip_inter=True)


def strategy_compare(
    model: DualEncoderModel, x_m: Tensor, x_c: Tensor
) -> dict[PropagationStrategy, tuple[np.ndarray, np.ndarray]]:
    """Outputs of the same weights under every propagation strategy"""
    with no_grad():
        return {
            strategy: tuple(h.data.copy() for h in dual_forward(model, x_m, x_c, strategy))
            for strategy in PropagationStrategy
        }


def set_lambdas(
    model: DualEncoderModel, value: float, encoder: str | None = None, freeze: bool = False
) -> None:
    """Sets every gate of one encoder (or of both) to `value`

    Gating encoder m cuts the c -> m direction only. With `freeze` the gates stop
    receiving gradients, so training keeps them at `value`.
    """
    for tag, _, _, al in model.adapted_linears():
        if encoder is None or tag == encoder:
            al.set_lambda(value)
            if freeze and al.cola is not None and al.cola.lam is not None:
                al.cola.lam.requires_grad = False


def randomize_adapters(
    model: DualEncoderModel, seed: int | np.random.Generator, scale: float = 0.1
) -> None:
    """Overwrites the zero-initialised B matrices with N(0, scale^2) entries, in place"""
    rng = as_generator(seed)
    for _, _, _, al in model.adapted_linears():
        matrices = []
        if al.lora is not None:
            matrices.append(al.lora.B)
        if al.cola is not None and not any(al.cola.B is m for m in matrices):
            matrices.append(al.cola.B)
        for matrix in matrices:
            matrix.data[...] = rng.normal(0.0, scale, size=matrix.shape)


def state_tensors(model: DualEncoderModel) -> dict[str, Tensor]:
    """Every tensor of the model under its checkpoint key; aliased matrices appear once"""
    state: dict[str, Tensor] = {}
    for tag, encoder in model.encoders.items():
        state[f"{tag}/embedding/token_table"] = encoder.token_table
        state[f"{tag}/embedding/position_table"] = encoder.position_table
        for index, layer in enumerate(encoder.layers):
            for name, tensor in layer.norms().items():
                state[f"{tag}/{index}/{name}"] = tensor
            for component, al in layer.components().items():
                for path, name, tensor in al.state_items():
                    state[adapter_key(tag, index, component, path, name)] = tensor
    return state


def trainable_parameters(model: DualEncoderModel) -> list[Tensor]:
    return _unique(t for t in state_tensors(model).values() if t.requires_grad)


def frozen_tensors(model: DualEncoderModel) -> dict[str, Tensor]:
    return {key: t for key, t in state_tensors(model).items() if not t.requires_grad}


def frozen_hash(model: DualEncoderModel) -> str:
    """sha256 over the frozen tensors, for before/after immutability checks"""
    return sha256_arrays((key, t.data) for key, t in sorted(frozen_tensors(model).items()))


def save_checkpoint(
    model: DualEncoderModel, path: str, extra: dict[str, Tensor] | None = None
):
    state = state_tensors(model)
    state.update(extra or {})
    return save_container(path, state)


def load_checkpoint(
    model: DualEncoderModel, path: str, extra: dict[str, Tensor] | None = None
) -> None:
    """Restores a checkpoint in place; aliases survive since shared tensors are one object"""
    state = state_tensors(model)
    state.update(extra or {})
    restore_into(state, load_container(path))


def _unique(tensors: Iterable[Tensor]) -> list[Tensor]:
    seen: set[int] = set()
    unique = []
    for tensor in tensors:
        if id(tensor) not in seen:
            seen.add(id(tensor))
            unique.append(tensor)
    return unique
