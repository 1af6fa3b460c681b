"""Single-head pre-norm transformer encoder layer with six adapter injection points"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ...utils.component_names import COMPONENTS
from ...utils.definitions import AdapterConfig, EncoderConfig, Pooling
from .. import app_logger
from ..adapters import AdaptedLinear, as_generator, init_adapted_linear
from ..custom_exceptions import ShapeError
from ..numcore import (
    DEFAULT_DTYPE,
    Tensor,
    activation,
    embedding,
    layer_norm,
    parameter,
    softmax_rows,
    take,
)


@dataclass
class EncoderLayer:
    """MHSA + FFN block; wq, wk, wv, wo, w_up and w_down are the injection points"""

    config: EncoderConfig
    wq: AdaptedLinear
    wk: AdaptedLinear
    wv: AdaptedLinear
    wo: AdaptedLinear
    w_up: AdaptedLinear
    w_down: AdaptedLinear
    ln1_gain: Tensor
    ln1_bias: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor

    def components(self) -> dict[str, AdaptedLinear]:
        """Injection points keyed by component name, in forward order"""
        return dict(
            zip(COMPONENTS, (self.wq, self.wk, self.wv, self.wo, self.w_up, self.w_down))
        )

    def set_component(self, name: str, layer: AdaptedLinear) -> None:
        attribute = {"q": "wq", "k": "wk", "v": "wv", "o": "wo", "up": "w_up", "down": "w_down"}
        setattr(self, attribute[name], layer)

    def norms(self) -> dict[str, Tensor]:
        return {
            "ln1/gain": self.ln1_gain,
            "ln1/bias": self.ln1_bias,
            "ln2/gain": self.ln2_gain,
            "ln2/bias": self.ln2_bias,
        }

    def ln1(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.ln1_gain, self.ln1_bias, eps=self.config.ln_eps)

    def ln2(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.ln2_gain, self.ln2_bias, eps=self.config.ln_eps)


def init_encoder_layer(
    config: EncoderConfig,
    adapter: AdapterConfig,
    d_c: int,
    seed: int | np.random.Generator,
    dtype: np.dtype | type = DEFAULT_DTYPE,
) -> EncoderLayer:
    """Builds one layer with a frozen random backbone and fresh adapters

    Args:
        config (EncoderConfig): Encoder dimensions
        adapter (AdapterConfig): Adapter settings applied to all six components
        d_c (int): Model width of the paired encoder
        seed (int | np.random.Generator): Source of randomness
        dtype (np.dtype | type): Storage precision

    Returns:
        EncoderLayer: The layer
    """
    rng = as_generator(seed)
    d, d_k, d_v, d_ffn = config.d_model, config.d_k, config.d_v, config.d_ffn

    def linear(d_in: int, d_out: int) -> AdaptedLinear:
        return init_adapted_linear(d_in, d_out, d_c, adapter, rng, dtype=dtype)

    def frozen(values: np.ndarray, name: str) -> Tensor:
        return Tensor(values.astype(dtype), name=name)

    return EncoderLayer(
        config=config,
        wq=linear(d, d_k),
        wk=linear(d, d_k),
        wv=linear(d, d_v),
        wo=linear(d_v, d),
        w_up=linear(d, d_ffn),
        w_down=linear(d_ffn, d),
        ln1_gain=frozen(np.ones(d), "ln1_gain"),
        ln1_bias=frozen(np.zeros(d), "ln1_bias"),
        ln2_gain=frozen(np.ones(d), "ln2_gain"),
        ln2_bias=frozen(np.zeros(d), "ln2_bias"),
    )


def attention_weights(q: Tensor, k: Tensor) -> Tensor:
    """softmax(q·k^T / sqrt(d_k)) over keys; rows sum to one"""
    scale = 1.0 / math.sqrt(q.shape[-1])
    return softmax_rows((q @ k.T) * scale)


def attn_stage(
    layer: EncoderLayer,
    x: Tensor,
    xbar_c: Tensor | None,
    skip_inter: bool = False,
) -> Tensor:
    """Self-attention a = softmax(q·k^T / sqrt(d_k))·v with adapted q, k and v

    Args:
        layer (EncoderLayer): The layer
        x (Tensor): Layer input [..., N, d_model]
        xbar_c (Tensor | None): Pooled features of the paired encoder
        skip_inter (bool): Leave the inter-modal pathways out

    Returns:
        Tensor: Attention output [..., N, d_v]
    """
    if x.shape[-1] != layer.config.d_model:
        raise ShapeError(
            f"Attention stage expects width {layer.config.d_model}, got {x.shape}"
        )
    h = layer.ln1(x) if layer.config.pre_norm else x
    q = layer.wq(h, xbar_c, skip_inter=skip_inter)
    k = layer.wk(h, xbar_c, skip_inter=skip_inter)
    v = layer.wv(h, xbar_c, skip_inter=skip_inter)
    return attention_weights(q, k) @ v


def out_proj_stage(
    layer: EncoderLayer,
    a: Tensor,
    xbar_c: Tensor | None,
    residual: Tensor,
    skip_inter: bool = False,
) -> Tensor:
    """o = wo(a) + x, the residual taken from the layer input"""
    if a.shape[:-1] != residual.shape[:-1]:
        raise ShapeError(f"Attention output {a.shape} and residual {residual.shape} disagree")
    o = layer.wo(a, xbar_c, skip_inter=skip_inter) + residual
    return o if layer.config.pre_norm else layer.ln1(o)


def ffn_stage(
    layer: EncoderLayer,
    o: Tensor,
    xbar_c: Tensor | None,
    skip_inter: bool = False,
) -> Tensor:
    """x_next = w_down(phi(w_up(o))) + o"""
    h = layer.ln2(o) if layer.config.pre_norm else o
    hidden = activation(layer.w_up(h, xbar_c, skip_inter=skip_inter), layer.config.activation_kind)
    x_next = layer.w_down(hidden, xbar_c, skip_inter=skip_inter) + o
    return x_next if layer.config.pre_norm else layer.ln2(x_next)


def layer_forward(
    layer: EncoderLayer, x: Tensor, xbar_c: Tensor | None, skip_inter: bool = False
) -> Tensor:
    """All three stages with one pooled feature for every component"""
    a = attn_stage(layer, x, xbar_c, skip_inter=skip_inter)
    o = out_proj_stage(layer, a, xbar_c, x, skip_inter=skip_inter)
    return ffn_stage(layer, o, xbar_c, skip_inter=skip_inter)


def pool(x: Tensor, mode: Pooling | str = Pooling.MEAN) -> Tensor:
    """Summarises tokens [..., N, d] as [..., d] by token mean or by the class token (row 0)"""
    if x.ndim < 2 or x.shape[-2] == 0:
        raise ShapeError(f"pool needs at least one token, got shape {x.shape}")
    if Pooling(mode) is Pooling.CLS:
        return take(x, 0, axis=-2)
    return x.mean(axis=-2)


@dataclass
class Encoder:
    """Token and position tables followed by a stack of encoder layers"""

    config: EncoderConfig
    token_table: Tensor
    position_table: Tensor
    layers: list[EncoderLayer] = field(default_factory=list)

    def embed(self, tokens: np.ndarray) -> Tensor:
        """Looks up token ids [..., N] and adds the learned position table

        Args:
            tokens (np.ndarray): Integer ids, one row per sequence

        Returns:
            Tensor: Embedded tokens [..., N, d_model]
        """
        tokens = np.asarray(tokens)
        n = tokens.shape[-1] if tokens.ndim else 0
        if n == 0 or n > self.config.max_tokens:
            app_logger.error("Sequence length %s outside [1, %s]", n, self.config.max_tokens)
            raise ShapeError(
                f"Sequence length {n} outside [1, {self.config.max_tokens}]"
            )
        return embedding(self.token_table, tokens) + position_rows(self.position_table, n)

    def forward(self, x: Tensor, xbar_c: Tensor | None = None, skip_inter: bool = False) -> Tensor:
        for layer in self.layers:
            x = layer_forward(layer, x, xbar_c, skip_inter=skip_inter)
        return x

    def adapted_linears(self) -> list[tuple[int, str, AdaptedLinear]]:
        return [
            (index, name, al)
            for index, layer in enumerate(self.layers)
            for name, al in layer.components().items()
        ]


def position_rows(table: Tensor, n: int) -> Tensor:
    """First `n` rows of a position table, differentiable"""
    return embedding(table, np.arange(n))


def init_encoder(
    config: EncoderConfig,
    adapter: AdapterConfig,
    d_c: int,
    seed: int | np.random.Generator,
    dtype: np.dtype | type = DEFAULT_DTYPE,
) -> Encoder:
    rng = as_generator(seed)
    token_table = parameter(
        rng.normal(0.0, 1.0, size=(config.vocab_size, config.d_model)).astype(dtype),
        name="token_table",
    )
    position_table = parameter(
        rng.normal(0.0, 0.1, size=(config.max_tokens, config.d_model)).astype(dtype),
        name="position_table",
    )
    layers = [
        init_encoder_layer(config, adapter, d_c, rng, dtype=dtype)
        for _ in range(config.n_layers)
    ]
    return Encoder(
        config=config,
        token_table=token_table,
        position_table=position_table,
        layers=layers,
    )


def frozen_forward(layer: EncoderLayer, x: Tensor) -> Tensor:
    """The layer with every adapter removed, from frozen weights only"""
    def base(al: AdaptedLinear, inputs: Tensor) -> Tensor:
        out = inputs @ al.W0.T
        return out + al.b0 if al.b0 is not None else out

    h = layer.ln1(x) if layer.config.pre_norm else x
    a = attention_weights(base(layer.wq, h), base(layer.wk, h)) @ base(layer.wv, h)
    o = base(layer.wo, a) + x
    if not layer.config.pre_norm:
        o = layer.ln1(o)
    h = layer.ln2(o) if layer.config.pre_norm else o
    x_next = base(layer.w_down, activation(base(layer.w_up, h), layer.config.activation_kind)) + o
    return x_next if layer.config.pre_norm else layer.ln2(x_next)
