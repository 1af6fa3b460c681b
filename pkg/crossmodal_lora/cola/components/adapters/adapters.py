"""Intra-modal (LoRA) and inter-modal (CoLA) low-rank pathways around a frozen linear layer"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from ...utils.component_names import PATH_BASE, PATH_COLA, PATH_HYPERNET, PATH_LORA
from ...utils.definitions import ActivationKind, AdapterConfig, SharingMode
from .. import app_logger
from ..custom_exceptions import ConfigurationError, ShapeError, UsageError
from ..numcore import (
    DEFAULT_DTYPE,
    Tensor,
    activation,
    layer_norm,
    parameter,
    reshape,
)

RANK_TOLERANCE = 1e-9


def as_generator(seed: int | np.random.Generator) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def kaiming_uniform(
    rng: np.random.Generator, shape: tuple[int, int], a: float = math.sqrt(5)
) -> np.ndarray:
    """Uniform Kaiming init over the fan-in (second axis), as torch's nn.Linear uses"""
    fan_in = shape[1]
    gain = math.sqrt(2.0 / (1.0 + a * a))
    bound = gain * math.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def xavier_uniform(rng: np.random.Generator, shape: tuple[int, int]) -> np.ndarray:
    fan_out, fan_in = shape
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class LoraPath:
    """Static low-rank update B_L·A_L, scaled by alpha / r"""

    A: Tensor
    B: Tensor

    @property
    def rank(self) -> int:
        return self.A.shape[0]


@dataclass
class Hypernet:
    """Two linear layers mapping a pooled cross-modal vector to the r x r matrix Phi"""

    W_down: Tensor
    W_up: Tensor
    rank: int
    activation_kind: ActivationKind = ActivationKind.GELU
    b_down: Tensor | None = None
    b_up: Tensor | None = None
    ln_inner_gain: Tensor | None = None
    ln_inner_bias: Tensor | None = None
    ln_outer_gain: Tensor | None = None
    ln_outer_bias: Tensor | None = None
    ln_eps: float = 1e-5

    @property
    def d_c(self) -> int:
        return self.W_down.shape[1]

    @property
    def hidden(self) -> int:
        return self.W_down.shape[0]

    def tensors(self) -> dict[str, Tensor]:
        """Returns the stored tensors keyed by checkpoint name, absent ones skipped"""
        named = {
            "W_down": self.W_down,
            "b_down": self.b_down,
            "ln_inner_gain": self.ln_inner_gain,
            "ln_inner_bias": self.ln_inner_bias,
            "W_up": self.W_up,
            "b_up": self.b_up,
            "ln_outer_gain": self.ln_outer_gain,
            "ln_outer_bias": self.ln_outer_bias,
        }
        return {name: t for name, t in named.items() if t is not None}

    def parameter_count(self) -> int:
        return sum(t.size for t in self.tensors().values())


@dataclass
class ColaPath:
    """Input-conditioned low-rank update lambda·B_C·Phi·A_C; `lam` is None when fully shared"""

    A: Tensor
    B: Tensor
    hypernet: Hypernet
    lam: Tensor | None = None

    @property
    def rank(self) -> int:
        return self.A.shape[0]


@dataclass
class AdaptedLinear:
    """A frozen W0 (and b0) with optional intra-modal and inter-modal pathways"""

    W0: Tensor
    config: AdapterConfig
    d_c: int
    b0: Tensor | None = None
    lora: LoraPath | None = None
    cola: ColaPath | None = None

    @property
    def d_in(self) -> int:
        return self.W0.shape[1]

    @property
    def d_out(self) -> int:
        return self.W0.shape[0]

    @property
    def fully_shared(self) -> bool:
        return (
            self.lora is not None
            and self.cola is not None
            and self.cola.A is self.lora.A
            and self.cola.B is self.lora.B
        )

    @property
    def needs_cross_features(self) -> bool:
        return self.cola is not None

    def forward(
        self, x: Tensor, xbar_c: Tensor | None = None, skip_inter: bool = False
    ) -> Tensor:
        return adapted_forward(self, x, xbar_c, skip_inter=skip_inter)

    def __call__(
        self, x: Tensor, xbar_c: Tensor | None = None, skip_inter: bool = False
    ) -> Tensor:
        return adapted_forward(self, x, xbar_c, skip_inter=skip_inter)

    def set_lambda(self, value: float) -> None:
        if self.cola is not None and self.cola.lam is not None:
            self.cola.lam.data[...] = value

    def state_items(self) -> list[tuple[str, str, Tensor]]:
        """Lists (path, tensor name, tensor), writing each aliased matrix once under `lora`"""
        items: list[tuple[str, str, Tensor]] = [(PATH_BASE, "W0", self.W0)]
        if self.b0 is not None:
            items.append((PATH_BASE, "b0", self.b0))
        if self.lora is not None:
            items += [(PATH_LORA, "A", self.lora.A), (PATH_LORA, "B", self.lora.B)]
        if self.cola is not None:
            shared = self.lora is not None
            if not (shared and self.cola.A is self.lora.A):
                items.append((PATH_COLA, "A", self.cola.A))
            if not (shared and self.cola.B is self.lora.B):
                items.append((PATH_COLA, "B", self.cola.B))
            if self.cola.lam is not None:
                items.append((PATH_COLA, "lambda", self.cola.lam))
            items += [
                (PATH_HYPERNET, name, t) for name, t in self.cola.hypernet.tensors().items()
            ]
        return items

    def trainable_tensors(self) -> list[Tensor]:
        """Unique trainable tensors; an aliased matrix appears once"""
        seen: set[int] = set()
        unique = []
        for _, _, t in self.state_items():
            if t.requires_grad and id(t) not in seen:
                seen.add(id(t))
                unique.append(t)
        return unique

    def parameter_count(self) -> int:
        return sum(t.size for t in self.trainable_tensors())


def _init_hypernet(
    rng: np.random.Generator,
    d_c: int,
    config: AdapterConfig,
    dtype: np.dtype | type,
) -> Hypernet:
    hidden = d_c // config.gamma
    rank = config.cola_rank
    r2 = rank * rank

    def zeros(n: int, name: str) -> Tensor:
        return parameter(np.zeros(n, dtype=dtype), name=name)

    def ones(n: int, name: str) -> Tensor:
        return parameter(np.ones(n, dtype=dtype), name=name)

    hn = Hypernet(
        W_down=parameter(xavier_uniform(rng, (hidden, d_c)).astype(dtype), name="W_down"),
        W_up=parameter(xavier_uniform(rng, (r2, hidden)).astype(dtype), name="W_up"),
        rank=rank,
        activation_kind=config.activation_kind,
    )
    if config.hypernet_bias:
        hn.b_down = zeros(hidden, "b_down")
        hn.b_up = zeros(r2, "b_up")
    if config.hypernet_ln_affine:
        hn.ln_inner_gain = ones(hidden, "ln_inner_gain")
        hn.ln_inner_bias = zeros(hidden, "ln_inner_bias")
        hn.ln_outer_gain = ones(r2, "ln_outer_gain")
        hn.ln_outer_bias = zeros(r2, "ln_outer_bias")
    return hn


def validate_adapter_dims(d_in: int, d_out: int, d_c: int, config: AdapterConfig) -> None:
    """Raises ConfigurationError when `config` cannot be attached to a d_in -> d_out layer"""
    limit = min(d_in, d_out)
    if config.intra and config.rank >= limit:
        app_logger.error("Rank %s too large for %s -> %s", config.rank, d_in, d_out)
        raise ConfigurationError(
            f"Intra-modal rank {config.rank} must be < min(d_in, d_out) = {limit}"
        )
    if config.inter:
        if config.cola_rank >= limit:
            app_logger.error("Rank %s too large for %s -> %s", config.cola_rank, d_in, d_out)
            raise ConfigurationError(
                f"Inter-modal rank {config.cola_rank} must be < min(d_in, d_out) = {limit}"
            )
        if config.gamma > d_c:
            app_logger.error("Gamma %s exceeds d_c %s", config.gamma, d_c)
            raise ConfigurationError(
                f"Reduction factor gamma={config.gamma} exceeds d_c={d_c}"
            )


def init_adapted_linear(
    d_in: int,
    d_out: int,
    d_c: int,
    config: AdapterConfig,
    seed: int | np.random.Generator,
    W0: np.ndarray | None = None,
    b0: np.ndarray | None = None,
    with_bias: bool = True,
    dtype: np.dtype | type = DEFAULT_DTYPE,
) -> AdaptedLinear:
    """Builds an adapted linear layer with zero-initialised B matrices

    A matrices are Kaiming-uniform, B matrices zero, lambda = lambda_init, hypernet
    weights Xavier-uniform with zero biases. Sharing modes alias the A and/or B
    matrices of the inter-modal pathway to the intra-modal ones.

    Args:
        d_in (int): Input features
        d_out (int): Output features
        d_c (int): Width of the pooled cross-modal vector fed to the hypernet
        config (AdapterConfig): Ranks, scales and switches
        seed (int | np.random.Generator): Source of randomness
        W0 (np.ndarray | None): Frozen weight [d_out, d_in]; drawn at random when omitted
        b0 (np.ndarray | None): Frozen bias [d_out]; drawn at random when omitted
        with_bias (bool): Whether the frozen layer has a bias
        dtype (np.dtype | type): Storage precision

    Returns:
        AdaptedLinear: The adapted layer
    """
    validate_adapter_dims(d_in, d_out, d_c, config)
    rng = as_generator(seed)

    if W0 is None:
        W0 = kaiming_uniform(rng, (d_out, d_in))
    if np.shape(W0) != (d_out, d_in):
        raise ShapeError(f"W0 shape {np.shape(W0)} does not match ({d_out}, {d_in})")
    bias = None
    if with_bias:
        if b0 is None:
            bound = 1.0 / math.sqrt(d_in)
            b0 = rng.uniform(-bound, bound, size=d_out)
        bias = Tensor(np.asarray(b0, dtype=dtype), name="b0")

    layer = AdaptedLinear(
        W0=Tensor(np.asarray(W0, dtype=dtype), name="W0"),
        b0=bias,
        config=config,
        d_c=d_c,
    )

    if config.intra:
        layer.lora = LoraPath(
            A=parameter(kaiming_uniform(rng, (config.rank, d_in)).astype(dtype), name="A_L"),
            B=parameter(np.zeros((d_out, config.rank), dtype=dtype), name="B_L"),
        )

    if config.inter:
        sharing = config.sharing_mode if layer.lora is not None else SharingMode.NON_SHARED
        rank = config.cola_rank

        if sharing in (SharingMode.SHARED_A, SharingMode.FULLY_SHARED):
            A_C = layer.lora.A
        else:
            A_C = parameter(kaiming_uniform(rng, (rank, d_in)).astype(dtype), name="A_C")
        if sharing in (SharingMode.SHARED_B, SharingMode.FULLY_SHARED):
            B_C = layer.lora.B
        else:
            B_C = parameter(np.zeros((d_out, rank), dtype=dtype), name="B_C")

        lam = None
        if sharing is not SharingMode.FULLY_SHARED:
            lam = parameter(np.asarray(config.lambda_init, dtype=dtype), name="lambda")

        layer.cola = ColaPath(
            A=A_C,
            B=B_C,
            lam=lam,
            hypernet=_init_hypernet(rng, d_c, config, dtype),
        )

    return layer


def hypernet_forward(hn: Hypernet, xbar_c: Tensor) -> Tensor:
    """Phi = LN(W_up·LN(phi(W_down·xbar_c))), reshaped to r x r

    Args:
        hn (Hypernet): The hypernetwork
        xbar_c (Tensor): Pooled cross-modal vector [d_c] or a batch of them [B, d_c]

    Returns:
        Tensor: Phi of shape [r, r], or [B, r, r] for batched input
    """
    if xbar_c.ndim not in (1, 2) or xbar_c.shape[-1] != hn.d_c:
        raise ShapeError(
            f"Hypernet expects a pooled vector of length {hn.d_c}, got shape {xbar_c.shape}"
        )
    batched = xbar_c.ndim == 2
    rows = xbar_c if batched else reshape(xbar_c, (1, hn.d_c))

    z = rows @ hn.W_down.T
    if hn.b_down is not None:
        z = z + hn.b_down
    z = activation(z, hn.activation_kind)
    z = layer_norm(z, hn.ln_inner_gain, hn.ln_inner_bias, eps=hn.ln_eps)

    z = z @ hn.W_up.T
    if hn.b_up is not None:
        z = z + hn.b_up
    z = layer_norm(z, hn.ln_outer_gain, hn.ln_outer_bias, eps=hn.ln_eps)

    r = hn.rank
    return reshape(z, (rows.shape[0], r, r) if batched else (r, r))


def adapted_forward(
    al: AdaptedLinear,
    x: Tensor,
    xbar_c: Tensor | None = None,
    skip_inter: bool = False,
) -> Tensor:
    """h = W0·x + b0 + (alpha/r)·B_L·A_L·x + lambda·B_C·Phi(xbar_c)·A_C·x

    Rows of `x` are tokens, so every product is applied on the right. Low-rank chains
    are evaluated from the input side and never materialise a d_out x d_in delta.
    Fully shared layers compute W0·x + b0 + (alpha/r)·B·Phi·A·x instead.

    Args:
        al (AdaptedLinear): The adapted layer
        x (Tensor): Tokens [..., N, d_in]
        xbar_c (Tensor | None): Pooled features of the paired modality [d_c] or [B, d_c]
        skip_inter (bool): Leave the inter-modal pathway out entirely

    Returns:
        Tensor: Outputs [..., N, d_out]
    """
    if x.ndim < 2 or x.shape[-1] != al.d_in:
        raise ShapeError(f"Adapted linear expects [..., N, {al.d_in}], got {x.shape}")

    use_inter = al.cola is not None and not skip_inter
    if use_inter and xbar_c is None:
        app_logger.error("Inter-modal pathway active but no cross-modal features given")
        raise UsageError("Inter-modal pathway is active but xbar_c was not provided")

    h = x @ al.W0.T
    if al.b0 is not None:
        h = h + al.b0

    scaling = al.config.scaling
    if al.fully_shared:
        if use_inter:
            phi = hypernet_forward(al.cola.hypernet, xbar_c)
            h = h + ((x @ al.cola.A.T) @ _phi_right(phi, x)) @ al.cola.B.T * scaling
        return h

    if al.lora is not None:
        h = h + ((x @ al.lora.A.T) @ al.lora.B.T) * scaling

    if use_inter:
        phi = hypernet_forward(al.cola.hypernet, xbar_c)
        h = h + ((x @ al.cola.A.T) @ _phi_right(phi, x)) @ al.cola.B.T * al.cola.lam

    return h


def _phi_right(phi: Tensor, x: Tensor) -> Tensor:
    """Phi transposed over its last two axes; a batched Phi needs batched tokens"""
    if phi.ndim == 3 and x.ndim != 3:
        raise ShapeError(f"Batched Phi {phi.shape} needs batched tokens, got {x.shape}")
    return phi.T


def merge_intra(al: AdaptedLinear) -> AdaptedLinear:
    """Folds the intra-modal pathway into W0; the inter-modal pathway is carried over

    Args:
        al (AdaptedLinear): A layer with a LoRA pathway

    Returns:
        AdaptedLinear: A new layer with W0' = W0 + (alpha/r)·B_L·A_L and no LoRA pathway
    """
    if al.lora is None:
        app_logger.error("merge_intra called on a layer without an intra-modal pathway")
        raise UsageError("Layer has no intra-modal pathway to merge")
    if al.fully_shared:
        app_logger.error("merge_intra called on a fully shared layer")
        raise UsageError(
            "Fully shared pathway depends on Phi at every forward and cannot be merged"
        )

    delta = al.config.scaling * (al.lora.B.data @ al.lora.A.data)
    merged_W0 = Tensor(al.W0.data + delta, dtype=al.W0.dtype, name="W0")
    return AdaptedLinear(
        W0=merged_W0,
        b0=al.b0,
        config=replace(al.config, intra=False),
        d_c=al.d_c,
        lora=None,
        cola=al.cola,
    )


@dataclass(frozen=True)
class DeltaRank:
    """Numerical ranks of the materialised pathway updates; None where a path is absent"""

    intra: int | None
    inter: int | None


def numerical_rank(matrix: np.ndarray, tol: float = RANK_TOLERANCE) -> int:
    singular_values = np.linalg.svd(matrix, compute_uv=False)
    if singular_values.size == 0 or singular_values[0] == 0.0:
        return 0
    return int(np.count_nonzero(singular_values > tol * singular_values[0]))


def materialize_deltas(
    al: AdaptedLinear, xbar_c: Tensor | None = None
) -> tuple[np.ndarray | None, np.ndarray | None]:
    """Dense (Delta W_L, Delta W_C) as d_out x d_in arrays; Delta W_C needs `xbar_c`"""
    intra = inter = None
    scaling = al.config.scaling

    if al.lora is not None and not al.fully_shared:
        intra = scaling * (al.lora.B.data @ al.lora.A.data)

    if al.cola is not None and xbar_c is not None:
        if xbar_c.ndim != 1:
            raise ShapeError(f"Deltas are materialised for one pooled vector, got {xbar_c.shape}")
        phi = hypernet_forward(al.cola.hypernet, xbar_c).data
        scale = scaling if al.fully_shared else float(al.cola.lam.data)
        inter = scale * (al.cola.B.data @ phi @ al.cola.A.data)

    return intra, inter


def rank_of_delta(al: AdaptedLinear, xbar_c: Tensor | None = None) -> DeltaRank:
    """Numerical ranks (singular values above 1e-9·sigma_max) of Delta W_L and Delta W_C"""
    intra, inter = materialize_deltas(al, xbar_c)
    return DeltaRank(
        intra=None if intra is None else numerical_rank(intra),
        inter=None if inter is None else numerical_rank(inter),
    )
