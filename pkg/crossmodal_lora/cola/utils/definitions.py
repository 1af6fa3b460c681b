import json
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from typing import Any

from ..components.custom_exceptions import ConfigurationError


class SharingMode(str, Enum):
    """How the intra- and inter-modal pathways share their low-rank matrices"""

    NON_SHARED = "non_shared"
    SHARED_A = "shared_a"
    SHARED_B = "shared_b"
    FULLY_SHARED = "fully_shared"


class ActivationKind(str, Enum):
    """Element-wise non-linearity used in the FFN and the hypernetwork"""

    GELU = "gelu"
    RELU = "relu"


class Pooling(str, Enum):
    """Token pooling used to summarise one encoder's hidden states"""

    MEAN = "mean"
    CLS = "cls"


class PropagationStrategy(str, Enum):
    """Which pooled cross-modal feature each adapted component consumes"""

    UNIFORM = "uniform"
    MODULE_WISE = "module_wise"
    PROGRESSIVE = "progressive"


class AdapterMode(str, Enum):
    """Named adapter configurations compared in the accounting and ablation tables"""

    FROZEN = "frozen"
    LORA_ONLY = "lora"
    COLA = "cola"
    SHARED_A = "shared_a"
    SHARED_B = "shared_b"
    FULLY_SHARED = "fully_shared"

    def apply(self, config: "AdapterConfig", rank: int | None = None) -> "AdapterConfig":
        """Returns `config` rewritten to this mode, optionally with a new rank

        Args:
            config (AdapterConfig): The base configuration
            rank (int | None): Overrides the rank of both pathways when given

        Returns:
            AdapterConfig: The configuration for this mode
        """
        changes: dict[str, Any] = {}
        if rank is not None:
            changes.update(rank=rank, inter_rank=None)

        if self is AdapterMode.FROZEN:
            changes.update(intra=False, inter=False)
        elif self is AdapterMode.LORA_ONLY:
            changes.update(intra=True, inter=False)
        else:
            sharing = {
                AdapterMode.COLA: SharingMode.NON_SHARED,
                AdapterMode.SHARED_A: SharingMode.SHARED_A,
                AdapterMode.SHARED_B: SharingMode.SHARED_B,
                AdapterMode.FULLY_SHARED: SharingMode.FULLY_SHARED,
            }[self]
            changes.update(intra=True, inter=True, sharing_mode=sharing)

        return replace(config, **changes)


def _plain(value: Any) -> Any:
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


class _DefinitionMixin:
    def to_dict(self) -> dict:
        """Returns a plain dictionary representation, enums replaced by their values

        Returns:
            dict: The dictionary representation of the dataclass
        """
        return _plain(asdict(self))

    def to_json(self) -> str:
        """Returns a JSON representation of the dataclass

        Returns:
            str: The JSON representation of the dataclass values
        """
        return json.dumps(self.to_dict(), sort_keys=True)


@dataclass(frozen=True)
class AdapterConfig(_DefinitionMixin):
    """Ranks, scales and switches of the intra-modal and inter-modal pathways"""

    rank: int = 16
    alpha: float = 8.0
    lambda_init: float = 0.5
    gamma: int = 16
    sharing_mode: SharingMode = SharingMode.NON_SHARED
    activation_kind: ActivationKind = ActivationKind.GELU
    hypernet_bias: bool = True
    hypernet_ln_affine: bool = True
    intra: bool = True
    inter: bool = True
    inter_rank: int | None = None

    def __post_init__(self) -> None:
        if self.rank < 1:
            raise ConfigurationError(f"Adapter rank must be >= 1, got {self.rank}")
        if self.inter_rank is not None and self.inter_rank < 1:
            raise ConfigurationError(
                f"Inter-modal rank must be >= 1, got {self.inter_rank}"
            )
        if self.alpha <= 0:
            raise ConfigurationError(f"Alpha must be positive, got {self.alpha}")
        if self.gamma < 1:
            raise ConfigurationError(f"Gamma must be >= 1, got {self.gamma}")
        if (
            self.sharing_mode is not SharingMode.NON_SHARED
            and self.intra
            and self.inter
            and self.cola_rank != self.rank
        ):
            raise ConfigurationError(
                f"Sharing mode '{self.sharing_mode.value}' needs equal ranks, "
                f"got {self.rank} and {self.cola_rank}"
            )

    @property
    def scaling(self) -> float:
        """The static intra-modal scale alpha / r"""
        return self.alpha / self.rank

    @property
    def cola_rank(self) -> int:
        """Rank of the inter-modal pathway"""
        return self.inter_rank if self.inter_rank is not None else self.rank

    @property
    def fully_shared(self) -> bool:
        return self.intra and self.inter and self.sharing_mode is SharingMode.FULLY_SHARED


@dataclass(frozen=True)
class EncoderConfig(_DefinitionMixin):
    """Dimensions of one transformer encoder stack"""

    d_model: int = 32
    d_k: int | None = None
    d_v: int | None = None
    d_ffn: int | None = None
    n_layers: int = 2
    pooling: Pooling = Pooling.MEAN
    pre_norm: bool = True
    vocab_size: int = 16
    max_tokens: int = 8
    activation_kind: ActivationKind = ActivationKind.GELU
    ln_eps: float = 1e-5

    def __post_init__(self) -> None:
        if self.d_k is None:
            object.__setattr__(self, "d_k", self.d_model)
        if self.d_v is None:
            object.__setattr__(self, "d_v", self.d_model)
        if self.d_ffn is None:
            object.__setattr__(self, "d_ffn", 4 * self.d_model)

        for name in ("d_model", "d_k", "d_v", "d_ffn", "n_layers", "vocab_size", "max_tokens"):
            if getattr(self, name) < 1:
                raise ConfigurationError(
                    f"Encoder field '{name}' must be >= 1, got {getattr(self, name)}"
                )
        if self.d_ffn < self.d_model:
            raise ConfigurationError(
                f"d_ffn ({self.d_ffn}) must be >= d_model ({self.d_model})"
            )


@dataclass(frozen=True)
class RunConfig(_DefinitionMixin):
    """Optimiser and loop settings of one training run"""

    lr_adapter: float = 1e-2
    lr_head: float = 1e-2
    weight_decay: float = 1e-4
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    optimizer: str = "adamw"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    dtype: str = "float64"

    def __post_init__(self) -> None:
        if self.optimizer not in ("adamw", "adam"):
            raise ConfigurationError(f"Unknown optimizer '{self.optimizer}'")
        if self.dtype not in ("float64", "float32"):
            raise ConfigurationError(f"Unsupported dtype '{self.dtype}'")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigurationError("epochs must be >= 0 and batch_size >= 1")
        if self.lr_adapter < 0 or self.lr_head < 0 or self.weight_decay < 0:
            raise ConfigurationError("Learning rates and weight decay must be >= 0")


@dataclass(frozen=True)
class TaskSpec(_DefinitionMixin):
    """
    Synthetic paired-sequence task: the label is (y_m + y_c) mod C, where y_m and y_c
    are latent symbols rendered into each modality's tokens with noise rate p.
    """

    num_classes: int = 2
    vocab_size_m: int = 16
    vocab_size_c: int = 16
    seq_len: int = 8
    noise_rate: float = 0.1
    n_train: int = 512
    n_val: int = 128
    n_test: int = 256

    def __post_init__(self) -> None:
        if self.num_classes < 2:
            raise ConfigurationError("num_classes must be >= 2")
        for vocab in (self.vocab_size_m, self.vocab_size_c):
            if vocab < self.num_classes:
                raise ConfigurationError(
                    f"Vocabulary size {vocab} cannot render {self.num_classes} symbols"
                )
        if self.seq_len < 1:
            raise ConfigurationError("seq_len must be >= 1")
        if not 0.0 <= self.noise_rate <= 1.0:
            raise ConfigurationError(f"noise_rate must be in [0, 1], got {self.noise_rate}")
        if min(self.n_train, self.n_val, self.n_test) < 1:
            raise ConfigurationError("Every split needs at least one example")


@dataclass(frozen=True)
class ArchConfig(_DefinitionMixin):
    """Encoder dimensions shared by both stacks of an experiment"""

    d_model: int = 32
    d_ffn: int = 128
    n_layers: int = 2
    pooling: Pooling = Pooling.MEAN
    pre_norm: bool = True


@dataclass(frozen=True)
class ExperimentConfig(_DefinitionMixin):
    """Everything one CLI command needs, resolved from an experiment file"""

    arch: ArchConfig = field(default_factory=ArchConfig)
    adapter: AdapterConfig = field(
        default_factory=lambda: AdapterConfig(rank=4, gamma=4)
    )
    run: RunConfig = field(default_factory=RunConfig)
    task: TaskSpec = field(default_factory=TaskSpec)
    strategy: PropagationStrategy = PropagationStrategy.PROGRESSIVE
    mode: AdapterMode = AdapterMode.COLA
    output_dir: str = "runs/default"
    profile: str | None = None

    def encoder_config(self, vocab_size: int) -> EncoderConfig:
        """Returns the EncoderConfig for a stack reading `vocab_size` token ids

        Args:
            vocab_size (int): The token vocabulary of the modality

        Returns:
            EncoderConfig: The encoder configuration
        """
        return EncoderConfig(
            d_model=self.arch.d_model,
            d_ffn=self.arch.d_ffn,
            n_layers=self.arch.n_layers,
            pooling=self.arch.pooling,
            pre_norm=self.arch.pre_norm,
            vocab_size=vocab_size,
            max_tokens=self.task.seq_len,
            activation_kind=self.adapter.activation_kind,
        )

    @property
    def adapter_config(self) -> AdapterConfig:
        """The adapter configuration with the experiment's mode applied"""
        return self.mode.apply(self.adapter)
