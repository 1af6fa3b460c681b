"""Analytic trainable-parameter and multiply-accumulate bookkeeping"""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass, field, replace

from ...utils.component_names import (
    ENCODER_C,
    ENCODER_M,
    FFN_DOWN,
    FFN_UP,
    KEY,
    MACS_TO_FLOPS,
    OUT_PROJ,
    QUERY,
    VALUE,
)
from ...utils.definitions import (
    AdapterConfig,
    AdapterMode,
    EncoderConfig,
    PropagationStrategy,
    SharingMode,
)
from ...utils.helpers import format_count
from .. import app_logger
from ..custom_exceptions import ConfigurationError

PATHWAY_FROZEN = "frozen"
PATHWAY_ATTENTION = "attention"
PATHWAY_INTRA = "intra"
PATHWAY_INTER = "inter"
PATHWAY_HYPERNET = "hypernet"
PATHWAY_LAMBDA = "lambda"
PATHWAY_POOL = "pool"

FLOPS_HEADER = "matmul MACs only; 1 MAC = 2 FLOPs"

POOLS_PER_LAYER = {
    PropagationStrategy.UNIFORM: 1,
    PropagationStrategy.MODULE_WISE: 2,
    PropagationStrategy.PROGRESSIVE: 3,
}


@dataclass(frozen=True)
class ComponentDims:
    name: str
    d_in: int
    d_out: int


@dataclass(frozen=True)
class EncoderArch:
    """Dimensions of one encoder stack; vocab_size 0 means its embeddings are not trained"""

    d_model: int
    d_ffn: int
    n_layers: int
    d_k: int | None = None
    d_v: int | None = None
    vocab_size: int = 0
    max_tokens: int = 0

    def __post_init__(self) -> None:
        if self.d_k is None:
            object.__setattr__(self, "d_k", self.d_model)
        if self.d_v is None:
            object.__setattr__(self, "d_v", self.d_model)
        if min(self.d_model, self.d_ffn, self.n_layers, self.d_k, self.d_v) < 1:
            raise ConfigurationError(f"Encoder dims must be >= 1, got {self}")

    def components(self) -> tuple[ComponentDims, ...]:
        d = self.d_model
        return (
            ComponentDims(QUERY, d, self.d_k),
            ComponentDims(KEY, d, self.d_k),
            ComponentDims(VALUE, d, self.d_v),
            ComponentDims(OUT_PROJ, self.d_v, d),
            ComponentDims(FFN_UP, d, self.d_ffn),
            ComponentDims(FFN_DOWN, self.d_ffn, d),
        )

    @property
    def embedding_params(self) -> int:
        return (self.vocab_size + self.max_tokens) * self.d_model

    def frozen_params_per_layer(self) -> int:
        """Frozen weights and biases of the six projections plus both layer norms"""
        linears = sum(c.d_in * c.d_out + c.d_out for c in self.components())
        return linears + 4 * self.d_model

    @classmethod
    def from_config(cls, config: EncoderConfig) -> EncoderArch:
        return cls(
            d_model=config.d_model,
            d_ffn=config.d_ffn,
            n_layers=config.n_layers,
            d_k=config.d_k,
            d_v=config.d_v,
            vocab_size=config.vocab_size,
            max_tokens=config.max_tokens,
        )


@dataclass(frozen=True)
class ArchSpec:
    """
    A pair of encoder shapes plus opaque extras: `head_params` trainable and
    `frozen_extra` frozen parameters outside the encoder layers.
    """

    name: str
    encoder_m: EncoderArch
    encoder_c: EncoderArch
    head_params: int = 0
    frozen_extra: int = 0

    def __post_init__(self) -> None:
        if self.encoder_m.n_layers != self.encoder_c.n_layers:
            raise ConfigurationError(
                f"Architecture '{self.name}' has unequal depths "
                f"{self.encoder_m.n_layers} and {self.encoder_c.n_layers}"
            )
        if self.head_params < 0 or self.frozen_extra < 0:
            raise ConfigurationError("head_params and frozen_extra must be >= 0")

    @property
    def encoders(self) -> dict[str, EncoderArch]:
        return {ENCODER_M: self.encoder_m, ENCODER_C: self.encoder_c}

    def paired_width(self, encoder: str) -> int:
        """Width of the pooled vector an encoder's hypernets read"""
        other = self.encoder_c if encoder == ENCODER_M else self.encoder_m
        return other.d_model

    @classmethod
    def from_configs(
        cls,
        config_m: EncoderConfig,
        config_c: EncoderConfig,
        num_classes: int = 0,
        name: str = "custom",
    ) -> ArchSpec:
        """The architecture of an instantiated model with a linear head over both pools"""
        head = 0
        if num_classes:
            head = (config_m.d_model + config_c.d_model) * num_classes + num_classes
        return cls(
            name=name,
            encoder_m=EncoderArch.from_config(config_m),
            encoder_c=EncoderArch.from_config(config_c),
            head_params=head,
        )


def hypernet_params(
    d_c: int,
    gamma: int,
    rank: int,
    bias: bool = True,
    ln_affine: bool = True,
) -> int:
    """Parameters of the two-layer hypernetwork d_c -> d_c/gamma -> r^2

    Args:
        d_c (int): Width of the pooled cross-modal vector
        gamma (int): Bottleneck reduction factor
        rank (int): Rank r of Phi
        bias (bool): Whether both linear layers have biases
        ln_affine (bool): Whether both layer norms have a gain and a bias

    Returns:
        int: The parameter count
    """
    hidden = d_c // gamma
    r2 = rank * rank
    count = d_c * hidden + r2 * hidden
    if bias:
        count += hidden + r2
    if ln_affine:
        count += 2 * hidden + 2 * r2
    return count


@dataclass(frozen=True)
class ParamEntry:
    encoder: str
    layer: int
    component: str
    pathway: str
    count: int


@dataclass(frozen=True)
class ParamReport:
    """Per-pathway trainable counts; every total is the sum of its entries"""

    arch: str
    mode: str
    rank: int
    entries: tuple[ParamEntry, ...]
    embedding: int
    head: int
    frozen: int

    def total(self, pathway: str) -> int:
        return sum(e.count for e in self.entries if e.pathway == pathway)

    @property
    def intra(self) -> int:
        return self.total(PATHWAY_INTRA)

    @property
    def inter(self) -> int:
        return self.total(PATHWAY_INTER)

    @property
    def hypernet(self) -> int:
        return self.total(PATHWAY_HYPERNET)

    @property
    def lam(self) -> int:
        return self.total(PATHWAY_LAMBDA)

    @property
    def adapter_total(self) -> int:
        """Intra, inter, hypernet and lambda parameters together"""
        return self.intra + self.inter + self.hypernet + self.lam

    @property
    def trainable(self) -> int:
        return self.adapter_total + self.embedding + self.head

    @property
    def update_ratio(self) -> float:
        total = self.trainable + self.frozen
        return self.trainable / total if total else 0.0

    def by_component(self) -> dict[tuple[str, str], int]:
        """Counts summed over layers, keyed by (encoder, component)"""
        sums: dict[tuple[str, str], int] = defaultdict(int)
        for entry in self.entries:
            sums[(entry.encoder, entry.component)] += entry.count
        return dict(sums)

    def to_dict(self) -> dict:
        return {
            "arch": self.arch,
            "mode": self.mode,
            "rank": self.rank,
            "totals": {
                PATHWAY_INTRA: self.intra,
                PATHWAY_INTER: self.inter,
                PATHWAY_HYPERNET: self.hypernet,
                PATHWAY_LAMBDA: self.lam,
                "adapter": self.adapter_total,
                "embedding": self.embedding,
                "head": self.head,
                "trainable": self.trainable,
                PATHWAY_FROZEN: self.frozen,
            },
            "update_ratio": self.update_ratio,
            "entries": [
                [e.encoder, e.layer, e.component, e.pathway, e.count] for e in self.entries
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def to_table(self, millions: bool = False) -> str:
        rows = [
            (PATHWAY_INTRA, self.intra),
            (PATHWAY_INTER, self.inter),
            (PATHWAY_HYPERNET, self.hypernet),
            (PATHWAY_LAMBDA, self.lam),
            ("adapter", self.adapter_total),
            ("embedding", self.embedding),
            ("head", self.head),
            ("trainable", self.trainable),
            (PATHWAY_FROZEN, self.frozen),
        ]
        lines = [f"arch={self.arch} mode={self.mode} rank={self.rank}"]
        lines += _aligned([("pathway", "params")] + [(k, format_count(v, millions)) for k, v in rows])
        lines.append(f"update ratio: {self.update_ratio:.4%}")
        return "\n".join(lines)


def _aligned(rows: list[tuple[str, str]]) -> list[str]:
    width = max(len(left) for left, _ in rows)
    value_width = max(len(right) for _, right in rows)
    return [f"{left.ljust(width)}  {right.rjust(value_width)}" for left, right in rows]


def _mode_config(config: AdapterConfig, mode: AdapterMode | str | None, rank: int | None) -> AdapterConfig:
    if mode is None:
        return config if rank is None else replace(config, rank=rank, inter_rank=None)
    return AdapterMode(mode).apply(config, rank)


def _mode_name(config: AdapterConfig) -> str:
    if not config.intra and not config.inter:
        return AdapterMode.FROZEN.value
    if not config.inter:
        return AdapterMode.LORA_ONLY.value
    if not config.intra:
        return "inter_only"
    if config.sharing_mode is SharingMode.NON_SHARED:
        return AdapterMode.COLA.value
    return config.sharing_mode.value


def _check_ranks(arch: ArchSpec, config: AdapterConfig) -> None:
    for tag, encoder in arch.encoders.items():
        for comp in encoder.components():
            limit = min(comp.d_in, comp.d_out)
            ranks = ([config.rank] if config.intra else []) + ([config.cola_rank] if config.inter else [])
            if any(rank >= limit for rank in ranks):
                app_logger.error("Rank %s too large for %s/%s", ranks, tag, comp.name)
                raise ConfigurationError(
                    f"Rank {max(ranks)} must be < {limit} for component '{comp.name}' of '{arch.name}'"
                )
        if config.inter and config.gamma > arch.paired_width(tag):
            raise ConfigurationError(
                f"gamma={config.gamma} exceeds the paired width {arch.paired_width(tag)}"
            )


def count_params(
    arch: ArchSpec,
    config: AdapterConfig,
    mode: AdapterMode | str | None = None,
    rank: int | None = None,
) -> ParamReport:
    """Counts trainable parameters pathway by pathway without instantiating anything

    LoRA costs r(d_in + d_out) per component. CoLA adds r(d_in + d_out), a hypernet and
    one lambda; SharedA drops r·d_in, SharedB drops r·d_out, FullyShared drops both
    and the lambda.

    Args:
        arch (ArchSpec): Encoder shapes and extras
        config (AdapterConfig): Base adapter configuration
        mode (AdapterMode | str | None): Rewrites `config` to this mode when given
        rank (int | None): Rank override for both pathways

    Returns:
        ParamReport: The report
    """
    config = _mode_config(config, mode, rank)
    _check_ranks(arch, config)

    sharing = config.sharing_mode if config.intra else SharingMode.NON_SHARED
    share_a = sharing in (SharingMode.SHARED_A, SharingMode.FULLY_SHARED)
    share_b = sharing in (SharingMode.SHARED_B, SharingMode.FULLY_SHARED)

    entries: list[ParamEntry] = []
    frozen = arch.frozen_extra
    embedding = 0
    for tag, encoder in arch.encoders.items():
        d_c = arch.paired_width(tag)
        hypernet = hypernet_params(
            d_c,
            config.gamma,
            config.cola_rank,
            bias=config.hypernet_bias,
            ln_affine=config.hypernet_ln_affine,
        )
        frozen += encoder.n_layers * encoder.frozen_params_per_layer()
        embedding += encoder.embedding_params

        for layer in range(encoder.n_layers):
            for comp in encoder.components():
                def add(pathway: str, count: int) -> None:
                    entries.append(ParamEntry(tag, layer, comp.name, pathway, count))

                if config.intra:
                    add(PATHWAY_INTRA, config.rank * (comp.d_in + comp.d_out))
                if config.inter:
                    r_c = config.cola_rank
                    inter = (0 if share_a else r_c * comp.d_in) + (0 if share_b else r_c * comp.d_out)
                    add(PATHWAY_INTER, inter)
                    add(PATHWAY_HYPERNET, hypernet)
                    add(PATHWAY_LAMBDA, 0 if config.fully_shared else 1)

    return ParamReport(
        arch=arch.name,
        mode=_mode_name(config),
        rank=config.rank,
        entries=tuple(entries),
        embedding=embedding,
        head=arch.head_params,
        frozen=frozen,
    )


def matched_lora_rank(arch: ArchSpec, config: AdapterConfig, rank: int | None = None) -> int:
    """Smallest LoRA rank whose adapter count reaches CoLA's at `rank`"""
    target = count_params(arch, config, AdapterMode.COLA, rank).adapter_total
    per_rank = sum(
        encoder.n_layers * sum(c.d_in + c.d_out for c in encoder.components())
        for encoder in arch.encoders.values()
    )
    return math.ceil(target / per_rank)


@dataclass(frozen=True)
class FlopsEntry:
    encoder: str
    layer: int
    component: str
    pathway: str
    macs: int


@dataclass(frozen=True)
class FlopsReport:
    """Multiply-accumulates of one forward at the given token counts"""

    arch: str
    mode: str
    n_m: int
    n_c: int
    entries: tuple[FlopsEntry, ...] = field(default_factory=tuple)

    def total(self, pathway: str | None = None) -> int:
        return sum(e.macs for e in self.entries if pathway is None or e.pathway == pathway)

    @property
    def total_macs(self) -> int:
        return self.total()

    @property
    def flops(self) -> int:
        return MACS_TO_FLOPS * self.total_macs

    @property
    def gflops(self) -> float:
        return self.flops / 1e9

    def pathway_totals(self) -> dict[str, int]:
        sums: dict[str, int] = defaultdict(int)
        for entry in self.entries:
            sums[entry.pathway] += entry.macs
        return dict(sums)

    def to_dict(self) -> dict:
        return {
            "header": FLOPS_HEADER,
            "arch": self.arch,
            "mode": self.mode,
            "n_m": self.n_m,
            "n_c": self.n_c,
            "macs": self.pathway_totals(),
            "total_macs": self.total_macs,
            "gflops": self.gflops,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def to_table(self) -> str:
        rows = [("pathway", "MACs")] + [
            (pathway, f"{macs:,}") for pathway, macs in sorted(self.pathway_totals().items())
        ]
        rows.append(("total", f"{self.total_macs:,}"))
        lines = [f"# {FLOPS_HEADER}", f"arch={self.arch} mode={self.mode} N_m={self.n_m} N_c={self.n_c}"]
        lines += _aligned(rows)
        lines.append(f"GFLOPs: {self.gflops:.4f}")
        return "\n".join(lines)


def flops_forward(
    arch: ArchSpec,
    config: AdapterConfig,
    n_m: int,
    n_c: int,
    mode: AdapterMode | str | None = None,
    strategy: PropagationStrategy = PropagationStrategy.PROGRESSIVE,
    rank: int | None = None,
) -> FlopsReport:
    """MAC counts of one dual forward, one entry per (encoder, layer, component, pathway)

    Low-rank chains cost N·r(d_in + d_out), plus N·r^2 for applying Phi; each hypernet
    runs once per forward; every consumed pool costs N_other·d_other.

    Args:
        arch (ArchSpec): Encoder shapes
        config (AdapterConfig): Base adapter configuration
        n_m (int): Tokens fed to encoder m
        n_c (int): Tokens fed to encoder c
        mode (AdapterMode | str | None): Rewrites `config` to this mode when given
        strategy (PropagationStrategy): Decides how many pools each layer consumes
        rank (int | None): Rank override

    Returns:
        FlopsReport: The report
    """
    if n_m < 1 or n_c < 1:
        raise ConfigurationError(f"Token counts must be >= 1, got {n_m} and {n_c}")
    config = _mode_config(config, mode, rank)
    _check_ranks(arch, config)

    tokens = {ENCODER_M: n_m, ENCODER_C: n_c}
    entries: list[FlopsEntry] = []
    for tag, encoder in arch.encoders.items():
        n = tokens[tag]
        other = ENCODER_C if tag == ENCODER_M else ENCODER_M
        d_c = arch.paired_width(tag)
        hidden = d_c // config.gamma
        r_c = config.cola_rank

        for layer in range(encoder.n_layers):
            entries.append(
                FlopsEntry(tag, layer, "attn", PATHWAY_ATTENTION, n * n * (encoder.d_k + encoder.d_v))
            )
            if config.inter:
                pools = POOLS_PER_LAYER[PropagationStrategy(strategy)]
                entries.append(FlopsEntry(tag, layer, "pool", PATHWAY_POOL, pools * tokens[other] * d_c))

            for comp in encoder.components():
                def add(pathway: str, macs: int) -> None:
                    entries.append(FlopsEntry(tag, layer, comp.name, pathway, macs))

                add(PATHWAY_FROZEN, n * comp.d_in * comp.d_out)
                if config.intra and not config.fully_shared:
                    add(PATHWAY_INTRA, n * config.rank * (comp.d_in + comp.d_out))
                if config.inter:
                    add(PATHWAY_INTER, n * r_c * (comp.d_in + comp.d_out) + n * r_c * r_c)
                    add(PATHWAY_HYPERNET, d_c * hidden + hidden * r_c * r_c)

    return FlopsReport(
        arch=arch.name,
        mode=_mode_name(config),
        n_m=n_m,
        n_c=n_c,
        entries=tuple(entries),
    )


def frozen_macs_per_layer(encoder: EncoderArch, n: int) -> int:
    """Frozen projection and attention MACs of one layer at n tokens"""
    projections = sum(c.d_in * c.d_out for c in encoder.components())
    return n * projections + n * n * (encoder.d_k + encoder.d_v)


def report_delta(first: ParamReport, second: ParamReport) -> int:
    """Trainable-count difference; the head term cancels"""
    return first.trainable - second.trainable
