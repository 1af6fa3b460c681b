"""Wall-clock and peak-memory comparison of LoRA, CoLA and merged LoRA forwards"""

from __future__ import annotations

import time
import tracemalloc
from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np

from ...utils.definitions import AdapterConfig, AdapterMode, EncoderConfig, PropagationStrategy
from .. import app_logger
from ..adapters import merge_intra
from ..dualenc import (
    DualEncoderModel,
    forward_tokens,
    init_dual_encoder,
    randomize_adapters,
    trainable_parameters,
)
from ..numcore import backward, no_grad, zero_grads
from .accounting import ArchSpec, matched_lora_rank

VARIANT_LORA = "lora"
VARIANT_COLA = "cola"
VARIANT_LORA_MATCHED = "lora_matched"
VARIANT_LORA_MERGED = "lora_merged"


@dataclass(frozen=True)
class TimingSummary:
    """Median and inter-quartile range of repeated wall-clock samples, in seconds"""

    median: float
    iqr: float
    samples: tuple[float, ...]

    @classmethod
    def from_samples(cls, samples: list[float]) -> TimingSummary:
        q1, median, q3 = np.percentile(samples, [25, 50, 75])
        return cls(median=float(median), iqr=float(q3 - q1), samples=tuple(samples))


@dataclass(frozen=True)
class VariantTiming:
    rank: int
    forward: TimingSummary
    train_step: TimingSummary
    peak_bytes: int


@dataclass
class BenchReport:
    batch_size: int
    repetitions: int
    variants: dict[str, VariantTiming] = field(default_factory=dict)

    def peak_memory_delta(self, variant: str, baseline: str = VARIANT_LORA) -> int:
        return self.variants[variant].peak_bytes - self.variants[baseline].peak_bytes

    def to_dict(self) -> dict:
        return {
            "batch_size": self.batch_size,
            "repetitions": self.repetitions,
            "variants": {
                name: {
                    "rank": v.rank,
                    "forward_median_s": v.forward.median,
                    "forward_iqr_s": v.forward.iqr,
                    "train_step_median_s": v.train_step.median,
                    "train_step_iqr_s": v.train_step.iqr,
                    "peak_bytes": v.peak_bytes,
                    "peak_delta_bytes": self.peak_memory_delta(name),
                }
                for name, v in self.variants.items()
            },
        }

    def to_table(self) -> str:
        header = f"{'variant':<14}{'rank':>6}{'fwd median ms':>16}{'fwd IQR ms':>12}{'step median ms':>16}{'peak KiB':>11}"
        lines = [header]
        for name, v in self.variants.items():
            lines.append(
                f"{name:<14}{v.rank:>6}{v.forward.median * 1e3:>16.3f}{v.forward.iqr * 1e3:>12.3f}"
                f"{v.train_step.median * 1e3:>16.3f}{v.peak_bytes / 1024:>11.1f}"
            )
        return "\n".join(lines)


def _repeat(fn: Callable[[], None], repetitions: int, warmup: int) -> TimingSummary:
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(repetitions):
        start = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - start)
    return TimingSummary.from_samples(samples)


def _peak_bytes(fn: Callable[[], None]) -> int:
    already_tracing = tracemalloc.is_tracing()
    if not already_tracing:
        tracemalloc.start()
    tracemalloc.reset_peak()
    try:
        before, _ = tracemalloc.get_traced_memory()
        fn()
        _, peak = tracemalloc.get_traced_memory()
    finally:
        if not already_tracing:
            tracemalloc.stop()
    return max(0, peak - before)


def time_model(
    model: DualEncoderModel,
    tokens_m: np.ndarray,
    tokens_c: np.ndarray,
    repetitions: int = 5,
    warmup: int = 1,
) -> tuple[TimingSummary, TimingSummary, int]:
    """Forward timing, forward+backward timing and peak traced bytes of one train step"""
    params = trainable_parameters(model)

    def forward() -> None:
        with no_grad():
            forward_tokens(model, tokens_m, tokens_c)

    def train_step() -> None:
        h_m, h_c = forward_tokens(model, tokens_m, tokens_c)
        backward(h_m.mean() + h_c.mean())
        zero_grads(params)

    return (
        _repeat(forward, repetitions, warmup),
        _repeat(train_step, repetitions, warmup),
        _peak_bytes(train_step),
    )


def merge_model(model: DualEncoderModel) -> DualEncoderModel:
    """Folds every intra-modal pathway into its frozen weight, in place"""
    for encoder in model.encoders.values():
        for layer in encoder.layers:
            for name, al in layer.components().items():
                if al.lora is not None and not al.fully_shared:
                    layer.set_component(name, merge_intra(al))
    return model


def wallclock_bench(
    config_m: EncoderConfig,
    config_c: EncoderConfig,
    adapter: AdapterConfig,
    tokens_m: np.ndarray,
    tokens_c: np.ndarray,
    repetitions: int = 5,
    seed: int = 0,
    strategy: PropagationStrategy = PropagationStrategy.PROGRESSIVE,
) -> BenchReport:
    """Times LoRA, CoLA, LoRA at the parameter-matched rank and merged LoRA on one batch

    Args:
        config_m (EncoderConfig): Dimensions of encoder m
        config_c (EncoderConfig): Dimensions of encoder c
        adapter (AdapterConfig): Base adapter configuration, rank r
        tokens_m (np.ndarray): Token ids [B, N_m]
        tokens_c (np.ndarray): Token ids [B, N_c]
        repetitions (int): Timed repetitions per measurement
        seed (int): Seed for every model built
        strategy (PropagationStrategy): Propagation used by the CoLA variant

    Returns:
        BenchReport: Median/IQR timings and peak traced memory per variant
    """
    arch = ArchSpec.from_configs(config_m, config_c)
    limit = min(
        min(c.d_in, c.d_out) for e in arch.encoders.values() for c in e.components()
    ) - 1
    matched = matched_lora_rank(arch, adapter, adapter.rank)
    if matched > limit:
        app_logger.warning("Matched LoRA rank %s capped at %s by the layer widths", matched, limit)
        matched = limit

    variants = {
        VARIANT_LORA: AdapterMode.LORA_ONLY.apply(adapter),
        VARIANT_COLA: AdapterMode.COLA.apply(adapter),
        VARIANT_LORA_MATCHED: AdapterMode.LORA_ONLY.apply(adapter, rank=matched),
        VARIANT_LORA_MERGED: AdapterMode.LORA_ONLY.apply(adapter),
    }

    report = BenchReport(batch_size=int(np.shape(tokens_m)[0]), repetitions=repetitions)
    for name, config in variants.items():
        model = init_dual_encoder(config_m, config_c, config, strategy=strategy, seed=seed)
        randomize_adapters(model, seed)
        if name == VARIANT_LORA_MERGED:
            merge_model(model)

        forward, train_step, peak = time_model(model, tokens_m, tokens_c, repetitions)
        report.variants[name] = VariantTiming(
            rank=config.rank, forward=forward, train_step=train_step, peak_bytes=peak
        )
        app_logger.info(
            "bench %s: forward median %.3f ms, IQR %.3f ms", name, forward.median * 1e3, forward.iqr * 1e3
        )
    return report
