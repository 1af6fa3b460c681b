import unittest
from dataclasses import replace

import numpy as np
from numpy.testing import assert_allclose

from ....config.presets import get_preset, toy_arch
from ...utils.definitions import (
    AdapterConfig,
    AdapterMode,
    EncoderConfig,
    ExperimentConfig,
    PropagationStrategy,
)
from .. import app_logger
from ..custom_exceptions import ConfigurationError
from ..dualenc import forward_tokens, frozen_tensors, init_dual_encoder, randomize_adapters
from ..harness import build_task_model
from .accounting import (
    PATHWAY_ATTENTION,
    PATHWAY_FROZEN,
    PATHWAY_POOL,
    ArchSpec,
    EncoderArch,
    count_params,
    flops_forward,
    hypernet_params,
    matched_lora_rank,
    report_delta,
)
from .bench import (
    VARIANT_COLA,
    VARIANT_LORA,
    VARIANT_LORA_MATCHED,
    VARIANT_LORA_MERGED,
    BenchReport,
    TimingSummary,
    VariantTiming,
    merge_model,
    wallclock_bench,
)

BACKBONE_ADAPTER = AdapterConfig(rank=16, alpha=8.0, gamma=16)
TINY_ARCH = ArchSpec(
    "tiny",
    EncoderArch(d_model=4, d_ffn=8, n_layers=1),
    EncoderArch(d_model=4, d_ffn=8, n_layers=1),
)
TINY_ADAPTER = AdapterConfig(rank=1, gamma=2)


def timing(rank: int, peak_bytes: int) -> VariantTiming:
    """A VariantTiming with constant one-second samples"""
    summary = TimingSummary.from_samples([1.0, 1.0])
    return VariantTiming(rank=rank, forward=summary, train_step=summary, peak_bytes=peak_bytes)


class TestParameterCounts(unittest.TestCase):
    """Trainable parameter accounting on the base transformer pair"""

    def setUp(self) -> None:
        self.arch = get_preset("vitb-bertb")

    def test_hypernet_size(self) -> None:
        """768 -> 48 -> 256 with biases and affine norms"""
        self.assertEqual(hypernet_params(768, 16, 16), 50_064)
        self.assertEqual(hypernet_params(768, 16, 16, bias=False, ln_affine=False), 49_152)

    def test_lora_total(self) -> None:
        """r(d_in + d_out) summed over six components, twelve layers and two encoders"""
        report = count_params(self.arch, BACKBONE_ADAPTER, AdapterMode.LORA_ONLY)

        self.assertEqual(report.intra, 5_308_416)
        self.assertEqual(report.adapter_total, 5_308_416)
        self.assertEqual(report.lam, 0)

    def test_mode_totals(self) -> None:
        """Adapter totals of the four inter-modal variants"""
        expected = {
            AdapterMode.COLA: 17_826_192,
            AdapterMode.SHARED_A: 15_171_984,
            AdapterMode.SHARED_B: 15_171_984,
            AdapterMode.FULLY_SHARED: 12_517_632,
        }
        for mode, total in expected.items():
            with self.subTest(mode=mode.value):
                self.assertEqual(count_params(self.arch, BACKBONE_ADAPTER, mode).adapter_total, total)

    def test_mode_ordering(self) -> None:
        """Frozen < LoRA < FullyShared < SharedA = SharedB < CoLA"""
        totals = {
            mode: count_params(self.arch, BACKBONE_ADAPTER, mode).adapter_total for mode in AdapterMode
        }

        self.assertEqual(totals[AdapterMode.FROZEN], 0)
        self.assertLess(totals[AdapterMode.LORA_ONLY], totals[AdapterMode.FULLY_SHARED])
        self.assertLess(totals[AdapterMode.FULLY_SHARED], totals[AdapterMode.SHARED_A])
        self.assertEqual(totals[AdapterMode.SHARED_A], totals[AdapterMode.SHARED_B])
        self.assertLess(totals[AdapterMode.SHARED_B], totals[AdapterMode.COLA])

    def test_deltas(self) -> None:
        """CoLA over LoRA at r = 16, and LoRA at r = 54 over r = 16"""
        lora = count_params(self.arch, BACKBONE_ADAPTER, AdapterMode.LORA_ONLY)
        cola = count_params(self.arch, BACKBONE_ADAPTER, AdapterMode.COLA)
        lora_54 = count_params(self.arch, BACKBONE_ADAPTER, AdapterMode.LORA_ONLY, rank=54)

        self.assertEqual(report_delta(cola, lora), 12_517_776)
        self.assertEqual(report_delta(lora_54, lora), 12_607_488)

    def test_matched_rank(self) -> None:
        """The smallest LoRA rank reaching CoLA's count at r = 16 is 54"""
        self.assertEqual(matched_lora_rank(self.arch, BACKBONE_ADAPTER, 16), 54)

    def test_report_is_consistent(self) -> None:
        """Per-component sums, lambda count and update ratio agree with the totals"""
        report = count_params(self.arch, BACKBONE_ADAPTER, AdapterMode.COLA)

        self.assertEqual(sum(report.by_component().values()), report.adapter_total)
        self.assertEqual(report.lam, 144)
        self.assertEqual(report.mode, "cola")
        self.assertGreater(report.update_ratio, 0.0)
        self.assertLess(report.update_ratio, 1.0)
        self.assertIn("17.8M", report.to_table(millions=True))
        self.assertEqual(report.to_dict()["totals"]["trainable"], report.trainable)

    def test_rank_validation(self) -> None:
        """Ranks reaching a component width are configuration errors"""
        with self.assertRaises(ConfigurationError):
            count_params(self.arch, BACKBONE_ADAPTER, AdapterMode.LORA_ONLY, rank=768)
        with self.assertRaises(ConfigurationError):
            count_params(self.arch, replace(BACKBONE_ADAPTER, gamma=1024), AdapterMode.COLA)


class TestToyAccounting(unittest.TestCase):
    """Analytic counts against an instantiated model"""

    def test_counts_match_instantiated_model(self) -> None:
        """Trainable and frozen totals equal the sizes of the built tensors in every mode"""
        for mode in AdapterMode:
            experiment = replace(ExperimentConfig(), mode=mode)
            report = count_params(toy_arch(experiment), experiment.adapter_config)
            task_model = build_task_model(experiment)
            adapters, head = task_model.parameter_groups()

            with self.subTest(mode=mode.value):
                self.assertEqual(report.trainable, sum(p.size for p in adapters + head))
                self.assertEqual(
                    report.frozen, sum(t.size for t in frozen_tensors(task_model.model).values())
                )


class TestFlops(unittest.TestCase):
    """Multiply-accumulate accounting"""

    def test_hand_count(self) -> None:
        """d = 4, d_ffn = 8, one layer, r = 1, gamma = 2, three tokens per encoder"""
        # per encoder: frozen 3·128, attention 9·8, intra 3·56
        lora = flops_forward(TINY_ARCH, TINY_ADAPTER, 3, 3, mode=AdapterMode.LORA_ONLY)
        self.assertEqual(lora.total_macs, 2 * (384 + 72 + 168))
        self.assertEqual(lora.flops, 2 * lora.total_macs)

        # adds pools 3·3·4, inter 168 + 6·3, hypernets 6·(4·2 + 2·1)
        cola = flops_forward(TINY_ARCH, TINY_ADAPTER, 3, 3, mode=AdapterMode.COLA)
        self.assertEqual(cola.total_macs, lora.total_macs + 2 * (36 + 186 + 60))

    def test_overhead_at_backbone_tokens(self) -> None:
        """CoLA costs less than 10% more than LoRA at 197 tokens"""
        arch = get_preset("vitb-bertb")
        lora = flops_forward(arch, BACKBONE_ADAPTER, 197, 197, mode=AdapterMode.LORA_ONLY)
        cola = flops_forward(arch, BACKBONE_ADAPTER, 197, 197, mode=AdapterMode.COLA)
        ratio = cola.total_macs / lora.total_macs

        self.assertGreater(ratio, 1.0)
        self.assertLess(ratio, 1.10)
        assert_allclose(ratio, 1.0298, atol=5e-4)

    def test_token_scaling(self) -> None:
        """Doubling N doubles the frozen projections and quadruples attention"""
        single = flops_forward(TINY_ARCH, TINY_ADAPTER, 3, 3, mode=AdapterMode.COLA)
        double = flops_forward(TINY_ARCH, TINY_ADAPTER, 6, 6, mode=AdapterMode.COLA)

        self.assertEqual(double.total(PATHWAY_FROZEN), 2 * single.total(PATHWAY_FROZEN))
        self.assertEqual(double.total(PATHWAY_ATTENTION), 4 * single.total(PATHWAY_ATTENTION))

    def test_pathways_add_up(self) -> None:
        """The total is the sum of the pathway totals"""
        report = flops_forward(get_preset("dinob-sslam"), BACKBONE_ADAPTER, 197, 1212)
        self.assertEqual(sum(report.pathway_totals().values()), report.total_macs)
        self.assertIn("matmul MACs only", report.to_table())

    def test_pool_count_follows_strategy(self) -> None:
        """Uniform pools once per layer, ModuleWise twice and Progressive three times"""
        pools = {
            strategy.value: flops_forward(
                TINY_ARCH, TINY_ADAPTER, 3, 3, strategy=strategy
            ).total(PATHWAY_POOL)
            for strategy in PropagationStrategy
        }
        self.assertEqual(pools["module_wise"], 2 * pools["uniform"])
        self.assertEqual(pools["progressive"], 3 * pools["uniform"])

    def test_rejects_empty_inputs(self) -> None:
        """Token counts below one are rejected"""
        with self.assertRaises(ConfigurationError):
            flops_forward(TINY_ARCH, TINY_ADAPTER, 0, 3)


class TestBench(unittest.TestCase):
    """Wall-clock comparison of the adapter variants"""

    def setUp(self) -> None:
        self.config = EncoderConfig(d_model=8, d_ffn=16, n_layers=1, vocab_size=10, max_tokens=4)
        self.adapter = AdapterConfig(rank=2, gamma=2)
        rng = np.random.default_rng(0)
        self.tokens_m = rng.integers(0, 10, size=(2, 4))
        self.tokens_c = rng.integers(0, 10, size=(2, 3))

    def test_timing_summary(self) -> None:
        """Median and inter-quartile range of the samples"""
        summary = TimingSummary.from_samples([5.0, 1.0, 3.0, 2.0, 4.0])

        self.assertEqual(summary.median, 3.0)
        self.assertEqual(summary.iqr, 2.0)

    def test_peak_memory_delta(self) -> None:
        """Deltas are taken against the LoRA baseline"""
        report = BenchReport(batch_size=1, repetitions=2)
        report.variants[VARIANT_LORA] = timing(2, 1000)
        report.variants[VARIANT_COLA] = timing(2, 1500)

        self.assertEqual(report.peak_memory_delta(VARIANT_COLA), 500)
        self.assertEqual(report.to_dict()["variants"][VARIANT_LORA]["peak_delta_bytes"], 0)

    def test_merge_model_preserves_outputs(self) -> None:
        """Merging every intra-modal pathway leaves the forward unchanged"""
        config = AdapterMode.COLA.apply(self.adapter)
        model = init_dual_encoder(self.config, self.config, config, seed=1)
        randomize_adapters(model, seed=1, scale=0.3)
        before = [h.data for h in forward_tokens(model, self.tokens_m, self.tokens_c)]

        merge_model(model)
        after = [h.data for h in forward_tokens(model, self.tokens_m, self.tokens_c)]
        self.assertTrue(all(al.lora is None for _, _, _, al in model.adapted_linears()))
        for first, second in zip(before, after):
            assert_allclose(first, second, rtol=0, atol=1e-10)

    def test_wallclock_bench_variants(self) -> None:
        """All four variants are timed; the matched rank is capped by the layer widths"""
        with self.assertLogs(app_logger, level="WARNING"):
            report = wallclock_bench(
                self.config, self.config, self.adapter, self.tokens_m, self.tokens_c, repetitions=2
            )

        self.assertEqual(
            set(report.variants),
            {VARIANT_LORA, VARIANT_COLA, VARIANT_LORA_MATCHED, VARIANT_LORA_MERGED},
        )
        self.assertEqual(report.variants[VARIANT_LORA_MATCHED].rank, 7)
        self.assertEqual(report.batch_size, 2)
        for variant in report.variants.values():
            self.assertEqual(len(variant.forward.samples), 2)
            self.assertGreaterEqual(variant.forward.median, 0.0)
