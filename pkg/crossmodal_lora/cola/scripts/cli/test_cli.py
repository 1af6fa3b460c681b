import io
import json
import tempfile
import unittest
from pathlib import Path
from unittest.mock import patch

from ...components.custom_exceptions import NumericError
from ...components.harness import ClassResult, GradcheckReport
from ...utils.component_names import (
    BENCH_FILE,
    CHECKPOINT_FILE,
    EXIT_CONFIG_ERROR,
    EXIT_NUMERIC_ABORT,
    EXIT_OK,
    EXIT_VERIFICATION_FAILED,
    FLOPS_FILE,
    GRADCHECK_FILE,
    LAMBDA_TRACE_FILE,
    METRICS_FILE,
    PARAMS_FILE,
    TIMING_FILE,
)
from . import cli
from .cli import DEFAULT_CONFIG, build_parser, main

SMALL_CONFIG = {
    "arch": {"d_model": 8, "d_ffn": 16, "n_layers": 1},
    "adapter": {"rank": 2, "gamma": 2},
    "run": {"epochs": 1, "batch_size": 8},
    "task": {"vocab_size_m": 8, "vocab_size_c": 8, "seq_len": 4, "n_train": 16, "n_val": 8, "n_test": 8},
}


def run_cli(*argv: str) -> tuple[int, str, str]:
    """Runs `cola` with captured stdout and stderr"""
    with patch("sys.stdout", new_callable=io.StringIO) as out, patch(
        "sys.stderr", new_callable=io.StringIO
    ) as err:
        code = main(list(argv))
    return code, out.getvalue(), err.getvalue()


class TestCount(unittest.TestCase):
    """`cola count` on the backbone presets"""

    def test_delta_between_lora_ranks(self) -> None:
        """Rank 54 against rank 16 adds 12.6M parameters"""
        code, out, _ = run_cli("count", "--mode", "lora", "--rank", "54", "--delta", "lora:16")

        self.assertEqual(code, EXIT_OK)
        self.assertIn("delta lora:54 - lora:16 = 12,607,488 (12.607M)", out)

    def test_cola_reports_matched_rank(self) -> None:
        """CoLA at rank 16 prints its adapter total and the matched LoRA rank"""
        code, out, _ = run_cli("count")

        self.assertEqual(code, EXIT_OK)
        self.assertIn("17,826,192", out)
        self.assertIn("parameter-matched LoRA rank: 54", out)

    def test_writes_params(self) -> None:
        """--output-dir stores the report with its delta"""
        with tempfile.TemporaryDirectory() as workdir:
            run_cli("count", "--delta", "lora:16", "--output-dir", workdir)
            payload = json.loads((Path(workdir) / PARAMS_FILE).read_text(encoding="utf-8"))

        self.assertEqual(payload["totals"]["adapter"], 17826192)
        self.assertEqual(payload["delta"]["params"], 12517776)

    def test_unknown_preset(self) -> None:
        """An unknown preset exits with the configuration code"""
        code, _, err = run_cli("count", "--preset", "resnet")

        self.assertEqual(code, EXIT_CONFIG_ERROR)
        self.assertIn("resnet", err)

    def test_malformed_delta(self) -> None:
        """--delta needs mode:rank"""
        code, _, _ = run_cli("count", "--delta", "lora")
        self.assertEqual(code, EXIT_CONFIG_ERROR)


class TestExperimentCommands(unittest.TestCase):
    """Commands that read an experiment file"""

    def setUp(self) -> None:
        self.workdir = tempfile.TemporaryDirectory()
        self.output = Path(self.workdir.name) / "out"
        self.config = Path(self.workdir.name) / "small.json"
        self.config.write_text(json.dumps(SMALL_CONFIG), encoding="utf-8")

    def tearDown(self) -> None:
        self.workdir.cleanup()

    def test_missing_config(self) -> None:
        """A config path that does not exist exits with code 2"""
        code, _, err = run_cli("train", str(Path(self.workdir.name) / "absent.json"))

        self.assertEqual(code, EXIT_CONFIG_ERROR)
        self.assertIn("absent.json", err)

    def test_unknown_key(self) -> None:
        """Unknown keys are reported with their line and exit with code 2"""
        self.config.write_text('{\n  "arch": {\n    "width": 8\n  }\n}\n', encoding="utf-8")
        code, _, err = run_cli("train", str(self.config))

        self.assertEqual(code, EXIT_CONFIG_ERROR)
        self.assertIn(f"{self.config}:3: unknown key 'arch.width'", err)

    def test_train_writes_artifacts(self) -> None:
        """A training run leaves metrics, timing, gates, checkpoint and counts behind"""
        code, out, _ = run_cli("train", str(self.config), "--output-dir", str(self.output))

        self.assertEqual(code, EXIT_OK)
        self.assertIn("test accuracy:", out)
        for name in (METRICS_FILE, TIMING_FILE, LAMBDA_TRACE_FILE, CHECKPOINT_FILE, PARAMS_FILE):
            self.assertTrue((self.output / name).is_file(), name)
        metrics = json.loads((self.output / METRICS_FILE).read_text(encoding="utf-8"))
        self.assertEqual(len(metrics["epochs"]), 1)
        self.assertNotIn("wall_time_s", metrics)

    def test_ablate_sharing(self) -> None:
        """The sharing axis trains four variants and tabulates them"""
        code, out, _ = run_cli(
            "ablate", str(self.config), "--axis", "sharing", "--output-dir", str(self.output)
        )
        payload = json.loads((self.output / "ablation_sharing.json").read_text(encoding="utf-8"))

        self.assertEqual(code, EXIT_OK)
        self.assertEqual(
            [row["variant"] for row in payload["rows"]],
            ["fully_shared", "shared_a", "shared_b", "cola"],
        )
        self.assertIn("adapter params", out)

    def test_train_is_reproducible(self) -> None:
        """Two runs with one seed write byte-identical metrics"""
        first, second = self.output / "first", self.output / "second"
        run_cli("train", str(self.config), "--seed", "3", "--output-dir", str(first))
        run_cli("train", str(self.config), "--seed", "3", "--output-dir", str(second))

        self.assertEqual((first / METRICS_FILE).read_bytes(), (second / METRICS_FILE).read_bytes())
        self.assertIn("wall_time_s", json.loads((first / TIMING_FILE).read_text(encoding="utf-8")))

    def test_ablate_propagation(self) -> None:
        """The propagation axis trains one variant per strategy"""
        code, _, _ = run_cli(
            "ablate", str(self.config), "--axis", "propagation", "--output-dir", str(self.output)
        )
        payload = json.loads((self.output / "ablation_propagation.json").read_text(encoding="utf-8"))

        self.assertEqual(code, EXIT_OK)
        self.assertEqual(payload["axis"], "propagation")
        self.assertEqual(
            [row["variant"] for row in payload["rows"]], ["uniform", "module_wise", "progressive"]
        )
        self.assertEqual(len({row["adapter_params"] for row in payload["rows"]}), 1)

    def test_ablate_propagation_closed_gates(self) -> None:
        """With every gate frozen at zero the strategies cannot differ"""
        code, _, _ = run_cli(
            "ablate", str(self.config), "--axis", "propagation", "--lambda-zero",
            "--output-dir", str(self.output),
        )
        payload = json.loads((self.output / "ablation_propagation.json").read_text(encoding="utf-8"))

        self.assertEqual(code, EXIT_OK)
        self.assertEqual(len({row["test_accuracy"] for row in payload["rows"]}), 1)

    def test_bench(self) -> None:
        """bench writes the FLOPs comparison and the wall-clock report"""
        code, out, _ = run_cli(
            "bench", str(self.config), "--preset", "toy", "--tokens", "4",
            "--repetitions", "1", "--output-dir", str(self.output),
        )
        flops = json.loads((self.output / FLOPS_FILE).read_text(encoding="utf-8"))

        self.assertEqual(code, EXIT_OK)
        self.assertGreater(flops["ratio"], 1.0)
        self.assertTrue((self.output / BENCH_FILE).is_file())
        self.assertIn("CoLA/LoRA GFLOPs ratio", out)

    def test_overrides_are_echoed(self) -> None:
        """Command-line overrides show up in the resolved configuration"""
        with patch.object(cli, "train", side_effect=NumericError("stop", node="x")):
            _, out, _ = run_cli(
                "train", str(self.config), "--seed", "9", "--strategy", "uniform", "--rank", "3"
            )

        echoed = json.loads(out[: out.rindex("}") + 1])
        self.assertEqual(echoed["config"]["run"]["seed"], 9)
        self.assertEqual(echoed["config"]["strategy"], "uniform")
        self.assertEqual(echoed["config"]["adapter"]["rank"], 3)

    def test_numeric_abort(self) -> None:
        """A NaN during training exits with code 3 and names the tensor"""
        with patch.object(cli, "train", side_effect=NumericError("nan loss", node="head_W")):
            code, _, err = run_cli("train", str(self.config), "--output-dir", str(self.output))

        self.assertEqual(code, EXIT_NUMERIC_ABORT)
        self.assertIn("head_W", err)

    def test_gradcheck_failure(self) -> None:
        """A failing class exits with code 4 after the report is written"""
        report = GradcheckReport(classes={"lambda": ClassResult(max_error=0.5, tensors=1)})
        with patch.object(cli, "gradcheck_suite", return_value=report):
            code, out, err = run_cli("gradcheck", str(self.config), "--output-dir", str(self.output))

        self.assertEqual(code, EXIT_VERIFICATION_FAILED)
        self.assertIn("lambda", err)
        self.assertIn("FAIL", out)
        self.assertTrue((self.output / GRADCHECK_FILE).is_file())

    def test_gradcheck_pass(self) -> None:
        """A passing report exits cleanly"""
        report = GradcheckReport(classes={"head": ClassResult(max_error=1e-9, tensors=2)})
        with patch.object(cli, "gradcheck_suite", return_value=report):
            code, _, _ = run_cli("gradcheck", str(self.config), "--output-dir", str(self.output))
        self.assertEqual(code, EXIT_OK)


class TestParser(unittest.TestCase):
    """Argument parsing"""

    def test_default_config(self) -> None:
        """Experiment commands fall back to the shipped XOR config"""
        args = build_parser().parse_args(["train"])
        self.assertEqual(args.config, str(DEFAULT_CONFIG))
        self.assertTrue(DEFAULT_CONFIG.is_file())

    def test_ablate_needs_axis(self) -> None:
        """ablate without --axis is a usage error"""
        with patch("sys.stderr", new_callable=io.StringIO), self.assertRaises(SystemExit):
            build_parser().parse_args(["ablate"])
