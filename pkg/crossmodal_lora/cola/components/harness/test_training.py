import os
import tempfile
import unittest
from dataclasses import replace
from pathlib import Path
from unittest.mock import patch

import numpy as np
from numpy.testing import assert_allclose, assert_array_equal

from ....config.profiles import apply_profile
from ...utils.definitions import (
    AdapterConfig,
    AdapterMode,
    ArchConfig,
    ExperimentConfig,
    RunConfig,
    TaskSpec,
)
from ..custom_exceptions import NumericError, UsageError, VerificationError
from ..dualenc import set_lambdas
from ..numcore import Tensor, parameter
from . import training
from .dataset import gen_dataset
from .optim import AdamW, ParamGroup, build_optimizer
from .training import (
    LambdaTrace,
    build_task_model,
    evaluate,
    export_lambda,
    lambda_values,
    linear_head_ceiling,
    parse_lambda_csv,
    train,
)

SMALL_EXPERIMENT = ExperimentConfig(
    arch=ArchConfig(d_model=8, d_ffn=16, n_layers=1),
    adapter=AdapterConfig(rank=2, gamma=2, lambda_init=0.5),
    run=RunConfig(lr_adapter=1e-2, lr_head=1e-2, epochs=2, batch_size=8, seed=0),
    task=TaskSpec(vocab_size_m=8, vocab_size_c=8, seq_len=4, n_train=16, n_val=8, n_test=8),
)


def snapshot(task_model: training.TaskModel) -> dict[str, np.ndarray]:
    """Copies of every tensor of the model and head, keyed by checkpoint name"""
    return {key: t.data.copy() for key, t in task_model.state_tensors().items()}


def small_run(experiment: ExperimentConfig = SMALL_EXPERIMENT, **run_changes):
    """Builds, then trains, the small experiment; returns the model, metrics and trace"""
    experiment = replace(experiment, run=replace(experiment.run, **run_changes))
    dataset = gen_dataset(experiment.task, seed=experiment.run.seed)
    task_model = build_task_model(experiment)
    return train(task_model, dataset, experiment.run)


class TestAdamW(unittest.TestCase):
    """The optimiser's first step against its closed form"""

    def setUp(self) -> None:
        self.theta = np.array([0.5, -1.0, 2.0])
        self.grad = np.array([0.1, -0.3, 0.0])

    def step_once(self, decoupled: bool) -> np.ndarray:
        param = parameter(self.theta.copy())
        param.grad = self.grad.copy()
        optimizer = AdamW(
            groups=[ParamGroup([param], lr=0.1, weight_decay=0.01)], decoupled=decoupled
        )
        optimizer.step()
        return param.data

    def test_decoupled_first_step(self) -> None:
        """theta·(1 - lr·wd) - lr·g / (|g| + eps)"""
        expected = self.theta * (1 - 0.1 * 0.01) - 0.1 * self.grad / (np.abs(self.grad) + 1e-8)
        assert_allclose(self.step_once(decoupled=True), expected, rtol=1e-12)

    def test_coupled_first_step(self) -> None:
        """Adam adds wd·theta to the gradient before the moment updates"""
        grad = self.grad + 0.01 * self.theta
        expected = self.theta - 0.1 * grad / (np.abs(grad) + 1e-8)
        assert_allclose(self.step_once(decoupled=False), expected, rtol=1e-12)

    def test_missing_gradient_is_skipped(self) -> None:
        """Parameters without a gradient are left alone"""
        param = parameter(self.theta.copy())
        AdamW(groups=[ParamGroup([param], lr=0.1, weight_decay=0.5)]).step()
        assert_array_equal(param.data, self.theta)

    def test_build_optimizer_groups(self) -> None:
        """Adapters and head get their own learning rates; 'adam' couples weight decay"""
        run = apply_profile(SMALL_EXPERIMENT, "av").run
        optimizer = build_optimizer(run, [parameter(np.zeros(2))], [parameter(np.zeros(3))])

        self.assertFalse(optimizer.decoupled)
        self.assertEqual([g.lr for g in optimizer.groups], [5e-6, 4e-6])
        self.assertTrue(build_optimizer(SMALL_EXPERIMENT.run, [], []).decoupled)


class TestTraining(unittest.TestCase):
    """The training loop on a small model"""

    def test_zero_learning_rate_changes_nothing(self) -> None:
        """With both learning rates at zero every tensor is bitwise unchanged"""
        frozen_run = replace(SMALL_EXPERIMENT.run, lr_adapter=0.0, lr_head=0.0)
        experiment = replace(SMALL_EXPERIMENT, run=frozen_run)
        dataset = gen_dataset(experiment.task, seed=0)
        task_model = build_task_model(experiment)
        before = snapshot(task_model)

        _, _, trace = train(task_model, dataset, experiment.run)
        after = snapshot(task_model)
        for key, values in before.items():
            assert_array_equal(after[key], values, err_msg=key)
        assert_array_equal(trace.matrix(), 0.5)

    def test_same_seed_same_metrics(self) -> None:
        """Two runs with one seed produce identical metrics"""
        _, first, first_trace = small_run()
        _, second, second_trace = small_run()

        self.assertEqual(first.to_dict(), second.to_dict())
        assert_array_equal(first_trace.matrix(), second_trace.matrix())
        self.assertNotIn("wall_time_s", first.to_dict())
        self.assertEqual(len(first.epochs), 2)

    def test_gates_move(self) -> None:
        """Trainable gates leave their initial value"""
        _, _, trace = small_run()
        self.assertGreater(np.abs(trace.matrix()[-1] - 0.5).max(), 0.0)

    def test_frozen_gates_stay(self) -> None:
        """Gates frozen at zero are still zero after training"""
        dataset = gen_dataset(SMALL_EXPERIMENT.task, seed=0)
        task_model = build_task_model(SMALL_EXPERIMENT)
        set_lambdas(task_model.model, 0.0, freeze=True)

        _, _, trace = train(task_model, dataset, SMALL_EXPERIMENT.run)
        assert_array_equal(trace.matrix(), 0.0)

    def test_frozen_weight_change_is_detected(self) -> None:
        """A changed frozen hash aborts with a verification error"""
        with patch.object(training, "frozen_hash", side_effect=["before", "after"]):
            with self.assertRaises(VerificationError):
                small_run()

    def test_non_finite_loss(self) -> None:
        """A NaN head weight aborts training and names the first non-finite tensor"""
        dataset = gen_dataset(SMALL_EXPERIMENT.task, seed=0)
        task_model = build_task_model(SMALL_EXPERIMENT)
        task_model.head.W.data[0, 0] = np.nan

        with self.assertRaises(NumericError) as caught:
            train(task_model, dataset, SMALL_EXPERIMENT.run)
        self.assertEqual(caught.exception.node, "head_W")

    def test_evaluate_counts_argmax(self) -> None:
        """Accuracy is the share of rows whose argmax equals the label"""
        dataset = gen_dataset(SMALL_EXPERIMENT.task, seed=0)
        split = dataset.test.take(np.arange(4))
        task_model = build_task_model(SMALL_EXPERIMENT)
        logits = np.zeros((4, 2))
        logits[np.arange(4), split.labels] = 1.0
        logits[3] = logits[3, ::-1]

        with patch.object(task_model, "logits", return_value=Tensor(logits)):
            self.assertEqual(evaluate(task_model, split), 0.75)


class TestLambdaTrace(unittest.TestCase):
    """Gate snapshots and their CSV export"""

    def setUp(self) -> None:
        self.workdir = tempfile.TemporaryDirectory()
        self.path = Path(self.workdir.name) / "lambda_trace.csv"

    def tearDown(self) -> None:
        self.workdir.cleanup()

    def test_csv_round_trip(self) -> None:
        """Parsed values equal the recorded ones exactly"""
        _, _, trace = small_run()
        export_lambda(trace, self.path)
        parsed = parse_lambda_csv(self.path)

        self.assertEqual(parsed.keys, trace.keys)
        self.assertEqual(parsed.epochs, [1, 2])
        assert_array_equal(parsed.matrix(), trace.matrix())

    def test_one_row_per_gate_and_epoch(self) -> None:
        """Twelve gated components times two epochs, below a header"""
        _, _, trace = small_run()
        export_lambda(trace, self.path)
        lines = self.path.read_text(encoding="utf-8").splitlines()

        self.assertEqual(lines[0], "epoch,encoder,layer,component,lambda")
        self.assertEqual(len(lines), 1 + 12 * 2)

    def test_untrained_values(self) -> None:
        """A fresh model reports lambda_init everywhere"""
        model = build_task_model(SMALL_EXPERIMENT).model
        trace = LambdaTrace.for_model(model)
        trace.record(model, 0)

        self.assertEqual(set(lambda_values(model).values()), {0.5})
        assert_array_equal(trace.matrix(), 0.5)

    def test_empty_trace(self) -> None:
        """A model without gates has nothing to export unless asked to"""
        experiment = replace(SMALL_EXPERIMENT, mode=AdapterMode.LORA_ONLY)
        trace = LambdaTrace.for_model(build_task_model(experiment).model)

        with self.assertRaises(UsageError):
            export_lambda(trace, self.path)
        export_lambda(trace, self.path, allow_empty=True)
        self.assertEqual(self.path.read_text(encoding="utf-8").strip(), "epoch,encoder,layer,component,lambda")


@unittest.skipUnless(os.environ.get("COLA_SLOW_TESTS"), "set COLA_SLOW_TESTS=1 to run full training")
class TestXorSeparation(unittest.TestCase):
    """Full-size runs on the default XOR task"""

    def mean_accuracy(self, mode: AdapterMode, seeds: tuple[int, ...] = (0, 1, 2)) -> float:
        accuracies = []
        for seed in seeds:
            experiment = replace(ExperimentConfig(), mode=mode)
            experiment = replace(experiment, run=replace(experiment.run, seed=seed))
            dataset = gen_dataset(experiment.task, seed=seed)
            _, metrics, _ = train(build_task_model(experiment), dataset, experiment.run)
            accuracies.append(metrics.test_accuracy)
        return float(np.mean(accuracies))

    def test_cola_solves_lora_does_not(self) -> None:
        """Over three seeds CoLA averages 0.95 test accuracy where LoRA alone stays at chance"""
        self.assertGreaterEqual(self.mean_accuracy(AdapterMode.COLA), 0.95)
        self.assertLessEqual(self.mean_accuracy(AdapterMode.LORA_ONLY), 0.60)

    def test_linear_head_ceiling(self) -> None:
        """A linear head over frozen pools cannot compute the parity"""
        experiment = ExperimentConfig()
        dataset = gen_dataset(experiment.task, seed=0)
        self.assertLessEqual(linear_head_ceiling(experiment, dataset, seed=0), 0.60)
