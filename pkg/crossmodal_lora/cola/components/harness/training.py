"""Linear head over both pooled encoders, the training loop, metrics and lambda traces"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from ...utils.component_names import LAMBDA_TRACE_HEADER
from ...utils.definitions import AdapterMode, ExperimentConfig, RunConfig
from ...utils.helpers import read_csv, write_csv
from .. import app_logger
from ..adapters import as_generator, xavier_uniform
from ..custom_exceptions import ConfigurationError, UsageError, VerificationError
from ..dualenc import (
    DualEncoderModel,
    forward_tokens,
    frozen_hash,
    init_dual_encoder,
    state_tensors,
    trainable_parameters,
)
from ..encoder import pool
from ..numcore import (
    Tensor,
    backward,
    check_finite,
    concat,
    cross_entropy,
    no_grad,
    parameter,
)
from .dataset import Dataset, Split
from .optim import AdamW, ParamGroup, build_optimizer

EVAL_BATCH_SIZE = 256


@dataclass
class LinearHead:
    """logits = [pool(h_m), pool(h_c)]·W^T + b"""

    W: Tensor
    b: Tensor

    def __call__(self, features: Tensor) -> Tensor:
        return features @ self.W.T + self.b

    def state(self) -> dict[str, Tensor]:
        return {"head/W": self.W, "head/b": self.b}


def init_head(
    d_features: int, num_classes: int, seed: int | np.random.Generator, dtype=np.float64
) -> LinearHead:
    rng = as_generator(seed)
    return LinearHead(
        W=parameter(xavier_uniform(rng, (num_classes, d_features)).astype(dtype), name="head_W"),
        b=parameter(np.zeros(num_classes, dtype=dtype), name="head_b"),
    )


@dataclass
class TaskModel:
    """A dual encoder with a classification head on its concatenated pools"""

    model: DualEncoderModel
    head: LinearHead

    def features(self, tokens_m: np.ndarray, tokens_c: np.ndarray) -> Tensor:
        h_m, h_c = forward_tokens(self.model, tokens_m, tokens_c)
        pooled_m = pool(h_m, self.model.encoder_m.config.pooling)
        pooled_c = pool(h_c, self.model.encoder_c.config.pooling)
        return concat([pooled_m, pooled_c], axis=-1)

    def logits(self, tokens_m: np.ndarray, tokens_c: np.ndarray) -> Tensor:
        return self.head(self.features(tokens_m, tokens_c))

    def loss(self, tokens_m: np.ndarray, tokens_c: np.ndarray, labels: np.ndarray) -> Tensor:
        return cross_entropy(self.logits(tokens_m, tokens_c), labels)

    def state_tensors(self) -> dict[str, Tensor]:
        state = state_tensors(self.model)
        state.update(self.head.state())
        return state

    def parameter_groups(self) -> tuple[list[Tensor], list[Tensor]]:
        """(encoder-side trainable tensors, head tensors)"""
        return trainable_parameters(self.model), list(self.head.state().values())


def build_task_model(experiment: ExperimentConfig, seed: int | None = None) -> TaskModel:
    """Instantiates the experiment's dual encoder and head from a single seed"""
    seed = experiment.run.seed if seed is None else seed
    dtype = np.dtype(experiment.run.dtype)
    task = experiment.task
    rng = np.random.default_rng(seed)

    config_m = experiment.encoder_config(task.vocab_size_m)
    config_c = experiment.encoder_config(task.vocab_size_c)
    model = init_dual_encoder(
        config_m,
        config_c,
        experiment.adapter_config,
        strategy=experiment.strategy,
        seed=rng,
        dtype=dtype,
    )
    head = init_head(config_m.d_model + config_c.d_model, task.num_classes, rng, dtype=dtype)
    return TaskModel(model=model, head=head)


@dataclass(frozen=True)
class EpochMetrics:
    epoch: int
    train_loss: float
    train_accuracy: float
    val_loss: float
    val_accuracy: float


@dataclass
class MetricsLog:
    """Per-epoch metrics; wall time is kept apart so the rest is reproducible bit for bit"""

    seed: int
    epochs: list[EpochMetrics] = field(default_factory=list)
    test_accuracy: float | None = None
    wall_time_s: float = 0.0

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "epochs": [asdict(e) for e in self.epochs],
            "test_accuracy": self.test_accuracy,
        }

    def timing_dict(self) -> dict:
        return {"seed": self.seed, "wall_time_s": self.wall_time_s}


TraceKey = tuple[str, int, str]


@dataclass
class LambdaTrace:
    """Gate values per (encoder, layer, component), one snapshot per recorded epoch"""

    keys: list[TraceKey] = field(default_factory=list)
    epochs: list[int] = field(default_factory=list)
    values: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_model(cls, model: DualEncoderModel) -> LambdaTrace:
        return cls(keys=list(lambda_values(model)))

    def record(self, model: DualEncoderModel, epoch: int) -> None:
        current = lambda_values(model)
        if list(current) != self.keys:
            raise UsageError("The gated components changed between epochs")
        self.epochs.append(epoch)
        self.values.append(np.array(list(current.values()), dtype=np.float64))

    def matrix(self) -> np.ndarray:
        """[epochs, entries]"""
        return np.stack(self.values) if self.values else np.zeros((0, len(self.keys)))

    def rows(self) -> list[tuple[int, str, int, str, float]]:
        return [
            (epoch, encoder, layer, component, float(value))
            for epoch, snapshot in zip(self.epochs, self.values)
            for (encoder, layer, component), value in zip(self.keys, snapshot)
        ]

    def __bool__(self) -> bool:
        return bool(self.keys) and bool(self.epochs)


def lambda_values(model: DualEncoderModel) -> dict[TraceKey, float]:
    return {
        (encoder, layer, component): float(al.cola.lam.data)
        for encoder, layer, component, al in model.adapted_linears()
        if al.cola is not None and al.cola.lam is not None
    }


def export_lambda(trace: LambdaTrace, path: str | Path, allow_empty: bool = False) -> Path:
    """Writes epoch,encoder,layer,component,lambda rows; floats round-trip exactly"""
    if not trace and not allow_empty:
        app_logger.error("Refusing to export an empty lambda trace to %s", path)
        raise UsageError("The lambda trace is empty; the model has no gated pathways or no epochs")
    rows = [
        (epoch, encoder, layer, component, repr(value))
        for epoch, encoder, layer, component, value in trace.rows()
    ]
    return write_csv(path, LAMBDA_TRACE_HEADER, rows)


def parse_lambda_csv(path: str | Path) -> LambdaTrace:
    header, rows = read_csv(path)
    if tuple(header) != LAMBDA_TRACE_HEADER:
        raise ConfigurationError(f"{path} is not a lambda trace (header {header})")

    trace = LambdaTrace()
    by_epoch: dict[int, list[float]] = {}
    for epoch, encoder, layer, component, value in rows:
        key = (encoder, int(layer), component)
        if int(epoch) not in by_epoch:
            by_epoch[int(epoch)] = []
        if len(by_epoch) == 1:
            trace.keys.append(key)
        by_epoch[int(epoch)].append(float(value))

    for epoch, values in by_epoch.items():
        trace.epochs.append(epoch)
        trace.values.append(np.asarray(values, dtype=np.float64))
    return trace


def _batches(n: int, batch_size: int, order: np.ndarray | None = None):
    index = np.arange(n) if order is None else order
    for start in range(0, n, batch_size):
        yield index[start : start + batch_size]


def evaluate_loss(task_model: TaskModel, split: Split) -> tuple[float, float]:
    """Mean cross-entropy and argmax accuracy over a split"""
    total_loss = 0.0
    correct = 0
    with no_grad():
        for index in _batches(len(split), EVAL_BATCH_SIZE):
            batch = split.take(index)
            logits = task_model.logits(batch.tokens_m, batch.tokens_c)
            total_loss += cross_entropy(logits, batch.labels).item() * len(batch)
            correct += int((logits.data.argmax(axis=-1) == batch.labels).sum())
    return total_loss / len(split), correct / len(split)


def evaluate(task_model: TaskModel, split: Split) -> float:
    """Argmax accuracy; pointwise, so independent of example order"""
    return evaluate_loss(task_model, split)[1]


def train(
    task_model: TaskModel, dataset: Dataset, run: RunConfig
) -> tuple[TaskModel, MetricsLog, LambdaTrace]:
    """Minimises cross-entropy with AdamW, recording metrics and gates every epoch

    Args:
        task_model (TaskModel): Model and head, updated in place
        dataset (Dataset): Train, validation and test splits
        run (RunConfig): Optimiser and loop settings

    Returns:
        tuple[TaskModel, MetricsLog, LambdaTrace]: The trained model, metrics and trace

    Raises:
        NumericError: If the loss becomes NaN or Inf
        VerificationError: If a frozen tensor changed
    """
    started = time.perf_counter()
    model = task_model.model
    before = frozen_hash(model)
    rng = np.random.default_rng(run.seed)

    optimizer = build_optimizer(run, *task_model.parameter_groups())
    metrics = MetricsLog(seed=run.seed)
    trace = LambdaTrace.for_model(model)
    train_split = dataset.train

    for epoch in range(1, run.epochs + 1):
        total_loss = 0.0
        correct = 0
        for index in _batches(len(train_split), run.batch_size, rng.permutation(len(train_split))):
            batch = train_split.take(index)
            logits = task_model.logits(batch.tokens_m, batch.tokens_c)
            loss = cross_entropy(logits, batch.labels)
            check_finite(loss)

            backward(loss)
            optimizer.step()
            optimizer.zero_grad()

            total_loss += loss.item() * len(batch)
            correct += int((logits.data.argmax(axis=-1) == batch.labels).sum())

        val_loss, val_accuracy = evaluate_loss(task_model, dataset.val)
        trace.record(model, epoch)
        metrics.epochs.append(
            EpochMetrics(
                epoch=epoch,
                train_loss=total_loss / len(train_split),
                train_accuracy=correct / len(train_split),
                val_loss=val_loss,
                val_accuracy=val_accuracy,
            )
        )
        gates = trace.values[-1]
        app_logger.info(
            "epoch %d loss %.4f acc %.3f val_acc %.3f mean|lambda| %.4f",
            epoch,
            metrics.epochs[-1].train_loss,
            metrics.epochs[-1].train_accuracy,
            val_accuracy,
            float(np.abs(gates).mean()) if gates.size else 0.0,
        )

    if frozen_hash(model) != before:
        app_logger.error("Frozen weights changed during training")
        raise VerificationError("Frozen weights changed during training", failed=["frozen"])

    metrics.test_accuracy = evaluate(task_model, dataset.test)
    metrics.wall_time_s = time.perf_counter() - started
    return task_model, metrics, trace


def linear_head_ceiling(
    experiment: ExperimentConfig,
    dataset: Dataset,
    seed: int,
    epochs: int = 300,
    lr: float = 0.05,
) -> float:
    """Test accuracy of the best linear head over two frozen, adapter-free encoders

    Features are computed once; only the head is optimised, full batch.
    """
    experiment = replace(experiment, mode=AdapterMode.FROZEN, run=replace(experiment.run, seed=seed))
    task_model = build_task_model(experiment)
    for tensor in state_tensors(task_model.model).values():
        tensor.requires_grad = False

    with no_grad():
        train_features = task_model.features(dataset.train.tokens_m, dataset.train.tokens_c)
        test_features = task_model.features(dataset.test.tokens_m, dataset.test.tokens_c)

    head = task_model.head
    optimizer = AdamW(groups=[ParamGroup(list(head.state().values()), lr=lr)])
    for _ in range(epochs):
        loss = cross_entropy(head(Tensor(train_features.data)), dataset.train.labels)
        backward(loss)
        optimizer.step()
        optimizer.zero_grad()

    with no_grad():
        predictions = head(Tensor(test_features.data)).data.argmax(axis=-1)
    return float((predictions == dataset.test.labels).mean())
