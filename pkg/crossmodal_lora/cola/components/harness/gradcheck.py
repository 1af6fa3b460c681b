"""Autodiff gradients against central finite differences, grouped by parameter class"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from ...utils.component_names import PATH_COLA, PATH_HYPERNET, PATH_LORA
from .. import app_logger
from ..custom_exceptions import NumericError, UsageError
from ..numcore import Tensor, backward, finite_diff_grad, zero_grads
from .training import TaskModel

GRADCHECK_TOLERANCE = 1e-5
GRADIENT_FLOOR = 1e-8

_ADAPTER_CLASSES = {
    (PATH_LORA, "A"): "A_L",
    (PATH_LORA, "B"): "B_L",
    (PATH_COLA, "A"): "A_C",
    (PATH_COLA, "B"): "B_C",
    (PATH_COLA, "lambda"): "lambda",
}


def parameter_class(key: str) -> str:
    """Maps a checkpoint key to the parameter class it is reported under"""
    parts = key.split("/")
    if parts[0] == "head":
        return "head"
    if parts[1] == "embedding":
        return "embedding"
    path, name = parts[-2], parts[-1]
    if path == PATH_HYPERNET:
        if name.startswith("ln_"):
            return "hypernet_ln"
        return "hypernet_bias" if name.startswith("b_") else "hypernet_weight"
    return _ADAPTER_CLASSES.get((path, name), f"{path}/{name}")


@dataclass
class ClassResult:
    max_error: float = 0.0
    tensors: int = 0
    coordinates: int = 0
    worst_key: str | None = None
    non_finite: bool = False

    def passed(self, tolerance: float) -> bool:
        return not self.non_finite and self.max_error < tolerance


@dataclass
class GradcheckReport:
    tolerance: float = GRADCHECK_TOLERANCE
    classes: dict[str, ClassResult] = field(default_factory=dict)

    @property
    def failed(self) -> list[str]:
        return sorted(name for name, r in self.classes.items() if not r.passed(self.tolerance))

    @property
    def passed(self) -> bool:
        return not self.failed

    def to_dict(self) -> dict:
        return {
            "tolerance": self.tolerance,
            "passed": self.passed,
            "classes": {
                name: {
                    "max_error": r.max_error,
                    "tensors": r.tensors,
                    "coordinates": r.coordinates,
                    "worst_key": r.worst_key,
                    "non_finite": r.non_finite,
                }
                for name, r in sorted(self.classes.items())
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def to_table(self) -> str:
        width = max([len("class")] + [len(name) for name in self.classes])
        lines = [f"{'class'.ljust(width)}  {'max rel err':>12}  {'tensors':>7}  status"]
        for name, r in sorted(self.classes.items()):
            status = "ok" if r.passed(self.tolerance) else "FAIL"
            error = "non-finite" if r.non_finite else f"{r.max_error:.3e}"
            lines.append(f"{name.ljust(width)}  {error:>12}  {r.tensors:>7}  {status}")
        return "\n".join(lines)


def _sample_indices(
    rng: np.random.Generator, shape: tuple[int, ...], max_coords: int | None
) -> list[tuple[int, ...]]:
    if shape == ():
        return [()]
    size = int(np.prod(shape, dtype=np.int64))
    if max_coords is None or size <= max_coords:
        flat = np.arange(size)
    else:
        flat = np.sort(rng.choice(size, size=max_coords, replace=False))
    return [tuple(int(i) for i in np.unravel_index(f, shape)) for f in flat]


def gradcheck_suite(
    task_model: TaskModel,
    sample: tuple[np.ndarray, np.ndarray, np.ndarray],
    tolerance: float = GRADCHECK_TOLERANCE,
    max_coords: int | None = 4,
    h: float = 1e-6,
    seed: int = 0,
) -> GradcheckReport:
    """Compares autodiff and finite-difference gradients of the task loss

    Every trainable tensor is checked at up to `max_coords` sampled coordinates. The error
    of a tensor is max|analytic - numeric| over those coordinates divided by the largest
    analytic magnitude of the whole tensor. Frozen tensors are absent from the report.

    Args:
        task_model (TaskModel): Model and head, 64-bit
        sample (tuple[np.ndarray, np.ndarray, np.ndarray]): tokens_m, tokens_c, labels
        tolerance (float): Pass threshold per class
        max_coords (int | None): Coordinates per tensor; all when None
        h (float): Finite-difference step
        seed (int): Seed for the coordinate sample

    Returns:
        GradcheckReport: Worst error per parameter class
    """
    state = task_model.state_tensors()
    if any(t.dtype != np.float64 for t in state.values()):
        app_logger.error("Gradient check requested on a model that is not 64-bit")
        raise UsageError("gradcheck_suite needs a float64 model")

    tokens_m, tokens_c, labels = sample
    trainable = {key: t for key, t in state.items() if t.requires_grad}

    zero_grads(trainable.values())
    backward(task_model.loss(tokens_m, tokens_c, labels))
    analytic = {
        key: (t.grad.copy() if t.grad is not None else np.zeros(t.shape)) for key, t in trainable.items()
    }
    zero_grads(trainable.values())

    def loss_at(_: Tensor) -> Tensor:
        return task_model.loss(tokens_m, tokens_c, labels)

    rng = np.random.default_rng(seed)
    report = GradcheckReport(tolerance=tolerance)
    for key, tensor in trainable.items():
        result = report.classes.setdefault(parameter_class(key), ClassResult())
        indices = _sample_indices(rng, tensor.shape, max_coords)
        result.tensors += 1
        result.coordinates += len(indices)

        try:
            numeric = finite_diff_grad(loss_at, tensor, h=h, indices=indices).data
        except NumericError:
            result.non_finite = True
            result.worst_key = key
            continue

        grad = analytic[key]
        if not indices:
            continue
        if not np.all(np.isfinite(grad)):
            result.non_finite = True
            result.worst_key = key
            continue
        scale = max(float(np.abs(grad).max(initial=0.0)), GRADIENT_FLOOR)
        error = max(abs(float(grad[i]) - float(numeric[i])) for i in indices) / scale
        if error >= result.max_error:
            result.max_error = error
            result.worst_key = key

    for name in report.failed:
        app_logger.warning("Gradient check failed for %s (worst %s)", name, report.classes[name].worst_key)
    return report
