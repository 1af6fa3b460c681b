"""Flat, versioned checkpoint container for adapter and backbone tensors"""

from pathlib import Path

import numpy as np

from ...utils.component_names import (
    CHECKPOINT_FORMAT_VERSION,
    CHECKPOINT_VERSION_KEY,
    COMPONENTS,
)
from .. import app_logger
from ..custom_exceptions import CheckpointError
from ..numcore import Tensor


def adapter_key(encoder: str, layer: int, component: str, path: str, tensor: str) -> str:
    """Builds the container key "{enc}/{layer}/{comp}/{path}/{tensor}"

    Args:
        encoder (str): Encoder tag, "m" or "c"
        layer (int): Zero-based layer index
        component (str): One of q, k, v, o, up, down
        path (str): One of base, lora, cola, hypernet
        tensor (str): Tensor name within the pathway

    Returns:
        str: The key
    """
    if component not in COMPONENTS:
        raise CheckpointError(f"Unknown component '{component}'")
    return f"{encoder}/{layer}/{component}/{path}/{tensor}"


def parse_adapter_key(key: str) -> tuple[str, int, str, str, str]:
    parts = key.split("/")
    if len(parts) != 5 or parts[2] not in COMPONENTS or not parts[1].isdigit():
        raise CheckpointError(f"Malformed adapter key '{key}'")
    return parts[0], int(parts[1]), parts[2], parts[3], parts[4]


def save_container(path: str | Path, tensors: dict[str, Tensor]) -> Path:
    """Writes `tensors` to a numpy .npz archive with a format-version entry"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {key: t.data for key, t in tensors.items()}
    arrays[CHECKPOINT_VERSION_KEY] = np.asarray(CHECKPOINT_FORMAT_VERSION)
    with path.open("wb") as f:
        np.savez(f, **arrays)
    app_logger.info("Saved %d tensors to %s", len(tensors), path)
    return path


def load_container(path: str | Path) -> dict[str, np.ndarray]:
    """Reads an archive written by save_container, checking its format version"""
    with np.load(Path(path), allow_pickle=False) as archive:
        arrays = {key: archive[key] for key in archive.files}

    version = arrays.pop(CHECKPOINT_VERSION_KEY, None)
    if version is None or int(version) != CHECKPOINT_FORMAT_VERSION:
        app_logger.error("Checkpoint %s has format version %s", path, version)
        raise CheckpointError(
            f"Checkpoint {path} has format version {version}, expected {CHECKPOINT_FORMAT_VERSION}"
        )
    return arrays


def restore_into(tensors: dict[str, Tensor], arrays: dict[str, np.ndarray]) -> None:
    """Copies `arrays` into the matching tensors in place; keys and shapes must agree"""
    missing = sorted(set(tensors) - set(arrays))
    unexpected = sorted(set(arrays) - set(tensors))
    if missing or unexpected:
        app_logger.error("Checkpoint key mismatch: missing=%s unexpected=%s", missing, unexpected)
        raise CheckpointError(
            f"Checkpoint keys do not match the model: missing {missing[:5]}, unexpected {unexpected[:5]}"
        )

    for key, tensor in tensors.items():
        array = arrays[key]
        if array.shape != tensor.shape:
            raise CheckpointError(
                f"Shape mismatch for '{key}': checkpoint {array.shape}, model {tensor.shape}"
            )
        tensor.data[...] = array
