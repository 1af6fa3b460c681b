"""Paired token sequences whose label needs both modalities: y = (y_m + y_c) mod C"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ...utils.definitions import TaskSpec
from .. import app_logger
from ..custom_exceptions import ConfigurationError

SPLITS = ("train", "val", "test")
MAX_DRAWS_PER_EXAMPLE = 1000


@dataclass(frozen=True)
class Split:
    """One split; row i of every array describes example i"""

    tokens_m: np.ndarray
    tokens_c: np.ndarray
    labels: np.ndarray
    latent_m: np.ndarray
    latent_c: np.ndarray

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def take(self, index: np.ndarray) -> Split:
        return Split(
            tokens_m=self.tokens_m[index],
            tokens_c=self.tokens_c[index],
            labels=self.labels[index],
            latent_m=self.latent_m[index],
            latent_c=self.latent_c[index],
        )


@dataclass(frozen=True)
class Dataset:
    spec: TaskSpec
    seed: int
    train: Split
    val: Split
    test: Split

    def split(self, name: str) -> Split:
        if name not in SPLITS:
            raise ConfigurationError(f"Unknown split '{name}', expected one of {SPLITS}")
        return getattr(self, name)


def render_tokens(
    rng: np.random.Generator, symbol: int, spec: TaskSpec, vocab_size: int
) -> np.ndarray:
    """Draws seq_len tokens of `symbol` (token v belongs to symbol v mod C), each replaced
    by a uniformly random token with probability noise_rate"""
    owned = np.arange(symbol, vocab_size, spec.num_classes)
    tokens = rng.choice(owned, size=spec.seq_len)
    noisy = rng.random(spec.seq_len) < spec.noise_rate
    tokens[noisy] = rng.integers(0, vocab_size, size=int(noisy.sum()))
    return tokens.astype(np.int64)


def _draw_split(
    rng: np.random.Generator, spec: TaskSpec, size: int, seen: set[bytes]
) -> Split:
    C = spec.num_classes
    labels = np.arange(size, dtype=np.int64) % C
    rng.shuffle(labels)

    tokens_m = np.zeros((size, spec.seq_len), dtype=np.int64)
    tokens_c = np.zeros((size, spec.seq_len), dtype=np.int64)
    latent_m = rng.integers(0, C, size=size)
    latent_c = (labels - latent_m) % C

    for i in range(size):
        for _ in range(MAX_DRAWS_PER_EXAMPLE):
            row_m = render_tokens(rng, int(latent_m[i]), spec, spec.vocab_size_m)
            row_c = render_tokens(rng, int(latent_c[i]), spec, spec.vocab_size_c)
            key = row_m.tobytes() + b"|" + row_c.tobytes()
            if key not in seen:
                seen.add(key)
                break
        else:
            app_logger.error("Could not draw a fresh example after %s tries", MAX_DRAWS_PER_EXAMPLE)
            raise ConfigurationError(
                "Task space too small for disjoint splits; raise seq_len or the vocabulary sizes"
            )
        tokens_m[i], tokens_c[i] = row_m, row_c

    return Split(
        tokens_m=tokens_m,
        tokens_c=tokens_c,
        labels=labels,
        latent_m=latent_m.astype(np.int64),
        latent_c=latent_c.astype(np.int64),
    )


def gen_dataset(
    spec: TaskSpec,
    n_train: int | None = None,
    n_val: int | None = None,
    n_test: int | None = None,
    seed: int = 0,
) -> Dataset:
    """Generates train/val/test splits, disjoint and class-balanced within one example

    Args:
        spec (TaskSpec): Task definition
        n_train (int | None): Training size, spec.n_train when omitted
        n_val (int | None): Validation size, spec.n_val when omitted
        n_test (int | None): Test size, spec.n_test when omitted
        seed (int): Seed; equal seeds give bitwise equal datasets

    Returns:
        Dataset: The dataset
    """
    sizes = (
        spec.n_train if n_train is None else n_train,
        spec.n_val if n_val is None else n_val,
        spec.n_test if n_test is None else n_test,
    )
    if min(sizes) < 1:
        raise ConfigurationError(f"Every split needs at least one example, got {sizes}")

    rng = np.random.default_rng(seed)
    seen: set[bytes] = set()
    train, val, test = (_draw_split(rng, spec, size, seen) for size in sizes)
    app_logger.debug("Generated dataset with sizes %s (seed %s)", sizes, seed)
    return Dataset(spec=spec, seed=seed, train=train, val=val, test=test)


def save_jsonl(dataset: Dataset, path: str | Path) -> Path:
    """One JSON object per line: split, token arrays, label and latent symbols"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as f:
        f.write(json.dumps({"spec": dataset.spec.to_dict(), "seed": dataset.seed}, sort_keys=True) + "\n")
        for name in SPLITS:
            split = dataset.split(name)
            for i in range(len(split)):
                record = {
                    "split": name,
                    "tokens_m": split.tokens_m[i].tolist(),
                    "tokens_c": split.tokens_c[i].tolist(),
                    "label": int(split.labels[i]),
                    "y_m": int(split.latent_m[i]),
                    "y_c": int(split.latent_c[i]),
                }
                f.write(json.dumps(record, sort_keys=True) + "\n")
    return path


def load_jsonl(path: str | Path) -> Dataset:
    with Path(path).open(encoding="utf-8") as f:
        header = json.loads(f.readline())
        rows: dict[str, list[dict]] = {name: [] for name in SPLITS}
        for line in f:
            if line.strip():
                record = json.loads(line)
                rows[record["split"]].append(record)

    def build(records: list[dict]) -> Split:
        return Split(
            tokens_m=np.asarray([r["tokens_m"] for r in records], dtype=np.int64),
            tokens_c=np.asarray([r["tokens_c"] for r in records], dtype=np.int64),
            labels=np.asarray([r["label"] for r in records], dtype=np.int64),
            latent_m=np.asarray([r["y_m"] for r in records], dtype=np.int64),
            latent_c=np.asarray([r["y_c"] for r in records], dtype=np.int64),
        )

    return Dataset(
        spec=TaskSpec(**header["spec"]),
        seed=int(header["seed"]),
        train=build(rows["train"]),
        val=build(rows["val"]),
        test=build(rows["test"]),
    )
