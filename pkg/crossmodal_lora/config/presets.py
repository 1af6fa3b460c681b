"""Encoder shapes of the backbone pairs used for parameter and FLOPs accounting"""

from typing import Final

from ..cola.components import app_logger
from ..cola.components.accounting import ArchSpec, EncoderArch
from ..cola.components.custom_exceptions import ConfigurationError
from ..cola.utils.definitions import ExperimentConfig

# ViT-B/16, BERT-base, DINO-B and SSLAM-base all share the base transformer shape.
BASE_TRANSFORMER: Final[EncoderArch] = EncoderArch(d_model=768, d_ffn=3072, n_layers=12)


def toy_arch(experiment: ExperimentConfig | None = None) -> ArchSpec:
    """The instantiable toy model, embeddings and classification head included"""
    experiment = experiment or ExperimentConfig()
    task = experiment.task
    return ArchSpec.from_configs(
        experiment.encoder_config(task.vocab_size_m),
        experiment.encoder_config(task.vocab_size_c),
        num_classes=task.num_classes,
        name="toy",
    )


PRESETS: Final[dict[str, ArchSpec]] = {
    "vitb-bertb": ArchSpec("vitb-bertb", BASE_TRANSFORMER, BASE_TRANSFORMER),
    "dinob-sslam": ArchSpec("dinob-sslam", BASE_TRANSFORMER, BASE_TRANSFORMER),
    "toy": toy_arch(),
}


def get_preset(name: str) -> ArchSpec:
    try:
        return PRESETS[name]
    except KeyError:
        app_logger.error("Unknown architecture preset %s", name)
        raise ConfigurationError(
            f"Unknown preset '{name}', expected one of {sorted(PRESETS)}"
        ) from None
