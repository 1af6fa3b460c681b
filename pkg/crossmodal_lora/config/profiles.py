"""Training profiles for vision-language and audio-visual fine-tuning"""

from dataclasses import dataclass, replace
from typing import Final

from ..cola.components import app_logger
from ..cola.components.custom_exceptions import ConfigurationError
from ..cola.utils.definitions import ExperimentConfig


@dataclass(frozen=True)
class TrainingProfile:
    name: str
    lambda_init: float
    optimizer: str
    weight_decay: float
    lr_adapter: float
    lr_head: float
    batch_size: int
    rank: int = 16
    alpha: float = 8.0
    gamma: int = 16


PROFILES: Final[dict[str, TrainingProfile]] = {
    "vl": TrainingProfile(
        name="vl",
        lambda_init=0.5,
        optimizer="adamw",
        weight_decay=1e-4,
        lr_adapter=1e-4,
        lr_head=2.5e-5,
        batch_size=80,
    ),
    "av": TrainingProfile(
        name="av",
        lambda_init=0.1,
        optimizer="adam",
        weight_decay=0.0,
        lr_adapter=5e-6,
        lr_head=4e-6,
        batch_size=2,
    ),
}


def get_profile(name: str) -> TrainingProfile:
    try:
        return PROFILES[name]
    except KeyError:
        app_logger.error("Unknown profile %s", name)
        raise ConfigurationError(
            f"Unknown profile '{name}', expected one of {sorted(PROFILES)}"
        ) from None


def apply_profile(experiment: ExperimentConfig, name: str) -> ExperimentConfig:
    """Overrides adapter and optimiser settings with the profile's; epochs stay as they are

    Args:
        experiment (ExperimentConfig): The experiment to rewrite
        name (str): Profile name, "vl" or "av"

    Returns:
        ExperimentConfig: The rewritten experiment
    """
    profile = get_profile(name)
    adapter = replace(
        experiment.adapter,
        rank=profile.rank,
        inter_rank=None,
        alpha=profile.alpha,
        gamma=profile.gamma,
        lambda_init=profile.lambda_init,
    )
    run = replace(
        experiment.run,
        optimizer=profile.optimizer,
        weight_decay=profile.weight_decay,
        lr_adapter=profile.lr_adapter,
        lr_head=profile.lr_head,
        batch_size=profile.batch_size,
    )
    return replace(experiment, adapter=adapter, run=run, profile=name)
