"""Checked-in presets: encoder architectures, pretraining schedules, grids, recipe.

Every preset is backed by a flat key-value config file shipped with the
package under ``configs/``, so the exact settings are inspectable and can be
overridden by pointing the CLI at an edited copy.
"""

from __future__ import annotations

from importlib import resources

from .config import EncoderConfig, config_from_text
from .errors import ConfigError
from .schedule import TrainingSchedule, schedule_from_text

VOCAB_SIZE = 31000

ENCODER_PRESETS = (
    "albeto-tiny",
    "albeto-base",
    "albeto-large",
    "albeto-xlarge",
    "albeto-xxlarge",
    "distilbeto",
    "beto-teacher",
)

SCHEDULE_PRESETS = (
    "albeto-tiny",
    "albeto-base",
    "albeto-large",
    "albeto-xlarge",
    "albeto-xxlarge",
)

GRID_PRESETS = ("standard", "reduced")

# Steps of the reference distillation run. Its batch size and learning rate
# were never published, so no preset pins them.
DISTILL_PRESET_STEPS = 90_000

PUBLISHED_MODELS = (
    "beto-uncased",
    "beto-cased",
    "distilbeto",
    "albeto-tiny",
    "albeto-base",
    "albeto-large",
    "albeto-xlarge",
    "albeto-xxlarge",
)


def _read(relpath: str) -> str:
    return resources.files("lightlm").joinpath("configs", *relpath.split("/")).read_text("utf-8")


def encoder_preset(name: str) -> EncoderConfig:
    if name not in ENCODER_PRESETS:
        raise ConfigError(f"unknown encoder preset {name!r}; options: {ENCODER_PRESETS}")
    return config_from_text(_read(f"encoder/{name}.cfg"), source=f"preset:{name}")


def schedule_preset(name: str) -> TrainingSchedule:
    if name not in SCHEDULE_PRESETS:
        raise ConfigError(f"unknown schedule preset {name!r}; options: {SCHEDULE_PRESETS}")
    return schedule_from_text(_read(f"schedule/{name}.cfg"), source=f"preset:{name}")


def grid_preset(name: str = "standard"):
    from .finetune import grid_from_text

    if name not in GRID_PRESETS:
        raise ConfigError(f"unknown grid preset {name!r}; options: {GRID_PRESETS}")
    return grid_from_text(_read(f"grid/{name}.cfg"), source=f"preset:{name}")


def recipe_preset():
    from .distill import recipe_from_text

    return recipe_from_text(_read("recipe/distilbeto.cfg"), source="preset:distilbeto")


def published_scores_path(model: str):
    """Filesystem path of the shipped per-task score file for one model."""
    if model not in PUBLISHED_MODELS:
        raise ConfigError(f"unknown published model {model!r}; options: {PUBLISHED_MODELS}")
    return resources.files("lightlm").joinpath("configs", "published", f"{model}.scores.tsv")
