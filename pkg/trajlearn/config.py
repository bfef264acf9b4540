"""
Run configuration: one JSON document with model, data, generate, train, loss
and study sections. Unknown keys are rejected in every section.
"""

import json
import math
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .dataset import SIMULATION_FRACTIONS, default_t_grid

OMEGA_R = 2.0 * math.pi * 0.222
GAMMA_D = 2.0 * math.pi * 0.187
ETA = 0.1469
INIT_KEYS = ("omega_r", "gamma_d", "eta", "gamma_up", "gamma_down")


class ConfigError(ValueError):
    """Raised when a configuration file is missing, malformed or invalid."""


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModelSection(_Section):
    variant: str = "constrained"
    # starting guesses; fitted to the training data when omitted
    init: Optional[Dict[str, float]] = None
    init_spread: float = Field(3.0, ge=1.0)
    op_perturbation: float = Field(0.05, ge=0.0)

    @model_validator(mode="after")
    def _check(self) -> "ModelSection":
        if self.variant not in ("constrained", "operator", "extended"):
            raise ValueError(f"Invalid model variant: {self.variant}")
        unknown = sorted(set(self.init or {}) - set(INIT_KEYS))
        if unknown:
            raise ValueError(
                f"Unknown initial guess(es) {unknown}, expected a subset of {list(INIT_KEYS)}"
            )
        return self


class DataSection(_Section):
    path: Optional[str] = None
    split_fractions: Tuple[float, float, float] = SIMULATION_FRACTIONS
    gru_path: Optional[str] = None
    report_path: Optional[str] = None


class GenerateSection(_Section):
    omega_r: float = OMEGA_R
    gamma_d: float = Field(GAMMA_D, ge=0.0)
    eta: float = Field(ETA, ge=0.0, le=1.0)
    gamma_up: float = Field(0.0, ge=0.0)
    gamma_down: float = Field(0.0, ge=0.0)
    # sigma_x admixture of L, in units of sqrt(Gamma_d / 2)
    tilt: float = 0.0
    t_grid: List[float] = Field(default_factory=default_t_grid)
    dt_fine: float = Field(0.001, gt=0.0)
    dt: float = Field(0.04, gt=0.0)
    shots_per_setting: int = Field(10, ge=0)
    seed: int = 0
    stepper: str = "milstein"
    kappa: Optional[float] = None


class TrainConfig(_Section):
    lr: float = Field(0.001, gt=0.0)
    batch_size: int = Field(1024, ge=1)
    epochs: int = Field(50, ge=0)
    patience: int = Field(10, ge=1)
    ensemble_size: int = Field(32, ge=1)
    seed: int = 0
    stepper: str = "milstein"
    block_size: int = Field(256, ge=1)


class LossWeights(_Section):
    """Relative weights of the positivity, preparation and prediction terms."""

    w_posit: float = Field(0.36, ge=0.0)
    w_prep: float = Field(1.7, ge=0.0)
    w_dm: float = Field(2.1, ge=0.0)
    hidden: int = Field(16, ge=1)


class StudySection(_Section):
    k_list: List[int] = Field(default_factory=lambda: [1, 2, 4, 10, 20, 40, 100, 200])
    delta: float = Field(0.04, gt=0.0, lt=1.0)

    @model_validator(mode="after")
    def _check(self) -> "StudySection":
        if any(k < 1 for k in self.k_list) or self.k_list != sorted(set(self.k_list)):
            raise ValueError("k_list must hold distinct positive factors in increasing order")
        return self


class RunConfig(_Section):
    model: ModelSection = Field(default_factory=ModelSection)
    data: DataSection = Field(default_factory=DataSection)
    generate: GenerateSection = Field(default_factory=GenerateSection)
    train: TrainConfig = Field(default_factory=TrainConfig)
    loss: LossWeights = Field(default_factory=LossWeights)
    study: StudySection = Field(default_factory=StudySection)

    def with_seed(self, seed: Optional[int]) -> "RunConfig":
        """Override the training and generation seeds."""
        if seed is None:
            return self
        return self.model_copy(
            update={
                "train": self.train.model_copy(update={"seed": seed}),
                "generate": self.generate.model_copy(update={"seed": seed}),
            }
        )


def load_config(path: Union[str, Path, None]) -> RunConfig:
    """
    Read and validate a RunConfig JSON file; ``None`` gives the defaults.

    Raises:
        ConfigError: If the file cannot be read or fails validation.
    """
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text()
        return RunConfig.model_validate(json.loads(text))
    except OSError as e:
        raise ConfigError(f"Cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"Config {path} is not valid JSON: {e}") from e
    except ValidationError as e:
        fields = ", ".join(".".join(str(p) for p in err["loc"]) for err in e.errors())
        raise ConfigError(f"Invalid config {path} ({fields}): {e}") from e
