"""
Shot containers: weak-measurement records, trajectory records, dataset metadata,
split assignment and uniform-length mini-batches.
"""

import math
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .qcore import POSITIVITY_TOL
from .streams import unit_interval

SPLITS = ("train", "validation", "test")
SPLIT_SALT = 0x5EED5B17
EXPERIMENT_FRACTIONS = (0.75, 0.20, 0.05)
SIMULATION_FRACTIONS = (2.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0)


def default_t_grid() -> List[float]:
    return [round(0.04 * i, 10) for i in range(201)]


def _is_multiple(value: float, step: float) -> bool:
    ratio = value / step
    return abs(ratio - round(ratio)) <= 1e-6


class ModelSpec(BaseModel):
    """JSON form of a physical model; complex entries are (re, im) pairs."""

    model_config = ConfigDict(extra="forbid")

    h_r: List[List[Tuple[float, float]]]
    lindblad: List[List[Tuple[float, float]]]
    eta: float
    gamma_up: float = 0.0
    gamma_down: float = 0.0


class DatasetMeta(BaseModel):
    """Generation plan and documentation constants of a dataset."""

    model_config = ConfigDict(extra="forbid")

    dt: float = Field(0.04, gt=0)
    dt_fine: float = Field(0.001, gt=0)
    t_grid: List[float] = Field(default_factory=default_t_grid)
    shots_per_setting: int = Field(1, ge=0)
    seed: int = 0
    generator: Optional[ModelSpec] = None
    stepper: str = "milstein"
    # recorded only; the cavity is never simulated
    chi: float = -2.0 * math.pi * 0.47
    kappa: Optional[float] = None
    split_fractions: Tuple[float, float, float] = SIMULATION_FRACTIONS

    @model_validator(mode="after")
    def _check(self) -> "DatasetMeta":
        fractions = self.split_fractions
        if any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must be >= 0 and sum to 1, got {fractions}")
        if self.dt < self.dt_fine or not _is_multiple(self.dt, self.dt_fine):
            raise ValueError(f"dt={self.dt} must be a multiple of dt_fine={self.dt_fine}")
        for duration in self.t_grid:
            if duration < 0 or not _is_multiple(duration, self.dt):
                raise ValueError(f"duration {duration} is not a multiple of dt={self.dt}")
        return self

    @property
    def coarse_factor(self) -> int:
        return int(round(self.dt / self.dt_fine))

    def n_steps(self, duration: float) -> int:
        return int(round(duration / self.dt))


def assign_split(index: int, fractions: Sequence[float] = SIMULATION_FRACTIONS) -> int:
    """Split id (0 train, 1 validation, 2 test) of a shot, from a hash of its index."""
    u = unit_interval(SPLIT_SALT, index)
    edge = 0.0
    for split, fraction in enumerate(fractions[:-1]):
        edge += fraction
        if u < edge:
            return split
    return len(fractions) - 1


@dataclass(frozen=True)
class WeakRecord:
    """I and Q weak-measurement increments (units sqrt(us)) at step ``dt`` (us)."""

    dm_i: np.ndarray
    dm_q: np.ndarray
    dt: float

    def __post_init__(self):
        object.__setattr__(self, "dm_i", np.asarray(self.dm_i, dtype=float))
        object.__setattr__(self, "dm_q", np.asarray(self.dm_q, dtype=float))
        if self.dm_i.shape != self.dm_q.shape or self.dm_i.ndim != 1:
            raise ValueError(
                f"record quadratures differ in shape: {self.dm_i.shape} vs {self.dm_q.shape}"
            )
        if not self.dt > 0:
            raise ValueError(f"record step must be positive, got {self.dt}")
        if not (np.all(np.isfinite(self.dm_i)) and np.all(np.isfinite(self.dm_q))):
            raise ValueError("record contains non-finite increments")

    @property
    def n_steps(self) -> int:
        return self.dm_i.shape[0]

    def stacked(self) -> np.ndarray:
        """Increments as an (n_steps, 2) array of (I, Q)."""
        return np.stack([self.dm_i, self.dm_q], axis=-1)


@dataclass(frozen=True)
class TrajectoryRecord:
    """One shot: preparation, weak record, readout axis and outcome."""

    index: int
    prep: int
    axis: int
    outcome: int
    record: WeakRecord
    truth: Optional[np.ndarray] = None

    def __post_init__(self):
        if not 0 <= self.prep < 6:
            raise ValueError(f"preparation index {self.prep} outside 0-5")
        if not 0 <= self.axis < 3:
            raise ValueError(f"readout axis {self.axis} outside 0-2")
        if self.outcome not in (-1, 1):
            raise ValueError(f"outcome must be +1 or -1, got {self.outcome}")
        if self.truth is not None:
            truth = np.asarray(self.truth, dtype=float)
            if truth.shape != (self.record.n_steps + 1, 3):
                raise ValueError(
                    f"truth shape {truth.shape} does not match {self.record.n_steps} steps"
                )
            if np.any(np.linalg.norm(truth, axis=-1) > 1.0 + POSITIVITY_TOL):
                raise ValueError("truth contains states outside the Bloch ball")
            object.__setattr__(self, "truth", truth)

    @property
    def n_steps(self) -> int:
        return self.record.n_steps


@dataclass(frozen=True)
class Batch:
    """Shots of one sequence length, stacked for vectorized integration."""

    indices: np.ndarray
    prep: np.ndarray
    axis: np.ndarray
    outcome: np.ndarray
    dm: np.ndarray
    dt: float
    truth: Optional[np.ndarray] = None

    @property
    def size(self) -> int:
        return self.indices.shape[0]

    @property
    def n_steps(self) -> int:
        return self.dm.shape[1]

    def take(self, rows: np.ndarray) -> "Batch":
        return Batch(
            indices=self.indices[rows],
            prep=self.prep[rows],
            axis=self.axis[rows],
            outcome=self.outcome[rows],
            dm=self.dm[rows],
            dt=self.dt,
            truth=None if self.truth is None else self.truth[rows],
        )

    def blocks(self, block_size: int) -> List["Batch"]:
        """Consecutive sub-batches of at most ``block_size`` shots."""
        return [
            self.take(np.arange(start, min(start + block_size, self.size)))
            for start in range(0, self.size, block_size)
        ]


def make_batch(shots: Sequence[TrajectoryRecord]) -> Batch:
    if not shots:
        raise ValueError("cannot batch an empty shot list")
    lengths = {shot.n_steps for shot in shots}
    if len(lengths) != 1:
        raise ValueError(f"batch needs a uniform record length, got {sorted(lengths)}")
    n_steps = lengths.pop()
    has_truth = all(shot.truth is not None for shot in shots)
    dm = np.stack([shot.record.stacked() for shot in shots]) if n_steps else np.zeros(
        (len(shots), 0, 2)
    )
    return Batch(
        indices=np.array([shot.index for shot in shots], dtype=np.int64),
        prep=np.array([shot.prep for shot in shots], dtype=np.int64),
        axis=np.array([shot.axis for shot in shots], dtype=np.int64),
        outcome=np.array([shot.outcome for shot in shots], dtype=np.int64),
        dm=dm,
        dt=shots[0].record.dt,
        truth=np.stack([shot.truth for shot in shots]) if has_truth else None,
    )


@dataclass
class Dataset:
    """A collection of shots with the metadata they were generated from."""

    meta: DatasetMeta
    shots: List[TrajectoryRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.shots)

    def __iter__(self) -> Iterator[TrajectoryRecord]:
        return iter(self.shots)

    @property
    def has_truth(self) -> bool:
        return bool(self.shots) and all(shot.truth is not None for shot in self.shots)

    def split_of(self, shot: TrajectoryRecord) -> str:
        return SPLITS[assign_split(shot.index, self.meta.split_fractions)]

    def subset(self, split: str) -> "Dataset":
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}, expected one of {SPLITS}")
        return Dataset(self.meta, [s for s in self.shots if self.split_of(s) == split])

    def where(self, n_steps: Optional[int] = None, prep: Optional[int] = None) -> "Dataset":
        shots = [
            s
            for s in self.shots
            if (n_steps is None or s.n_steps == n_steps) and (prep is None or s.prep == prep)
        ]
        return Dataset(self.meta, shots)

    def by_length(self) -> Dict[int, List[TrajectoryRecord]]:
        groups: Dict[int, List[TrajectoryRecord]] = {}
        for shot in sorted(self.shots, key=lambda s: (s.n_steps, s.index)):
            groups.setdefault(shot.n_steps, []).append(shot)
        return groups

    def batches(
        self, batch_size: int, rng: Optional[np.random.Generator] = None
    ) -> List[Batch]:
        """
        Uniform-length mini-batches of at most ``batch_size`` shots.

        Without ``rng`` the order is by length then shot index; with ``rng`` the
        shots inside each length group and the batch order are shuffled.
        """
        batches = []
        for shots in self.by_length().values():
            if rng is not None:
                shots = [shots[i] for i in rng.permutation(len(shots))]
            for start in range(0, len(shots), batch_size):
                batches.append(make_batch(shots[start : start + batch_size]))
        if rng is not None:
            batches = [batches[i] for i in rng.permutation(len(batches))]
        return batches
