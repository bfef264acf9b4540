"""
Evaluation metrics and parameter-extraction baselines: cross entropy,
trajectory MSE, calibration (self-consistency) of predicted probabilities,
the binning fit and the coarse-graining study.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .config import ModelSection, TrainConfig
from .dataset import Dataset
from .losses import ce_loss
from .parallel import map_ordered
from .qcore import SIGMA_X
from .sdelearn import REPORT_VERSION, evaluate_ce, train_sde
from .sme import PhysicalModel, coarse_dataset, fit_me_rates, me_propagator

logger = logging.getLogger(__name__)

PHYSICAL = ("omega_r", "gamma_d", "eta")
Series = Union[np.ndarray, Mapping[int, np.ndarray]]


class FitSingular(Exception):
    """Raised when a least-squares design matrix is rank deficient."""


def ce_metric(pi: np.ndarray, y: np.ndarray) -> float:
    """Cross entropy of predictions Pi against outcomes Y."""
    return float(ce_loss(np.asarray(pi, dtype=float), y))


def true_parameters(m: PhysicalModel) -> Dict[str, float]:
    """omega_r, gamma_d and eta of a plain model (sigma_x and sigma_z components)."""
    l_z = 0.5 * (m.lindblad[0, 0] - m.lindblad[1, 1])
    return {
        "omega_r": float(np.real(np.trace(SIGMA_X @ m.h_r))),
        "gamma_d": 2.0 * float(abs(l_z) ** 2),
        "eta": float(m.eta),
    }


class MseReport(BaseModel):
    total: float
    per_time: List[float]
    n_shots: int


def _paired(predicted: Series, truth: Series) -> List[tuple]:
    if isinstance(predicted, Mapping) or isinstance(truth, Mapping):
        if not (isinstance(predicted, Mapping) and isinstance(truth, Mapping)):
            raise TypeError("predicted and truth must both be arrays or both be mappings")
        missing = sorted(set(predicted) - set(truth))
        if missing:
            raise ValueError(f"no truth for {len(missing)} shot(s), first {missing[0]}")
        return [(np.asarray(predicted[k]), np.asarray(truth[k])) for k in sorted(predicted)]
    predicted, truth = np.asarray(predicted), np.asarray(truth)
    return list(zip(predicted, truth))


def mse_vs_truth(predicted: Series, truth: Series, max_steps: Optional[int] = None) -> MseReport:
    """
    Squared error of Bloch series against the true ones.

    ``total`` is the mean over shots, times and components; ``per_time`` the
    mean over shots and components at each time index. ``max_steps`` keeps the
    first max_steps + 1 states only.
    """
    pairs = _paired(predicted, truth)
    if not pairs:
        raise ValueError("no series to compare")
    sums: List[float] = []
    counts: List[int] = []
    total, entries = 0.0, 0
    for p, t in pairs:
        if p.shape != t.shape:
            raise ValueError(f"series shapes differ: {p.shape} vs {t.shape}")
        if max_steps is not None:
            p, t = p[: max_steps + 1], t[: max_steps + 1]
        err = ((p - t) ** 2).sum(axis=-1)
        if len(sums) < err.shape[0]:
            sums += [0.0] * (err.shape[0] - len(sums))
            counts += [0] * (err.shape[0] - len(counts))
        for k, e in enumerate(err):
            sums[k] += float(e)
            counts[k] += 1
        total += float(err.sum())
        entries += err.size * 3
    per_time = [s / (3 * c) for s, c in zip(sums, counts)]
    return MseReport(total=total / entries, per_time=per_time, n_shots=len(pairs))


class SelfConsistencyReport(BaseModel):
    model_config = ConfigDict(extra="forbid")

    format_version: str = REPORT_VERSION
    kind: str = "self_consistency"
    delta: float
    centers: List[float]
    predicted: List[float]
    empirical: List[float]
    counts: List[int]
    epsilon: float = Field(ge=0.0)
    slope: Optional[float] = None
    intercept: Optional[float] = None


def self_consistency(
    pi: np.ndarray, y: np.ndarray, delta: float = 0.04
) -> SelfConsistencyReport:
    """
    Calibration of predicted probabilities.

    Shots are binned by Pi with width ``delta``; each non-empty bin reports the
    mean prediction and the empirical frequency of outcome +1. ``epsilon`` is
    the count-weighted RMS difference; slope and intercept come from a
    count-weighted line fit of empirical against predicted (two or more bins).
    """
    pi = np.asarray(pi, dtype=float)
    y = np.asarray(y)
    if not 0.0 < delta < 1.0:
        raise ValueError(f"bin width must lie in (0, 1), got {delta}")
    if np.any((pi < 0) | (pi > 1)):
        raise ValueError("predicted probabilities must lie in [0, 1]")
    if pi.shape != y.shape:
        raise ValueError(f"{pi.shape[0]} predictions for {y.shape[0]} outcomes")
    n_bins = int(np.ceil(1.0 / delta - 1e-9))
    bins = np.minimum((pi / delta).astype(int), n_bins - 1)
    counts = np.bincount(bins, minlength=n_bins)
    pred_sum = np.bincount(bins, weights=pi, minlength=n_bins)
    hits = np.bincount(bins, weights=(y > 0).astype(float), minlength=n_bins)
    keep = counts > 0
    counts = counts[keep]
    predicted = pred_sum[keep] / counts
    empirical = hits[keep] / counts
    centers = (np.flatnonzero(keep) + 0.5) * delta
    epsilon = float(np.sqrt((counts * (predicted - empirical) ** 2).sum() / max(counts.sum(), 1)))
    slope = intercept = None
    if counts.size >= 2 and np.ptp(predicted) > 0:
        slope, intercept = (float(v) for v in np.polyfit(predicted, empirical, 1, w=np.sqrt(counts)))
    return SelfConsistencyReport(
        delta=delta,
        centers=centers.tolist(),
        predicted=predicted.tolist(),
        empirical=empirical.tolist(),
        counts=counts.tolist(),
        epsilon=epsilon,
        slope=slope,
        intercept=intercept,
    )


class BinFitReport(BaseModel):
    model_config = ConfigDict(extra="forbid")

    format_version: str = REPORT_VERSION
    kind: str = "bin_fit"
    params: Dict[str, float]
    errors: Dict[str, float]
    n_trajectories: int
    delta: float
    variance_method: str = "one-step increments"


def _ensemble_means(series: Sequence[np.ndarray], preps: Sequence[int]) -> Dict[int, tuple]:
    """Per preparation: (mean Bloch series, shot count per time index)."""
    out = {}
    for prep in sorted(set(int(p) for p in preps)):
        group = [s for s, p in zip(series, preps) if int(p) == prep]
        length = max(len(s) for s in group)
        sums = np.zeros((length, 3))
        counts = np.zeros(length)
        for s in group:
            sums[: len(s)] += s
            counts[: len(s)] += 1
        out[prep] = (sums / counts[:, None], counts)
    return out


def _covariance(jac: np.ndarray, residual: np.ndarray) -> np.ndarray:
    jtj = jac.T @ jac
    if np.linalg.matrix_rank(jtj) < jtj.shape[0]:
        raise FitSingular(f"design matrix of rank {np.linalg.matrix_rank(jtj)} < {jtj.shape[0]}")
    dof = max(residual.size - jac.shape[1], 1)
    return np.linalg.inv(jtj) * float(residual @ residual) / dof


def bin_fit(
    series: Sequence[np.ndarray], preps: Sequence[int], dt: float, delta: float = 0.04
) -> BinFitReport:
    """
    Extract omega_r, gamma_d and eta from Bloch trajectories without learning.

    Rabi frequency and dephasing come from a least-squares fit of the
    per-preparation ensemble means to the master equation. The efficiency
    comes from the one-step conditional variance of z around the exact master
    equation step, binned by z with width ``delta`` and regressed through the
    origin on gamma_d (1 - z^2)^2 dt.

    Raises:
        FitSingular: If either design matrix is rank deficient.
    """
    series = [np.asarray(s, dtype=float) for s in series]
    if not series or len(series) != len(preps):
        raise ValueError("need one preparation per trajectory")
    means = _ensemble_means(series, preps)
    if max(len(m) for m, _ in means.values()) < 3:
        raise FitSingular("trajectories are too short to fit")

    groups = list(means.values())
    r0 = np.stack([mean[0] for mean, _ in groups])
    length = max(len(mean) for mean, _ in groups)

    def residuals(series_all: np.ndarray) -> np.ndarray:
        parts = []
        for p, (mean, counts) in enumerate(groups):
            model = series_all[: len(mean), p]
            parts.append(((model - mean) * np.sqrt(counts)[:, None]).ravel())
        return np.concatenate(parts)

    fit = fit_me_rates(residuals, r0, dt, length)
    omega, gamma = (float(v) for v in fit.x)
    cov = _covariance(fit.jac, fit.fun)

    g, offset = me_propagator(PhysicalModel.constrained(omega, gamma, 0.0), dt)
    z_prev = np.concatenate([s[:-1, 2] for s in series if len(s) > 1])
    step = np.concatenate([s[1:, 2] - (s[:-1] @ g.T + offset)[:, 2] for s in series if len(s) > 1])
    n_bins = int(np.ceil(2.0 / delta - 1e-9))
    bins = np.clip(((z_prev + 1.0) / delta).astype(int), 0, n_bins - 1)
    variances, regressors, weights = [], [], []
    for b in range(n_bins):
        sel = bins == b
        if np.count_nonzero(sel) < 2:
            continue
        variances.append(float(np.var(step[sel], ddof=1)))
        regressors.append(float(np.mean(gamma * (1.0 - z_prev[sel] ** 2) ** 2 * dt)))
        weights.append(float(np.count_nonzero(sel)))
    v, x, w = np.array(variances), np.array(regressors), np.array(weights)
    denom = float((w * x * x).sum()) if x.size else 0.0
    if denom <= 0.0:
        raise FitSingular("no z bins with a non-zero diffusion regressor")
    eta = float((w * x * v).sum() / denom)
    dof = max(x.size - 1, 1)
    eta_err = float(np.sqrt((w * (v - eta * x) ** 2).sum() / dof / denom))
    logger.info(f"Binning fit: omega_r={omega:.4f}, gamma_d={gamma:.4f}, eta={eta:.4f}")
    return BinFitReport(
        params={"omega_r": omega, "gamma_d": gamma, "eta": eta},
        errors={
            "omega_r": float(np.sqrt(cov[0, 0])),
            "gamma_d": float(np.sqrt(cov[1, 1])),
            "eta": eta_err,
        },
        n_trajectories=len(series),
        delta=delta,
    )


class CoarseRow(BaseModel):
    k: int
    dt: float
    params: Dict[str, float]
    rel_error: Dict[str, float]
    learned_ce: float
    true_ce: float
    epochs: int


class CoarseStudyReport(BaseModel):
    model_config = ConfigDict(extra="forbid")

    format_version: str = REPORT_VERSION
    kind: str = "coarse_study"
    truth: Dict[str, float]
    rows: List[CoarseRow]

    @model_validator(mode="after")
    def _check(self) -> "CoarseStudyReport":
        steps = [row.dt for row in self.rows]
        if any(b <= a for a, b in zip(steps, steps[1:])):
            raise ValueError("coarse study rows must have strictly increasing dt")
        return self


@dataclass(frozen=True, eq=False)
class _Level:
    fine: Dataset
    k: int
    pack: ModelSection
    cfg: TrainConfig
    truth: PhysicalModel


def _study_level(level: _Level) -> CoarseRow:
    data = coarse_dataset(level.fine, level.k)
    logger.info(f"Coarse level k={level.k}: dt={data.meta.dt}, {len(data)} shots")
    report = train_sde(data, level.pack, level.cfg)
    spam = report.spam_model()
    validation = data.subset("validation")
    learned = evaluate_ce(report.physical_model(), validation, spam, level.cfg.stepper)
    true_ce = evaluate_ce(level.truth, validation, spam, level.cfg.stepper)
    truth = true_parameters(level.truth)
    params = {name: report.params[name] for name in PHYSICAL}
    return CoarseRow(
        k=level.k,
        dt=data.meta.dt,
        params=params,
        rel_error={name: abs(params[name] - truth[name]) / abs(truth[name]) for name in PHYSICAL},
        learned_ce=learned,
        true_ce=true_ce,
        epochs=report.epochs,
    )


def coarse_study(
    fine: Dataset,
    k_list: Sequence[int],
    pack: ModelSection,
    cfg: TrainConfig,
    workers: int = 1,
) -> CoarseStudyReport:
    """
    Train one SDE model per coarse-graining factor of a fine dataset.

    Each row compares the learned parameters with the generator's and the
    validation cross entropy of the learned model with that of the true one.
    Levels run in parallel.
    """
    if fine.meta.generator is None:
        raise ValueError("coarse study needs a dataset with a known generator model")
    k_list = sorted(set(int(k) for k in k_list))
    truth = PhysicalModel.from_spec(fine.meta.generator)
    levels = [_Level(fine, k, pack, cfg, truth) for k in k_list]
    rows = map_ordered(_study_level, levels, workers)
    return CoarseStudyReport(truth=true_parameters(truth), rows=rows)


class ParameterTable(BaseModel):
    model_config = ConfigDict(extra="forbid")

    format_version: str = REPORT_VERSION
    kind: str = "parameter_table"
    parameters: List[str]
    columns: Dict[str, Dict[str, float]]
    ce: Dict[str, float] = Field(default_factory=dict)


def parameter_table(
    columns: Mapping[str, Mapping[str, float]],
    ce: Optional[Mapping[str, float]] = None,
    parameters: Sequence[str] = PHYSICAL,
) -> ParameterTable:
    """Side-by-side parameter estimates (true, SDE, RNN+SDE, binning, ...)."""
    for name, values in columns.items():
        missing = [p for p in parameters if p not in values]
        if missing:
            raise ValueError(f"column {name!r} lacks {missing}")
    return ParameterTable(
        parameters=list(parameters),
        columns={name: {p: float(values[p]) for p in parameters} for name, values in columns.items()},
        ce={name: float(v) for name, v in (ce or {}).items()},
    )
