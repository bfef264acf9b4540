"""
The trainable stochastic master equation: state inference from observed weak
records, outcome prediction, SPAM tomography, cross-entropy training of nested
parameter packs with ensembles and early stopping, distillation of recurrent
network trajectories, likelihood-ratio model selection and the master-equation
baseline.
"""

import logging
import time
from concurrent.futures import Executor
from dataclasses import dataclass, replace
from enum import Enum
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.optimize import minimize_scalar
from scipy.stats import chi2

from .autodiff import (
    AdamState,
    adam_step,
    gradient,
    logistic,
    logit,
    primal,
    softplus,
    softplus_inverse,
    sqrt,
    stack,
)
from .config import ModelSection, TrainConfig
from .dataset import Batch, Dataset, TrajectoryRecord, make_batch
from .losses import ce_loss, ce_terms, outcome_probability
from .parallel import BLOCK_SIZE, map_ordered, tree_sum, worker_pool
from .qcore import (
    POSITIVITY_TOL,
    PREP_LABELS,
    PREP_STATES,
    SIGMA_X,
    SIGMA_Y,
    SIGMA_Z,
    AXES,
    bloch_from_rho,
    rho_from_bloch,
    trace,
)
from .sme import (
    DegenerateState,
    IntegratorDiagnostics,
    PhysicalModel,
    constrained_me_series,
    fit_me_rates,
    get_stepper,
    invert_record,
    solve_master_equation,
)
from .streams import stream

logger = logging.getLogger(__name__)

REPORT_VERSION = "1.0"
ETA_RANGE = (1e-4, 0.999)
MEMBER_SALT = 0xE45E3B1E
# centre of the starting ensemble when the data cannot constrain it
FALLBACK_GUESS = {"omega_r": 1.0, "gamma_d": 1.0, "eta": 0.1}


class MissingCell(Exception):
    """Raised when SPAM tomography lacks shots for some (prep, axis) cells."""

    def __init__(self, cells: Sequence[Tuple[int, int]]):
        self.cells = list(cells)
        names = ", ".join(f"({PREP_LABELS[p]}, {AXES[a]})" for p, a in self.cells)
        super().__init__(f"No T=0 shots for {len(self.cells)} cell(s): {names}")


class PackVariant(str, Enum):
    CONSTRAINED = "constrained"
    OPERATOR = "operator"
    EXTENDED = "extended"


_OPERATOR_NAMES = (
    "h_x",
    "h_y",
    "h_z",
    "l00_re",
    "l00_im",
    "l01_re",
    "l01_im",
    "l10_re",
    "l10_im",
    "l11_re",
    "l11_im",
    "eta",
)
RAW_NAMES: Dict[PackVariant, Tuple[str, ...]] = {
    PackVariant.CONSTRAINED: ("omega_r", "gamma_d", "eta"),
    PackVariant.OPERATOR: _OPERATOR_NAMES,
    PackVariant.EXTENDED: _OPERATOR_NAMES + ("gamma_up", "gamma_down"),
}
_ENTRY_UNITS = tuple(
    np.array(unit, dtype=complex)
    for unit in ([[1, 0], [0, 0]], [[0, 1], [0, 0]], [[0, 0], [1, 0]], [[0, 0], [0, 1]])
)


@dataclass(frozen=True)
class ParamPack:
    """
    A nested family of physical models over an unconstrained parameter vector.

    Bounded quantities are squashed: eta through the logistic function and rates
    through softplus, so every raw vector materializes a valid model.
    """

    variant: PackVariant

    def __post_init__(self):
        object.__setattr__(self, "variant", PackVariant(self.variant))

    @property
    def names(self) -> Tuple[str, ...]:
        return RAW_NAMES[self.variant]

    @property
    def size(self) -> int:
        return len(self.names)

    def materialize(self, raw: Any) -> PhysicalModel:
        """Physical model of a raw vector (plain or ``Dual``)."""
        if primal(raw).shape != (self.size,):
            raise ValueError(f"{self.variant.value} pack needs {self.size} parameters")
        if self.variant is PackVariant.CONSTRAINED:
            return PhysicalModel(
                h_r=0.5 * raw[0] * SIGMA_X,
                lindblad=sqrt(0.5 * softplus(raw[1])) * SIGMA_Z,
                eta=logistic(raw[2]),
            )
        h_r = raw[0] * SIGMA_X + raw[1] * SIGMA_Y + raw[2] * SIGMA_Z
        lindblad = sum(
            (raw[3 + 2 * k] + 1j * raw[4 + 2 * k]) * unit for k, unit in enumerate(_ENTRY_UNITS)
        )
        extra: Dict[str, Any] = {}
        if self.variant is PackVariant.EXTENDED:
            extra = {"gamma_up": softplus(raw[12]), "gamma_down": softplus(raw[13])}
        return PhysicalModel(h_r=h_r, lindblad=lindblad, eta=logistic(raw[11]), **extra)

    def encode(self, m: PhysicalModel) -> np.ndarray:
        """Raw vector of a plain model; inverse of ``materialize`` on its image."""
        eta = logit(np.clip(m.eta, *ETA_RANGE))
        if self.variant is PackVariant.CONSTRAINED:
            omega = float(np.real(trace(SIGMA_X @ m.h_r)))
            gamma = 2.0 * abs(m.lindblad[0, 0]) ** 2
            return np.array([omega, softplus_inverse(max(gamma, 1e-12)), eta])
        h = [float(np.real(trace(p @ m.h_r))) / 2.0 for p in (SIGMA_X, SIGMA_Y, SIGMA_Z)]
        entries = np.asarray(m.lindblad).reshape(-1)
        raw = h + [v for entry in entries for v in (entry.real, entry.imag)] + [float(eta)]
        if self.variant is PackVariant.EXTENDED:
            raw += [
                float(softplus_inverse(max(m.gamma_up, 1e-6))),
                float(softplus_inverse(max(m.gamma_down, 1e-6))),
            ]
        return np.array(raw, dtype=float)

    def physical(self, raw: np.ndarray) -> Dict[str, float]:
        """
        Named physical values. Operator packs also report the derived
        ``omega_r`` (twice the sigma_x coefficient of H_R) and ``gamma_d``
        (from the sigma_z component of L).
        """
        raw = np.asarray(raw, dtype=float)
        m = self.materialize(raw)
        if self.variant is PackVariant.CONSTRAINED:
            return {
                "omega_r": float(raw[0]),
                "gamma_d": float(softplus(raw[1])),
                "eta": float(m.eta),
            }
        values = {name: float(v) for name, v in zip(self.names, raw)}
        values["eta"] = float(m.eta)
        l_z = 0.5 * (m.lindblad[0, 0] - m.lindblad[1, 1])
        values["omega_r"] = 2.0 * float(raw[0])
        values["gamma_d"] = 2.0 * float(abs(l_z) ** 2)
        if self.variant is PackVariant.EXTENDED:
            values["gamma_up"] = float(m.gamma_up)
            values["gamma_down"] = float(m.gamma_down)
        return values

    def initial(
        self,
        section: ModelSection,
        rng: np.random.Generator,
        guess: Optional[Mapping[str, float]] = None,
    ) -> np.ndarray:
        """
        Random starting point: physical guesses scattered log-uniformly within
        x/÷ ``init_spread``; operator entries beyond the constrained structure
        get Gaussian perturbations.

        The centre is ``guess`` (usually ``me_initial_guess``) with any values
        from ``section.init`` taking precedence.
        """
        spread = np.log(section.init_spread)
        centre = {**FALLBACK_GUESS, **(guess or {}), **(section.init or {})}

        def scatter(value: float) -> float:
            return float(value * np.exp(rng.uniform(-spread, spread)))

        omega = scatter(centre["omega_r"])
        gamma = scatter(centre["gamma_d"])
        eta = float(np.clip(scatter(centre["eta"]), *ETA_RANGE))
        base = PhysicalModel.constrained(omega, gamma, eta)
        if self.variant is PackVariant.CONSTRAINED:
            return self.encode(base)
        if self.variant is PackVariant.EXTENDED:
            base = replace(
                base,
                gamma_up=scatter(centre.get("gamma_up", 0.01)),
                gamma_down=scatter(centre.get("gamma_down", 0.01)),
            )
        raw = self.encode(base)
        # every operator entry except h_x and the real diagonal of L
        free = [1, 2, 4, 5, 6, 7, 8, 10]
        raw[free] += rng.normal(0.0, section.op_perturbation, size=len(free))
        return raw


class SpamSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    preps: List[Tuple[float, float, float]]
    visibility: Tuple[float, float, float] = (1.0, 1.0, 1.0)


@dataclass(frozen=True, eq=False)
class SpamModel:
    """Prepared Bloch vectors (6, 3) and per-axis readout visibilities (3,)."""

    preps: np.ndarray
    visibility: np.ndarray

    def __post_init__(self):
        preps = np.asarray(self.preps, dtype=float)
        visibility = np.asarray(self.visibility, dtype=float)
        if preps.shape != (6, 3) or visibility.shape != (3,):
            raise ValueError("SPAM model needs six preparations and three visibilities")
        if np.any(np.linalg.norm(preps, axis=-1) > 1.0 + POSITIVITY_TOL):
            raise ValueError("prepared state outside the Bloch ball")
        if np.any((visibility < 0) | (visibility > 1)):
            raise ValueError(f"readout visibilities must lie in [0, 1], got {visibility}")
        object.__setattr__(self, "preps", preps)
        object.__setattr__(self, "visibility", visibility)

    @classmethod
    def ideal(cls) -> "SpamModel":
        return cls(PREP_STATES.copy(), np.ones(3))

    def to_spec(self) -> SpamSpec:
        return SpamSpec(
            preps=[tuple(float(v) for v in row) for row in self.preps],
            visibility=tuple(float(v) for v in self.visibility),
        )

    @classmethod
    def from_spec(cls, spec: SpamSpec) -> "SpamModel":
        return cls(np.array(spec.preps), np.array(spec.visibility))


def fit_spam(t0_subset: Dataset, fit_readout: bool = False) -> SpamModel:
    """
    Tomography of the six preparations from shots read out right after preparation.

    Each Bloch component is the mean outcome of its (prep, axis) cell; vectors
    are clipped into the unit ball. With ``fit_readout`` the preparations are
    projected to pure states and one visibility per axis is fitted by maximum
    likelihood.

    Raises:
        MissingCell: If any of the 18 cells has no T=0 shot.
    """
    sums = np.zeros((6, 3))
    counts = np.zeros((6, 3), dtype=np.int64)
    for shot in t0_subset:
        if shot.n_steps == 0:
            sums[shot.prep, shot.axis] += shot.outcome
            counts[shot.prep, shot.axis] += 1
    missing = [(int(p), int(a)) for p, a in zip(*np.nonzero(counts == 0))]
    if missing:
        raise MissingCell(missing)
    means = sums / counts
    norms = np.linalg.norm(means, axis=-1, keepdims=True)
    preps = np.where(norms > 1.0, means / np.maximum(norms, 1e-300), means)
    if not fit_readout:
        return SpamModel(preps, np.ones(3))

    pure = np.where(norms > 0, means / np.maximum(norms, 1e-300), means)
    visibility = np.ones(3)
    for axis in range(3):
        n_plus = (counts[:, axis] + sums[:, axis]) / 2.0
        n_minus = counts[:, axis] - n_plus
        component = pure[:, axis]

        def nll(f: float) -> float:
            pi = np.clip(0.5 * (1.0 + f * component), 1e-6, 1.0 - 1e-6)
            return float(-(n_plus * np.log(pi) + n_minus * np.log(1.0 - pi)).sum())

        result = minimize_scalar(nll, bounds=(0.0, 1.0), method="bounded")
        visibility[axis] = float(np.clip(result.x, 0.0, 1.0))
    logger.info(f"Fitted readout visibilities {np.round(visibility, 4).tolist()}")
    return SpamModel(pure, visibility)


def _spam_or_ideal(data: Dataset) -> SpamModel:
    try:
        return fit_spam(data)
    except MissingCell as e:
        logger.warning(f"Using ideal preparations: {e}")
        return SpamModel.ideal()


def me_initial_guess(data: Dataset, spam: SpamModel) -> Dict[str, float]:
    """
    Rough omega_r, gamma_d and eta from ensemble statistics of ``data``.

    The rates come from a least-squares master-equation fit of the mean
    outcome of every (preparation, axis, duration) cell. Since the ensemble
    state follows the master equation, the mean I increment at each step is
    sqrt(eta gamma_d) z_ME dt; eta is the squared slope of a regression through
    the origin on sqrt(gamma_d) z_ME dt. Entries the data cannot constrain keep
    their ``FALLBACK_GUESS`` values.
    """
    guess = dict(FALLBACK_GUESS)
    cells: Dict[Tuple[int, int, int], List[int]] = {}
    for shot in data:
        cells.setdefault((shot.prep, shot.axis, shot.n_steps), []).append(shot.outcome)
    if not any(key[2] for key in cells):
        logger.warning(f"No shots with a weak record, starting from {guess}")
        return guess
    keys = sorted(cells)
    prep, axis, steps = (np.array(column) for column in zip(*keys))
    means = np.array([np.mean(cells[key]) for key in keys])
    weights = np.sqrt([len(cells[key]) for key in keys])
    length = int(steps.max()) + 1
    dt = data.meta.dt

    def residuals(series: np.ndarray) -> np.ndarray:
        return (spam.visibility[axis] * series[steps, prep, axis] - means) * weights

    fit = fit_me_rates(residuals, spam.preps, dt, length)
    omega, gamma = float(fit.x[0]), max(float(fit.x[1]), 1e-3)
    guess.update(omega_r=omega, gamma_d=gamma)

    z = constrained_me_series(omega, gamma, spam.preps, dt, length)[..., 2]
    sxy = sxx = 0.0
    for shot in data:
        if shot.n_steps:
            x = np.sqrt(gamma) * z[: shot.n_steps, shot.prep] * dt
            sxy += float(x @ shot.record.dm_i)
            sxx += float(x @ x)
    slope = sxy / sxx if sxx > 0 else 0.0
    if slope > 0:
        guess["eta"] = float(np.clip(slope * slope, *ETA_RANGE))
    else:
        logger.warning(
            f"Record carries no measurable signal (slope {slope:.3g}), keeping eta={guess['eta']}"
        )
    logger.info(f"Master-equation starting guess {guess}")
    return guess


def propagate(
    m: PhysicalModel,
    r0: Any,
    dm: np.ndarray,
    dt: float,
    stepper: str = "milstein",
    keep_series: bool = True,
    diagnostics: Optional[IntegratorDiagnostics] = None,
) -> Any:
    """
    Filter a batch of records through the SME.

    The Wiener increments are recovered from the record at each step,
    dW_q = dM_q - sqrt(eta/2) Tr[rho (c_q + c_q^dag)] dt, and fed to the stepper.

    Returns:
        Bloch series (B, N+1, 3) or, without ``keep_series``, final states (B, 3).
    """
    step = get_stepper(stepper)
    rho = rho_from_bloch(r0, check=False)
    series = [r0]
    for t in range(dm.shape[1]):
        dw_i, dw_q = invert_record(rho, dm[:, t, 0], dm[:, t, 1], m, dt)
        rho = step(rho, dw_i, dw_q, m, dt, diagnostics)
        if keep_series:
            series.append(bloch_from_rho(rho))
    if keep_series:
        return stack(series, axis=1)
    return bloch_from_rho(rho) if dm.shape[1] else r0


def infer_batch(
    m: PhysicalModel, spam: SpamModel, batch: Batch, stepper: str = "milstein"
) -> np.ndarray:
    """Bloch series (B, N+1, 3) of a uniform-length batch."""
    return propagate(m, spam.preps[batch.prep], batch.dm, batch.dt, stepper)


def infer_trajectory(
    m: PhysicalModel,
    spam: SpamModel,
    shot: TrajectoryRecord,
    dt: Optional[float] = None,
    stepper: str = "milstein",
) -> np.ndarray:
    """
    Bloch series (N+1, 3) of one shot, starting from its prepared state.

    Raises:
        ValueError: If ``dt`` is given and differs from the record step.
        DegenerateState: Propagated from the stepper.
    """
    if dt is not None and abs(shot.record.dt - dt) > 1e-12 * max(1.0, dt):
        raise ValueError(f"record step {shot.record.dt} does not match {dt}")
    return infer_batch(m, spam, make_batch([shot]), stepper)[0]


def predict_outcome_prob(series: np.ndarray, axis: Any, spam: SpamModel) -> Any:
    """Pi = (1 + f_axis r_T[axis]) / 2 from the last state of each series."""
    series = np.asarray(series, dtype=float)
    if series.shape[-2] == 0:
        raise ValueError("cannot predict from an empty series")
    r_final = series[..., -1, :]
    if r_final.ndim == 1:
        return float(outcome_probability(r_final[None], np.array([axis]), spam.visibility)[0])
    return outcome_probability(r_final, np.asarray(axis), spam.visibility)


def me_baseline(m: PhysicalModel, spam: SpamModel, batch: Batch) -> np.ndarray:
    """Outcome probabilities predicted by the master equation, ignoring the records."""
    r_final = solve_master_equation(spam.preps[batch.prep], m, batch.dt, batch.n_steps)[..., -1, :]
    return outcome_probability(r_final, batch.axis, spam.visibility)


def dataset_blocks(data: Dataset, block_size: int = BLOCK_SIZE) -> List[Batch]:
    """Fixed evaluation blocks: uniform length, index order, independent of workers."""
    blocks = []
    for shots in data.by_length().values():
        for start in range(0, len(shots), block_size):
            blocks.append(make_batch(shots[start : start + block_size]))
    return blocks


def _drop_degenerate(fn: Callable[[Batch], Any], block: Batch) -> Tuple[Any, Batch, int]:
    """Run ``fn`` on ``block``, removing shots that raise DegenerateState."""
    skipped = 0
    while block.size:
        try:
            return fn(block), block, skipped
        except DegenerateState as e:
            keep = np.setdiff1d(np.arange(block.size), e.indices)
            if keep.size == block.size:
                raise
            logger.warning(f"Skipping {block.size - keep.size} degenerate shot(s): {e}")
            skipped += block.size - keep.size
            block = block.take(keep)
    return None, block, skipped


@dataclass(frozen=True, eq=False)
class _PredictTask:
    model: PhysicalModel
    spam: SpamModel
    block: Batch
    stepper: str
    baseline: bool


def _predict_block(task: _PredictTask) -> Tuple[np.ndarray, np.ndarray, np.ndarray, int, int]:
    diagnostics = IntegratorDiagnostics()

    def run(block: Batch) -> np.ndarray:
        if task.baseline:
            return me_baseline(task.model, task.spam, block)
        diagnostics.reset()
        r_final = propagate(
            task.model,
            task.spam.preps[block.prep],
            block.dm,
            block.dt,
            task.stepper,
            False,
            diagnostics,
        )
        return outcome_probability(r_final, block.axis, task.spam.visibility)

    pi, block, skipped = _drop_degenerate(run, task.block)
    if pi is None:
        pi = np.zeros(0)
    return block.indices, np.asarray(pi, dtype=float), block.outcome, skipped, diagnostics.clipped


def dataset_predictions(
    m: PhysicalModel,
    spam: SpamModel,
    data: Dataset,
    stepper: str = "milstein",
    baseline: bool = False,
    workers: int = 1,
    pool: Optional[Executor] = None,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    (shot indices, Pi, Y) for every non-degenerate shot in evaluation-block order.

    ``baseline`` swaps the SME filter for the master-equation prediction.
    """
    tasks = [_PredictTask(m, spam, block, stepper, baseline) for block in dataset_blocks(data)]
    results = map_ordered(_predict_block, tasks, workers, pool=pool)
    if not results:
        return np.zeros(0, dtype=np.int64), np.zeros(0), np.zeros(0, dtype=np.int64)
    skipped = sum(r[3] for r in results)
    if skipped:
        logger.warning(f"{skipped} shot(s) skipped during evaluation")
    clipped = sum(r[4] for r in results)
    if clipped:
        logger.warning(f"{clipped} state(s) clipped onto the Bloch ball during evaluation")
    return (
        np.concatenate([r[0] for r in results]),
        np.concatenate([r[1] for r in results]),
        np.concatenate([r[2] for r in results]),
    )


def evaluate_ce(
    m: PhysicalModel,
    data: Dataset,
    spam: SpamModel,
    stepper: str = "milstein",
    baseline: bool = False,
    workers: int = 1,
    pool: Optional[Executor] = None,
) -> float:
    """Cross entropy of a physical model (or its ME baseline) on a dataset."""
    _, pi, y = dataset_predictions(m, spam, data, stepper, baseline, workers, pool)
    if pi.size == 0:
        raise ValueError("no shots to evaluate")
    return float(ce_loss(pi, y))


def me_baseline_ce(m: PhysicalModel, data: Dataset, spam: SpamModel, workers: int = 1) -> float:
    return evaluate_ce(m, data, spam, baseline=True, workers=workers)


def _series_block(task: _PredictTask) -> Tuple[np.ndarray, np.ndarray]:
    series, block, _ = _drop_degenerate(
        lambda b: infer_batch(task.model, task.spam, b, task.stepper), task.block
    )
    return block.indices, series if series is not None else np.zeros((0, 1, 3))


def sde_trajectories(
    m: PhysicalModel,
    spam: SpamModel,
    data: Dataset,
    stepper: str = "milstein",
    workers: int = 1,
) -> Dict[int, np.ndarray]:
    """Filtered Bloch series (N+1, 3) of every non-degenerate shot, keyed by index."""
    tasks = [_PredictTask(m, spam, block, stepper, False) for block in dataset_blocks(data)]
    out: Dict[int, np.ndarray] = {}
    for indices, series in map_ordered(_series_block, tasks, workers):
        for row, index in enumerate(indices):
            out[int(index)] = series[row]
    return out


# ---------- training ----------
@dataclass(frozen=True, eq=False)
class _GradTask:
    variant: PackVariant
    theta: np.ndarray
    spam: SpamModel
    block: Batch
    stepper: str
    objective: str


def _objective_sum(
    task: _GradTask, block: Batch, raw: Any, diagnostics: Optional[IntegratorDiagnostics] = None
) -> Any:
    m = ParamPack(task.variant).materialize(raw)
    r0 = task.spam.preps[block.prep]
    if task.objective == "mse":
        series = propagate(m, r0, block.dm, block.dt, task.stepper, True, diagnostics)
        diff = series - block.truth
        return (diff * diff).sum()
    r_final = propagate(m, r0, block.dm, block.dt, task.stepper, False, diagnostics)
    pi = outcome_probability(r_final, block.axis, task.spam.visibility)
    return ce_terms(pi, block.outcome).sum()


def _grad_block(task: _GradTask) -> Tuple[float, np.ndarray, int, int, int]:
    """(objective sum, gradient sum, averaging count, skipped shots, clipped states) of one block."""
    diagnostics = IntegratorDiagnostics()

    def run(block: Batch) -> Tuple[float, np.ndarray]:
        diagnostics.reset()
        return gradient(lambda raw: _objective_sum(task, block, raw, diagnostics), task.theta)

    out, block, skipped = _drop_degenerate(run, task.block)
    if out is None:
        return 0.0, np.zeros_like(task.theta), 0, skipped, 0
    value, grad = out
    count = block.size * (block.n_steps + 1) if task.objective == "mse" else block.size
    return value, grad, count, skipped, diagnostics.clipped


def _add_parts(a: Tuple, b: Tuple) -> Tuple:
    return tuple(x + y for x, y in zip(a, b))


def _batch_objective(
    variant: PackVariant,
    theta: np.ndarray,
    spam: SpamModel,
    batch: Batch,
    stepper: str,
    objective: str,
    pool: Optional[Executor] = None,
    block_size: int = BLOCK_SIZE,
) -> Tuple[float, np.ndarray, int, int, int]:
    """Mean objective and gradient over a mini-batch, with skipped and clipped counts."""
    tasks = [
        _GradTask(variant, theta, spam, block, stepper, objective)
        for block in batch.blocks(block_size)
    ]
    value, grad, count, skipped, clipped = tree_sum(
        map_ordered(_grad_block, tasks, pool=pool), _add_parts
    )
    if count == 0:
        return 0.0, np.zeros_like(theta), 0, skipped, clipped
    return value / count, grad / count, count, skipped, clipped


def _mse_value(
    variant: PackVariant,
    theta: np.ndarray,
    spam: SpamModel,
    batches: List[Batch],
    stepper: str,
) -> float:
    m = ParamPack(variant).materialize(theta)
    total, count = [], 0
    for batch in batches:
        for block in batch.blocks(BLOCK_SIZE):

            def run(b: Batch) -> float:
                series = propagate(m, spam.preps[b.prep], b.dm, b.dt, stepper, True)
                return float(((series - b.truth) ** 2).sum())

            value, block, _ = _drop_degenerate(run, block)
            if value is not None:
                total.append(value)
                count += block.size * (block.n_steps + 1)
    return tree_sum(total) / count if count else float("nan")


class MemberResult(BaseModel):
    model_config = ConfigDict(extra="forbid")

    member: int
    params: Dict[str, float]
    raw: List[float]
    initial_val: float
    best_val: float
    best_epoch: int
    epochs_run: int
    train_curve: List[float]
    val_curve: List[float]
    skipped_shots: int
    clipped_states: int = 0


class TrainReport(BaseModel):
    """
    Outcome of a training run. ``val_curve`` holds one validation value per
    epoch actually run; ``initial_val`` is the value before the first update.
    ``clipped_states`` counts states pulled back onto the Bloch ball while
    computing gradients. The wall clock is kept out of the serialized form.
    """

    model_config = ConfigDict(extra="forbid")

    format_version: str = REPORT_VERSION
    kind: str = "sde"
    objective: str = "ce"
    variant: Optional[str] = None
    seed: int
    epochs: int
    train_curve: List[float]
    val_curve: List[float]
    train_loss: List[float] = Field(default_factory=list)
    initial_val: float
    best_val: float
    best_epoch: int
    loss_weights: Optional[Dict[str, float]] = None
    params: Dict[str, float] = Field(default_factory=dict)
    raw: List[float] = Field(default_factory=list)
    n_params: int = 0
    spam: Optional[SpamSpec] = None
    start_guess: Dict[str, float] = Field(default_factory=dict)
    members: List[MemberResult] = Field(default_factory=list)
    spread: Dict[str, Tuple[float, float]] = Field(default_factory=dict)
    skipped_shots: int = 0
    clipped_states: int = 0
    final_mse: Optional[float] = None
    wall_clock: float = Field(0.0, exclude=True)

    def physical_model(self) -> PhysicalModel:
        if self.variant is None:
            raise ValueError(f"{self.kind} report carries no physical model")
        return ParamPack(PackVariant(self.variant)).materialize(np.array(self.raw))

    def spam_model(self) -> SpamModel:
        return SpamModel.ideal() if self.spam is None else SpamModel.from_spec(self.spam)


@dataclass(frozen=True, eq=False)
class _MemberTask:
    member: int
    variant: PackVariant
    start: np.ndarray
    spam: SpamModel
    train: Dataset
    validation: Dataset
    cfg: TrainConfig
    objective: str
    targets: Optional[Dict[int, np.ndarray]]
    workers: int


def _with_targets(batch: Batch, targets: Optional[Dict[int, np.ndarray]]) -> Batch:
    if targets is None:
        return batch
    return replace(batch, truth=np.stack([targets[int(i)] for i in batch.indices]))


def _validation_value(
    task: _MemberTask, theta: np.ndarray, val_batches: List[Batch], pool: Optional[Executor]
) -> float:
    if task.objective == "mse":
        return _mse_value(task.variant, theta, task.spam, val_batches, task.cfg.stepper)
    m = ParamPack(task.variant).materialize(theta)
    return evaluate_ce(m, task.validation, task.spam, task.cfg.stepper, pool=pool)


def _train_member(task: _MemberTask) -> MemberResult:
    # one pool serves every mini-batch and validation pass of the member
    with worker_pool(task.workers) as pool:
        return _fit_member(task, pool)


def _fit_member(task: _MemberTask, pool: Optional[Executor]) -> MemberResult:
    cfg = task.cfg
    pack = ParamPack(task.variant)
    rng = stream(cfg.seed ^ MEMBER_SALT, task.member)
    theta = task.start.copy()
    adam = AdamState.zeros(theta.size, lr=cfg.lr)
    val_batches = [
        _with_targets(b, task.targets) for b in dataset_blocks(task.validation, cfg.batch_size)
    ]
    initial = _validation_value(task, theta, val_batches, pool)
    best_val, best_theta, best_epoch = initial, theta.copy(), 0
    train_curve: List[float] = []
    val_curve: List[float] = []
    skipped = clipped = 0
    stale = 0
    for epoch in range(1, cfg.epochs + 1):
        losses, counts = [], []
        for batch in task.train.batches(cfg.batch_size, rng):
            batch = _with_targets(batch, task.targets)
            value, grad, count, lost, pulled = _batch_objective(
                task.variant,
                theta,
                task.spam,
                batch,
                cfg.stepper,
                task.objective,
                pool,
                cfg.block_size,
            )
            skipped += lost
            clipped += pulled
            if count == 0:
                continue
            if not np.all(np.isfinite(grad)):
                logger.warning(f"Member {task.member}: non-finite gradient in epoch {epoch}, batch skipped")
                continue
            losses.append(value * count)
            counts.append(count)
            adam, theta = adam_step(adam, theta, grad)
        train_curve.append(float(tree_sum(losses) / sum(counts)) if counts else float("nan"))
        val = _validation_value(task, theta, val_batches, pool)
        val_curve.append(val)
        logger.info(
            f"Member {task.member} epoch {epoch}: train {train_curve[-1]:.6f}, validation {val:.6f}"
        )
        if val < best_val:
            best_val, best_theta, best_epoch = val, theta.copy(), epoch
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                logger.info(f"Member {task.member}: early stop after epoch {epoch}, best epoch {best_epoch}")
                break
    if clipped:
        logger.warning(
            f"Member {task.member}: {clipped} state(s) clipped onto the Bloch ball during training"
        )
    return MemberResult(
        member=task.member,
        params=pack.physical(best_theta),
        raw=[float(v) for v in best_theta],
        initial_val=initial,
        best_val=best_val,
        best_epoch=best_epoch,
        epochs_run=len(val_curve),
        train_curve=train_curve,
        val_curve=val_curve,
        skipped_shots=skipped,
        clipped_states=clipped,
    )


def _run_members(
    variant: PackVariant,
    starts: List[np.ndarray],
    spam: SpamModel,
    data: Dataset,
    cfg: TrainConfig,
    objective: str,
    targets: Optional[Dict[int, np.ndarray]],
    workers: int,
) -> List[MemberResult]:
    train, validation = data.subset("train"), data.subset("validation")
    if len(train) == 0 or len(validation) == 0:
        raise ValueError("training needs non-empty train and validation splits")
    # parallelize across members, or across blocks when there is a single member
    inner = workers if len(starts) == 1 else 1
    tasks = [
        _MemberTask(k, variant, start, spam, train, validation, cfg, objective, targets, inner)
        for k, start in enumerate(starts)
    ]
    return map_ordered(_train_member, tasks, workers if len(starts) > 1 else 1)


def _assemble(
    variant: PackVariant,
    members: List[MemberResult],
    spam: SpamModel,
    cfg: TrainConfig,
    objective: str,
    started: float,
    guess: Dict[str, float],
) -> TrainReport:
    best = min(members, key=lambda r: (r.best_val, r.member))
    names = sorted(best.params)
    spread = {
        name: (
            float(np.mean([r.params[name] for r in members])),
            float(np.std([r.params[name] for r in members])),
        )
        for name in names
    }
    return TrainReport(
        kind="sde",
        objective=objective,
        variant=variant.value,
        seed=cfg.seed,
        epochs=best.epochs_run,
        train_curve=best.train_curve,
        val_curve=best.val_curve,
        initial_val=best.initial_val,
        best_val=best.best_val,
        best_epoch=best.best_epoch,
        params=best.params,
        raw=best.raw,
        n_params=ParamPack(variant).size,
        spam=spam.to_spec(),
        start_guess=guess,
        members=members,
        spread=spread,
        skipped_shots=sum(r.skipped_shots for r in members),
        clipped_states=sum(r.clipped_states for r in members),
        final_mse=best.best_val if objective == "mse" else None,
        wall_clock=time.perf_counter() - started,
    )


def _start_guess(section: ModelSection, train: Dataset, spam: SpamModel) -> Dict[str, float]:
    """Ensemble centre: the master-equation fit of the train split, overridden by ``section.init``."""
    override = section.init or {}
    if set(FALLBACK_GUESS) <= set(override):
        return {**FALLBACK_GUESS, **override}
    return {**me_initial_guess(train, spam), **override}


def _starts(
    variant: PackVariant, section: ModelSection, cfg: TrainConfig, guess: Dict[str, float]
) -> List[np.ndarray]:
    pack = ParamPack(variant)
    return [pack.initial(section, stream(cfg.seed, k), guess) for k in range(cfg.ensemble_size)]


def train_sde(
    data: Dataset,
    pack: ModelSection,
    cfg: TrainConfig,
    spam: Optional[SpamModel] = None,
    workers: int = 1,
) -> TrainReport:
    """
    Fit an ensemble of SDE models by mini-batch Adam on the outcome cross entropy.

    Members start from seeded random points scattered around a master-equation
    fit of the train split (``pack.init`` overrides it). Each trains on the train
    split with early stopping on validation cross entropy and restores its
    best parameters (the starting point included). The member with the lowest
    validation cross entropy is reported. Shots whose update degenerates are
    dropped and counted.

    Args:
        data: Dataset with train and validation splits and a uniform dt.
        pack: Model section naming the variant and optional starting guesses.
        cfg: Optimizer, batching, early-stopping and ensemble settings.
        spam: Preparation/readout model; fitted from T=0 shots when omitted.
        workers: Pool size; results do not depend on it.
    """
    started = time.perf_counter()
    variant = PackVariant(pack.variant)
    if spam is None:
        spam = _spam_or_ideal(data.subset("train"))
    logger.info(
        f"Training {cfg.ensemble_size} {variant.value} member(s) on {len(data)} shots (dt={data.meta.dt})"
    )
    guess = _start_guess(pack, data.subset("train"), spam)
    members = _run_members(
        variant, _starts(variant, pack, cfg, guess), spam, data, cfg, "ce", None, workers
    )
    report = _assemble(variant, members, spam, cfg, "ce", started, guess)
    if report.clipped_states:
        logger.warning(f"{report.clipped_states} state(s) clipped onto the Bloch ball over all members")
    logger.info(f"Best validation cross entropy {report.best_val:.6f} with {report.params}")
    return report


def distill(
    data: Dataset,
    rnn_series: Dict[int, np.ndarray],
    pack: ModelSection,
    cfg: TrainConfig,
    spam: Optional[SpamModel] = None,
    workers: int = 1,
) -> TrainReport:
    """
    Fit SDE parameters to trajectories produced by another model.

    Minimizes the mean over shots and times of |r_SDE - r_target|^2, where the
    SDE filters the same weak records. ``rnn_series`` maps shot index to a
    (N+1, 3) series for every shot of ``data``.
    """
    started = time.perf_counter()
    variant = PackVariant(pack.variant)
    missing = [s.index for s in data if s.index not in rnn_series]
    if missing:
        raise ValueError(f"no target series for {len(missing)} shot(s), first {missing[0]}")
    if spam is None:
        spam = _spam_or_ideal(data.subset("train"))
    guess = _start_guess(pack, data.subset("train"), spam)
    members = _run_members(
        variant, _starts(variant, pack, cfg, guess), spam, data, cfg, "mse", rnn_series, workers
    )
    report = _assemble(variant, members, spam, cfg, "mse", started, guess)
    logger.info(f"Distilled {report.params} with trajectory MSE {report.final_mse:.3e}")
    return report


class SelectionRow(BaseModel):
    variant: str
    n_params: int
    test_ce: float


class SelectionComparison(BaseModel):
    simpler: str
    richer: str
    delta_ce: float
    statistic: float
    dof: int
    p_value: float


class SelectionReport(BaseModel):
    format_version: str = REPORT_VERSION
    kind: str = "selection"
    n_shots: int
    rows: List[SelectionRow]
    comparisons: List[SelectionComparison]


def model_select(
    reports: Sequence[TrainReport], test: Dataset, stepper: str = "milstein", workers: int = 1
) -> SelectionReport:
    """
    Compare nested models on a test set.

    Consecutive models (ordered by parameter count) are compared by the
    likelihood-ratio statistic 2 N (CE_simpler - CE_richer) with the parameter
    count difference as degrees of freedom. N counts the shots every model
    evaluated; shots any model skips as degenerate are left out of all of them.
    """
    ordered = sorted(reports, key=lambda r: r.n_params)
    predictions = [
        dataset_predictions(r.physical_model(), r.spam_model(), test, stepper, workers=workers)
        for r in ordered
    ]
    common = np.array([], dtype=np.int64)
    if predictions:
        common = predictions[0][0]
        for indices, _, _ in predictions[1:]:
            common = np.intersect1d(common, indices)
    if common.size == 0:
        raise ValueError("no test shot was evaluated by every model")
    if common.size < len(test):
        logger.warning(f"Model selection uses {common.size} of {len(test)} test shots")
    rows = []
    for report, (indices, pi, y) in zip(ordered, predictions):
        keep = np.isin(indices, common)
        ce = float(ce_loss(pi[keep], y[keep]))
        rows.append(SelectionRow(variant=report.variant or report.kind, n_params=report.n_params, test_ce=ce))
    comparisons = []
    for simple, rich in zip(rows, rows[1:]):
        delta = simple.test_ce - rich.test_ce
        statistic = 2.0 * common.size * delta
        dof = rich.n_params - simple.n_params
        p_value = float(chi2.sf(max(statistic, 0.0), dof)) if dof > 0 else 1.0
        comparisons.append(
            SelectionComparison(
                simpler=simple.variant,
                richer=rich.variant,
                delta_ce=delta,
                statistic=statistic,
                dof=dof,
                p_value=p_value,
            )
        )
    return SelectionReport(n_shots=int(common.size), rows=rows, comparisons=comparisons)
