"""
Heterodyne stochastic master equation: drift and diffusion, the Milstein and
positivity-preserving steppers, record synthesis and inversion, the exact
deterministic master equation, trajectory/dataset generation and coarse-graining.

Units: time in us, angular frequencies in rad/us, Lindblad entries in us^-1/2.
"""

import logging
from dataclasses import dataclass, replace
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import expm
from scipy.optimize import OptimizeResult, least_squares

from .autodiff import Dual, primal, sqrt, where
from .dataset import Dataset, DatasetMeta, ModelSpec, TrajectoryRecord, WeakRecord
from .parallel import BLOCK_SIZE, map_ordered
from .qcore import (
    ALGEBRA_TOL,
    IDENTITY,
    PREP_STATES,
    SIGMA_MINUS,
    SIGMA_PLUS,
    SIGMA_X,
    SIGMA_Z,
    bloch_from_rho,
    commutator_term,
    dag,
    dissipator,
    hermitian_part,
    meas_superop,
    meas_superop_dderiv,
    rho_from_bloch,
    trace,
)
from .streams import box_muller, stream

logger = logging.getLogger(__name__)

DEGENERATE_TRACE = 1e-12
CLIP_TOL = 1e-6
AXIS_SALT = 0xA11C0DE5


class DegenerateState(Exception):
    """Raised when an update has (numerically) vanishing trace."""

    def __init__(self, message: str, indices: Optional[np.ndarray] = None):
        super().__init__(message)
        self.indices = np.array([], dtype=np.int64) if indices is None else indices


class CoarseGrainError(ValueError):
    """Raised when a record cannot be coarse grained by the requested factor."""


def _is_dual(x: Any) -> bool:
    return isinstance(x, Dual)


@dataclass(frozen=True, eq=False)
class PhysicalModel:
    """
    Parameters of the stochastic master equation.

    Entries may be plain arrays or ``Dual`` arrays; plain models are validated.
    """

    h_r: Any
    lindblad: Any
    eta: Any
    gamma_up: Any = 0.0
    gamma_down: Any = 0.0

    def __post_init__(self):
        if any(_is_dual(x) for x in (self.h_r, self.lindblad, self.eta, self.gamma_up, self.gamma_down)):
            return
        h_r = np.asarray(self.h_r, dtype=complex)
        lindblad = np.asarray(self.lindblad, dtype=complex)
        if h_r.shape != (2, 2) or lindblad.shape != (2, 2):
            raise ValueError("H_R and L must be 2x2 matrices")
        if np.max(np.abs(h_r - dag(h_r))) > ALGEBRA_TOL:
            raise ValueError("H_R is not Hermitian")
        if not 0.0 <= float(self.eta) <= 1.0:
            raise ValueError(f"quantum efficiency must lie in [0, 1], got {self.eta}")
        if float(self.gamma_up) < 0 or float(self.gamma_down) < 0:
            raise ValueError("relaxation rates must be non-negative")
        object.__setattr__(self, "h_r", h_r)
        object.__setattr__(self, "lindblad", lindblad)
        object.__setattr__(self, "eta", float(self.eta))
        object.__setattr__(self, "gamma_up", float(self.gamma_up))
        object.__setattr__(self, "gamma_down", float(self.gamma_down))

    @classmethod
    def constrained(
        cls,
        omega_r: float,
        gamma_d: float,
        eta: float,
        gamma_up: float = 0.0,
        gamma_down: float = 0.0,
    ) -> "PhysicalModel":
        """H_R = (Omega_R / 2) sigma_x and L = sqrt(Gamma_d / 2) sigma_z."""
        return cls(
            h_r=0.5 * omega_r * SIGMA_X,
            lindblad=np.sqrt(gamma_d / 2.0) * SIGMA_Z,
            eta=eta,
            gamma_up=gamma_up,
            gamma_down=gamma_down,
        )

    @property
    def c_i(self) -> Any:
        return self.lindblad

    @property
    def c_q(self) -> Any:
        return -1j * dag(self.lindblad)

    def with_eta(self, eta: float) -> "PhysicalModel":
        return replace(self, eta=eta)

    def to_spec(self) -> ModelSpec:
        def pairs(a: np.ndarray):
            return [[(float(v.real), float(v.imag)) for v in row] for row in a]

        return ModelSpec(
            h_r=pairs(self.h_r),
            lindblad=pairs(self.lindblad),
            eta=self.eta,
            gamma_up=self.gamma_up,
            gamma_down=self.gamma_down,
        )

    @classmethod
    def from_spec(cls, spec: ModelSpec) -> "PhysicalModel":
        def matrix(rows) -> np.ndarray:
            return np.array([[complex(re, im) for re, im in row] for row in rows])

        return cls(
            h_r=matrix(spec.h_r),
            lindblad=matrix(spec.lindblad),
            eta=spec.eta,
            gamma_up=spec.gamma_up,
            gamma_down=spec.gamma_down,
        )


@dataclass
class IntegratorDiagnostics:
    """
    Steps taken, states pulled back onto the Bloch ball and, per shot, whether
    it was ever pulled back. Only excursions beyond ``CLIP_TOL`` are counted;
    smaller ones are round-off and are rescaled silently.
    """

    steps: int = 0
    clipped: int = 0
    shots: Optional[np.ndarray] = None

    def record(self, violated: Any) -> None:
        violated = np.atleast_1d(np.asarray(violated, dtype=bool))
        self.steps += 1
        self.clipped += int(np.count_nonzero(violated))
        self.shots = violated.copy() if self.shots is None else self.shots | violated

    def reset(self) -> None:
        self.steps, self.clipped, self.shots = 0, 0, None

    @property
    def clip_rate(self) -> float:
        """Fraction of shots clipped at least once."""
        return float(self.shots.mean()) if self.shots is not None and self.shots.size else 0.0

    def merge(self, other: "IntegratorDiagnostics") -> "IntegratorDiagnostics":
        shots = [s for s in (self.shots, other.shots) if s is not None]
        return IntegratorDiagnostics(
            self.steps + other.steps,
            self.clipped + other.clipped,
            np.concatenate(shots) if shots else None,
        )


def _has_rate(rate: Any) -> bool:
    return _is_dual(rate) or float(rate) != 0.0


def drift(rho: Any, m: PhysicalModel) -> Any:
    """A(rho) = -i[H_R, rho] + D[L]rho + gamma_up D[s+]rho + gamma_down D[s-]rho"""
    out = commutator_term(m.h_r, rho) + dissipator(m.lindblad, rho)
    if _has_rate(m.gamma_up):
        out = out + m.gamma_up * dissipator(SIGMA_PLUS, rho)
    if _has_rate(m.gamma_down):
        out = out + m.gamma_down * dissipator(SIGMA_MINUS, rho)
    return out


def diffusion(rho: Any, m: PhysicalModel) -> Tuple[Any, Any]:
    """B_q(rho) = sqrt(eta / 2) H[c_q]rho for the I and Q channels."""
    scale = sqrt(m.eta / 2.0)
    return scale * meas_superop(m.c_i, rho), scale * meas_superop(m.c_q, rho)


def _noise(dw: Any) -> Any:
    if not _is_dual(dw):
        dw = np.asarray(dw)
    return dw[..., None, None]


def _finalize(
    update: Any, diagnostics: Optional[IntegratorDiagnostics] = None
) -> Any:
    """Hermitize, renormalize and pull states back onto the Bloch ball."""
    herm = hermitian_part(update)
    tr = trace(herm).real
    degenerate = primal(tr) <= DEGENERATE_TRACE
    if np.any(degenerate):
        indices = np.flatnonzero(np.atleast_1d(degenerate))
        raise DegenerateState(
            f"state update trace vanished for {indices.size} shot(s)", indices
        )
    rho = herm / tr[..., None, None]
    r = bloch_from_rho(rho)
    norm2 = (r * r).sum(axis=-1)
    over = primal(norm2) > 1.0
    if diagnostics is not None:
        diagnostics.record(primal(norm2) > (1.0 + CLIP_TOL) ** 2)
    if np.any(over):
        logger.debug(f"Clipped {int(np.count_nonzero(over))} state(s) back onto the Bloch sphere")
        scale = sqrt(where(over, norm2, 1.0))
        clipped = rho_from_bloch(r / scale[..., None], check=False)
        rho = where(np.asarray(over)[..., None, None], clipped, rho)
    return rho


def milstein_step(
    rho: Any,
    dw_i: Any,
    dw_q: Any,
    m: PhysicalModel,
    dt: float,
    diagnostics: Optional[IntegratorDiagnostics] = None,
) -> Any:
    """
    One Milstein step of the heterodyne SME.

    rho + A(rho) dt + sum_q B_q dW_q + 1/2 sum_q (D_{B_q} B_q)(dW_q^2 - dt),
    diagonal corrections only. The result is renormalized to unit trace and
    clipped onto the Bloch ball.

    Raises:
        DegenerateState: If the pre-normalization trace is <= 1e-12.
    """
    if not dt > 0:
        raise ValueError(f"time step must be positive, got {dt}")
    scale = sqrt(m.eta / 2.0)
    update = rho + drift(rho, m) * dt
    for c, dw in ((m.c_i, dw_i), (m.c_q, dw_q)):
        dw = _noise(dw)
        b = scale * meas_superop(c, rho)
        bb = scale * meas_superop_dderiv(c, rho, b)
        update = update + b * dw + 0.5 * bb * (dw * dw - dt)
    return _finalize(update, diagnostics)


def positivity_step(
    rho: Any,
    dw_i: Any,
    dw_q: Any,
    m: PhysicalModel,
    dt: float,
    diagnostics: Optional[IntegratorDiagnostics] = None,
) -> Any:
    """
    First-order Kraus-map step driven by the measured increments.

    M = I - (i H_R + 1/2 sum_k L_k^dag L_k) dt + sqrt(eta/2) sum_q c_q dM_q and
    rho' ∝ M rho M^dag + (1 - eta) L rho L^dag dt + sum_gamma gamma s rho s^dag dt.
    Agrees with the SME to first order for Hermitian L.
    """
    if not dt > 0:
        raise ValueError(f"time step must be positive, got {dt}")
    dm_i, dm_q = synth_record(rho, dw_i, dw_q, m, dt)
    scale = sqrt(m.eta / 2.0)
    jumps = [(1.0 - m.eta, m.lindblad)]
    if _has_rate(m.gamma_up):
        jumps.append((m.gamma_up, SIGMA_PLUS))
    if _has_rate(m.gamma_down):
        jumps.append((m.gamma_down, SIGMA_MINUS))
    generator = 1j * m.h_r + 0.5 * (dag(m.lindblad) @ m.lindblad)
    for rate, op in jumps[1:]:
        generator = generator + 0.5 * rate * (dag(op) @ op)
    kraus = (
        IDENTITY
        - generator * dt
        + scale * (m.c_i * _noise(dm_i) + m.c_q * _noise(dm_q))
    )
    update = kraus @ rho @ dag(kraus)
    for rate, op in jumps:
        update = update + rate * dt * (op @ rho @ dag(op))
    return _finalize(update, diagnostics)


Stepper = Callable[..., Any]
STEPPERS: Dict[str, Stepper] = {"milstein": milstein_step, "positivity": positivity_step}


def get_stepper(name: str) -> Stepper:
    try:
        return STEPPERS[name]
    except KeyError as e:
        raise ValueError(f"unknown stepper {name!r}, expected one of {sorted(STEPPERS)}") from e


def _signal(rho: Any, c: Any, m: PhysicalModel, dt: float) -> Any:
    return sqrt(m.eta / 2.0) * trace(rho @ (c + dag(c))).real * dt


def synth_record(
    rho: Any, dw_i: Any, dw_q: Any, m: PhysicalModel, dt: float
) -> Tuple[Any, Any]:
    """dM_q = sqrt(eta/2) Tr[rho (c_q + c_q^dag)] dt + dW_q"""
    return _signal(rho, m.c_i, m, dt) + dw_i, _signal(rho, m.c_q, m, dt) + dw_q


def invert_record(
    rho: Any, dm_i: Any, dm_q: Any, m: PhysicalModel, dt: float
) -> Tuple[Any, Any]:
    """Wiener increments implied by a record under model ``m`` at state ``rho``."""
    return dm_i - _signal(rho, m.c_i, m, dt), dm_q - _signal(rho, m.c_q, m, dt)


def bloch_generator(m: PhysicalModel) -> Tuple[np.ndarray, np.ndarray]:
    """Affine Bloch form r' = A r + b of the deterministic drift."""
    b = bloch_from_rho(drift(0.5 * IDENTITY, m))
    columns = [bloch_from_rho(drift(rho_from_bloch(np.eye(3)[k]), m)) - b for k in range(3)]
    return np.stack(columns, axis=-1), b


def me_propagator(m: PhysicalModel, dt: float) -> Tuple[np.ndarray, np.ndarray]:
    """Exact one-step map r -> G r + g of the master equation over ``dt``."""
    a, b = bloch_generator(m)
    augmented = np.zeros((4, 4))
    augmented[:3, :3] = a
    augmented[:3, 3] = b
    step = expm(augmented * dt)
    return step[:3, :3], step[:3, 3]


def solve_master_equation(
    r0: np.ndarray, m: PhysicalModel, dt: float, n_steps: int
) -> np.ndarray:
    """
    Deterministic master-equation evolution (the SME without stochastic terms).

    Args:
        r0: Initial Bloch vectors, shape (..., 3).
        m: Physical model; eta is ignored.
        dt: Output spacing (us).
        n_steps: Number of steps.

    Returns:
        Bloch series of shape (..., n_steps + 1, 3).
    """
    g, offset = me_propagator(m, dt)
    r = np.asarray(r0, dtype=float)
    series = [r]
    for _ in range(n_steps):
        r = r @ g.T + offset
        series.append(r)
    return np.stack(series, axis=-2)


def constrained_me_series(
    omega_r: float, gamma_d: float, r0: np.ndarray, dt: float, length: int
) -> np.ndarray:
    """Master-equation series (length, P, 3) of the plain model from initial states r0 (P, 3)."""
    g, offset = me_propagator(PhysicalModel.constrained(omega_r, gamma_d, 0.0), dt)
    r = np.asarray(r0, dtype=float)
    out = [r]
    for _ in range(length - 1):
        r = r @ g.T + offset
        out.append(r)
    return np.stack(out)


def fit_me_rates(
    residuals: Callable[[np.ndarray], np.ndarray],
    r0: np.ndarray,
    dt: float,
    length: int,
) -> OptimizeResult:
    """
    Least-squares Omega_R and Gamma_d of the plain master equation.

    ``residuals`` maps a series from ``constrained_me_series`` to weighted
    residuals against the observed means. A log grid over both signs of
    Omega_R picks the starting point.
    """

    def fun(x: np.ndarray) -> np.ndarray:
        return residuals(constrained_me_series(x[0], x[1], r0, dt, length))

    grid = [
        (sign * omega, gamma)
        for sign in (1.0, -1.0)
        for omega in np.geomspace(0.05, 50.0, 48)
        for gamma in np.geomspace(0.01, 20.0, 24)
    ]
    start = min(grid, key=lambda x: float(np.sum(fun(np.array(x)) ** 2)))
    return least_squares(
        fun,
        np.array(start),
        bounds=([-np.inf, 0.0], [np.inf, np.inf]),
        xtol=1e-14,
        ftol=1e-14,
        gtol=1e-14,
    )


def coarse_grain(rec: WeakRecord, k: int) -> WeakRecord:
    """Sum consecutive blocks of ``k`` increments; the step becomes k * dt."""
    if k < 1 or rec.n_steps % k:
        raise CoarseGrainError(f"factor {k} does not divide {rec.n_steps} steps")
    return WeakRecord(
        dm_i=rec.dm_i.reshape(-1, k).sum(axis=1),
        dm_q=rec.dm_q.reshape(-1, k).sum(axis=1),
        dt=rec.dt * k,
    )


def _quantize(values: np.ndarray) -> np.ndarray:
    return values.astype(np.float32).astype(np.float64)


def _quantize_states(r: np.ndarray) -> np.ndarray:
    # f32 rounding may push pure states a hair outside the ball; step them back
    q = r.astype(np.float32)
    over = np.linalg.norm(q.astype(np.float64), axis=-1) > 1.0
    while np.any(over):
        q[over] = np.nextafter(q[over], np.float32(0))
        over = np.linalg.norm(q.astype(np.float64), axis=-1) > 1.0
    return q.astype(np.float64)


def simulate(
    preps: np.ndarray,
    axes: np.ndarray,
    master: int,
    indices: Sequence[int],
    m: PhysicalModel,
    n_fine: int,
    dt_fine: float,
    keep_every: int = 1,
    stepper: str = "milstein",
    diagnostics: Optional[IntegratorDiagnostics] = None,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Integrate a batch of shots of equal length with per-shot noise streams.

    Returns:
        Fine record (B, n_fine, 2), truth sampled every ``keep_every`` steps
        (B, n_fine // keep_every + 1, 3) and outcomes (B,).
    """
    step = get_stepper(stepper)
    gens = [stream(master, int(index)) for index in indices]
    noise = np.stack([box_muller(gen, 2 * n_fine).reshape(2, n_fine) for gen in gens])
    noise *= np.sqrt(dt_fine)
    rho = rho_from_bloch(PREP_STATES[np.asarray(preps)])
    record = np.empty((len(gens), n_fine, 2))
    truth = [bloch_from_rho(rho)]
    for t in range(n_fine):
        dw_i, dw_q = noise[:, 0, t], noise[:, 1, t]
        dm_i, dm_q = synth_record(rho, dw_i, dw_q, m, dt_fine)
        record[:, t, 0] = dm_i
        record[:, t, 1] = dm_q
        rho = step(rho, dw_i, dw_q, m, dt_fine, diagnostics)
        if (t + 1) % keep_every == 0:
            truth.append(bloch_from_rho(rho))
    r_final = bloch_from_rho(rho)
    axes = np.asarray(axes)
    prob = np.clip(0.5 * (1.0 + r_final[np.arange(len(gens)), axes]), 0.0, 1.0)
    u = np.array([gen.random() for gen in gens])
    outcomes = np.where(u < prob, 1, -1)
    return record, np.stack(truth, axis=1), outcomes


def generate_trajectory(
    prep: int,
    m: PhysicalModel,
    duration: float,
    dt_fine: float,
    seed: int,
    axis: int = 2,
    stepper: str = "milstein",
) -> TrajectoryRecord:
    """
    Simulate one shot at the fine step and sample its projective readout.

    The record and the truth series are kept at full fine resolution.
    """
    if not dt_fine > 0:
        raise ValueError(f"integration step must be positive, got {dt_fine}")
    n_fine = int(round(duration / dt_fine))
    if duration < 0 or abs(n_fine * dt_fine - duration) > 1e-9 * max(1.0, duration):
        raise ValueError(f"duration {duration} is not a multiple of {dt_fine}")
    record, truth, outcomes = simulate(
        np.array([prep]), np.array([axis]), seed, [0], m, n_fine, dt_fine, stepper=stepper
    )
    return TrajectoryRecord(
        index=0,
        prep=prep,
        axis=axis,
        outcome=int(outcomes[0]),
        record=WeakRecord(record[0, :, 0], record[0, :, 1], dt_fine),
        truth=truth[0],
    )


@dataclass(frozen=True)
class _Block:
    model: PhysicalModel
    meta: DatasetMeta
    indices: Tuple[int, ...]
    preps: Tuple[int, ...]
    axes: Tuple[int, ...]
    n_fine: int


def plan_shots(meta: DatasetMeta) -> List[Tuple[int, int, int, int]]:
    """
    (index, prep, axis, n_fine) for every shot of a dataset, in index order.

    Each (duration, prep) cell holds 3 * shots_per_setting shots whose axes are
    assigned round-robin and then shuffled with the cell's own stream.
    """
    n = meta.shots_per_setting
    plan = []
    index = 0
    for cell, duration in enumerate(meta.t_grid):
        n_fine = int(round(duration / meta.dt_fine))
        for prep in range(6):
            cell_id = 6 * cell + prep
            axes = np.tile(np.arange(3), n)[stream(meta.seed ^ AXIS_SALT, cell_id).permutation(3 * n)]
            for axis in axes:
                plan.append((index, prep, int(axis), n_fine))
                index += 1
    return plan


def _simulate_block(block: _Block) -> Tuple[List[TrajectoryRecord], IntegratorDiagnostics]:
    meta = block.meta
    k = meta.coarse_factor
    diagnostics = IntegratorDiagnostics()
    record, truth, outcomes = simulate(
        np.array(block.preps),
        np.array(block.axes),
        meta.seed,
        block.indices,
        block.model,
        block.n_fine,
        meta.dt_fine,
        keep_every=k,
        stepper=meta.stepper,
        diagnostics=diagnostics,
    )
    n_coarse = block.n_fine // k
    coarse = _quantize(record.reshape(len(block.indices), n_coarse, k, 2).sum(axis=2))
    truth = _quantize_states(truth)
    shots = [
        TrajectoryRecord(
            index=index,
            prep=prep,
            axis=axis,
            outcome=int(outcomes[row]),
            record=WeakRecord(coarse[row, :, 0], coarse[row, :, 1], meta.dt),
            truth=truth[row],
        )
        for row, (index, prep, axis) in enumerate(zip(block.indices, block.preps, block.axes))
    ]
    return shots, diagnostics


def generate_dataset(meta: DatasetMeta, workers: int = 1) -> Dataset:
    """
    Generate a synthetic dataset following ``meta``.

    Shot streams derive from (meta.seed, shot index), records are coarse grained
    to ``meta.dt`` and stored values are rounded to float32 so that files
    round-trip exactly. Output is identical for any ``workers``.

    Raises:
        ValueError: If ``meta`` carries no generator model.
        DegenerateState: Propagated from the integrator.
    """
    if meta.generator is None:
        raise ValueError("dataset generation needs a generator model")
    model = PhysicalModel.from_spec(meta.generator)
    plan = plan_shots(meta)
    blocks: List[_Block] = []
    start = 0
    while start < len(plan):
        stop = start
        while stop < len(plan) and stop - start < BLOCK_SIZE and plan[stop][3] == plan[start][3]:
            stop += 1
        rows = plan[start:stop]
        blocks.append(
            _Block(
                model=model,
                meta=meta,
                indices=tuple(r[0] for r in rows),
                preps=tuple(r[1] for r in rows),
                axes=tuple(r[2] for r in rows),
                n_fine=rows[0][3],
            )
        )
        start = stop
    logger.info(f"Generating {len(plan)} shots in {len(blocks)} blocks with {workers} worker(s)")
    results = map_ordered(_simulate_block, blocks, workers)
    shots: List[TrajectoryRecord] = []
    diagnostics = IntegratorDiagnostics()
    for block_shots, block_diag in results:
        shots.extend(block_shots)
        diagnostics = diagnostics.merge(block_diag)
    if diagnostics.clipped:
        logger.warning(
            f"Positivity clipping applied {diagnostics.clipped} times over {diagnostics.steps} steps, "
            f"{diagnostics.clip_rate:.3%} of shots affected"
        )
    return Dataset(meta=meta, shots=shots)


def coarse_dataset(data: Dataset, k: int) -> Dataset:
    """
    Coarse grain every record of ``data`` by ``k`` (truth subsampled alike).

    Shots whose length is not a multiple of ``k`` are dropped with a warning.
    """
    if k < 1:
        raise CoarseGrainError(f"coarse-graining factor must be >= 1, got {k}")
    dt = data.meta.dt * k
    kept = [s for s in data.shots if s.n_steps % k == 0]
    if len(kept) < len(data.shots):
        logger.warning(f"Dropped {len(data.shots) - len(kept)} shots not divisible by k={k}")
    shots = [
        TrajectoryRecord(
            index=s.index,
            prep=s.prep,
            axis=s.axis,
            outcome=s.outcome,
            record=coarse_grain(s.record, k),
            truth=None if s.truth is None else s.truth[::k],
        )
        for s in kept
    ]
    grid = [t for t in data.meta.t_grid if abs(t / dt - round(t / dt)) <= 1e-6]
    meta = data.meta.model_copy(update={"dt": dt, "t_grid": grid})
    return Dataset(meta=meta, shots=shots)
