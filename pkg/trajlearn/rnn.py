"""
Gated recurrent network over weak-measurement records.

The preparation is encoded into the initial hidden state, the record is fed
one increment pair at a time and every hidden state is decoded into a raw Bloch
vector and a prediction of the next increment pair. Gradients are computed by
backpropagation through time.
"""

import logging
import time
from concurrent.futures import Executor
from dataclasses import dataclass, fields
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict

from .autodiff import AdamState, adam_step
from .config import LossWeights, TrainConfig
from .dataset import Batch, Dataset, TrajectoryRecord, make_batch
from .losses import (
    PROB_CLIP,
    ce_loss,
    ce_terms,
    outcome_probability,
    posit_loss,
    pred_loss,
    prep_loss,
)
from .parallel import BLOCK_SIZE, map_ordered, tree_sum, worker_pool
from .sdelearn import (
    REPORT_VERSION,
    MissingCell,
    SpamModel,
    TrainReport,
    dataset_blocks,
    fit_spam,
)
from .streams import stream

logger = logging.getLogger(__name__)

GRU_VERSION = "1.0"
INIT_SALT = 0x6B01417
SHUFFLE_SALT = 0x5B0FF1E5
N_PREPS = 6
N_INPUTS = 2
N_OUTPUTS = 5

__all__ = [
    "GruModel",
    "GruSpec",
    "TrainingDiverged",
    "ce_loss",
    "forward",
    "gru_cell",
    "loss_and_grad",
    "posit_loss",
    "pred_loss",
    "prep_loss",
    "rnn_predictions",
    "rnn_trajectories",
    "total_loss",
    "train_rnn",
]


class TrainingDiverged(Exception):
    """Raised when the training loss becomes NaN or infinite."""

    def __init__(self, epoch: int, batch: int, loss: float):
        self.epoch = epoch
        self.batch = batch
        super().__init__(f"loss {loss} in epoch {epoch}, batch {batch}")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


@dataclass(eq=False)
class GruModel:
    """
    Weights of the network. Gate-stacked arrays use the order (reset, update,
    new): ``w_m`` (3, H, 2) and ``w_h`` (3, H, H) act on the input and the
    hidden state, with biases ``b_m`` and ``b_h`` (3, H). The encoder maps the
    preparation one-hot (6) to H, the decoder maps H to 3 Bloch components and
    2 increment predictions.
    """

    w_m: np.ndarray
    b_m: np.ndarray
    w_h: np.ndarray
    b_h: np.ndarray
    enc_w: np.ndarray
    enc_b: np.ndarray
    dec_w: np.ndarray
    dec_b: np.ndarray

    def __post_init__(self):
        hidden = np.asarray(self.b_m).shape[-1]
        expected = self.shapes(hidden)
        for f in fields(self):
            value = np.asarray(getattr(self, f.name), dtype=float)
            if value.shape != expected[f.name]:
                raise ValueError(f"{f.name} has shape {value.shape}, expected {expected[f.name]}")
            if not np.all(np.isfinite(value)):
                raise ValueError(f"{f.name} contains non-finite weights")
            setattr(self, f.name, value)

    @staticmethod
    def shapes(hidden: int) -> Dict[str, Tuple[int, ...]]:
        return {
            "w_m": (3, hidden, N_INPUTS),
            "b_m": (3, hidden),
            "w_h": (3, hidden, hidden),
            "b_h": (3, hidden),
            "enc_w": (hidden, N_PREPS),
            "enc_b": (hidden,),
            "dec_w": (N_OUTPUTS, hidden),
            "dec_b": (N_OUTPUTS,),
        }

    @property
    def hidden(self) -> int:
        return self.b_m.shape[-1]

    @classmethod
    def zeros(cls, hidden: int) -> "GruModel":
        return cls(**{name: np.zeros(shape) for name, shape in cls.shapes(hidden).items()})

    @classmethod
    def init(cls, hidden: int, seed: int) -> "GruModel":
        """Uniform weights in +/- 1/sqrt(H) from a seeded stream."""
        rng = stream(seed ^ INIT_SALT, 0)
        bound = 1.0 / np.sqrt(hidden)
        return cls(
            **{
                name: rng.uniform(-bound, bound, size=shape)
                for name, shape in cls.shapes(hidden).items()
            }
        )

    def flat(self) -> np.ndarray:
        return np.concatenate([getattr(self, f.name).ravel() for f in fields(self)])

    @classmethod
    def from_flat(cls, hidden: int, theta: np.ndarray) -> "GruModel":
        arrays = {}
        offset = 0
        for name, shape in cls.shapes(hidden).items():
            size = int(np.prod(shape))
            arrays[name] = np.asarray(theta[offset : offset + size]).reshape(shape)
            offset += size
        if offset != len(theta):
            raise ValueError(f"expected {offset} weights for H={hidden}, got {len(theta)}")
        return cls(**arrays)

    def to_spec(self) -> "GruSpec":
        return GruSpec(
            hidden=self.hidden,
            weights={f.name: getattr(self, f.name).tolist() for f in fields(self)},
        )

    @classmethod
    def from_spec(cls, spec: "GruSpec") -> "GruModel":
        return cls(**{name: np.array(value) for name, value in spec.weights.items()})


class GruSpec(BaseModel):
    """JSON form of a GruModel."""

    model_config = ConfigDict(extra="forbid")

    format_version: str = GRU_VERSION
    hidden: int
    inputs: int = N_INPUTS
    outputs: int = N_OUTPUTS
    weights: Dict[str, list]


def _pre_gates(model: GruModel, h: np.ndarray, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    gx = np.einsum("bi,ghi->gbh", x, model.w_m) + model.b_m[:, None, :]
    gh = np.einsum("bk,ghk->gbh", h, model.w_h) + model.b_h[:, None, :]
    return gx, gh


def _cell(model: GruModel, h: np.ndarray, x: np.ndarray):
    gx, gh = _pre_gates(model, h, x)
    r = _sigmoid(gx[0] + gh[0])
    z = _sigmoid(gx[1] + gh[1])
    n = np.tanh(gx[2] + r * gh[2])
    return (1.0 - z) * n + z * h, (r, z, n, gh[2])


def gru_cell(h: np.ndarray, x: np.ndarray, model: GruModel) -> np.ndarray:
    """
    One recurrent update, h' = (1 - z) * n + z * h with
    r = sigmoid(W_mr x + b_mr + W_hr h + b_hr),
    z = sigmoid(W_mz x + b_mz + W_hz h + b_hz),
    n = tanh(W_mn x + b_mn + r * (W_hn h + b_hn)).

    ``h`` is (H,) or (B, H) and ``x`` is (2,) or (B, 2).
    """
    h = np.asarray(h, dtype=float)
    x = np.asarray(x, dtype=float)
    single = h.ndim == 1
    out, _ = _cell(model, np.atleast_2d(h), np.atleast_2d(x))
    return out[0] if single else out


def _one_hot(prep: np.ndarray) -> np.ndarray:
    return np.eye(N_PREPS)[np.asarray(prep)]


def _run(model: GruModel, prep: np.ndarray, dm: np.ndarray, dt: float):
    """Forward pass keeping what backpropagation needs."""
    onehot = _one_hot(prep)
    h = np.tanh(onehot @ model.enc_w.T + model.enc_b)
    x = dm / np.sqrt(dt)
    hs = [h]
    caches = []
    for t in range(dm.shape[1]):
        h, cache = _cell(model, h, x[:, t])
        hs.append(h)
        caches.append(cache)
    states = np.stack(hs, axis=1)
    out = states @ model.dec_w.T + model.dec_b
    bloch = out[..., :3]
    predicted = out[:, :-1, 3:] * np.sqrt(dt)
    return bloch, predicted, (onehot, x, states, caches)


def forward(
    model: GruModel, shot: Union[Batch, TrajectoryRecord]
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Raw Bloch series (N+1 states) and next-increment predictions (N pairs).

    The prediction decoded from h_t targets the increment recorded from t to
    t + dt. Accepts one shot or a uniform-length batch.
    """
    batch = make_batch([shot]) if isinstance(shot, TrajectoryRecord) else shot
    bloch, predicted, _ = _run(model, batch.prep, batch.dm, batch.dt)
    if isinstance(shot, TrajectoryRecord):
        return bloch[0], predicted[0]
    return bloch, predicted


@dataclass(frozen=True)
class _Scales:
    """Normalizers of the loss terms over a whole mini-batch."""

    shots: int
    states: int
    increments: int

    @classmethod
    def of(cls, batch: Batch) -> "_Scales":
        return cls(
            shots=batch.size,
            states=batch.size * (batch.n_steps + 1),
            increments=batch.size * batch.n_steps * N_INPUTS,
        )


def _loss_sums(
    model: GruModel, batch: Batch, targets: np.ndarray, weights: LossWeights, scales: _Scales
):
    bloch, predicted, cache = _run(model, batch.prep, batch.dm, batch.dt)
    pi = outcome_probability(bloch[:, -1], batch.axis)
    norm2 = (bloch * bloch).sum(axis=-1)
    r0_err = bloch[:, 0] - targets
    pred_err = predicted - batch.dm
    terms = {
        "ce": float(ce_terms(pi, batch.outcome).sum()) / scales.shots,
        "posit": float(np.maximum(norm2 - 1.0, 0.0).sum()) / scales.states,
        "prep": float((r0_err * r0_err).sum()) / scales.shots,
        "pred": float((pred_err * pred_err).sum()) / scales.increments if scales.increments else 0.0,
    }
    return terms, (bloch, pi, norm2, r0_err, pred_err, cache)


def _total(terms: Dict[str, float], weights: LossWeights) -> float:
    return (
        terms["ce"]
        + weights.w_posit * terms["posit"]
        + weights.w_prep * terms["prep"]
        + weights.w_dm * terms["pred"]
    )


def _backward(
    model: GruModel,
    batch: Batch,
    weights: LossWeights,
    scales: _Scales,
    saved,
) -> GruModel:
    bloch, pi, norm2, r0_err, pred_err, (onehot, x, states, caches) = saved
    n_shots, n_states = bloch.shape[:2]
    n_steps = n_states - 1
    d_out = np.zeros((n_shots, n_states, N_OUTPUTS))

    # cross entropy through the final state; clipped probabilities pass no gradient
    y = batch.outcome.astype(float)
    d_pi = (-(0.5 * (1.0 + y)) / pi + (0.5 * (1.0 - y)) / (1.0 - pi)) / scales.shots
    raw_pi = 0.5 * (1.0 + bloch[np.arange(n_shots), -1, batch.axis])
    live = (raw_pi >= PROB_CLIP) & (raw_pi <= 1.0 - PROB_CLIP)
    d_out[np.arange(n_shots), -1, batch.axis] += np.where(live, 0.5 * d_pi, 0.0)

    d_out[..., :3] += (weights.w_posit / scales.states) * 2.0 * bloch * (norm2 > 1.0)[..., None]
    d_out[:, 0, :3] += (weights.w_prep / scales.shots) * 2.0 * r0_err
    if scales.increments:
        d_out[:, :-1, 3:] += (
            (weights.w_dm / scales.increments) * 2.0 * pred_err * np.sqrt(batch.dt)
        )

    grads = {name: np.zeros(shape) for name, shape in GruModel.shapes(model.hidden).items()}
    grads["dec_w"] = np.einsum("bto,bth->oh", d_out, states)
    grads["dec_b"] = d_out.sum(axis=(0, 1))
    d_states = d_out @ model.dec_w

    dh = d_states[:, -1]
    for t in range(n_steps - 1, -1, -1):
        r, z, n, gh_n = caches[t]
        h_prev = states[:, t]
        dn = dh * (1.0 - z)
        dz = dh * (h_prev - n)
        d_an = dn * (1.0 - n * n)
        d_ar = d_an * gh_n * r * (1.0 - r)
        d_az = dz * z * (1.0 - z)
        d_gx = np.stack([d_ar, d_az, d_an])
        d_gh = np.stack([d_ar, d_az, d_an * r])
        grads["w_m"] += np.einsum("gbh,bi->ghi", d_gx, x[:, t])
        grads["b_m"] += d_gx.sum(axis=1)
        grads["w_h"] += np.einsum("gbh,bk->ghk", d_gh, h_prev)
        grads["b_h"] += d_gh.sum(axis=1)
        dh = dh * z + np.einsum("gbh,ghk->bk", d_gh, model.w_h) + d_states[:, t]

    d_a0 = dh * (1.0 - states[:, 0] ** 2)
    grads["enc_w"] = d_a0.T @ onehot
    grads["enc_b"] = d_a0.sum(axis=0)
    return GruModel(**grads)


def loss_and_grad(
    model: GruModel,
    batch: Batch,
    targets: np.ndarray,
    weights: LossWeights,
    scales: Optional[_Scales] = None,
) -> Tuple[float, GruModel, Dict[str, float]]:
    """
    Physics-inspired loss of a batch and its gradient by backpropagation
    through time.

    Loss = CE + w_posit L_posit + w_prep L_prep + w_dm L_pred, each term
    averaged over the batch (``scales`` lets a block contribute its share of a
    larger batch).
    """
    scales = scales or _Scales.of(batch)
    terms, saved = _loss_sums(model, batch, targets, weights, scales)
    return _total(terms, weights), _backward(model, batch, weights, scales, saved), terms


def total_loss(model: GruModel, batch: Batch, targets: np.ndarray, weights: LossWeights) -> float:
    terms, _ = _loss_sums(model, batch, targets, weights, _Scales.of(batch))
    return _total(terms, weights)


@dataclass(frozen=True, eq=False)
class _GradTask:
    model: GruModel
    block: Batch
    targets: np.ndarray
    weights: LossWeights
    scales: _Scales


def _grad_block(task: _GradTask) -> Tuple[float, np.ndarray, np.ndarray]:
    loss, grads, terms = loss_and_grad(task.model, task.block, task.targets, task.weights, task.scales)
    return loss, grads.flat(), np.array([terms["ce"], terms["posit"], terms["prep"], terms["pred"]])


def _add(a: Tuple, b: Tuple) -> Tuple:
    return tuple(x + y for x, y in zip(a, b))


def _batch_grad(
    model: GruModel,
    batch: Batch,
    spam: SpamModel,
    weights: LossWeights,
    pool: Optional[Executor] = None,
    block_size: int = BLOCK_SIZE,
) -> Tuple[float, np.ndarray, np.ndarray]:
    scales = _Scales.of(batch)
    tasks = [
        _GradTask(model, block, spam.preps[block.prep], weights, scales)
        for block in batch.blocks(block_size)
    ]
    return tree_sum(map_ordered(_grad_block, tasks, pool=pool), _add)


def _predict_block(args: Tuple[GruModel, Batch]) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    model, block = args
    bloch, _ = forward(model, block)
    return block.indices, outcome_probability(bloch[:, -1], block.axis), block.outcome, bloch


def _predict(model: GruModel, data: Dataset, workers: int, pool: Optional[Executor] = None):
    return map_ordered(_predict_block, [(model, b) for b in dataset_blocks(data)], workers, pool=pool)


def rnn_predictions(
    model: GruModel, data: Dataset, workers: int = 1, pool: Optional[Executor] = None
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(shot indices, Pi, Y) for every shot, in evaluation-block order."""
    results = _predict(model, data, workers, pool)
    if not results:
        return np.zeros(0, dtype=np.int64), np.zeros(0), np.zeros(0, dtype=np.int64)
    return tuple(np.concatenate([r[k] for r in results]) for k in range(3))


def rnn_trajectories(model: GruModel, data: Dataset, workers: int = 1) -> Dict[int, np.ndarray]:
    """Raw Bloch series (N+1, 3) of every shot, keyed by shot index."""
    series: Dict[int, np.ndarray] = {}
    for indices, _, _, bloch in _predict(model, data, workers):
        for row, index in enumerate(indices):
            series[int(index)] = bloch[row]
    return series


def rnn_ce(
    model: GruModel, data: Dataset, workers: int = 1, pool: Optional[Executor] = None
) -> float:
    _, pi, y = rnn_predictions(model, data, workers, pool)
    if pi.size == 0:
        raise ValueError("no shots to evaluate")
    return float(ce_loss(pi, y))


def train_rnn(
    data: Dataset,
    weights: LossWeights,
    cfg: TrainConfig,
    spam: Optional[SpamModel] = None,
    workers: int = 1,
) -> Tuple[GruModel, TrainReport]:
    """
    Train the network with Adam on the physics-inspired loss.

    Zero weights reduce the objective to plain cross entropy. Validation cross
    entropy is recorded every epoch; training stops after ``cfg.patience``
    epochs without improvement and the best weights (the initial ones included)
    are returned.

    Raises:
        TrainingDiverged: If a mini-batch loss is not finite.
    """
    started = time.perf_counter()
    train, validation = data.subset("train"), data.subset("validation")
    if len(train) == 0 or len(validation) == 0:
        raise ValueError("training needs non-empty train and validation splits")
    if spam is None:
        try:
            spam = fit_spam(train)
        except MissingCell as e:
            logger.warning(f"Using ideal preparation targets: {e}")
            spam = SpamModel.ideal()
    with worker_pool(workers) as pool:
        model, report = _fit(train, validation, spam, weights, cfg, pool)
    report.wall_clock = time.perf_counter() - started
    return model, report


def _fit(
    train: Dataset,
    validation: Dataset,
    spam: SpamModel,
    weights: LossWeights,
    cfg: TrainConfig,
    pool: Optional[Executor],
) -> Tuple[GruModel, TrainReport]:
    hidden = weights.hidden
    model = GruModel.init(hidden, cfg.seed)
    theta = model.flat()
    adam = AdamState.zeros(theta.size, lr=cfg.lr)
    rng = stream(cfg.seed ^ SHUFFLE_SALT, 0)
    initial = rnn_ce(model, validation, pool=pool)
    best_val, best_theta, best_epoch = initial, theta.copy(), 0
    train_curve: List[float] = []
    loss_curve: List[float] = []
    val_curve: List[float] = []
    stale = 0
    logger.info(f"Training GRU (H={hidden}) on {len(train)} shots, weights {weights.model_dump()}")
    for epoch in range(1, cfg.epochs + 1):
        ce_parts, loss_parts, counts = [], [], []
        for number, batch in enumerate(train.batches(cfg.batch_size, rng)):
            loss, grad, terms = _batch_grad(model, batch, spam, weights, pool, cfg.block_size)
            if not (np.isfinite(loss) and np.all(np.isfinite(grad))):
                raise TrainingDiverged(epoch, number, loss)
            ce_parts.append(terms[0] * batch.size)
            loss_parts.append(loss * batch.size)
            counts.append(batch.size)
            adam, theta = adam_step(adam, theta, grad)
            model = GruModel.from_flat(hidden, theta)
        total = sum(counts)
        train_curve.append(float(tree_sum(ce_parts) / total))
        loss_curve.append(float(tree_sum(loss_parts) / total))
        val = rnn_ce(model, validation, pool=pool)
        val_curve.append(val)
        logger.info(
            f"Epoch {epoch}: loss {loss_curve[-1]:.6f}, train CE {train_curve[-1]:.6f}, validation CE {val:.6f}"
        )
        if val < best_val:
            best_val, best_theta, best_epoch = val, theta.copy(), epoch
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                logger.info(f"Early stop after epoch {epoch}, best epoch {best_epoch}")
                break
    report = TrainReport(
        format_version=REPORT_VERSION,
        kind="rnn",
        seed=cfg.seed,
        epochs=len(val_curve),
        train_curve=train_curve,
        train_loss=loss_curve,
        val_curve=val_curve,
        initial_val=initial,
        best_val=best_val,
        best_epoch=best_epoch,
        n_params=int(best_theta.size),
        spam=spam.to_spec(),
        loss_weights=weights.model_dump(),
    )
    return GruModel.from_flat(hidden, best_theta), report
