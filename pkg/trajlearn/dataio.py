"""
Dataset files and report artifacts.

A dataset directory holds ``meta.json``, ``records.bin`` and optionally
``truth.bin``. Binary files are little-endian streams of per-shot blocks
followed by a CRC32 footer (4 bytes, little-endian):

    records.bin: [prep u8][axis u8][outcome i8][n_steps u32][n_steps x (f32 dM_I, f32 dM_Q)]
    truth.bin:   [(n_steps + 1) x (f32 x, f32 y, f32 z)]
"""

import csv
import json
import logging
import struct
import zlib
from pathlib import Path
from typing import Any, Dict, List, Optional, Type, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, ValidationError

from .characterize import (
    BinFitReport,
    CoarseStudyReport,
    ParameterTable,
    SelfConsistencyReport,
)
from .dataset import Dataset, DatasetMeta, TrajectoryRecord, WeakRecord
from .rnn import GRU_VERSION, GruModel, GruSpec
from .sdelearn import REPORT_VERSION, SelectionReport, TrainReport

logger = logging.getLogger(__name__)

FORMAT_VERSION = "1.0"
SPLIT_RULE = "splitmix64-philox(index) vs cumulative split_fractions"
META_FILE = "meta.json"
RECORDS_FILE = "records.bin"
TRUTH_FILE = "truth.bin"
HEADER = np.dtype([("prep", "u1"), ("axis", "u1"), ("outcome", "i1"), ("n_steps", "<u4")])
FOOTER = struct.Struct("<I")

PathLike = Union[str, Path]


class DatasetFormatError(Exception):
    """Raised when a dataset or artifact file cannot be decoded."""


class FormatVersionError(DatasetFormatError):
    pass


class TruncatedStream(DatasetFormatError):
    def __init__(self, file: str, shot: int):
        self.shot = shot
        super().__init__(f"{file} ends inside the block of shot {shot}")


class ChecksumMismatch(DatasetFormatError):
    pass


class DatasetFile(BaseModel):
    """Contents of meta.json."""

    model_config = ConfigDict(extra="forbid")

    format_version: str = FORMAT_VERSION
    split_rule: str = SPLIT_RULE
    n_shots: int
    has_truth: bool
    # null when shot indices are 0..n_shots-1
    indices: Optional[List[int]] = None
    meta: DatasetMeta


def check_version(version: str, supported: str, what: str) -> None:
    """Reject artifacts whose major version differs from ours."""
    if version.split(".")[0] != supported.split(".")[0]:
        raise FormatVersionError(f"{what} has format version {version}, expected {supported}")


def _with_footer(body: bytes) -> bytes:
    return body + FOOTER.pack(zlib.crc32(body))


def save_dataset(data: Dataset, path: PathLike) -> Path:
    """
    Write ``data`` to the directory ``path`` (created if needed).

    Values are stored as float32; datasets produced by the generator are
    already float32-exact, so load(save(d)) == d.
    """
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    indices = [shot.index for shot in data.shots]
    has_truth = data.has_truth
    header = DatasetFile(
        n_shots=len(indices),
        has_truth=has_truth,
        indices=None if indices == list(range(len(indices))) else indices,
        meta=data.meta,
    )
    records = bytearray()
    truth = bytearray()
    for shot in data.shots:
        head = np.zeros(1, dtype=HEADER)
        head["prep"], head["axis"], head["outcome"] = shot.prep, shot.axis, shot.outcome
        head["n_steps"] = shot.n_steps
        records += head.tobytes()
        records += shot.record.stacked().astype("<f4").tobytes()
        if has_truth:
            truth += np.asarray(shot.truth).astype("<f4").tobytes()
    (root / META_FILE).write_text(header.model_dump_json(indent=2) + "\n")
    (root / RECORDS_FILE).write_bytes(_with_footer(bytes(records)))
    if has_truth:
        (root / TRUTH_FILE).write_bytes(_with_footer(bytes(truth)))
    elif (root / TRUTH_FILE).exists():
        (root / TRUTH_FILE).unlink()
    logger.info(f"Wrote {len(indices)} shots to {root}")
    return root


def _read(path: Path) -> bytes:
    try:
        return path.read_bytes()
    except OSError as e:
        raise DatasetFormatError(f"Cannot read {path}: {e}") from e


def _split_footer(raw: bytes, name: str) -> tuple:
    if len(raw) < FOOTER.size:
        raise TruncatedStream(name, 0)
    return raw[: -FOOTER.size], FOOTER.unpack(raw[-FOOTER.size :])[0]


def _verify(body: bytes, crc: int, name: str) -> None:
    if zlib.crc32(body) != crc:
        raise ChecksumMismatch(f"{name} checksum {zlib.crc32(body):#010x} != footer {crc:#010x}")


def _floats(body: bytes, offset: int, count: int, name: str, shot: int) -> np.ndarray:
    if offset + 4 * count > len(body):
        raise TruncatedStream(name, shot)
    return np.frombuffer(body, dtype="<f4", count=count, offset=offset).astype(np.float64)


def load_dataset(path: PathLike) -> Dataset:
    """
    Read a dataset directory written by ``save_dataset``.

    Raises:
        FormatVersionError: On an unknown major format version.
        TruncatedStream: If a binary file ends inside a shot block.
        ChecksumMismatch: If a CRC32 footer does not match.
        DatasetFormatError: For any other malformed content.
    """
    root = Path(path)
    try:
        raw_meta = json.loads(_read(root / META_FILE))
        check_version(str(raw_meta.get("format_version", "")), FORMAT_VERSION, META_FILE)
        header = DatasetFile.model_validate(raw_meta)
    except (json.JSONDecodeError, ValidationError, AttributeError) as e:
        raise DatasetFormatError(f"Invalid {root / META_FILE}: {e}") from e
    meta = header.meta
    indices = header.indices if header.indices is not None else list(range(header.n_shots))
    if len(indices) != header.n_shots:
        raise DatasetFormatError(f"{len(indices)} indices for {header.n_shots} shots")
    valid_lengths = {meta.n_steps(t) for t in meta.t_grid}

    body, crc = _split_footer(_read(root / RECORDS_FILE), RECORDS_FILE)
    blocks = []
    offset = 0
    for index in indices:
        if offset + HEADER.itemsize > len(body):
            raise TruncatedStream(RECORDS_FILE, index)
        head = np.frombuffer(body, dtype=HEADER, count=1, offset=offset)[0]
        offset += HEADER.itemsize
        n_steps = int(head["n_steps"])
        if n_steps not in valid_lengths:
            raise DatasetFormatError(f"shot {index} has {n_steps} steps, not on the duration grid")
        dm = _floats(body, offset, 2 * n_steps, RECORDS_FILE, index).reshape(n_steps, 2)
        offset += 8 * n_steps
        blocks.append((index, int(head["prep"]), int(head["axis"]), int(head["outcome"]), dm))
    if offset != len(body):
        raise DatasetFormatError(f"{RECORDS_FILE} has {len(body) - offset} trailing bytes")
    _verify(body, crc, RECORDS_FILE)

    truths: List[Optional[np.ndarray]] = [None] * len(blocks)
    if header.has_truth:
        body, crc = _split_footer(_read(root / TRUTH_FILE), TRUTH_FILE)
        offset = 0
        for k, (index, _, _, _, dm) in enumerate(blocks):
            count = 3 * (dm.shape[0] + 1)
            truths[k] = _floats(body, offset, count, TRUTH_FILE, index).reshape(-1, 3)
            offset += 4 * count
        if offset != len(body):
            raise DatasetFormatError(f"{TRUTH_FILE} has {len(body) - offset} trailing bytes")
        _verify(body, crc, TRUTH_FILE)

    try:
        shots = [
            TrajectoryRecord(
                index=index,
                prep=prep,
                axis=axis,
                outcome=outcome,
                record=WeakRecord(dm[:, 0], dm[:, 1], meta.dt),
                truth=truth,
            )
            for (index, prep, axis, outcome, dm), truth in zip(blocks, truths)
        ]
    except ValueError as e:
        raise DatasetFormatError(f"Invalid shot in {root}: {e}") from e
    logger.info(f"Loaded {len(shots)} shots from {root}")
    return Dataset(meta=meta, shots=shots)


REPORT_KINDS: Dict[str, Type[BaseModel]] = {
    "sde": TrainReport,
    "rnn": TrainReport,
    "coarse_study": CoarseStudyReport,
    "self_consistency": SelfConsistencyReport,
    "bin_fit": BinFitReport,
    "selection": SelectionReport,
    "parameter_table": ParameterTable,
}


def write_json(model: BaseModel, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(model.model_dump_json(indent=2) + "\n")
    logger.info(f"Wrote {path}")
    return path


def read_report(path: PathLike) -> BaseModel:
    """Load any report artifact, dispatching on its ``kind``."""
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise DatasetFormatError(f"Cannot read report {path}: {e}") from e
    kind = raw.get("kind") if isinstance(raw, dict) else None
    if kind not in REPORT_KINDS:
        raise DatasetFormatError(f"{path} is not a known report (kind={kind!r})")
    check_version(str(raw.get("format_version", "")), REPORT_VERSION, str(path))
    try:
        return REPORT_KINDS[kind].model_validate(raw)
    except ValidationError as e:
        raise DatasetFormatError(f"Invalid {kind} report {path}: {e}") from e


def report_rows(report: BaseModel) -> List[Dict[str, Any]]:
    """Flat CSV rows: one per epoch, coarse level, bin, model or parameter."""
    if isinstance(report, TrainReport):
        return [
            {
                "epoch": epoch + 1,
                "train": report.train_curve[epoch] if epoch < len(report.train_curve) else "",
                "validation": value,
                "train_loss": report.train_loss[epoch] if epoch < len(report.train_loss) else "",
            }
            for epoch, value in enumerate(report.val_curve)
        ]
    if isinstance(report, CoarseStudyReport):
        rows = []
        for row in report.rows:
            flat: Dict[str, Any] = {"k": row.k, "dt": row.dt}
            flat.update(row.params)
            flat.update({f"rel_error_{name}": v for name, v in row.rel_error.items()})
            flat.update({"learned_ce": row.learned_ce, "true_ce": row.true_ce, "epochs": row.epochs})
            rows.append(flat)
        return rows
    if isinstance(report, SelfConsistencyReport):
        return [
            {"center": c, "predicted": p, "empirical": e, "count": n}
            for c, p, e, n in zip(report.centers, report.predicted, report.empirical, report.counts)
        ]
    if isinstance(report, BinFitReport):
        return [
            {"parameter": name, "value": value, "error": report.errors.get(name, "")}
            for name, value in report.params.items()
        ]
    if isinstance(report, SelectionReport):
        return [row.model_dump() for row in report.rows]
    if isinstance(report, ParameterTable):
        rows = [
            {"parameter": name, **{col: values[name] for col, values in report.columns.items()}}
            for name in report.parameters
        ]
        if report.ce:
            rows.append({"parameter": "ce", **report.ce})
        return rows
    raise TypeError(f"no CSV layout for {type(report).__name__}")


def write_report_csv(report: BaseModel, path: PathLike) -> Path:
    rows = report_rows(report)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns: List[str] = []
    for row in rows:
        columns += [key for key in row if key not in columns]
    with path.open("w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=columns, restval="")
        writer.writeheader()
        writer.writerows(rows)
    logger.info(f"Wrote {len(rows)} rows to {path}")
    return path


def save_gru(model: GruModel, path: PathLike) -> Path:
    return write_json(model.to_spec(), path)


def load_gru(path: PathLike) -> GruModel:
    try:
        raw = json.loads(Path(path).read_text())
        check_version(str(raw.get("format_version", "")), GRU_VERSION, str(path))
        return GruModel.from_spec(GruSpec.model_validate(raw))
    except (OSError, json.JSONDecodeError, ValidationError, ValueError, AttributeError) as e:
        raise DatasetFormatError(f"Cannot load GRU weights from {path}: {e}") from e
