"""Domain types and on-disk formats: waveform files, manifests, tabular features."""

from __future__ import annotations

import csv
import enum
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class DataError(Exception):
    """Malformed or inconsistent input data."""


class Lead(enum.IntEnum):
    D1 = 0
    D2 = 1
    D3 = 2
    avR = 3
    avF = 4
    avL = 5
    v1 = 6
    v2 = 7
    v3 = 8
    v4 = 9
    v5 = 10
    v6 = 11

    @classmethod
    def parse(cls, text: str) -> "Lead":
        for lead in cls:
            if lead.name.lower() == text.strip().lower():
                return lead
        raise DataError(f"unknown lead {text!r}")

    def __str__(self) -> str:
        return self.name


ALL_LEADS: tuple[Lead, ...] = tuple(Lead)


class ClassLabel(enum.IntEnum):
    AF0 = 0  # will not develop AF
    AF1 = 1  # will develop AF

    @classmethod
    def parse(cls, token: str) -> "ClassLabel":
        token = token.strip()
        if token == "0":
            return cls.AF0
        if token == "1":
            return cls.AF1
        raise DataError(f"unknown label token {token!r}")


@dataclass(frozen=True, eq=False)
class EcgRecord:
    """A time-major sample matrix ``[n_samples, n_leads]`` in millivolts."""

    record_id: str
    samples: np.ndarray
    fs: float
    leads: tuple[Lead, ...] = ALL_LEADS
    label: ClassLabel = ClassLabel.AF0

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float32)
        if samples.ndim != 2:
            raise DataError(f"{self.record_id}: samples must be 2-D, got shape {samples.shape}")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "leads", tuple(Lead(l) for l in self.leads))
        object.__setattr__(self, "label", ClassLabel(self.label))
        if samples.shape[1] != len(self.leads):
            raise DataError(
                f"{self.record_id}: {samples.shape[1]} sample columns but {len(self.leads)} leads"
            )
        if samples.shape[0] == 0:
            raise DataError(f"{self.record_id}: empty record")
        if not self.fs > 0:
            raise DataError(f"{self.record_id}: fs must be positive, got {self.fs}")
        if not np.isfinite(samples).all():
            raise DataError(f"{self.record_id}: NaN/Inf samples")

    @property
    def n_samples(self) -> int:
        return self.samples.shape[0]

    @property
    def n_leads(self) -> int:
        return self.samples.shape[1]

    def replace(self, **changes) -> "EcgRecord":
        kw = dict(record_id=self.record_id, samples=self.samples, fs=self.fs,
                  leads=self.leads, label=self.label)
        kw.update(changes)
        return EcgRecord(**kw)

    def __eq__(self, other):
        if not isinstance(other, EcgRecord):
            return NotImplemented
        return (
            self.record_id == other.record_id
            and self.fs == other.fs
            and self.leads == other.leads
            and self.label == other.label
            and self.samples.shape == other.samples.shape
            and self.samples.tobytes() == other.samples.tobytes()
        )


# ---------------------------------------------------------------------------
# Tabular features

FEATURES: tuple[str, ...] = (
    "gender", "age", "P_AXIS", "P_DUR", "P_ONSET", "P_OFFSET", "PR_INT",
    "QRS_AXIS", "QRS_DUR", "QRS_ONSET", "QRS_OFFSET", "QT_INT", "QTC_INT",
    "RR_INTERVAL", "T_AXIS", "T_OFFSET", "V_RATE",
)
AXIS_FEATURES = ("P_AXIS", "QRS_AXIS", "T_AXIS")
POSITIVE_FEATURES = tuple(f for f in FEATURES if f not in AXIS_FEATURES + ("gender",))

MANIFEST_HEADER: tuple[str, ...] = ("record_id", "path", "label") + FEATURES


@dataclass(frozen=True)
class TabularRecord:
    """Morphology parameters plus age and gender for one exam.

    ``gender`` is 'M' or 'F'; axes are degrees, intervals milliseconds,
    V_RATE beats per minute.
    """

    gender: str
    age: float
    P_AXIS: float
    P_DUR: float
    P_ONSET: float
    P_OFFSET: float
    PR_INT: float
    QRS_AXIS: float
    QRS_DUR: float
    QRS_ONSET: float
    QRS_OFFSET: float
    QT_INT: float
    QTC_INT: float
    RR_INTERVAL: float
    T_AXIS: float
    T_OFFSET: float
    V_RATE: float

    def __post_init__(self):
        if self.gender not in ("M", "F"):
            raise DataError(f"gender must be 'M' or 'F', got {self.gender!r}")
        for name in POSITIVE_FEATURES:
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise DataError(f"{name} must be positive and finite, got {value}")
        for name in AXIS_FEATURES:
            value = getattr(self, name)
            if not -180 <= value <= 360:
                raise DataError(f"{name} must lie in [-180, 360], got {value}")

    def to_vector(self) -> np.ndarray:
        """Numeric encoding in FEATURES order; gender M->1, F->0."""
        values = [1.0 if self.gender == "M" else 0.0]
        values += [float(getattr(self, name)) for name in FEATURES[1:]]
        return np.array(values, dtype=np.float64)

    @classmethod
    def from_cells(cls, cells: Sequence[str]) -> "TabularRecord":
        if len(cells) != len(FEATURES):
            raise DataError(f"expected {len(FEATURES)} feature cells, got {len(cells)}")
        gender = cells[0].strip()
        if gender == "1":
            gender = "M"
        elif gender == "0":
            gender = "F"
        numeric = {}
        for name, cell in zip(FEATURES[1:], cells[1:]):
            try:
                numeric[name] = float(cell)
            except ValueError:
                raise DataError(f"non-numeric value {cell!r} for {name}") from None
        return cls(gender=gender, **numeric)

    def to_cells(self) -> list[str]:
        return ["1" if self.gender == "M" else "0"] + [_fmt(getattr(self, name)) for name in FEATURES[1:]]


def _fmt(x: float) -> str:
    return repr(float(x))


@dataclass(frozen=True)
class NormStats:
    """Per-feature z-score statistics (population std, divide by n)."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        std = np.asarray(self.std, dtype=np.float64)
        if mean.shape != std.shape or mean.ndim != 1:
            raise DataError("NormStats mean/std must be equal-length vectors")
        if not (std > 0).all():
            raise DataError("NormStats std must be strictly positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    @classmethod
    def identity(cls, n: int = len(FEATURES)) -> "NormStats":
        return cls(np.zeros(n), np.ones(n))

    def write(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(FEATURES[: len(self.mean)])
            w.writerow([_fmt(v) for v in self.mean])
            w.writerow([_fmt(v) for v in self.std])

    @classmethod
    def read(cls, path) -> "NormStats":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if len(rows) != 3:
            raise DataError(f"{path}: expected header plus two rows, got {len(rows)} rows")
        return cls(np.array(rows[1], dtype=np.float64), np.array(rows[2], dtype=np.float64))


def normalize_tabular(
    records: Sequence[TabularRecord] | np.ndarray, stats: NormStats | None = None
) -> tuple[np.ndarray, NormStats]:
    """Z-score the tabular features.

    Without ``stats`` the statistics are fitted on ``records`` (training
    data) and returned alongside the normalized matrix.
    """
    if isinstance(records, np.ndarray):
        x = np.asarray(records, dtype=np.float64)
    else:
        x = np.stack([r.to_vector() for r in records]) if len(records) else np.zeros((0, len(FEATURES)))
    if stats is None:
        if len(x) < 2:
            raise DataError("need at least 2 training rows to fit normalization stats")
        mean = x.mean(axis=0)
        std = x.std(axis=0)
        constant = [FEATURES[i] if i < len(FEATURES) else str(i) for i in np.flatnonzero(std == 0)]
        if constant:
            raise DataError(f"zero-variance features: {', '.join(constant)}")
        stats = NormStats(mean, std)
    return (x - stats.mean) / stats.std, stats


# ---------------------------------------------------------------------------
# Waveform file: "ECG1" | u16 version | u16 n_leads | u32 n_samples | f32 fs
#                | n_leads x u8 lead ordinal | f32 payload, time-major, LE

ECG_MAGIC = b"ECG1"
ECG_VERSION = 1
_ECG_HEADER = struct.Struct("<4sHHIf")


def write_ecg(record: EcgRecord, path) -> None:
    if not np.isfinite(record.samples).all():
        raise DataError(f"{record.record_id}: refusing to write NaN/Inf samples")
    header = _ECG_HEADER.pack(ECG_MAGIC, ECG_VERSION, record.n_leads, record.n_samples, record.fs)
    lead_bytes = bytes(int(l) for l in record.leads)
    payload = np.ascontiguousarray(record.samples, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(header + lead_bytes + payload)


def read_ecg(path, record_id: str | None = None, label: ClassLabel = ClassLabel.AF0) -> EcgRecord:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < _ECG_HEADER.size or blob[:4] != ECG_MAGIC:
        raise DataError(f"{path}: bad magic, not an ECG1 file")
    _, version, n_leads, n_samples, fs = _ECG_HEADER.unpack_from(blob)
    if version != ECG_VERSION:
        raise DataError(f"{path}: unsupported format version {version}")
    offset = _ECG_HEADER.size
    expected = offset + n_leads + 4 * n_leads * n_samples
    if len(blob) != expected:
        raise DataError(
            f"{path}: truncated or oversized payload, expected {expected} bytes, got {len(blob)}"
        )
    try:
        leads = tuple(Lead(b) for b in blob[offset:offset + n_leads])
    except ValueError:
        raise DataError(f"{path}: invalid lead ordinal") from None
    samples = np.frombuffer(blob, dtype="<f4", offset=offset + n_leads).reshape(n_samples, n_leads)
    if not np.isfinite(samples).all():
        raise DataError(f"{path}: NaN/Inf payload values")
    return EcgRecord(
        record_id=record_id if record_id is not None else path.stem,
        samples=samples.astype(np.float32),
        fs=float(fs),
        leads=leads,
        label=label,
    )


# ---------------------------------------------------------------------------
# Manifest


@dataclass(frozen=True)
class ManifestRow:
    record_id: str
    path: str
    label: ClassLabel
    tabular: TabularRecord

    def cells(self) -> list[str]:
        return [self.record_id, self.path, str(int(self.label))] + self.tabular.to_cells()


@dataclass(frozen=True)
class Manifest:
    rows: tuple[ManifestRow, ...]
    root: Path = field(default=Path("."))

    def __post_init__(self):
        object.__setattr__(self, "rows", tuple(self.rows))
        seen: dict[str, int] = {}
        for i, row in enumerate(self.rows):
            if row.record_id in seen:
                raise DataError(f"duplicate record_id {row.record_id!r} at rows {seen[row.record_id]} and {i}")
            seen[row.record_id] = i

    def __len__(self) -> int:
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)

    def class_counts(self) -> dict[ClassLabel, int]:
        counts = {ClassLabel.AF0: 0, ClassLabel.AF1: 0}
        for row in self.rows:
            counts[row.label] += 1
        return counts

    def resolve(self, row: ManifestRow) -> Path:
        p = Path(row.path)
        return p if p.is_absolute() else self.root / p

    def load(self, row: ManifestRow) -> EcgRecord:
        return read_ecg(self.resolve(row), record_id=row.record_id, label=row.label)


def read_manifest(path, check_paths: bool = True) -> Manifest:
    """Parse a manifest CSV; any malformed row aborts with its line number.

    Relative waveform paths resolve against the manifest's directory.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    rows: list[ManifestRow] = []
    first_line: dict[str, int] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != MANIFEST_HEADER:
            raise DataError(f"{path}: header does not match the manifest schema")
        for lineno, cells in enumerate(reader, start=2):
            if not cells:
                continue
            if len(cells) != len(MANIFEST_HEADER):
                raise DataError(f"{path}:{lineno}: expected {len(MANIFEST_HEADER)} cells, got {len(cells)}")
            rid = cells[0].strip()
            if rid in first_line:
                raise DataError(
                    f"{path}: duplicate record_id {rid!r} on lines {first_line[rid]} and {lineno}"
                )
            first_line[rid] = lineno
            try:
                label = ClassLabel.parse(cells[2])
                tab = TabularRecord.from_cells(cells[3:])
            except DataError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            rows.append(ManifestRow(rid, cells[1].strip(), label, tab))
    manifest = Manifest(tuple(rows), root=path.parent)
    if check_paths:
        for row in manifest.rows:
            if not manifest.resolve(row).exists():
                raise DataError(f"{path}: waveform for {row.record_id!r} not found: {row.path}")
    return manifest


def write_manifest(rows: Iterable[ManifestRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for row in rows:
            w.writerow(row.cells())
