"""Train/test split construction, shift augmentation and per-record preprocessing."""

from __future__ import annotations

import math
import os
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import (
    ClassLabel, DataError, EcgRecord, Lead, Manifest, ManifestRow, NormStats,
    normalize_tabular, read_ecg, write_manifest,
)
from .dsp import BandSpec, apply_sos, decimate_by_two, design_butterworth_bandpass

TARGET_FS = 500.0
SHIFT_SEP = "~"


@dataclass(frozen=True)
class ShiftSpec:
    min_shift: int = 250
    max_shift: int = 500


DEFAULT_SHIFT = ShiftSpec()


def apply_shift(ecg: EcgRecord, shift: int, side: str) -> EcgRecord:
    """Zero-pad ``shift`` samples at ``side`` ('begin' or 'end') and truncate the other end."""
    n = ecg.n_samples
    if not 0 <= shift < n:
        raise DataError(f"{ecg.record_id}: shift {shift} not in [0, {n})")
    out = np.zeros_like(ecg.samples)
    if side == "begin":
        out[shift:] = ecg.samples[: n - shift]
    elif side == "end":
        out[: n - shift] = ecg.samples[shift:]
    else:
        raise ValueError(f"side must be 'begin' or 'end', got {side!r}")
    return ecg.replace(record_id=shifted_id(ecg.record_id, shift, side), samples=out)


def shifted_id(record_id: str, shift: int, side: str) -> str:
    return f"{record_id}{SHIFT_SEP}{side[0]}{shift}"


def parse_shifted_id(record_id: str) -> tuple[str, int | None, str | None]:
    """Split ``'rec~b317'`` into ``('rec', 317, 'begin')``; plain ids give ``(id, None, None)``."""
    base, sep, tag = record_id.rpartition(SHIFT_SEP)
    if not sep:
        return record_id, None, None
    side = {"b": "begin", "e": "end"}.get(tag[:1])
    if side is None or not tag[1:].isdigit():
        raise DataError(f"malformed augmentation suffix in {record_id!r}")
    return base, int(tag[1:]), side


def draw_shift(rng: np.random.Generator, spec: ShiftSpec = DEFAULT_SHIFT) -> tuple[int, str]:
    shift = int(rng.integers(spec.min_shift, spec.max_shift + 1))
    side = "begin" if rng.integers(2) == 0 else "end"
    return shift, side


def random_shift(ecg: EcgRecord, rng: np.random.Generator, spec: ShiftSpec = DEFAULT_SHIFT) -> EcgRecord:
    if ecg.n_samples <= spec.max_shift:
        raise DataError(
            f"{ecg.record_id}: record of {ecg.n_samples} samples is too short for shifts up to {spec.max_shift}"
        )
    shift, side = draw_shift(rng, spec)
    return apply_shift(ecg, shift, side)


def record_rng(seed: int, record_id: str) -> np.random.Generator:
    """Generator keyed by (seed, record_id) so augmentation is schedule-independent."""
    return np.random.default_rng([seed, zlib.crc32(record_id.encode())])


def select_leads(ecg: EcgRecord, leads: Sequence[Lead]) -> EcgRecord:
    cols = []
    for lead in leads:
        lead = Lead(lead)
        if lead not in ecg.leads:
            raise DataError(f"{ecg.record_id}: lead {lead} not present")
        cols.append(ecg.leads.index(lead))
    return ecg.replace(samples=ecg.samples[:, cols], leads=tuple(Lead(l) for l in leads))


def standardize_ecg(ecg: EcgRecord) -> EcgRecord:
    """Per-lead z-score with population statistics; constant leads become zeros."""
    x = ecg.samples.astype(np.float64)
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    safe = np.where(std > 0, std, 1.0)
    z = np.where(std > 0, (x - mean) / safe, 0.0)
    return ecg.replace(samples=z.astype(np.float32))


# ---------------------------------------------------------------------------
# Splits


@dataclass(frozen=True)
class Splits:
    """Row-level splits; augmented train rows carry their shift in the record id."""

    train: tuple[ManifestRow, ...]
    test_balanced: tuple[ManifestRow, ...]
    test_unbalanced: tuple[ManifestRow, ...]
    norm_stats: NormStats
    seed: int
    test_frac: float
    unbal_ratio: int
    root: Path = field(default=Path("."))

    def tabular(self, name: str):
        return [r.tabular for r in getattr(self, name)]

    def counts(self) -> dict[str, dict[str, int]]:
        out = {}
        for name in ("train", "test_balanced", "test_unbalanced"):
            rows = getattr(self, name)
            n1 = sum(1 for r in rows if r.label == ClassLabel.AF1)
            out[name] = {"AF0": len(rows) - n1, "AF1": n1, "total": len(rows)}
        return out

    def report(self) -> str:
        lines = [f"seed={self.seed}", f"test_frac={self.test_frac!r}", f"unbal_ratio={self.unbal_ratio}"]
        for name, c in self.counts().items():
            lines.append(f"{name}.AF0={c['AF0']}")
            lines.append(f"{name}.AF1={c['AF1']}")
            lines.append(f"{name}.total={c['total']}")
        return "\n".join(lines) + "\n"

    def write(self, out_dir) -> None:
        """Three manifests, the fitted tabular stats and a split report."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for name in ("train", "test_balanced", "test_unbalanced"):
            rows = [_rebase(r, self.root, out_dir) for r in getattr(self, name)]
            write_manifest(rows, out_dir / f"{name}.csv")
        self.norm_stats.write(out_dir / "norm_stats.csv")
        (out_dir / "split_report.txt").write_text(self.report())


def _rebase(row: ManifestRow, root: Path, out_dir: Path) -> ManifestRow:
    p = Path(row.path)
    if not p.is_absolute():
        p = Path(os.path.relpath(root / p, out_dir))
    return ManifestRow(row.record_id, p.as_posix(), row.label, row.tabular)


def build_splits(manifest: Manifest, test_frac: float = 0.12, unbal_ratio: int = 5, seed: int = 0,
                 shift: ShiftSpec = DEFAULT_SHIFT) -> Splits:
    """Balanced augmented train set plus balanced and unbalanced test sets.

    The test positives are ``floor(test_frac * n_AF1)`` AF1 rows shared by
    both test sets; the unbalanced set has ``unbal_ratio`` AF0 rows per
    positive and the balanced set uses the first of those. The remaining AF1
    rows are matched by an equal number of undersampled AF0 rows, and every
    train row gets one shifted copy.
    """
    if not 0 < test_frac < 1:
        raise DataError(f"test_frac must lie in (0, 1), got {test_frac}")
    if unbal_ratio < 1:
        raise DataError(f"unbal_ratio must be >= 1, got {unbal_ratio}")
    for row in manifest.rows:
        if SHIFT_SEP in row.record_id:
            raise DataError(f"record_id {row.record_id!r} already carries an augmentation suffix")
    af1 = [r for r in manifest.rows if r.label == ClassLabel.AF1]
    af0 = [r for r in manifest.rows if r.label == ClassLabel.AF0]
    if not af1 or not af0:
        raise DataError(f"manifest must contain both classes (AF0={len(af0)}, AF1={len(af1)})")
    n_test_pos = math.floor(test_frac * len(af1) + 1e-9)
    if n_test_pos < 1:
        raise DataError(f"test_frac {test_frac} leaves no AF1 test records out of {len(af1)}")
    n_train_pos = len(af1) - n_test_pos
    n_unbal_neg = unbal_ratio * n_test_pos
    if n_unbal_neg + n_train_pos > len(af0):
        raise DataError(
            f"insufficient AF0 records: need {n_unbal_neg} for testing plus {n_train_pos} for training, "
            f"have {len(af0)}"
        )

    rng = np.random.default_rng(seed)
    perm1 = rng.permutation(len(af1))
    test_pos = [af1[i] for i in perm1[:n_test_pos]]
    train_pos = [af1[i] for i in perm1[n_test_pos:]]
    perm0 = rng.permutation(len(af0))
    unbal_neg = [af0[i] for i in perm0[:n_unbal_neg]]
    bal_neg = unbal_neg[:n_test_pos]
    train_neg = [af0[i] for i in perm0[n_unbal_neg:n_unbal_neg + n_train_pos]]

    originals = train_pos + train_neg
    train = list(originals)
    for row in originals:
        s, side = draw_shift(record_rng(seed, row.record_id), shift)
        train.append(ManifestRow(shifted_id(row.record_id, s, side), row.path, row.label, row.tabular))

    def shuffled(rows):
        return tuple(rows[i] for i in rng.permutation(len(rows)))

    _, stats = normalize_tabular([r.tabular for r in originals])
    return Splits(
        train=shuffled(train),
        test_balanced=shuffled(test_pos + bal_neg),
        test_unbalanced=shuffled(test_pos + unbal_neg),
        norm_stats=stats,
        seed=seed,
        test_frac=test_frac,
        unbal_ratio=unbal_ratio,
        root=manifest.root,
    )


# ---------------------------------------------------------------------------
# Materialization


@dataclass(frozen=True)
class Preprocess:
    """Per-record chain: resample to 500 Hz, optional band-pass, standardize, select leads."""

    band: BandSpec | None = None
    leads: tuple[Lead, ...] | None = None
    target_fs: float = TARGET_FS
    standardize: bool = True
    filter_order: int = 4


def resample(ecg: EcgRecord, target_fs: float = TARGET_FS) -> EcgRecord:
    if ecg.fs == target_fs:
        return ecg
    if ecg.fs != 2 * target_fs:
        raise DataError(f"{ecg.record_id}: cannot resample {ecg.fs} Hz to {target_fs} Hz")
    dec = decimate_by_two(ecg.samples, ecg.fs)
    return ecg.replace(samples=dec.signal, fs=dec.fs)


def preprocess(ecg: EcgRecord, prep: Preprocess) -> EcgRecord:
    ecg = resample(ecg, prep.target_fs)
    if prep.band is not None:
        filt = design_butterworth_bandpass(prep.band, ecg.fs, prep.filter_order)
        ecg = ecg.replace(samples=apply_sos(filt, ecg.samples))
    if prep.standardize:
        ecg = standardize_ecg(ecg)
    if prep.leads is not None:
        ecg = select_leads(ecg, prep.leads)
    return ecg


@dataclass
class Dataset:
    """Model-ready arrays: ``ecg [N, T, L]`` float32, ``tab [N, F]``, ``labels [N]``."""

    ids: list[str]
    labels: np.ndarray
    ecg: np.ndarray | None = None
    tab: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(
            ids=[self.ids[i] for i in idx],
            labels=self.labels[idx],
            ecg=None if self.ecg is None else self.ecg[idx],
            tab=None if self.tab is None else self.tab[idx],
        )


def load_rows(manifest_root: Path, rows: Sequence[ManifestRow], prep: Preprocess | None = Preprocess(),
              norm_stats: NormStats | None = None, cache: dict | None = None) -> Dataset:
    """Load, preprocess and (for '~'-suffixed ids) shift the waveforms of ``rows``.

    ``prep=None`` skips waveforms entirely; ``norm_stats`` enables the
    tabular matrix.
    """
    cache = {} if cache is None else cache
    labels = np.array([int(r.label) for r in rows], dtype=np.int64)
    ecg = None
    if prep is not None:
        arrays = []
        for row in rows:
            base, shift, side = parse_shifted_id(row.record_id)
            key = (base, row.path)
            rec = cache.get(key)
            if rec is None:
                p = Path(row.path)
                raw = read_ecg(p if p.is_absolute() else manifest_root / p, record_id=base, label=row.label)
                rec = cache[key] = preprocess(raw, prep)
            if shift is not None:
                rec = apply_shift(rec, shift, side)
            arrays.append(rec.samples)
        ecg = np.stack(arrays) if arrays else None
    tab = None
    if norm_stats is not None:
        tab, _ = normalize_tabular([r.tabular for r in rows], norm_stats)
    return Dataset([r.record_id for r in rows], labels, ecg, tab)
