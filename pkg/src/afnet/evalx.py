"""Metrics, multi-seed aggregation and the lead / band ablation harnesses."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .data import ALL_LEADS, ClassLabel, Lead, Manifest
from .dsp import BAND_CATALOG, BandSpec
from .models import build_ecgnet
from .pipeline import Dataset, Preprocess, Splits, build_splits, load_rows
from .training import TrainConfig, predict, train

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ScoredSet:
    """Probability of AF1 per record with the true labels (1 = AF1)."""

    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        y = np.asarray([int(ClassLabel(int(v))) for v in np.asarray(self.labels).reshape(-1)], dtype=np.int64)
        if s.shape != y.shape:
            raise ValueError("scores and labels differ in length")
        if np.any((s < 0) | (s > 1)) or not np.isfinite(s).all():
            raise ValueError("scores must lie in [0, 1]")
        object.__setattr__(self, "scores", s)
        object.__setattr__(self, "labels", y)

    def __len__(self):
        return len(self.scores)


def accuracy(scored: ScoredSet, threshold: float = 0.5) -> float:
    if len(scored) == 0:
        raise ValueError("accuracy of an empty set")
    pred = scored.scores >= threshold
    return float(np.mean(pred == (scored.labels == 1)))


def auc(scored: ScoredSet) -> float:
    """Mann-Whitney AUC from average ranks (ties count one half)."""
    y = scored.labels
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes")
    s = scored.scores
    order = np.argsort(s, kind="mergesort")
    sorted_s = s[order]
    ranks = np.empty(len(s), dtype=np.float64)
    # tie groups get the mean of the 1-based ranks they span
    boundaries = np.flatnonzero(np.diff(sorted_s)) + 1
    starts = np.concatenate([[0], boundaries])
    ends = np.concatenate([boundaries, [len(s)]])
    avg = (starts + ends + 1) / 2.0
    ranks[order] = np.repeat(avg, ends - starts)
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_points(scored: ScoredSet) -> np.ndarray:
    """(fpr, tpr) pairs for each distinct threshold, descending score."""
    s, y = scored.scores, scored.labels
    thresholds = np.unique(s)[::-1]
    n_pos, n_neg = max(int(y.sum()), 1), max(int((y == 0).sum()), 1)
    pts = [(0.0, 0.0)]
    for t in thresholds:
        pred = s >= t
        pts.append((float((pred & (y == 0)).sum() / n_neg), float((pred & (y == 1)).sum() / n_pos)))
    return np.array(pts)


@dataclass(frozen=True)
class CalibrationBin:
    lower: float
    upper: float
    mean_predicted: float
    empirical: float
    count: int


def calibration_curve(scored: ScoredSet, n_bins: int = 10) -> list[CalibrationBin]:
    """Equal-width reliability bins on [0, 1]; empty bins are omitted."""
    if n_bins < 2:
        raise ValueError("n_bins must be >= 2")
    if len(scored) == 0:
        raise ValueError("calibration of an empty set")
    idx = np.minimum((scored.scores * n_bins).astype(np.int64), n_bins - 1)
    bins = []
    for b in range(n_bins):
        mask = idx == b
        c = int(mask.sum())
        if c == 0:
            continue
        bins.append(CalibrationBin(b / n_bins, (b + 1) / n_bins, float(scored.scores[mask].mean()),
                                   float(scored.labels[mask].mean()), c))
    return bins


def aggregate_runs(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample (n-1) standard deviation."""
    v = np.asarray(values, dtype=np.float64)
    if len(v) < 2:
        raise ValueError("need at least 2 runs for a standard deviation")
    return float(v.mean()), float(v.std(ddof=1))


# ---------------------------------------------------------------------------
# Ablation tables


@dataclass
class AblationRow:
    condition: str
    seed_aucs: list[float] = field(default_factory=list)
    error: str | None = None

    @property
    def mean(self) -> float:
        return aggregate_runs(self.seed_aucs)[0] if len(self.seed_aucs) >= 2 else math.nan

    @property
    def std(self) -> float:
        return aggregate_runs(self.seed_aucs)[1] if len(self.seed_aucs) >= 2 else math.nan


@dataclass
class AblationTable:
    title: str
    seeds: list[int]
    rows: list[AblationRow]

    def __post_init__(self):
        names = [r.condition for r in self.rows]
        if len(set(names)) != len(names):
            raise ValueError("ablation conditions must be unique")

    def row(self, condition: str) -> AblationRow:
        for r in self.rows:
            if r.condition == condition:
                return r
        raise KeyError(condition)

    def best(self) -> str:
        ok = [r for r in self.rows if r.error is None]
        return max(ok, key=lambda r: r.mean).condition

    def to_csv(self) -> str:
        head = ["condition", "mean_auc", "std_auc"] + [f"seed_{s}" for s in self.seeds] + ["error"]
        lines = [",".join(head)]
        for r in self.rows:
            vals = [repr(v) for v in r.seed_aucs] + [""] * (len(self.seeds) - len(r.seed_aucs))
            lines.append(",".join([r.condition, repr(r.mean), repr(r.std)] + vals + [r.error or ""]))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str, title: str = "") -> "AblationTable":
        lines = [l for l in text.splitlines() if l.strip()]
        head = lines[0].split(",")
        seeds = [int(h[len("seed_"):]) for h in head if h.startswith("seed_")]
        rows = []
        for line in lines[1:]:
            cells = line.split(",")
            aucs = [float(c) for c in cells[3:3 + len(seeds)] if c]
            err = cells[3 + len(seeds)] if len(cells) > 3 + len(seeds) else ""
            rows.append(AblationRow(cells[0], aucs, err or None))
        return cls(title, seeds, rows)

    def render(self, per_line: int = 6) -> str:
        """Text layout of condition / mean / std blocks, AUC in percent."""
        out = [self.title] if self.title else []
        for i in range(0, len(self.rows), per_line):
            chunk = self.rows[i:i + per_line]
            w = max(8, *(len(r.condition) + 2 for r in chunk))
            out.append("".ljust(6) + "".join(r.condition.rjust(w) for r in chunk))
            out.append("mean".ljust(6) + "".join(_pct(r.mean, r.error).rjust(w) for r in chunk))
            out.append("std".ljust(6) + "".join(_pct(r.std, r.error, 2).rjust(w) for r in chunk))
            out.append("")
        return "\n".join(out)


def _pct(v: float, err: str | None, digits: int = 1) -> str:
    if err is not None or math.isnan(v):
        return "n/a"
    return f"{100 * v:.{digits}f}"


# ---------------------------------------------------------------------------
# Harnesses


@dataclass(frozen=True)
class AblationSetup:
    test_frac: float = 0.12
    unbal_ratio: int = 1
    split_seed: int = 0


def _run_seed(args) -> float:
    train_set, test_set, n_leads, config = args
    net, _ = train(build_ecgnet(n_leads), train_set, config)
    return auc(ScoredSet(predict(net, test_set), test_set.labels))


def _run_condition(name: str, train_set: Dataset, test_set: Dataset, n_leads: int,
                   config: TrainConfig, seeds: Sequence[int], pool) -> AblationRow:
    row = AblationRow(name)
    jobs = [(train_set, test_set, n_leads, replace(config, seed=s)) for s in seeds]
    try:
        results = pool.map(_run_seed, jobs) if pool is not None else map(_run_seed, jobs)
        for s, value in zip(seeds, results):
            row.seed_aucs.append(value)
            log.info("%s seed %d: AUC %.4f", name, s, value)
    except Exception as exc:  # recorded per condition; the harness continues
        row.error = f"{type(exc).__name__}: {exc}".replace(",", ";").replace("\n", " ")
        log.warning("condition %s failed: %s", name, row.error)
    return row


def _check_seeds(seeds):
    if len(seeds) < 2:
        raise ValueError("ablations need at least 2 seeds for a standard deviation")


def _splits(manifest: Manifest, setup: AblationSetup) -> Splits:
    return build_splits(manifest, setup.test_frac, setup.unbal_ratio, setup.split_seed)


def run_lead_ablation(manifest: Manifest, config: TrainConfig = TrainConfig(), seeds: Sequence[int] = range(5),
                      setup: AblationSetup = AblationSetup(), leads: Sequence[Lead] = ALL_LEADS,
                      jobs: int = 1) -> AblationTable:
    """Train a 1-lead EcgNet per lead and seed; balanced-test AUC per lead."""
    seeds = list(seeds)
    _check_seeds(seeds)
    splits = _splits(manifest, setup)
    full_train = load_rows(manifest.root, splits.train, Preprocess())
    full_test = load_rows(manifest.root, splits.test_balanced, Preprocess())
    rows = []
    with _pool(jobs) as pool:
        for lead in leads:
            col = list(ALL_LEADS).index(Lead(lead))
            tr = replace(full_train, ecg=full_train.ecg[:, :, col:col + 1])
            te = replace(full_test, ecg=full_test.ecg[:, :, col:col + 1])
            rows.append(_run_condition(Lead(lead).name, tr, te, 1, config, seeds, pool))
    return AblationTable("1-lead AUC on the balanced test set", seeds, rows)


def run_band_ablation(manifest: Manifest, config: TrainConfig = TrainConfig(), seeds: Sequence[int] = range(5),
                      setup: AblationSetup = AblationSetup(),
                      bands: Sequence[BandSpec | None] = (None,) + BAND_CATALOG, jobs: int = 1) -> AblationTable:
    """12-lead EcgNet per band-pass condition (``None`` = unfiltered)."""
    seeds = list(seeds)
    _check_seeds(seeds)
    splits = _splits(manifest, setup)
    rows = []
    with _pool(jobs) as pool:
        for band in bands:
            prep = Preprocess(band=band)
            tr = load_rows(manifest.root, splits.train, prep)
            te = load_rows(manifest.root, splits.test_balanced, prep)
            name = "unfiltered" if band is None else f"[{band.name}]"
            rows.append(_run_condition(name, tr, te, tr.ecg.shape[2], config, seeds, pool))
    return AblationTable("AUC on the balanced test set per band-pass range (Hz)", seeds, rows)


class _pool:
    def __init__(self, jobs: int):
        self.jobs = jobs
        self.ex = None

    def __enter__(self):
        if self.jobs > 1:
            self.ex = ProcessPoolExecutor(max_workers=self.jobs)
        return self.ex

    def __exit__(self, *exc):
        if self.ex is not None:
            self.ex.shutdown()
