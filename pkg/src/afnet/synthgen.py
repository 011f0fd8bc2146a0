"""Synthetic 12-lead ECG and tabular records with controllable class differences.

Beats are a three-bump template (Gaussian P, piecewise-linear QRS, Gaussian
T) projected onto the leads with fixed weights. Class AF1 differs from AF0 by
its PR and RR timing and an attenuated P wave; an optional AF1-only tone
plants a class difference at a chosen frequency.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
from scipy.stats import norm

from .data import (
    ALL_LEADS, ClassLabel, DataError, EcgRecord, FEATURES, Manifest, ManifestRow,
    TabularRecord, write_ecg, write_manifest,
)


@dataclass(frozen=True)
class BeatTiming:
    rr_ms: float
    pr_ms: float


#                   D1    D2   D3   avR   avF  avL  v1    v2    v3   v4   v5   v6
P_WEIGHTS = (1.0, 0.7, 0.3, -1.0, 0.5, 0.4, 0.4, 0.5, 0.5, 0.5, 0.5, 0.5)
QRS_WEIGHTS = (1.0, 0.8, 0.4, -1.0, 0.6, 0.5, -0.6, -0.5, 0.4, 0.7, 0.8, 0.7)
T_WEIGHTS = (0.8, 0.7, 0.3, -0.7, 0.5, 0.4, 0.2, 0.5, 0.6, 0.6, 0.6, 0.5)


@dataclass(frozen=True)
class SynthParams:
    """Every knob of the generator; amplitudes in mV, times in ms."""

    fs: float = 500.0
    n_samples: int = 5000
    timing_af0: BeatTiming = BeatTiming(rr_ms=831.0, pr_ms=169.0)
    timing_af1: BeatTiming = BeatTiming(rr_ms=871.0, pr_ms=179.0)
    rr_record_sd_ms: float = 60.0
    pr_record_sd_ms: float = 12.0
    rr_jitter_ms: float = 20.0
    p_amp: float = 0.15
    p_sigma_ms: float = 16.0
    p_amp_record_sd: float = 0.15  # log-normal spread of the per-record P amplitude
    af1_p_factor: float = 0.7
    qrs_amp: float = 1.2
    qrs_width_ms: float = 90.0
    qrs_amp_record_sd: float = 0.1
    t_amp: float = 0.3
    t_sigma_ms: float = 40.0
    rt_ms: float = 280.0
    p_weights: tuple[float, ...] = P_WEIGHTS
    qrs_weights: tuple[float, ...] = QRS_WEIGHTS
    t_weights: tuple[float, ...] = T_WEIGHTS
    effect_leads: tuple[int, ...] = tuple(range(12))  # leads carrying the AF1 P attenuation
    tone_hz: float = 8.0
    tone_amp: float = 0.0  # AF1-only sinusoid; 0 disables
    tone_leads: tuple[int, ...] = tuple(range(12))
    tone_ramp_ms: float = 200.0  # raised-cosine fade-in; an abrupt onset would leak into every band
    baseline_amp: float = 0.1
    baseline_hz: float = 0.55
    powerline_amp: float = 0.0
    noise_std: float = 0.02

    def validate(self) -> None:
        for t in (self.timing_af0, self.timing_af1):
            if t.rr_ms <= 0 or t.pr_ms <= 0:
                raise DataError("RR and PR intervals must be positive")
            half_qrs = self.qrs_width_ms / 2
            if t.pr_ms - 3 * self.p_sigma_ms <= half_qrs:
                raise DataError("P wave overlaps the QRS complex")
            if self.rt_ms - 3 * self.t_sigma_ms <= half_qrs:
                raise DataError("T wave overlaps the QRS complex")
            if t.rr_ms - t.pr_ms - 3 * self.p_sigma_ms <= self.rt_ms + 3 * self.t_sigma_ms:
                raise DataError("T wave overlaps the next beat's P wave")
        if min(self.p_sigma_ms, self.qrs_width_ms, self.t_sigma_ms) <= 0:
            raise DataError("wave widths must be positive")
        for w in (self.p_weights, self.qrs_weights, self.t_weights):
            if len(w) != 12:
                raise DataError("lead weights must have 12 entries")

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, BeatTiming):
                lines.append(f"{f.name}.rr_ms={v.rr_ms!r}")
                lines.append(f"{f.name}.pr_ms={v.pr_ms!r}")
            elif isinstance(v, tuple):
                lines.append(f"{f.name}=" + ",".join(repr(x) for x in v))
            else:
                lines.append(f"{f.name}={v!r}")
        return "\n".join(lines) + "\n"


def _qrs_shape(t_ms: np.ndarray, width_ms: float) -> np.ndarray:
    h = width_ms / 2
    knots = np.array([-h, -h / 2, 0.0, h / 2, h])
    vals = np.array([0.0, -0.12, 1.0, -0.25, 0.0])
    return np.interp(t_ms, knots, vals, left=0.0, right=0.0)


def beat_template(t_ms: np.ndarray, r_ms: float, pr_ms: float, p_amp: np.ndarray, qrs_amp: np.ndarray,
                  t_amp: np.ndarray, params: SynthParams) -> np.ndarray:
    """One beat with its R peak at ``r_ms``; amplitudes are per-lead vectors. Returns ``[T, 12]``."""
    dt = t_ms - r_ms
    p = np.exp(-0.5 * ((dt + pr_ms) / params.p_sigma_ms) ** 2)
    q = _qrs_shape(dt, params.qrs_width_ms)
    tw = np.exp(-0.5 * ((dt - params.rt_ms) / params.t_sigma_ms) ** 2)
    return p[:, None] * p_amp + q[:, None] * qrs_amp + tw[:, None] * t_amp


@dataclass(frozen=True)
class SynthTrace:
    """Ground truth behind one generated record."""

    r_peaks_ms: np.ndarray
    rr_ms: float
    pr_ms: float
    p_amp: np.ndarray
    qrs_amp: np.ndarray
    t_amp: np.ndarray


def _min_rr(pr_ms: float, params: SynthParams) -> float:
    return pr_ms + 3 * params.p_sigma_ms + params.rt_ms + 3 * params.t_sigma_ms + 10.0


def synth_ecg_traced(label: ClassLabel, params: SynthParams, rng: np.random.Generator,
                     record_id: str = "synth") -> tuple[EcgRecord, SynthTrace]:
    params.validate()
    label = ClassLabel(label)
    timing = params.timing_af1 if label == ClassLabel.AF1 else params.timing_af0
    n = params.n_samples
    t_ms = np.arange(n) * (1000.0 / params.fs)
    duration = n * 1000.0 / params.fs

    pr = max(timing.pr_ms + params.pr_record_sd_ms * rng.standard_normal(),
             params.qrs_width_ms / 2 + 3 * params.p_sigma_ms + 1.0)
    min_rr = _min_rr(pr, params)
    rr = max(timing.rr_ms + params.rr_record_sd_ms * rng.standard_normal(), min_rr)

    p_amp = params.p_amp * math.exp(params.p_amp_record_sd * rng.standard_normal()) * np.array(params.p_weights)
    if label == ClassLabel.AF1:
        p_amp[list(params.effect_leads)] *= params.af1_p_factor
    qrs_amp = params.qrs_amp * math.exp(params.qrs_amp_record_sd * rng.standard_normal()) * np.array(params.qrs_weights)
    t_amp = params.t_amp * np.array(params.t_weights)

    peaks = []
    r = -rng.uniform(0.0, rr)
    while r - pr - 3 * params.p_sigma_ms < duration:
        peaks.append(r)
        r += max(rr + params.rr_jitter_ms * rng.standard_normal(), min_rr)
    x = np.zeros((n, 12))
    for r in peaks:
        x += beat_template(t_ms, r, pr, p_amp, qrs_amp, t_amp, params)

    t_s = t_ms / 1000.0
    if params.tone_amp > 0 and label == ClassLabel.AF1:
        phase = rng.uniform(0, 2 * np.pi)
        ramp = 1.0
        if params.tone_ramp_ms > 0:
            ramp = 0.5 - 0.5 * np.cos(np.pi * np.clip(t_ms / params.tone_ramp_ms, 0.0, 1.0))
        tone = params.tone_amp * ramp * np.sin(2 * np.pi * params.tone_hz * t_s + phase)
        x[:, list(params.tone_leads)] += tone[:, None]
    if params.baseline_amp > 0:
        amp = params.baseline_amp * rng.uniform(0.5, 1.0, size=12)
        phase = rng.uniform(0, 2 * np.pi, size=12)
        x += amp * np.sin(2 * np.pi * params.baseline_hz * t_s[:, None] + phase)
    if params.powerline_amp > 0:
        phase = rng.uniform(0, 2 * np.pi)
        x += (params.powerline_amp * np.sin(2 * np.pi * 50.0 * t_s + phase))[:, None]
    if params.noise_std > 0:
        x += params.noise_std * rng.standard_normal((n, 12))

    rec = EcgRecord(record_id, x.astype(np.float32), params.fs, ALL_LEADS, label)
    return rec, SynthTrace(np.array(peaks), rr, pr, p_amp, qrs_amp, t_amp)


def synth_ecg(label: ClassLabel, params: SynthParams, rng: np.random.Generator,
              record_id: str = "synth") -> EcgRecord:
    """Ten seconds (by default) of 12-lead ECG at 500 Hz for the given class."""
    return synth_ecg_traced(label, params, rng, record_id)[0]


# ---------------------------------------------------------------------------
# Tabular features: (median, Q1, Q3) per class

QUARTILES_AF0 = {
    "age": (75, 68, 81), "P_AXIS": (59, 42, 71), "P_DUR": (119, 108, 127),
    "P_ONSET": (283, 259, 302), "P_OFFSET": (401, 376, 419), "PR_INT": (169, 152, 189),
    "QRS_AXIS": (18, -17, 54), "QRS_DUR": (98, 89, 111), "QRS_ONSET": (453, 446, 458),
    "QRS_OFFSET": (551, 543, 559), "QT_INT": (393, 369, 420), "QTC_INT": (415, 399, 434),
    "RR_INTERVAL": (831, 727, 944), "T_AXIS": (57, 36, 73), "T_OFFSET": (845, 821, 870),
    "V_RATE": (72, 63, 82),
}
QUARTILES_AF1 = {
    "age": (76, 70, 81), "P_AXIS": (61, 42, 74), "P_DUR": (118, 100, 130),
    "P_ONSET": (270, 241, 293), "P_OFFSET": (386, 355, 411), "PR_INT": (179, 159, 202),
    "QRS_AXIS": (13, -24, 51), "QRS_DUR": (102, 92, 120), "QRS_ONSET": (450, 443, 457),
    "QRS_OFFSET": (553, 545, 565), "QT_INT": (406, 381, 433), "QTC_INT": (421, 405, 441),
    "RR_INTERVAL": (871, 766, 986), "T_AXIS": (59, 33, 78), "T_OFFSET": (855, 831, 880),
    "V_RATE": (68, 60, 78),
}
MALE_FRACTION = {ClassLabel.AF0: 0.531, ClassLabel.AF1: 0.574}

_Z75 = norm.ppf(0.75)


@dataclass(frozen=True)
class ShiftedLogNormal:
    """``shift + sign * exp(mu + sigma * Z)``, or a plain normal when sign is 0."""

    shift: float
    sign: int
    mu: float
    sigma: float

    @classmethod
    def from_quartiles(cls, median: float, q1: float, q3: float) -> "ShiftedLogNormal":
        skew = q1 + q3 - 2 * median
        if abs(skew) < 1e-9 * (q3 - q1):
            return cls(median, 0, 0.0, (q3 - q1) / (2 * _Z75))
        # quartiles symmetric in log space about the median fix the shift
        c = (q1 * q3 - median ** 2) / skew
        sign = 1 if skew > 0 else -1
        mu = math.log(sign * (median - c))
        far = q3 if sign > 0 else q1  # the quartile on the long-tail side
        sigma = math.log((far - c) / (median - c))
        return cls(c, sign, mu, sigma / _Z75)

    def sample(self, rng: np.random.Generator, size=None):
        z = rng.standard_normal(size)
        if self.sign == 0:
            return self.shift + self.sigma * z
        return self.shift + self.sign * np.exp(self.mu + self.sigma * z)


def _quartiles(label: ClassLabel, name: str, effect: float) -> tuple[float, float, float]:
    a = np.array(QUARTILES_AF0[name], dtype=float)
    if label == ClassLabel.AF0:
        return tuple(a)
    b = np.array(QUARTILES_AF1[name], dtype=float)
    return tuple(a + effect * (b - a))


def synth_tabular(label: ClassLabel, rng: np.random.Generator, effect: float = 1.0) -> TabularRecord:
    """Features drawn independently from per-class distributions matching the cohort quartiles.

    ``effect`` scales the AF1 departure from AF0 (1 = full cohort difference, 0 = none).
    """
    label = ClassLabel(label)
    p_male = MALE_FRACTION[ClassLabel.AF0]
    if label == ClassLabel.AF1:
        p_male += effect * (MALE_FRACTION[ClassLabel.AF1] - p_male)
    gender = "M" if rng.random() < p_male else "F"
    values = {}
    for name in FEATURES[1:]:
        dist = ShiftedLogNormal.from_quartiles(*_quartiles(label, name, effect))
        lo, hi = (-180.0, 360.0) if name.endswith("_AXIS") else (1e-3, math.inf)
        for _ in range(100):
            v = float(dist.sample(rng))
            if lo <= v <= hi:
                break
        else:
            raise DataError(f"could not draw a valid {name}")
        values[name] = round(v, 1) if name.endswith("_AXIS") else max(round(v, 1), 0.1)
    return TabularRecord(gender=gender, **values)


def synth_dataset(n_af0: int, n_af1: int, seed: int, out_dir, params: SynthParams = SynthParams(),
                  tab_effect: float = 1.0) -> Manifest:
    """Write ``n_af0 + n_af1`` waveform files plus ``manifest.csv`` and ``synth_params.txt``.

    Record ``i`` is generated from its own generator seeded by ``(seed, i)``.
    """
    if n_af0 < 1 or n_af1 < 1:
        raise DataError("need at least one record per class")
    params.validate()
    out = Path(out_dir)
    try:
        (out / "waveforms").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc}") from None
    rows = []
    labels = [ClassLabel.AF0] * n_af0 + [ClassLabel.AF1] * n_af1
    for i, label in enumerate(labels):
        rng = np.random.default_rng([seed, i])
        rid = f"syn_{i:06d}"
        rec = synth_ecg(label, params, rng, rid)
        tab = synth_tabular(label, rng, tab_effect)
        rel = f"waveforms/{rid}.ecg"
        write_ecg(rec, out / rel)
        rows.append(ManifestRow(rid, rel, label, tab))
    write_manifest(rows, out / "manifest.csv")
    (out / "synth_params.txt").write_text(
        params.to_text() + f"seed={seed}\nn_af0={n_af0}\nn_af1={n_af1}\ntab_effect={tab_effect!r}\n"
    )
    return Manifest(tuple(rows), root=out)
