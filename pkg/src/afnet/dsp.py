"""Resampling and Butterworth band-pass filtering in second-order sections."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba
import numpy as np


class FilterError(ValueError):
    pass


@dataclass(frozen=True)
class BandSpec:
    low_hz: float
    high_hz: float

    def validate(self, fs: float) -> None:
        if not self.low_hz > 0:
            raise FilterError(f"low cutoff must be > 0 Hz, got {self.low_hz}")
        if not self.high_hz > self.low_hz:
            raise FilterError(f"high cutoff {self.high_hz} must exceed low cutoff {self.low_hz}")
        if not self.high_hz < fs / 2:
            raise FilterError(f"high cutoff {self.high_hz} Hz must be below Nyquist {fs / 2} Hz")

    @property
    def name(self) -> str:
        return f"{self.low_hz:g}-{self.high_hz:g}"

    @classmethod
    def parse(cls, text: str) -> "BandSpec":
        lo, hi = text.strip().strip("[]").split("-")
        return cls(float(lo), float(hi))


# Table order: full range, its three thirds, then the thirds of the best third.
BAND_CATALOG: tuple[BandSpec, ...] = (
    BandSpec(5, 50),
    BandSpec(5, 20),
    BandSpec(20, 35),
    BandSpec(35, 50),
    BandSpec(5, 10),
    BandSpec(10, 15),
    BandSpec(15, 20),
)


@dataclass(frozen=True)
class SosFilter:
    """Cascade of biquads, one row ``(b0, b1, b2, a1, a2)`` per section (a0 = 1)."""

    sections: np.ndarray
    fs: float
    band: BandSpec | None = None
    order: int = 0
    kind: str = "bandpass"

    def __post_init__(self):
        sos = np.array(self.sections, dtype=np.float64).reshape(-1, 5)
        sos.setflags(write=False)
        object.__setattr__(self, "sections", sos)

    @classmethod
    def identity(cls, fs: float = 500.0) -> "SosFilter":
        return cls(np.array([[1.0, 0.0, 0.0, 0.0, 0.0]]), fs=fs, kind="identity")

    def poles(self) -> np.ndarray:
        out = []
        for _, _, _, a1, a2 in self.sections:
            out.extend(np.roots([1.0, a1, a2]))
        return np.array(out)

    def is_stable(self) -> bool:
        return bool(np.all(np.abs(self.poles()) < 1.0))

    def to_csv(self) -> str:
        return "".join(",".join(repr(float(c)) for c in row) + "\n" for row in self.sections)


def _butter_prototype(order: int) -> np.ndarray:
    k = np.arange(1, order + 1)
    return np.exp(1j * np.pi * (2 * k + order - 1) / (2 * order))


def design_butterworth_bandpass(band: BandSpec, fs: float, order: int = 4) -> SosFilter:
    """Digital Butterworth band-pass of prototype order ``order``.

    The low-pass prototype is shifted to the band in the analog domain and
    discretized by the bilinear transform, with both cutoffs prewarped so the
    -3 dB points land exactly on ``band``. The result has ``order`` sections.
    """
    band.validate(fs)
    if order < 2 or order % 2:
        raise FilterError(f"order must be a positive even integer, got {order}")

    fs2 = 2.0 * fs
    w_lo = fs2 * math.tan(math.pi * band.low_hz / fs)
    w_hi = fs2 * math.tan(math.pi * band.high_hz / fs)
    bw = w_hi - w_lo
    w0_sq = w_lo * w_hi

    # low-pass -> band-pass: each prototype pole p splits into the roots of
    # s^2 - p*bw*s + w0^2; N zeros land at s=0, N at infinity
    proto = _butter_prototype(order)
    pb = proto * bw / 2.0
    disc = np.sqrt(pb * pb - w0_sq + 0j)
    analog_poles = np.concatenate([pb + disc, pb - disc])
    gain = bw ** order

    z_poles = (fs2 + analog_poles) / (fs2 - analog_poles)
    # zeros at s=0 map to z=1; zeros at infinity map to z=-1
    gain = gain * np.real(fs2 ** order / np.prod(fs2 - analog_poles))

    upper = z_poles[z_poles.imag > 0]
    if len(upper) != order:
        raise FilterError("pole pairing failed; band too narrow for this order")
    upper = upper[np.argsort(np.abs(upper))]
    per_section = abs(gain) ** (1.0 / order)
    sign = np.sign(gain)
    rows = []
    for i, p in enumerate(upper):
        g = per_section * (sign if i == 0 else 1.0)
        rows.append([g, 0.0, -g, -2.0 * p.real, abs(p) ** 2])
    return SosFilter(np.array(rows), fs=fs, band=band, order=order)


def design_butterworth_lowpass(cutoff_hz: float, fs: float, order: int = 8) -> SosFilter:
    """Digital Butterworth low-pass (bilinear, prewarped); used for anti-aliasing."""
    if not 0 < cutoff_hz < fs / 2:
        raise FilterError(f"cutoff {cutoff_hz} Hz outside (0, {fs / 2})")
    if order < 2 or order % 2:
        raise FilterError(f"order must be a positive even integer, got {order}")
    fs2 = 2.0 * fs
    wc = fs2 * math.tan(math.pi * cutoff_hz / fs)
    analog_poles = wc * _butter_prototype(order)
    z_poles = (fs2 + analog_poles) / (fs2 - analog_poles)
    upper = z_poles[z_poles.imag > 0]
    upper = upper[np.argsort(np.abs(upper))]
    rows = []
    for p in upper:
        a1, a2 = -2.0 * p.real, abs(p) ** 2
        g = (1.0 + a1 + a2) / 4.0  # unit DC gain per section; zeros at z=-1
        rows.append([g, 2.0 * g, g, a1, a2])
    return SosFilter(np.array(rows), fs=fs, order=order, kind="lowpass")


def frequency_response(filt: SosFilter, freq_hz) -> np.ndarray | float:
    """Linear magnitude ``|H(e^{jw})|`` at ``freq_hz`` (scalar or array)."""
    f = np.asarray(freq_hz, dtype=np.float64)
    if np.any(f < 0) or np.any(f > filt.fs / 2):
        raise FilterError(f"frequency outside [0, {filt.fs / 2}] Hz")
    z1 = np.exp(-1j * 2 * np.pi * f / filt.fs)
    z2 = z1 * z1
    h = np.ones_like(z1)
    for b0, b1, b2, a1, a2 in filt.sections:
        h = h * (b0 + b1 * z1 + b2 * z2) / (1.0 + a1 * z1 + a2 * z2)
    mag = np.abs(h)
    return float(mag) if mag.ndim == 0 else mag


@numba.njit(cache=True)
def _sosfilt_df2t(sos, x):
    n, m = x.shape
    y = np.empty((n, m), dtype=np.float64)
    for j in range(m):
        for i in range(n):
            y[i, j] = x[i, j]
    for s in range(sos.shape[0]):
        b0, b1, b2, a1, a2 = sos[s, 0], sos[s, 1], sos[s, 2], sos[s, 3], sos[s, 4]
        for j in range(m):
            z1 = 0.0
            z2 = 0.0
            for i in range(n):
                xi = y[i, j]
                yi = b0 * xi + z1
                z1 = b1 * xi - a1 * yi + z2
                z2 = b2 * xi - a2 * yi
                y[i, j] = yi
    return y


def apply_sos(filt: SosFilter, signal: np.ndarray) -> np.ndarray:
    """Causal single-pass DF-II-transposed cascade from zero state.

    ``signal`` is a vector or a time-major ``[n_samples, n_leads]`` matrix;
    each column is filtered independently. Output dtype follows the input.
    """
    x = np.asarray(signal)
    if x.shape[0] == 0:
        raise FilterError("cannot filter an empty signal")
    if not np.isfinite(x).all():
        raise FilterError("signal contains NaN/Inf")
    squeeze = x.ndim == 1
    x2 = x.reshape(len(x), -1).astype(np.float64)
    y = _sosfilt_df2t(np.ascontiguousarray(filt.sections), np.ascontiguousarray(x2))
    y = y.astype(x.dtype if x.dtype.kind == "f" else np.float64)
    return y[:, 0] if squeeze else y


ANTI_ALIAS_ORDER = 8


@dataclass(frozen=True)
class Decimated:
    signal: np.ndarray
    fs: float
    dropped_trailing: bool = field(default=False)


def decimate_by_two(signal: np.ndarray, fs: float) -> Decimated:
    """Anti-alias low-pass at 0.8 x the target Nyquist, then keep every second sample."""
    x = np.asarray(signal)
    if not fs > 0:
        raise FilterError(f"fs must be positive, got {fs}")
    if x.shape[0] == 0:
        raise FilterError("cannot decimate an empty signal")
    if fs % 2:
        raise FilterError(f"fs must be even to halve exactly, got {fs}")
    dropped = x.shape[0] % 2 == 1
    if dropped:
        x = x[:-1]
    lp = design_butterworth_lowpass(0.8 * fs / 4, fs, ANTI_ALIAS_ORDER)
    y = apply_sos(lp, x)[::2]
    return Decimated(np.ascontiguousarray(y), fs / 2, dropped)
