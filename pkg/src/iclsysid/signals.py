"""Excitation and response signals.

Everything operates at a fixed unit sample rate: frequencies are expressed in
cycles per sample and must stay strictly below the Nyquist limit of 0.5.
Amplitudes are kept O(1) by peak normalization; the removed peak is stored on
the signal as ``scale`` so the original amplitude can be recovered.

Six excitation families are supported: step, ramp, chirp, multisine, square
PRBS, and band-limited filtered noise. Generation is a pure function of
(kind, length, seed).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import BinaryIO, Union

import numpy as np
from scipy import signal as sps

from .errors import DimensionError, ParameterError
from .seeding import rng_from_seed

SAMPLE_RATE = 1.0
NYQUIST = 0.5


@dataclass(frozen=True)
class Signal:
    """A fixed-rate real-valued sequence plus the peak removed by normalization.

    ``samples * scale`` recovers the pre-normalization amplitude. Instances are
    immutable; the sample buffer is marked read-only on construction.
    """

    samples: np.ndarray
    scale: float = 1.0
    sample_rate: float = SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1 or samples.size == 0:
            raise ParameterError("samples must be a non-empty 1-D sequence")
        if not np.all(np.isfinite(samples)):
            raise ParameterError("samples must be finite")
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise ParameterError(f"scale must be a positive real, got {self.scale}")
        samples = samples.copy()
        samples.flags.writeable = False
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "scale", float(self.scale))

    def __len__(self) -> int:
        return self.samples.size


# --- excitation kinds ------------------------------------------------------


@dataclass(frozen=True)
class Step:
    amplitude: float = 1.0
    onset: int = 0


@dataclass(frozen=True)
class Ramp:
    start: float = 0.0
    stop: float = 1.0


@dataclass(frozen=True)
class Chirp:
    """Linear frequency sweep from f0 to f1 (cycles/sample), zero initial phase."""

    f0: float = 5e-4
    f1: float = 0.05
    amplitude: float = 1.0


@dataclass(frozen=True)
class Multisine:
    """Sum of ``n_harmonics`` harmonics of ``base_freq`` with seeded random phases."""

    n_harmonics: int = 8
    base_freq: float = 0.004


@dataclass(frozen=True)
class SquarePrbs:
    """Pseudo-random binary +/-1 sequence held for ``bit_period`` samples per bit."""

    bit_period: int = 64
    amplitude: float = 1.0


@dataclass(frozen=True)
class FilteredNoise:
    """White Gaussian noise low-passed at ``bandwidth`` cycles/sample."""

    bandwidth: float = 0.1


SignalKind = Union[Step, Ramp, Chirp, Multisine, SquarePrbs, FilteredNoise]

KIND_NAMES: dict[type, str] = {
    Step: "step",
    Ramp: "ramp",
    Chirp: "chirp",
    Multisine: "multisine",
    SquarePrbs: "square_prbs",
    FilteredNoise: "filtered_noise",
}
KINDS_BY_NAME = {name: cls for cls, name in KIND_NAMES.items()}


def kind_name(kind: SignalKind) -> str:
    return KIND_NAMES[type(kind)]


def _validate_kind(kind: SignalKind, length: int) -> None:
    if isinstance(kind, Step):
        if not 0 <= kind.onset < length:
            raise ParameterError(f"onset must lie in [0, {length}), got {kind.onset}")
    elif isinstance(kind, Chirp):
        if not 0 < kind.f0 <= kind.f1 < NYQUIST:
            raise ParameterError(
                f"chirp frequencies must satisfy 0 < f0 <= f1 < {NYQUIST}, "
                f"got f0={kind.f0}, f1={kind.f1}"
            )
    elif isinstance(kind, Multisine):
        if kind.n_harmonics < 1:
            raise ParameterError(f"n_harmonics must be >= 1, got {kind.n_harmonics}")
        if not 0 < kind.n_harmonics * kind.base_freq < NYQUIST:
            raise ParameterError(
                f"base_freq puts the top harmonic at "
                f"{kind.n_harmonics * kind.base_freq}, outside (0, {NYQUIST})"
            )
    elif isinstance(kind, SquarePrbs):
        if kind.bit_period < 1:
            raise ParameterError(f"bit_period must be >= 1, got {kind.bit_period}")
    elif isinstance(kind, FilteredNoise):
        if not 0 < kind.bandwidth < NYQUIST:
            raise ParameterError(
                f"bandwidth must lie in (0, {NYQUIST}), got {kind.bandwidth}"
            )


def generate(kind: SignalKind, length: int, seed: int) -> Signal:
    """Deterministically generate a peak-normalized excitation signal.

    The result is a pure function of (kind, length, seed); kinds without
    inherent randomness ignore the seed.
    """
    if length < 2:
        raise ParameterError(f"length must be >= 2, got {length}")
    _validate_kind(kind, length)
    n = np.arange(length, dtype=np.float64)

    if isinstance(kind, Step):
        raw = np.where(n >= kind.onset, kind.amplitude, 0.0)
    elif isinstance(kind, Ramp):
        raw = np.linspace(kind.start, kind.stop, length)
    elif isinstance(kind, Chirp):
        # Instantaneous frequency f0 + (f1 - f0) * n / (length - 1).
        phase = 2.0 * np.pi * (kind.f0 * n + 0.5 * (kind.f1 - kind.f0) * n * n / (length - 1))
        raw = kind.amplitude * np.sin(phase)
    elif isinstance(kind, Multisine):
        rng = rng_from_seed(seed)
        phases = rng.uniform(0.0, 2.0 * np.pi, kind.n_harmonics)
        k = np.arange(1, kind.n_harmonics + 1, dtype=np.float64)
        raw = np.sin(2.0 * np.pi * kind.base_freq * np.outer(n, k) + phases).sum(axis=1)
    elif isinstance(kind, SquarePrbs):
        rng = rng_from_seed(seed)
        n_bits = -(-length // kind.bit_period)
        bits = rng.integers(0, 2, n_bits).astype(np.float64) * 2.0 - 1.0
        raw = kind.amplitude * np.repeat(bits, kind.bit_period)[:length]
    elif isinstance(kind, FilteredNoise):
        rng = rng_from_seed(seed)
        white = rng.standard_normal(length)
        sos = sps.butter(4, kind.bandwidth / NYQUIST, btype="lowpass", output="sos")
        raw = sps.sosfilt(sos, white)
    else:
        raise ParameterError(f"unknown signal kind {type(kind).__name__}")

    return normalize(Signal(raw))


def normalize(s: Signal) -> Signal:
    """Scale to unit peak, accumulating the removed peak into ``scale``.

    The all-zero signal is returned unchanged; normalization is idempotent.
    """
    peak = float(np.max(np.abs(s.samples)))
    if peak == 0.0:
        return s
    return Signal(s.samples / peak, scale=s.scale * peak, sample_rate=s.sample_rate)


def rmse(a: Signal | np.ndarray, b: Signal | np.ndarray) -> float:
    """Root-mean-square difference between two equal-length signals."""
    xa = a.samples if isinstance(a, Signal) else np.asarray(a, dtype=np.float64)
    xb = b.samples if isinstance(b, Signal) else np.asarray(b, dtype=np.float64)
    if xa.shape != xb.shape:
        raise DimensionError(f"length mismatch: {xa.shape} vs {xb.shape}")
    return float(np.sqrt(np.mean((xa - xb) ** 2)))


# --- serialization ---------------------------------------------------------
#
# Wire format: u64le sample count, f32le samples, f64le scale.


def write_signal(fp: BinaryIO, s: Signal) -> None:
    fp.write(struct.pack("<Q", len(s)))
    fp.write(s.samples.astype("<f4").tobytes())
    fp.write(struct.pack("<d", s.scale))


def read_signal(fp: BinaryIO) -> Signal:
    (count,) = struct.unpack("<Q", fp.read(8))
    samples = np.frombuffer(fp.read(4 * count), dtype="<f4").astype(np.float64)
    (scale,) = struct.unpack("<d", fp.read(8))
    return Signal(samples, scale=scale)


def signal_to_bytes(s: Signal) -> bytes:
    import io

    buf = io.BytesIO()
    write_signal(buf, s)
    return buf.getvalue()
