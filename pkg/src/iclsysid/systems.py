"""Random stable time-invariant systems and their simulation.

Two families are sampled:

* LTI: digital Butterworth filters (lowpass/highpass/bandpass/bandstop,
  1-4 poles) stored as cascaded second-order sections. A sampled design must
  pass a frequency-response mask for its class; designs are rejection-sampled
  against that mask.
* NTI: a random stable discrete state-space core (3 or 4 states, modal form)
  wrapped in static nonlinearities, applied per step as

      u' = deadzone(u)  ->  x+ = A x + B u', v = C x + D u'
      w  = stiction(v)  ->  y = clamp(w, -L, L)

  where stiction is a play (backlash) operator with band ``Tc``.

Simulation is pure: zero initial state, output length equals input length.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from typing import BinaryIO, Union

import numpy as np
from scipy import signal as sps

from .errors import NumericOverflowError, ParameterError, SamplingFailureError
from .seeding import rng_from_seed
from .signals import Signal

FILTER_CLASSES = ("lowpass", "highpass", "bandpass", "bandstop")


# --- specs -----------------------------------------------------------------


@dataclass(frozen=True)
class LtiSpec:
    """A stable IIR filter as second-order sections (b0, b1, b2, a1, a2)."""

    order: int
    filter_class: str
    sections: np.ndarray  # shape (n_sections, 5)
    passband_gain: float

    def __post_init__(self):
        if self.filter_class not in FILTER_CLASSES:
            raise ParameterError(f"unknown filter_class {self.filter_class!r}")
        if not 1 <= self.order <= 4:
            raise ParameterError(f"order must be in [1, 4], got {self.order}")
        if self.filter_class in ("bandpass", "bandstop") and self.order < 2:
            raise ParameterError(f"{self.filter_class} requires order >= 2")
        if self.passband_gain <= 0:
            raise ParameterError("passband_gain must be positive")
        sections = np.asarray(self.sections, dtype=np.float64).reshape(-1, 5).copy()
        for a1, a2 in sections[:, 3:]:
            roots = np.roots([1.0, a1, a2])
            if np.any(np.abs(roots) >= 1.0):
                raise ParameterError("section poles must lie strictly inside the unit circle")
        sections.flags.writeable = False
        object.__setattr__(self, "sections", sections)


@dataclass(frozen=True)
class NtiSpec:
    """Stable discrete state space plus deadzone, saturation, and stiction."""

    a: np.ndarray  # (n, n)
    b: np.ndarray  # (n,)
    c: np.ndarray  # (n,)
    d: float
    deadzone_neg: float
    deadzone_pos: float
    saturation_limit: float
    stiction: float

    def __post_init__(self):
        a = np.asarray(self.a, dtype=np.float64)
        b = np.asarray(self.b, dtype=np.float64).ravel()
        c = np.asarray(self.c, dtype=np.float64).ravel()
        n = a.shape[0]
        if a.shape != (n, n) or b.shape != (n,) or c.shape != (n,):
            raise ParameterError("state-space dimensions are inconsistent")
        if np.max(np.abs(np.linalg.eigvals(a))) >= 1.0:
            raise ParameterError("spectral radius of A must be < 1")
        if not self.deadzone_neg <= 0.0 <= self.deadzone_pos:
            raise ParameterError(
                f"deadzone must satisfy d_neg <= 0 <= d_pos, got "
                f"[{self.deadzone_neg}, {self.deadzone_pos}]"
            )
        if self.saturation_limit <= 0:
            raise ParameterError("saturation_limit must be positive")
        if self.stiction < 0:
            raise ParameterError("stiction must be nonnegative")
        if self.dc_gain_of(a, b, c, self.d) <= 0:
            raise ParameterError("DC gain must be positive")
        for name, arr in (("a", a), ("b", b), ("c", c)):
            arr = arr.copy()
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @staticmethod
    def dc_gain_of(a: np.ndarray, b: np.ndarray, c: np.ndarray, d: float) -> float:
        n = a.shape[0]
        return float(c @ np.linalg.solve(np.eye(n) - a, b) + d)

    @property
    def dc_gain(self) -> float:
        return self.dc_gain_of(self.a, self.b, self.c, self.d)

    @property
    def state_order(self) -> int:
        return self.a.shape[0]


@dataclass(frozen=True)
class SystemSpec:
    system_id: int
    seed: int
    dynamics: Union[LtiSpec, NtiSpec]

    @property
    def is_lti(self) -> bool:
        return isinstance(self.dynamics, LtiSpec)


# --- static nonlinearities -------------------------------------------------


def deadzone(v, d_neg: float, d_pos: float):
    """Zero inside [d_neg, d_pos]; shift values outside the band toward zero."""
    if not d_neg <= 0.0 <= d_pos:
        raise ParameterError(f"deadzone requires d_neg <= 0 <= d_pos, got [{d_neg}, {d_pos}]")
    v = np.asarray(v, dtype=np.float64)
    out = np.where(v > d_pos, v - d_pos, np.where(v < d_neg, v - d_neg, 0.0))
    return float(out) if out.ndim == 0 else out


def stiction(v: float, w_prev: float, tc: float) -> float:
    """Play (backlash) operator: hold the previous output within a band of Tc."""
    delta = v - w_prev
    if abs(delta) <= tc:
        return w_prev
    return v - tc * (1.0 if delta > 0 else -1.0)


def _stiction_pass(values: np.ndarray, tc: float) -> np.ndarray:
    if tc == 0.0:
        return values
    out = np.empty_like(values)
    w = 0.0
    lo = values - tc
    hi = values + tc
    for i in range(values.size):
        # Equivalent to stiction(values[i], w, tc): clamp w into [v - tc, v + tc].
        if w < lo[i]:
            w = lo[i]
        elif w > hi[i]:
            w = hi[i]
        out[i] = w
    return out


# --- simulation ------------------------------------------------------------


def frequency_response(spec: LtiSpec, freqs: np.ndarray) -> np.ndarray:
    """Complex gain H(f) of the section cascade at normalized frequencies."""
    freqs = np.asarray(freqs, dtype=np.float64)
    if np.any(freqs < 0) or np.any(freqs > 0.5):
        raise ParameterError("frequencies must lie in [0, 0.5]")
    z1 = np.exp(-2j * np.pi * freqs)
    z2 = z1 * z1
    h = np.ones_like(z1)
    for b0, b1, b2, a1, a2 in spec.sections:
        h = h * (b0 + b1 * z1 + b2 * z2) / (1.0 + a1 * z1 + a2 * z2)
    return h


def simulate(spec: SystemSpec | LtiSpec | NtiSpec, x: Signal) -> Signal:
    """Run the system on the stored sample values from zero initial state.

    Returns a raw (un-normalized) signal with scale 1; callers that need
    O(1) amplitudes normalize afterwards.
    """
    dynamics = spec.dynamics if isinstance(spec, SystemSpec) else spec
    if isinstance(dynamics, LtiSpec):
        y = _simulate_lti(dynamics, x.samples)
    else:
        y = _simulate_nti(dynamics, x.samples)
    bad = np.flatnonzero(~np.isfinite(y))
    if bad.size:
        raise NumericOverflowError("simulation produced a non-finite value", int(bad[0]))
    return Signal(y, scale=1.0)


def _simulate_lti(spec: LtiSpec, x: np.ndarray) -> np.ndarray:
    sos = np.concatenate(
        [spec.sections[:, :3], np.ones((spec.sections.shape[0], 1)), spec.sections[:, 3:]],
        axis=1,
    )
    return sps.sosfilt(sos, x)


def _simulate_nti(spec: NtiSpec, x: np.ndarray) -> np.ndarray:
    u = deadzone(x, spec.deadzone_neg, spec.deadzone_pos)
    # The linear core is time-invariant, so its response is computed through
    # the equivalent transfer function (C-speed recurrence).
    num, den = sps.ss2tf(spec.a, spec.b[:, None], spec.c[None, :], [[spec.d]])
    v = sps.lfilter(num[0], den, u)
    w = _stiction_pass(v, spec.stiction)
    return np.clip(w, -spec.saturation_limit, spec.saturation_limit)


# --- sampling --------------------------------------------------------------


@dataclass(frozen=True)
class LtiSamplingConfig:
    classes: tuple[str, ...] = FILTER_CLASSES
    orders: tuple[int, ...] = (1, 2, 3, 4)
    cutoff_range: tuple[float, float] = (0.02, 0.40)
    min_bandwidth: float = 0.02
    gain_range: tuple[float, float] = (0.5, 2.0)
    max_attempts: int = 64

    def __post_init__(self):
        lo, hi = self.cutoff_range
        if not 0.01 < lo < hi < 0.45:
            raise ParameterError(f"cutoff_range must be ordered within (0.01, 0.45), got {self.cutoff_range}")
        if not set(self.classes) <= set(FILTER_CLASSES):
            raise ParameterError(f"unknown classes in {self.classes}")


@dataclass(frozen=True)
class NtiSamplingConfig:
    state_orders: tuple[int, ...] = (3, 4)
    pole_magnitude: tuple[float, float] = (0.6, 0.98)
    pole_angle: tuple[float, float] = (0.01 * np.pi, 0.5 * np.pi)
    dc_gain_range: tuple[float, float] = (0.5, 2.0)
    deadzone_max: float = 0.1
    saturation_range: tuple[float, float] = (0.6, 1.5)  # relative to DC gain
    stiction_max: float = 0.05
    max_attempts: int = 64

    def __post_init__(self):
        lo, hi = self.pole_magnitude
        if not 0.0 < lo <= hi < 1.0:
            raise ParameterError(f"pole_magnitude must lie within (0, 1), got {self.pole_magnitude}")
        alo, ahi = self.pole_angle
        if not 0.0 < alo <= ahi <= 0.5 * np.pi + 1e-12:
            raise ParameterError(f"pole_angle must lie within (0, pi/2], got {self.pole_angle}")


_MASK_GRID = np.linspace(0.0, 0.5, 513)


def passes_class_mask(spec: LtiSpec) -> bool:
    """Relative-gain mask: >= 0.9 max in the passband, <= 0.1 max in the stopband.

    For band filters the "band" reference point is the interior magnitude
    extremum on the evaluation grid.
    """
    mag = np.abs(frequency_response(spec, _MASK_GRID))
    peak = mag.max()
    lo, hi = mag[0], mag[-1]  # f = 0 and f = 0.5
    interior = mag[1:-1]
    if spec.filter_class == "lowpass":
        return lo >= 0.9 * peak and hi <= 0.1 * peak
    if spec.filter_class == "highpass":
        return hi >= 0.9 * peak and lo <= 0.1 * peak
    if spec.filter_class == "bandpass":
        return interior.max() >= 0.9 * peak and lo <= 0.1 * peak and hi <= 0.1 * peak
    return interior.min() <= 0.1 * peak and lo >= 0.9 * peak and hi >= 0.9 * peak


def sample_lti(seed: int, config: LtiSamplingConfig = LtiSamplingConfig()) -> LtiSpec:
    """Rejection-sample a Butterworth design that passes its class mask."""
    rng = rng_from_seed(seed)
    lo, hi = config.cutoff_range
    for _ in range(config.max_attempts):
        filter_class = str(rng.choice(config.classes))
        order = int(rng.choice(config.orders))
        gain = float(rng.uniform(*config.gain_range))
        if filter_class in ("bandpass", "bandstop"):
            order = max(2, order - order % 2)  # even pole count
            f1 = rng.uniform(lo, hi - config.min_bandwidth)
            f2 = rng.uniform(f1 + config.min_bandwidth, hi)
            wn = [f1 / 0.5, f2 / 0.5]
            n_design = order // 2
        else:
            fc = rng.uniform(lo, hi)
            wn = fc / 0.5
            n_design = order
        sos = sps.butter(n_design, wn, btype=filter_class, output="sos")
        sections = np.concatenate([sos[:, :3], sos[:, 4:]], axis=1)
        sections[0, :3] *= gain
        try:
            spec = LtiSpec(order, filter_class, sections, gain)
        except ParameterError:
            continue
        if passes_class_mask(spec):
            return spec
    raise SamplingFailureError(
        f"no mask-passing LTI design after {config.max_attempts} attempts (seed {seed})"
    )


def sample_nti(seed: int, config: NtiSamplingConfig = NtiSamplingConfig()) -> NtiSpec:
    """Sample a stable NTI system: modal-form core plus random nonlinearities."""
    rng = rng_from_seed(seed)
    for _ in range(config.max_attempts):
        n = int(rng.choice(config.state_orders))
        blocks = []
        remaining = n
        while remaining > 0:
            mag = rng.uniform(*config.pole_magnitude)
            if remaining >= 2 and rng.random() < 0.75:
                ang = rng.uniform(*config.pole_angle)
                re, im = mag * np.cos(ang), mag * np.sin(ang)
                blocks.append(np.array([[re, im], [-im, re]]))
                remaining -= 2
            else:
                blocks.append(np.array([[mag]]))
                remaining -= 1
        a = np.zeros((n, n))
        k = 0
        for blk in blocks:
            m = blk.shape[0]
            a[k : k + m, k : k + m] = blk
            k += m
        b = rng.standard_normal(n)
        c = rng.standard_normal(n)
        d = 0.0
        raw_gain = NtiSpec.dc_gain_of(a, b, c, d)
        if abs(raw_gain) < 1e-6:
            continue
        target_gain = rng.uniform(*config.dc_gain_range)
        c = c * (target_gain / raw_gain)
        d_pos = rng.uniform(0.0, config.deadzone_max)
        d_neg = -rng.uniform(0.0, config.deadzone_max)
        sat = rng.uniform(*config.saturation_range) * target_gain
        tc = rng.uniform(0.0, config.stiction_max)
        try:
            return NtiSpec(a, b, c, d, d_neg, d_pos, sat, tc)
        except ParameterError:
            continue
    raise SamplingFailureError(
        f"no valid NTI system after {config.max_attempts} attempts (seed {seed})"
    )


# --- serialization ---------------------------------------------------------
#
# Self-describing binary record: tag byte (0 = LTI, 1 = NTI), u64 system_id,
# u64 seed, then variant fields as little-endian 64-bit floats.

_LTI_TAG, _NTI_TAG = 0, 1
_CLASS_TAGS = {name: i for i, name in enumerate(FILTER_CLASSES)}


def write_system_spec(fp: BinaryIO, spec: SystemSpec) -> None:
    dyn = spec.dynamics
    if isinstance(dyn, LtiSpec):
        fp.write(struct.pack("<BQQ", _LTI_TAG, spec.system_id, spec.seed))
        fp.write(
            struct.pack(
                "<BBB", dyn.order, _CLASS_TAGS[dyn.filter_class], dyn.sections.shape[0]
            )
        )
        fp.write(struct.pack("<d", dyn.passband_gain))
        fp.write(dyn.sections.astype("<f8").tobytes())
    else:
        n = dyn.state_order
        fp.write(struct.pack("<BQQ", _NTI_TAG, spec.system_id, spec.seed))
        fp.write(struct.pack("<B", n))
        fp.write(dyn.a.astype("<f8").tobytes())
        fp.write(dyn.b.astype("<f8").tobytes())
        fp.write(dyn.c.astype("<f8").tobytes())
        fp.write(
            struct.pack(
                "<5d", dyn.d, dyn.deadzone_neg, dyn.deadzone_pos,
                dyn.saturation_limit, dyn.stiction,
            )
        )


def read_system_spec(fp: BinaryIO) -> SystemSpec:
    tag, system_id, seed = struct.unpack("<BQQ", fp.read(17))
    if tag == _LTI_TAG:
        order, class_tag, n_sections = struct.unpack("<BBB", fp.read(3))
        (gain,) = struct.unpack("<d", fp.read(8))
        sections = np.frombuffer(fp.read(8 * 5 * n_sections), dtype="<f8").reshape(-1, 5)
        dyn: Union[LtiSpec, NtiSpec] = LtiSpec(order, FILTER_CLASSES[class_tag], sections, gain)
    elif tag == _NTI_TAG:
        (n,) = struct.unpack("<B", fp.read(1))
        a = np.frombuffer(fp.read(8 * n * n), dtype="<f8").reshape(n, n)
        b = np.frombuffer(fp.read(8 * n), dtype="<f8")
        c = np.frombuffer(fp.read(8 * n), dtype="<f8")
        d, d_neg, d_pos, sat, tc = struct.unpack("<5d", fp.read(40))
        dyn = NtiSpec(a, b, c, d, d_neg, d_pos, sat, tc)
    else:
        raise ParameterError(f"unknown system tag {tag}")
    return SystemSpec(system_id, seed, dyn)


def spec_debug_dict(spec: SystemSpec) -> dict:
    """JSON-friendly dump for CLI inspection."""
    dyn = spec.dynamics
    base = {"system_id": spec.system_id, "seed": spec.seed}
    if isinstance(dyn, LtiSpec):
        base |= {
            "family": "lti",
            "order": dyn.order,
            "filter_class": dyn.filter_class,
            "passband_gain": dyn.passband_gain,
            "sections": dyn.sections.tolist(),
        }
    else:
        base |= {
            "family": "nti",
            "state_order": dyn.state_order,
            "a": dyn.a.tolist(),
            "b": dyn.b.tolist(),
            "c": dyn.c.tolist(),
            "d": dyn.d,
            "deadzone": [dyn.deadzone_neg, dyn.deadzone_pos],
            "saturation_limit": dyn.saturation_limit,
            "stiction": dyn.stiction,
            "dc_gain": dyn.dc_gain,
        }
    return base
