"""Simulated velocity-control experiments: PI feedback plus feedforward.

Plants are integrated with explicit (forward-Euler) steps at a normalized
timestep. Single-inertia dynamics:

    J * dw/dt = Kt * iq - b * w - Tc * sign(w)

Two-inertia dynamics (motor side measured), with shaft twist delta:

    Jm * dwm/dt = Kt * iq - bm * wm - k * delta - c * (wm - wl)
    Jl * dwl/dt =               k * delta + c * (wm - wl) - bl * wl
    d(delta)/dt = wm - wl

The loop applies iq = clamp(Kp * e + Ki * integral(e) + feedforward) with
anti-windup (the integrator freezes while the output is clamped and is
itself clamped to output_limit / Ki).

Feedforward providers:

* :func:`physics_ff` — discrete inverse dynamics from a plant estimate
  (two-inertia plants use the rigid-body lumping J = Jm + Jl, b = bm + bl);
* :func:`icl_ff` — the finetuned behavior model prompted with one untuned
  (velocity, current) trace, queried with the target velocity.

:func:`experiment_protocol` reproduces the full recipe: collect untuned
chirp prompts and well-tuned ramp/step queries on the training load
conditions, finetune one layer of the behavior model, then score four
controllers on every condition including the held-out one.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

from .behavior import SystemBehaviorModel
from .codec import SignalCodec
from .errors import InstabilityError, ParameterError, StateError
from .signals import Chirp, Ramp, Signal, Step, generate, normalize, rmse

OMEGA_LIMIT = 1e6


# --- plants -------------------------------------------------------------------


@dataclass(frozen=True)
class SingleInertiaPlant:
    inertia: float
    damping: float
    torque_constant: float = 1.0
    coulomb_friction: float = 0.0
    dt: float = 1.0

    def __post_init__(self):
        for name in ("inertia", "damping", "torque_constant", "dt"):
            if getattr(self, name) <= 0:
                raise ParameterError(f"{name} must be positive")
        if self.coulomb_friction < 0:
            raise ParameterError("coulomb_friction must be nonnegative")
        if self.dt >= 2.0 * self.inertia / self.damping:
            raise ParameterError(
                f"dt={self.dt} too large for explicit integration "
                f"(needs dt < {2.0 * self.inertia / self.damping:.4g})"
            )


@dataclass(frozen=True)
class TwoInertiaPlant:
    motor_inertia: float
    load_inertia: float
    shaft_stiffness: float
    shaft_damping: float
    motor_damping: float
    load_damping: float
    torque_constant: float = 1.0
    dt: float = 1.0

    def __post_init__(self):
        for f in dataclasses.fields(self):
            if getattr(self, f.name) <= 0:
                raise ParameterError(f"{f.name} must be positive")
        if np.max(np.abs(np.linalg.eigvals(np.eye(3) + self.dt * self._a()))) >= 1.0:
            raise ParameterError("dt too large: explicit integration is unstable for this plant")

    def _a(self) -> np.ndarray:
        jm, jl = self.motor_inertia, self.load_inertia
        k, c = self.shaft_stiffness, self.shaft_damping
        bm, bl = self.motor_damping, self.load_damping
        return np.array(
            [
                [-(bm + c) / jm, c / jm, -k / jm],
                [c / jl, -(bl + c) / jl, k / jl],
                [1.0, -1.0, 0.0],
            ]
        )


PlantModel = Union[SingleInertiaPlant, TwoInertiaPlant]


@dataclass(frozen=True)
class PIGains:
    kp: float
    ki: float
    output_limit: float

    def __post_init__(self):
        if self.kp < 0 or self.ki < 0:
            raise ParameterError("gains must be nonnegative")
        if self.output_limit <= 0:
            raise ParameterError("output_limit must be positive")


@dataclass(frozen=True)
class MotorTrace:
    omega: Signal
    iq: Signal
    target: Signal

    def __post_init__(self):
        if not len(self.omega) == len(self.iq) == len(self.target):
            raise ParameterError("trace signals must share one length")


@dataclass(frozen=True)
class LoopInternals:
    integrator: np.ndarray
    clamped: np.ndarray


# --- closed loop -----------------------------------------------------------------


def simulate_closed_loop(
    plant: PlantModel,
    gains: PIGains,
    target: Signal,
    feedforward: Signal | None = None,
    return_internals: bool = False,
):
    """Run the PI + feedforward loop from zero initial state."""
    tgt = target.samples
    n = tgt.size
    if feedforward is not None:
        if len(feedforward) != n:
            raise ParameterError("feedforward length must match target length")
        ff = feedforward.samples
    else:
        ff = np.zeros(n)

    dt = plant.dt
    kt = plant.torque_constant
    limit = gains.output_limit
    integ_limit = limit / max(gains.ki, 1e-12)

    omega = np.empty(n)
    iq = np.empty(n)
    integ_trace = np.empty(n)
    clamped_trace = np.zeros(n, dtype=bool)
    integ = 0.0

    if isinstance(plant, SingleInertiaPlant):
        w = 0.0
        for i in range(n):
            e = tgt[i] - w
            u = gains.kp * e + gains.ki * integ + ff[i]
            clamped = abs(u) > limit
            if clamped:
                u = limit if u > 0 else -limit
            else:
                integ = min(max(integ + e * dt, -integ_limit), integ_limit)
            omega[i] = w
            iq[i] = u
            integ_trace[i] = integ
            clamped_trace[i] = clamped
            w = w + dt / plant.inertia * (
                kt * u - plant.damping * w - plant.coulomb_friction * np.sign(w)
            )
            if abs(w) > OMEGA_LIMIT:
                raise InstabilityError("closed loop diverged", i)
    else:
        jm, jl = plant.motor_inertia, plant.load_inertia
        k, c = plant.shaft_stiffness, plant.shaft_damping
        bm, bl = plant.motor_damping, plant.load_damping
        wm = wl = delta = 0.0
        for i in range(n):
            e = tgt[i] - wm
            u = gains.kp * e + gains.ki * integ + ff[i]
            clamped = abs(u) > limit
            if clamped:
                u = limit if u > 0 else -limit
            else:
                integ = min(max(integ + e * dt, -integ_limit), integ_limit)
            omega[i] = wm
            iq[i] = u
            integ_trace[i] = integ
            clamped_trace[i] = clamped
            twist = k * delta + c * (wm - wl)
            wm_new = wm + dt / jm * (kt * u - bm * wm - twist)
            wl_new = wl + dt / jl * (twist - bl * wl)
            delta = delta + dt * (wm - wl)
            wm, wl = wm_new, wl_new
            if abs(wm) > OMEGA_LIMIT or abs(wl) > OMEGA_LIMIT:
                raise InstabilityError("closed loop diverged", i)

    trace = MotorTrace(Signal(omega), Signal(iq), Signal(tgt.copy()))
    if return_internals:
        return trace, LoopInternals(integ_trace, clamped_trace)
    return trace


# --- feedforward providers ----------------------------------------------------------


def physics_ff(plant_estimate: PlantModel, target: Signal) -> Signal:
    """Discrete inverse dynamics of the (estimated) plant along the target.

    iq[n] = (J * (target[n+1] - target[n]) / dt + b * target[n]
             + Tc * sign(target[n])) / Kt

    with the final derivative sample repeated. Two-inertia estimates are
    lumped to a rigid body: J = Jm + Jl, b = bm + bl, no friction term.
    """
    if isinstance(plant_estimate, SingleInertiaPlant):
        j, b = plant_estimate.inertia, plant_estimate.damping
        tc = plant_estimate.coulomb_friction
    else:
        j = plant_estimate.motor_inertia + plant_estimate.load_inertia
        b = plant_estimate.motor_damping + plant_estimate.load_damping
        tc = 0.0
    tgt = target.samples
    dtgt = np.diff(tgt)
    dtgt = np.append(dtgt, dtgt[-1] if dtgt.size else 0.0)
    iq = (j * dtgt / plant_estimate.dt + b * tgt + tc * np.sign(tgt)) / plant_estimate.torque_constant
    return Signal(iq)


def icl_ff(
    model: SystemBehaviorModel, codec: SignalCodec, prompt: MotorTrace, target: Signal
) -> Signal:
    """Feedforward current predicted in-context from one untuned trace.

    The prompt's (velocity, current) pair is embedded as the system example
    with velocity as input and current as output; the target velocity is the
    query. Signals are peak-normalized on the way into the codec and the
    prediction is rescaled by prompt current gain x target peak.
    """
    if not model.finetuned_:
        raise StateError("icl feedforward requires a finetuned behavior model")
    omega_n = normalize(prompt.omega)
    iq_n = normalize(prompt.iq)
    target_n = normalize(target)
    z = model.embed_system(codec.encode(omega_n), codec.encode(iq_n))
    pred = model.predict_from_embedding(z, codec.encode(target_n))
    gain = iq_n.scale / max(omega_n.scale, 1e-12)
    return Signal(pred.samples * (gain * target_n.scale), scale=1.0)


# --- gain schedules ------------------------------------------------------------------


def tuned_gains(
    plant: PlantModel, horizon: int, output_limit: float, settle_fraction: float = 0.1
) -> PIGains:
    """Pole placement for a critically damped response settling in
    ``settle_fraction`` of the horizon (rigid-body lumping for two-inertia)."""
    if isinstance(plant, SingleInertiaPlant):
        j, b = plant.inertia, plant.damping
    else:
        j = plant.motor_inertia + plant.load_inertia
        b = plant.motor_damping + plant.load_damping
    kt = plant.torque_constant
    ts = settle_fraction * horizon * plant.dt
    wn = 4.6 / ts
    kp = max((2.0 * wn * j - b) / kt, 0.0)
    ki = wn * wn * j / kt
    return PIGains(kp, ki, output_limit)


def untuned_gains(gains: PIGains, factor: float = 0.1) -> PIGains:
    return PIGains(gains.kp * factor, gains.ki * factor, gains.output_limit)


# --- experiment protocol ---------------------------------------------------------------


@dataclass(frozen=True)
class ProtocolConfig:
    plants: tuple[PlantModel, ...]
    held_out: int
    horizon: int = 2048
    target_amplitude: float = 1.0
    output_limit: float = 2.0
    settle_fraction: float = 0.1
    untuned_factor: float = 0.1
    prompt_chirp: Chirp = field(default_factory=lambda: Chirp(f0=5e-4, f1=0.05))
    step_onset_fraction: float = 0.125
    finetune_epochs: int = 20
    finetune_learning_rate: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.held_out < len(self.plants):
            raise ParameterError("held_out must index into plants")
        if len(self.plants) < 2:
            raise ParameterError("need at least two plant conditions")


@dataclass(frozen=True)
class ControlRow:
    method: str
    condition: int
    held_out: bool
    query: str
    tracking_rmse: float


@dataclass(frozen=True)
class ControlReport:
    rows: tuple[ControlRow, ...]
    config_echo: dict

    def rmse(self, method: str, query: str | None = None, held_out: bool | None = None) -> float:
        vals = [
            r.tracking_rmse
            for r in self.rows
            if r.method == method
            and (query is None or r.query == query)
            and (held_out is None or r.held_out == held_out)
        ]
        if not vals:
            raise ParameterError(f"no rows for method={method!r}, query={query!r}")
        return float(np.mean(vals))

    def to_json(self) -> str:
        return json.dumps(
            {"rows": [dataclasses.asdict(r) for r in self.rows], "config": self.config_echo},
            indent=2,
        )

    def to_csv(self) -> str:
        lines = ["method,condition,held_out,query,tracking_rmse"]
        for r in self.rows:
            lines.append(
                f"{r.method},{r.condition},{int(r.held_out)},{r.query},{r.tracking_rmse:.8g}"
            )
        return "\n".join(lines) + "\n"

    def save(self, out_dir: str | Path) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.json").write_text(self.to_json())
        (out_dir / "report.csv").write_text(self.to_csv())


METHODS = ("untuned_pi", "well_tuned_pi", "physics_ff", "icl_ff")
QUERIES = ("ramp", "step")


def _targets(config: ProtocolConfig) -> dict[str, Signal]:
    t = config.horizon
    amp = config.target_amplitude
    ramp = generate(Ramp(0.0, 1.0), t, seed=0)
    step = generate(
        Step(amplitude=1.0, onset=int(config.step_onset_fraction * t)), t, seed=0
    )
    return {
        "ramp": Signal(ramp.samples * amp),
        "step": Signal(step.samples * amp),
    }


def _prompt_target(config: ProtocolConfig) -> Signal:
    chirp = generate(config.prompt_chirp, config.horizon, seed=config.seed)
    return Signal(chirp.samples * config.target_amplitude)


def collect_pairs(config: ProtocolConfig, plant: PlantModel):
    """(untuned chirp prompt, well-tuned query traces) for one condition."""
    tuned = tuned_gains(plant, config.horizon, config.output_limit, config.settle_fraction)
    untuned = untuned_gains(tuned, config.untuned_factor)
    prompt = simulate_closed_loop(plant, untuned, _prompt_target(config))
    queries = {}
    for name, target in _targets(config).items():
        ff = physics_ff(plant, target)
        queries[name] = simulate_closed_loop(plant, tuned, target, feedforward=ff)
    return prompt, queries


def experiment_protocol(
    config: ProtocolConfig, model: SystemBehaviorModel, codec: SignalCodec
) -> tuple[ControlReport, SystemBehaviorModel]:
    """Finetune on the training conditions, then score all four methods.

    Finetuning examples pair the untuned chirp trace (normalized velocity ->
    current) with each well-tuned query trace. Evaluation runs untuned PI,
    well-tuned PI, untuned PI + exact-physics feedforward, and untuned PI +
    in-context feedforward on every condition; ``held_out`` marks the
    condition excluded from finetuning.
    """
    examples = []
    for idx, plant in enumerate(config.plants):
        if idx == config.held_out:
            continue
        prompt, queries = collect_pairs(config, plant)
        p_pair = (normalize(prompt.omega), normalize(prompt.iq))
        for trace in queries.values():
            examples.append((p_pair, (normalize(trace.omega), normalize(trace.iq))))
    tuned_model = model.finetune_single_layer(
        examples,
        epochs=config.finetune_epochs,
        learning_rate=config.finetune_learning_rate,
    )

    rows = []
    targets = _targets(config)
    for idx, plant in enumerate(config.plants):
        tuned = tuned_gains(plant, config.horizon, config.output_limit, config.settle_fraction)
        untuned = untuned_gains(tuned, config.untuned_factor)
        prompt = simulate_closed_loop(plant, untuned, _prompt_target(config))
        for query_name, target in targets.items():
            ff_by_method = {
                "untuned_pi": (untuned, None),
                "well_tuned_pi": (tuned, None),
                "physics_ff": (untuned, physics_ff(plant, target)),
                "icl_ff": (untuned, icl_ff(tuned_model, codec, prompt, target)),
            }
            for method, (gains, ff) in ff_by_method.items():
                trace = simulate_closed_loop(plant, gains, target, feedforward=ff)
                rows.append(
                    ControlRow(
                        method=method,
                        condition=idx,
                        held_out=(idx == config.held_out),
                        query=query_name,
                        tracking_rmse=rmse(trace.omega, target),
                    )
                )
    report = ControlReport(tuple(rows), config_echo=_protocol_echo(config))
    return report, tuned_model


def _protocol_echo(config: ProtocolConfig) -> dict:
    echo = dataclasses.asdict(config)
    echo["plants"] = [
        {"type": type(p).__name__, **dataclasses.asdict(p)} for p in config.plants
    ]
    return echo


# --- default experiment configs ----------------------------------------------------


def single_inertia_case(seed: int = 0) -> ProtocolConfig:
    """Five load inertias on a linear motor; the middle one is held out."""
    inertias = (20.0, 40.0, 60.0, 80.0, 100.0)
    plants = tuple(
        SingleInertiaPlant(inertia=j, damping=0.5, torque_constant=1.0) for j in inertias
    )
    return ProtocolConfig(plants=plants, held_out=2, output_limit=2.0, seed=seed)


def two_inertia_case(seed: int = 0) -> ProtocolConfig:
    """Motor driving a compliant load: zero/heavy finetune, light held out."""
    def plant(jl: float) -> TwoInertiaPlant:
        return TwoInertiaPlant(
            motor_inertia=15.0,
            load_inertia=jl,
            shaft_stiffness=0.05,
            shaft_damping=0.8,
            motor_damping=0.3,
            load_damping=0.3,
        )

    plants = (plant(5.0), plant(60.0), plant(25.0))
    return ProtocolConfig(plants=plants, held_out=2, output_limit=2.0, seed=seed)
