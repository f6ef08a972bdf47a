"""Discrete-time household load simulator.

A scenario lists appliances and timed actions. ``Household`` steps through it
one sample at a time (the meter service drives it incrementally), and
``simulate`` runs it to completion. Given the same scenario and seed, both
paths produce the same samples bit for bit.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

KINDS = ("constant_load", "spiky_cycler", "fluctuating_load")
VERBS = ("ON", "OFF", "DOOR_OPEN", "DOOR_CLOSE")

# tolerance on thermostat threshold comparisons; keeps float drift from
# shifting a toggle by one step
_THRESHOLD_EPS = 1e-9


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class Thermostat:
    temp_low: float
    temp_high: float
    cool_rate: float
    warm_rate: float
    door_open_warm_multiplier: float = 1.0
    initial_temp: float | None = None
    initial_on: bool = False

    def validate(self, owner: str) -> None:
        if not self.temp_low < self.temp_high:
            raise ScenarioError(f"{owner}: temp_low must be below temp_high")
        if self.cool_rate <= 0 or self.warm_rate <= 0:
            raise ScenarioError(f"{owner}: cool_rate and warm_rate must be positive")
        if self.door_open_warm_multiplier < 1:
            raise ScenarioError(f"{owner}: door_open_warm_multiplier must be >= 1")


@dataclass(frozen=True)
class ApplianceModel:
    id: str
    kind: str
    steady_power: float
    spike_peak: float | None = None
    spike_duration: float = 0.0
    cycle: Thermostat | None = None
    fluctuation_sigma: float = 0.0

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ScenarioError(f"{self.id}: unknown kind {self.kind!r}")
        if self.steady_power <= 0:
            raise ScenarioError(f"{self.id}: steady_power must be positive")
        if self.kind == "spiky_cycler":
            if self.cycle is None:
                raise ScenarioError(f"{self.id}: spiky_cycler needs thermostat parameters")
            self.cycle.validate(self.id)
            if self.peak < self.steady_power:
                raise ScenarioError(f"{self.id}: spike_peak below steady_power")
            if self.spike_duration < 0:
                raise ScenarioError(f"{self.id}: negative spike_duration")
        if self.fluctuation_sigma < 0:
            raise ScenarioError(f"{self.id}: negative fluctuation_sigma")

    @property
    def peak(self) -> float:
        return self.steady_power if self.spike_peak is None else self.spike_peak


@dataclass(frozen=True)
class ScenarioAction:
    t_offset: float
    appliance_id: str
    verb: str


@dataclass(frozen=True)
class Scenario:
    appliances: tuple[ApplianceModel, ...]
    actions: tuple[ScenarioAction, ...]
    duration: float
    sample_rate: float = 1.0
    baseline_power: float = 0.0
    noise_sigma: float = 5.0
    rng_seed: int = 0
    name: str = "scenario"

    def validate(self) -> None:
        if self.duration <= 0:
            raise ScenarioError("duration must be positive")
        if self.sample_rate <= 0:
            raise ScenarioError("sample_rate must be positive")
        if self.noise_sigma < 0:
            raise ScenarioError("noise_sigma must be non-negative")
        ids = [a.id for a in self.appliances]
        if len(set(ids)) != len(ids):
            raise ScenarioError(f"duplicate appliance ids in {ids}")
        by_id = {a.id: a for a in self.appliances}
        for a in self.appliances:
            a.validate()
        last = -math.inf
        for i, act in enumerate(self.actions):
            where = f"action #{i} ({act.t_offset} s, {act.appliance_id}, {act.verb})"
            if act.appliance_id not in by_id:
                raise ScenarioError(f"{where}: unknown appliance id")
            if act.verb not in VERBS:
                raise ScenarioError(f"{where}: unknown verb")
            if act.verb.startswith("DOOR") and by_id[act.appliance_id].kind != "spiky_cycler":
                raise ScenarioError(f"{where}: door verbs need a spiky_cycler")
            if act.t_offset < last:
                raise ScenarioError(f"{where}: actions not sorted by time")
            if act.t_offset < 0:
                raise ScenarioError(f"{where}: negative time offset")
            last = act.t_offset

    @property
    def n_samples(self) -> int:
        return int(round(self.duration * self.sample_rate))

    @property
    def period_ms(self) -> float:
        return 1000.0 / self.sample_rate

    def sample_time_ms(self, i: int) -> int:
        return int(round(i * 1000.0 / self.sample_rate))

    def with_overrides(self, **changes) -> "Scenario":
        return replace(self, **changes)


# -- scenario files ---------------------------------------------------------

def _appliance_from_dict(d: dict) -> ApplianceModel:
    cycle = d.get("cycle")
    return ApplianceModel(
        id=d["id"],
        kind=d["kind"],
        steady_power=float(d["steady_w"]),
        spike_peak=None if d.get("spike_peak_w") is None else float(d["spike_peak_w"]),
        spike_duration=float(d.get("spike_duration_s", 0.0)),
        cycle=Thermostat(**cycle) if cycle else None,
        fluctuation_sigma=float(d.get("fluctuation_sigma_w", 0.0)),
    )


def scenario_from_dict(doc: dict, name: str = "scenario") -> Scenario:
    try:
        scenario = Scenario(
            appliances=tuple(_appliance_from_dict(a) for a in doc["appliances"]),
            actions=tuple(
                ScenarioAction(float(a["t_s"]), a["appliance"], a["verb"]) for a in doc["actions"]
            ),
            duration=float(doc["duration_s"]),
            sample_rate=float(doc["sample_rate_hz"]),
            baseline_power=float(doc["baseline_w"]),
            noise_sigma=float(doc["noise_sigma_w"]),
            rng_seed=int(doc["seed"]),
            name=doc.get("name", name),
        )
    except KeyError as exc:
        raise ScenarioError(f"scenario is missing key {exc}") from None
    except TypeError as exc:
        raise ScenarioError(f"malformed scenario: {exc}") from None
    scenario.validate()
    return scenario


def load_scenario(path) -> Scenario:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    return scenario_from_dict(doc, name=path.stem)


# -- thermostat -------------------------------------------------------------

@dataclass(frozen=True)
class ThermostatState:
    temp: float
    on: bool
    on_elapsed_s: float = 0.0


def step_thermostat(state: ThermostatState, params: Thermostat, dt: float,
                    door_open: bool = False) -> ThermostatState:
    """Advance a compressor thermostat by ``dt`` seconds.

    Cooling runs until ``temp_low``, warming until ``temp_high``. An open door
    speeds warming and slows cooling by the same multiplier. The temperature
    is clamped to the threshold at each switch, so without door events every
    cycle has the same length.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    mult = params.door_open_warm_multiplier if door_open else 1.0
    if state.on:
        temp = state.temp - params.cool_rate / mult * dt
        if temp <= params.temp_low + _THRESHOLD_EPS:
            return ThermostatState(params.temp_low, False, 0.0)
        return ThermostatState(temp, True, state.on_elapsed_s + dt)
    temp = state.temp + params.warm_rate * mult * dt
    if temp >= params.temp_high - _THRESHOLD_EPS:
        return ThermostatState(params.temp_high, True, 0.0)
    return ThermostatState(temp, False, 0.0)


def initial_thermostat(params: Thermostat) -> ThermostatState:
    temp = params.temp_low if params.initial_temp is None else params.initial_temp
    on = params.initial_on
    if not on and temp >= params.temp_high - _THRESHOLD_EPS:
        on = True
    elif on and temp <= params.temp_low + _THRESHOLD_EPS:
        on = False
    return ThermostatState(temp, on, 0.0)


# -- engine -----------------------------------------------------------------

@dataclass(frozen=True)
class TruthEvent:
    t_ms: int
    appliance: str
    verb: str


@dataclass
class GroundTruth:
    events: list[TruthEvent]
    traces: dict[str, np.ndarray]


@dataclass(frozen=True)
class Frame:
    """Everything the simulator knows about one sample instant."""

    index: int
    t_ms: int
    aggregate: float
    loads: tuple[float, ...]
    events: tuple[TruthEvent, ...] = ()


@dataclass
class _ApplianceState:
    on: bool = False
    door_open: bool = False
    thermo: ThermostatState | None = None
    walk: float = 0.0


class Household:
    """Incremental simulator: call ``step()`` once per sample."""

    def __init__(self, scenario: Scenario):
        scenario.validate()
        self.scenario = scenario
        self.rng = np.random.default_rng(scenario.rng_seed)
        self.index = 0
        self._action_cursor = 0
        self._action_ms = [int(round(a.t_offset * 1000)) for a in scenario.actions]
        self._dt = 1.0 / scenario.sample_rate
        self._states = {}
        for a in scenario.appliances:
            st = _ApplianceState()
            if a.kind == "spiky_cycler":
                st.thermo = initial_thermostat(a.cycle)
                st.on = st.thermo.on
            self._states[a.id] = st
        self._prev_on = {a.id: False for a in scenario.appliances}

    @property
    def done(self) -> bool:
        return self.index >= self.scenario.n_samples

    def _apply_action(self, action: ScenarioAction) -> None:
        st = self._states[action.appliance_id]
        model = next(a for a in self.scenario.appliances if a.id == action.appliance_id)
        if action.verb == "DOOR_OPEN":
            st.door_open = True
        elif action.verb == "DOOR_CLOSE":
            st.door_open = False
        elif model.kind == "spiky_cycler":
            # forced compressor switch; the thermostat takes over afterwards
            want = action.verb == "ON"
            if st.thermo.on != want:
                st.thermo = ThermostatState(st.thermo.temp, want, 0.0)
        else:
            want = action.verb == "ON"
            if want and not st.on:
                st.walk = 0.0
            st.on = want

    def _power(self, model: ApplianceModel, st: _ApplianceState) -> float:
        if model.kind == "spiky_cycler":
            if not st.thermo.on:
                return 0.0
            if st.thermo.on_elapsed_s < model.spike_duration - _THRESHOLD_EPS:
                return model.peak
            return model.steady_power
        if not st.on:
            return 0.0
        if model.kind == "fluctuating_load" and model.fluctuation_sigma > 0:
            sigma = model.fluctuation_sigma
            st.walk = float(np.clip(st.walk + self.rng.normal(0.0, sigma), -sigma, sigma))
            # keep strictly positive so ON intervals stay visible in the trace
            return max(model.steady_power + st.walk, 1e-3)
        return model.steady_power

    def step(self) -> Frame:
        if self.done:
            raise StopIteration("scenario finished")
        sc = self.scenario
        i = self.index
        t_ms = sc.sample_time_ms(i)
        while self._action_cursor < len(sc.actions) and self._action_ms[self._action_cursor] <= t_ms:
            self._apply_action(sc.actions[self._action_cursor])
            self._action_cursor += 1

        loads = []
        events = []
        for model in sc.appliances:
            st = self._states[model.id]
            p = self._power(model, st)
            loads.append(p)
            on = p > 0
            if on != self._prev_on[model.id]:
                events.append(TruthEvent(t_ms, model.id, "ON" if on else "OFF"))
                self._prev_on[model.id] = on

        total = sc.baseline_power + math.fsum(loads)
        if sc.noise_sigma > 0:
            total = max(total + self.rng.normal(0.0, sc.noise_sigma), 0.0)

        for model in sc.appliances:
            st = self._states[model.id]
            if st.thermo is not None:
                st.thermo = step_thermostat(st.thermo, model.cycle, self._dt, st.door_open)
        self.index += 1
        return Frame(i, t_ms, total, tuple(loads), tuple(events))

    def __iter__(self):
        while not self.done:
            yield self.step()


@dataclass
class SimulationResult:
    t_ms: np.ndarray
    aggregate: np.ndarray
    truth: GroundTruth


def simulate(scenario: Scenario) -> SimulationResult:
    house = Household(scenario)
    n = scenario.n_samples
    t = np.empty(n, dtype=np.int64)
    agg = np.empty(n)
    loads = np.zeros((len(scenario.appliances), n))
    events: list[TruthEvent] = []
    for frame in house:
        t[frame.index] = frame.t_ms
        agg[frame.index] = frame.aggregate
        loads[:, frame.index] = frame.loads
        events.extend(frame.events)
    traces = {a.id: loads[k] for k, a in enumerate(scenario.appliances)}
    return SimulationResult(t, agg, GroundTruth(events, traces))


# -- exports ----------------------------------------------------------------

def truth_lines(events) -> list[str]:
    return [json.dumps({"t_ms": e.t_ms, "appliance": e.appliance, "verb": e.verb}) for e in events]


def read_truth(path) -> list[TruthEvent]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                out.append(TruthEvent(int(d["t_ms"]), d["appliance"], d["verb"]))
    return out


def trace_lines(result: SimulationResult, per_appliance: bool = True) -> list[str]:
    ids = list(result.truth.traces) if per_appliance else []
    lines = [",".join(["t_ms", "aggregate_w", *ids])]
    cols = [result.truth.traces[k] for k in ids]
    for i, t in enumerate(result.t_ms):
        row = [str(int(t)), repr(float(result.aggregate[i]))]
        row.extend(repr(float(c[i])) for c in cols)
        lines.append(",".join(row))
    return lines
