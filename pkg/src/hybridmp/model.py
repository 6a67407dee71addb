"""Hybrid automaton data model.

A model is a finite set of control locations, each carrying a controlled
vector field, a running cost and a control box, wired together by
transitions. Autonomous transitions fire when the trajectory crosses a
switching manifold (the guard's zero set); controlled transitions fire at a
chosen time. Both apply a jump map to the state, may charge a switching
cost, and may change the state dimension.

Expressions use the naming convention x1..xn for states, u1..um for
controls and t for time. Guards, jumps and switching costs see the source
location's state and t but not the control; the terminal cost sees the
final location's state and t.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable, Sequence

from . import exprlang as ex

AUTONOMOUS = "autonomous"
CONTROLLED = "controlled"


class ModelError(ValueError):
    pass


def state_names(n: int) -> tuple[str, ...]:
    return tuple(f"x{i + 1}" for i in range(n))


def control_names(m: int) -> tuple[str, ...]:
    return tuple(f"u{j + 1}" for j in range(m))


def _parse(expr, allowed: Iterable[str], path: str) -> ex.Expr:
    if isinstance(expr, ex.Expr):
        extra = ex.free_vars(expr) - frozenset(allowed)
        if extra:
            raise ModelError(f"{path}: unknown variable(s) {', '.join(sorted(extra))}")
        return expr
    try:
        return ex.parse(str(expr), allowed)
    except ex.ExprError as err:
        raise ModelError(f"{path}: {err}") from err


@dataclass(frozen=True)
class Location:
    name: str
    state_dim: int
    control_dim: int
    control_box: tuple[tuple[float, float], ...]
    field: tuple[ex.Expr, ...]
    running_cost: ex.Expr

    @property
    def state_vars(self) -> tuple[str, ...]:
        return state_names(self.state_dim)

    @property
    def control_vars(self) -> tuple[str, ...]:
        return control_names(self.control_dim)


def location(name: str, field, running_cost="0", control_box: Sequence[tuple[float, float]] = ()) -> Location:
    """Build a location, parsing any expression given as a string."""
    if not name or not isinstance(name, str):
        raise ModelError(f"location name must be a nonempty string, got {name!r}")
    field = tuple(field)
    n = len(field)
    if n == 0:
        raise ModelError(f"locations[{name}]: empty vector field")
    box = tuple((float(lo), float(hi)) for lo, hi in control_box)
    m = len(box)
    for j, (lo, hi) in enumerate(box):
        if not lo <= hi:
            raise ModelError(f"locations[{name}].control_box[{j}]: lower bound {lo} exceeds {hi}")
    allowed = state_names(n) + control_names(m) + ("t",)
    parsed = tuple(_parse(f, allowed, f"locations[{name}].field[{i}]") for i, f in enumerate(field))
    cost = _parse(running_cost, allowed, f"locations[{name}].running_cost")
    return Location(name, n, m, box, parsed, cost)


@dataclass(frozen=True)
class Transition:
    event: str
    source: str
    target: str
    kind: str  # AUTONOMOUS or CONTROLLED
    jump: tuple[ex.Expr, ...]
    switch_cost: ex.Expr
    guard: ex.Expr | None = None  # manifold; present iff autonomous


def autonomous(event: str, source: str, target: str, guard, jump, switch_cost="0") -> Transition:
    """Transition taken when the guard's zero level set is crossed."""
    return Transition(event, source, target, AUTONOMOUS, tuple(jump), switch_cost, guard)


def controlled(event: str, source: str, target: str, jump, switch_cost="0") -> Transition:
    """Transition taken at a time chosen by the input."""
    return Transition(event, source, target, CONTROLLED, tuple(jump), switch_cost, None)


@dataclass(frozen=True)
class HybridModel:
    locations: tuple[Location, ...]
    transitions: tuple[Transition, ...]
    terminal_cost: ex.Expr

    @property
    def location_names(self) -> tuple[str, ...]:
        return tuple(loc.name for loc in self.locations)

    def location(self, name: str) -> Location:
        for loc in self.locations:
            if loc.name == name:
                return loc
        raise ModelError(f"no location named {name!r}")

    def transition(self, event: str) -> Transition:
        for tr in self.transitions:
            if tr.event == event:
                return tr
        raise ModelError(f"no transition named {event!r}")

    def transitions_from(self, source: str) -> tuple[Transition, ...]:
        return tuple(tr for tr in self.transitions if tr.source == source)

    def find_transition(self, source: str, target: str) -> Transition:
        found = [tr for tr in self.transitions if tr.source == source and tr.target == target]
        if not found:
            raise ModelError(f"no transition from {source!r} to {target!r}")
        if len(found) > 1:
            names = ", ".join(tr.event for tr in found)
            raise ModelError(f"ambiguous transition from {source!r} to {target!r} (candidates: {names})")
        return found[0]

    @property
    def time_varying(self) -> bool:
        return "t" in self._all_free_vars()

    def _all_free_vars(self) -> frozenset[str]:
        out: set[str] = set()
        for loc in self.locations:
            for f in loc.field:
                out |= ex.free_vars(f)
            out |= ex.free_vars(loc.running_cost)
        for tr in self.transitions:
            for j in tr.jump:
                out |= ex.free_vars(j)
            out |= ex.free_vars(tr.switch_cost)
            if tr.guard is not None:
                out |= ex.free_vars(tr.guard)
        out |= ex.free_vars(self.terminal_cost)
        return frozenset(out)


def build_model(locations: Sequence[Location], transitions: Sequence[Transition], terminal_cost) -> HybridModel:
    """Assemble and structurally check a model.

    Transition expressions given as strings are parsed against the source
    location's variables here, since only the assembled model knows the
    dimensions on both sides of a jump.
    """
    locs: dict[str, Location] = {}
    for loc in locations:
        if loc.name in locs:
            raise ModelError(f"duplicate location name {loc.name!r}")
        locs[loc.name] = loc

    seen_events: set[str] = set()
    parsed: list[Transition] = []
    for tr in transitions:
        path = f"transitions[{tr.event}]"
        if not tr.event:
            raise ModelError("transition with empty event name")
        if tr.event in seen_events:
            raise ModelError(f"duplicate transition event {tr.event!r}")
        seen_events.add(tr.event)
        if tr.source not in locs:
            raise ModelError(f"{path}: unknown source location {tr.source!r}")
        if tr.target not in locs:
            raise ModelError(f"{path}: unknown target location {tr.target!r}")
        if tr.kind not in (AUTONOMOUS, CONTROLLED):
            raise ModelError(f"{path}: kind must be {AUTONOMOUS!r} or {CONTROLLED!r}, got {tr.kind!r}")
        if tr.kind == AUTONOMOUS and tr.guard is None:
            raise ModelError(f"{path}: autonomous transition needs a guard manifold")
        if tr.kind == CONTROLLED and tr.guard is not None:
            raise ModelError(f"{path}: controlled transition cannot have a guard")
        n_src = locs[tr.source].state_dim
        n_tgt = locs[tr.target].state_dim
        allowed = state_names(n_src) + ("t",)
        if len(tr.jump) != n_tgt:
            raise ModelError(
                f"{path}: jump map has {len(tr.jump)} component(s) but target "
                f"{tr.target!r} has state dimension {n_tgt}"
            )
        jump = tuple(_parse(j, allowed, f"{path}.jump[{i}]") for i, j in enumerate(tr.jump))
        cost = _parse(tr.switch_cost, allowed, f"{path}.switch_cost")
        guard = None if tr.guard is None else _parse(tr.guard, allowed, f"{path}.guard")
        parsed.append(replace(tr, jump=jump, switch_cost=cost, guard=guard))

    if not locs:
        raise ModelError("model has no locations")
    max_dim = max(loc.state_dim for loc in locs.values())
    g_allowed = state_names(max_dim) + ("t",)
    g = _parse(terminal_cost, g_allowed, "terminal")
    return HybridModel(tuple(locs.values()), tuple(parsed), g)


def validate(model: HybridModel) -> list[str]:
    """Soft structural audit; returns a list of issue descriptions.

    Hard faults (dangling names, arity mismatches) already raise during
    build_model; this reports conditions that are legal but usually
    unintended, plus reachability facts a schedule writer cares about.
    """
    issues: list[str] = []
    targets = {tr.target for tr in model.transitions} | ({model.locations[0].name} if model.locations else set())
    for loc in model.locations:
        name = loc.name
        for j, (lo, hi) in enumerate(loc.control_box):
            if lo == hi:
                issues.append(f"locations[{name}].control_box[{j}]: degenerate interval [{lo}, {hi}]")
        if name not in targets and not any(tr.source == name for tr in model.transitions):
            issues.append(f"locations[{name}]: isolated (no transition touches it)")
    for tr in model.transitions:
        if tr.kind == AUTONOMOUS and isinstance(tr.guard, ex.Const):
            issues.append(f"transitions[{tr.event}].guard: constant manifold never defines a crossing")
        if tr.source == tr.target and tr.kind == CONTROLLED:
            issues.append(f"transitions[{tr.event}]: controlled self-loop has no effect unless the jump moves the state")
    seen_pairs: dict[tuple[str, str], str] = {}
    for tr in model.transitions:
        key = (tr.source, tr.target)
        if key in seen_pairs:
            issues.append(
                f"transitions[{tr.event}]: second transition for pair {key}; "
                f"schedules must then name events explicitly (also: {seen_pairs[key]})"
            )
        else:
            seen_pairs[key] = tr.event
    return issues


# ---------------------------------------------------------------------------
# Schedules


@dataclass(frozen=True)
class LocationSchedule:
    """A fixed sequence of locations and the transition taken between each pair."""

    locations: tuple[str, ...]
    events: tuple[str, ...]

    def __post_init__(self):
        if not self.locations:
            raise ModelError("empty schedule")
        if len(self.events) != len(self.locations) - 1:
            raise ModelError(
                f"schedule with {len(self.locations)} locations needs "
                f"{len(self.locations) - 1} events, got {len(self.events)}"
            )

    @property
    def n_switches(self) -> int:
        return len(self.events)


def schedule(model: HybridModel, locations: Sequence[str], events: Sequence[str] | None = None) -> LocationSchedule:
    """Build a schedule, resolving each transition by (source, target) when unique."""
    locations = tuple(locations)
    if events is None:
        events = tuple(
            model.find_transition(a, b).event for a, b in zip(locations[:-1], locations[1:])
        )
    sched = LocationSchedule(locations, tuple(events))
    problems = schedule_check(model, sched)
    if problems:
        raise ModelError("; ".join(problems))
    return sched


def schedule_check(model: HybridModel, sched: LocationSchedule) -> list[str]:
    """Verify a schedule is walkable on the model; returns issues, empty if fine."""
    issues: list[str] = []
    known = set(model.location_names)
    for name in sched.locations:
        if name not in known:
            issues.append(f"schedule location {name!r} does not exist")
    if issues:
        return issues
    for i, event in enumerate(sched.events):
        try:
            tr = model.transition(event)
        except ModelError as err:
            issues.append(str(err))
            continue
        if tr.source != sched.locations[i] or tr.target != sched.locations[i + 1]:
            issues.append(
                f"schedule step {i}: event {event!r} joins {tr.source!r}->{tr.target!r}, "
                f"not {sched.locations[i]!r}->{sched.locations[i + 1]!r}"
            )
    final = model.location(sched.locations[-1])
    g_vars = ex.free_vars(model.terminal_cost) - {"t"}
    ok_vars = set(state_names(final.state_dim))
    extra = g_vars - ok_vars
    if extra:
        issues.append(
            f"terminal cost references {', '.join(sorted(extra))} but the final "
            f"location {final.name!r} has state dimension {final.state_dim}"
        )
    return issues


def schedule_kinds(model: HybridModel, sched: LocationSchedule) -> tuple[str, ...]:
    return tuple(model.transition(e).kind for e in sched.events)
