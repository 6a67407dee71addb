"""Event-driven simulation of hybrid trajectories.

A run walks a fixed location schedule: each segment integrates the active
location's field with Dormand-Prince 5(4) and dense output, watching every
switching manifold leaving the location. Autonomous switches are localized
by bisection on the dense interpolant; controlled switches happen at the
time given in the input. Jump maps are applied between segments.

Runs never raise for dynamic failures; the trajectory carries an outcome:

``completed``              reached the final time through the schedule
``manifold_termination``   hit a manifold tangentially (no transversal exit)
``zeno``                   a dwell shorter than the guard threshold
``error``                  anything else (unscheduled event, blow-up, ...)
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import exprlang as ex
from . import model as md
from .kernels import programs as bp
from .kernels import rk45_segment

COMPLETED = "completed"
MANIFOLD_TERMINATION = "manifold_termination"
ZENO = "zeno"
ERROR = "error"


@dataclass(frozen=True)
class SimConfig:
    rtol: float = 1e-9
    atol: float = 1e-12
    event_tol: float = 1e-9
    transversality_eps: float = 1e-6
    min_dwell: float | None = None  # default: 1e-9 * horizon length
    max_switches: int = 64
    max_steps: int = 10000

    def dwell(self, t0: float, tf: float) -> float:
        return self.min_dwell if self.min_dwell is not None else 1e-9 * abs(tf - t0)


# ---------------------------------------------------------------------------
# Segment controls


@dataclass(frozen=True)
class ConstantControl:
    values: tuple[float, ...]


@dataclass(frozen=True)
class PiecewiseLinearControl:
    """Linear interpolation over absolute times; held constant outside."""

    times: tuple[float, ...]
    values: tuple[tuple[float, ...], ...]  # one row per control component

    def __post_init__(self):
        if len(self.times) < 2:
            raise ValueError("piecewise linear control needs at least two nodes")
        for row in self.values:
            if len(row) != len(self.times):
                raise ValueError("control node row length does not match the time grid")


@dataclass(frozen=True)
class FeedbackControl:
    """Closed-loop control u_j = expr(x, t)."""

    exprs: tuple[ex.Expr, ...]


Control = ConstantControl | PiecewiseLinearControl | FeedbackControl


def _parse_feedback(exprs, n_x: int) -> FeedbackControl:
    allowed = md.state_names(n_x) + ("t",)
    return FeedbackControl(tuple(ex.parse(e, allowed) if not isinstance(e, ex.Expr) else e for e in exprs))


@dataclass(frozen=True)
class HybridInput:
    """Open-loop input: one control per schedule segment plus the times of
    controlled switches (None marks autonomous positions)."""

    controls: tuple[Control, ...]
    switch_times: tuple[float | None, ...] = ()


# ---------------------------------------------------------------------------
# Compilation cache


def _var_order(n_x: int, n_u: int, n_lam: int = 0) -> tuple[str, ...]:
    names = ("t",) + md.state_names(n_x) + md.control_names(n_u)
    if n_lam:
        names = names + tuple(f"lam{i + 1}" for i in range(n_lam))
    return names


class CompiledModel:
    """Bytecode caches for one model; safe to reuse across runs."""

    def __init__(self, model: md.HybridModel):
        self.model = model
        self._field: dict[str, bp.ProgramPack] = {}
        self._man: dict[tuple[str, tuple[str, ...]], tuple[bp.ProgramPack, bp.ProgramPack]] = {}
        self._fb: dict[tuple[str, FeedbackControl], bp.ProgramPack] = {}
        self._jump: dict[str, list[bp.Program]] = {}

    def field_pack(self, loc: md.Location) -> bp.ProgramPack:
        pack = self._field.get(loc.name)
        if pack is None:
            order = _var_order(loc.state_dim, loc.control_dim)
            pack = bp.pack_programs(ex.compile_expr(f, order) for f in loc.field)
            self._field[loc.name] = pack
        return pack

    def manifold_packs(self, loc: md.Location, events: tuple[str, ...]):
        key = (loc.name, events)
        packs = self._man.get(key)
        if packs is None:
            order = _var_order(loc.state_dim, loc.control_dim)
            guards = [self.model.transition(e).guard for e in events]
            man = bp.pack_programs(ex.compile_expr(g, order) for g in guards)
            grads = []
            for g in guards:
                for name in md.state_names(loc.state_dim):
                    grads.append(ex.compile_expr(ex.differentiate(g, name), order))
            packs = (man, bp.pack_programs(grads))
            self._man[key] = packs
        return packs

    def feedback_pack(self, loc: md.Location, control: FeedbackControl) -> bp.ProgramPack:
        key = (loc.name, control)
        pack = self._fb.get(key)
        if pack is None:
            order = _var_order(loc.state_dim, loc.control_dim)
            pack = bp.pack_programs(ex.compile_expr(e, order) for e in control.exprs)
            self._fb[key] = pack
        return pack

    def jump_programs(self, tr: md.Transition) -> list[bp.Program]:
        progs = self._jump.get(tr.event)
        if progs is None:
            n_src = self.model.location(tr.source).state_dim
            order = ("t",) + md.state_names(n_src)
            progs = [ex.compile_expr(j, order) for j in tr.jump]
            self._jump[tr.event] = progs
        return progs

    def apply_jump(self, tr: md.Transition, t: float, x_minus: np.ndarray) -> np.ndarray:
        from .kernels import eval_program

        varbuf = [t, *x_minus]
        out = np.array([eval_program(p.code, p.consts, varbuf) for p in self.jump_programs(tr)])
        return out


def _control_fields(compiled: CompiledModel, loc: md.Location, control: Control | None) -> dict:
    if control is None or loc.control_dim == 0:
        return {"ctrl_mode": bp.CTRL_NONE}
    if isinstance(control, ConstantControl):
        vals = np.asarray(control.values, dtype=np.float64)
        if vals.shape != (loc.control_dim,):
            raise ValueError(f"constant control has {vals.size} component(s), location {loc.name!r} needs {loc.control_dim}")
        return {"ctrl_mode": bp.CTRL_CONST, "ctrl_const": vals}
    if isinstance(control, PiecewiseLinearControl):
        vals = np.asarray(control.values, dtype=np.float64)
        if vals.shape[0] != loc.control_dim:
            raise ValueError(f"control has {vals.shape[0]} row(s), location {loc.name!r} needs {loc.control_dim}")
        return {
            "ctrl_mode": bp.CTRL_PWL,
            "pwl_ts": np.asarray(control.times, dtype=np.float64),
            "pwl_vals": np.ascontiguousarray(vals),
        }
    if isinstance(control, FeedbackControl):
        if len(control.exprs) != loc.control_dim:
            raise ValueError(f"feedback control has {len(control.exprs)} component(s), location {loc.name!r} needs {loc.control_dim}")
        return {"ctrl_mode": bp.CTRL_FEEDBACK, "fb": compiled.feedback_pack(loc, control)}
    raise TypeError(f"unsupported control {control!r}")


# ---------------------------------------------------------------------------
# Trajectory containers


@dataclass(frozen=True)
class TrajectorySegment:
    location: str
    ts: np.ndarray  # accepted nodes, ascending
    t0s: np.ndarray
    hs: np.ndarray
    y0s: np.ndarray
    ks: np.ndarray
    ys: np.ndarray  # node values
    us: np.ndarray  # control at nodes
    control: Control | None = None

    @property
    def t_start(self) -> float:
        return float(self.ts[0])

    @property
    def t_end(self) -> float:
        return float(self.ts[-1])

    @property
    def state_dim(self) -> int:
        return self.ys.shape[1]

    def states(self, tq):
        """Dense-output state at query times."""
        return bp.dense_eval(self.ts, self.t0s, self.hs, self.y0s, self.ks, tq)


@dataclass(frozen=True)
class JumpRecord:
    event: str
    kind: str
    time: float
    x_minus: np.ndarray
    x_plus: np.ndarray
    switch_cost: float
    transversal: float | None = None  # grad m . f at an autonomous crossing


@dataclass(frozen=True)
class HybridTrajectory:
    outcome: str
    reason: str
    t0: float
    tf: float
    segments: tuple[TrajectorySegment, ...]
    jumps: tuple[JumpRecord, ...]
    schedule: md.LocationSchedule

    @property
    def switching_times(self) -> tuple[float, ...]:
        return tuple(j.time for j in self.jumps)

    @property
    def locations(self) -> tuple[str, ...]:
        return tuple(s.location for s in self.segments)

    @property
    def final_state(self) -> np.ndarray:
        return self.segments[-1].ys[-1]

    @property
    def t_end(self) -> float:
        return self.segments[-1].t_end

    def segment_at(self, t: float) -> TrajectorySegment:
        for seg in self.segments:
            if t <= seg.t_end:
                return seg
        return self.segments[-1]

    def state(self, t: float) -> np.ndarray:
        return self.segment_at(t).states(t)


def _segment_from_result(loc: md.Location, res: bp.SegResult, control) -> TrajectorySegment:
    return TrajectorySegment(
        loc.name, res.ts, res.t0s, res.hs, res.y0s, res.ks, res.ys, res.us, control
    )


# ---------------------------------------------------------------------------
# Single-segment integration (public building block)


def integrate_segment(
    model: md.HybridModel,
    location: str,
    x0,
    t_span: tuple[float, float],
    control: Control | None = None,
    watch_events: Sequence[str] = (),
    config: SimConfig = SimConfig(),
    compiled: CompiledModel | None = None,
) -> tuple[TrajectorySegment, bp.SegResult]:
    """Integrate one location over t_span, watching the named autonomous
    transitions; returns the stored segment plus the raw kernel result."""
    compiled = compiled or CompiledModel(model)
    loc = model.location(location)
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.shape != (loc.state_dim,):
        raise ValueError(f"initial state has shape {x0.shape}, location {location!r} needs ({loc.state_dim},)")
    events = tuple(watch_events)
    for e in events:
        tr = model.transition(e)
        if tr.kind != md.AUTONOMOUS:
            raise ValueError(f"transition {e!r} is controlled; only autonomous events can be watched")
        if tr.source != location:
            raise ValueError(f"transition {e!r} does not leave location {location!r}")
    man, grad = compiled.manifold_packs(loc, events) if events else (bp.EMPTY_PACK, bp.EMPTY_PACK)
    rhs = bp.RhsPack(
        n_x=loc.state_dim,
        n_u=loc.control_dim,
        f=compiled.field_pack(loc),
        man=man,
        man_grad=grad,
        **_control_fields(compiled, loc, control),
    )
    res = rk45_segment(
        rhs,
        x0,
        float(t_span[0]),
        float(t_span[1]),
        rtol=config.rtol,
        atol=config.atol,
        event_tol=config.event_tol,
        trans_eps=config.transversality_eps,
        max_steps=config.max_steps,
    )
    return _segment_from_result(loc, res, control), res


# ---------------------------------------------------------------------------
# Full hybrid runs


def run(
    model: md.HybridModel,
    sched: md.LocationSchedule,
    x0,
    t_span: tuple[float, float],
    inputs: HybridInput,
    config: SimConfig = SimConfig(),
    compiled: CompiledModel | None = None,
) -> HybridTrajectory:
    """Execute the schedule from x0 over t_span under the given input."""
    compiled = compiled or CompiledModel(model)
    t0, tf = float(t_span[0]), float(t_span[1])
    if not tf > t0:
        raise ValueError(f"empty time span [{t0}, {tf}]")
    issues = md.schedule_check(model, sched)
    if issues:
        raise md.ModelError("; ".join(issues))
    L = sched.n_switches
    if len(inputs.controls) != L + 1:
        raise ValueError(f"need {L + 1} segment controls, got {len(inputs.controls)}")
    switch_times = tuple(inputs.switch_times) if inputs.switch_times else (None,) * L
    if len(switch_times) != L:
        raise ValueError(f"need {L} switch time entries, got {len(switch_times)}")
    kinds = md.schedule_kinds(model, sched)
    for i, (kind, st) in enumerate(zip(kinds, switch_times)):
        if kind == md.CONTROLLED and st is None:
            raise ValueError(f"schedule event {sched.events[i]!r} is controlled and needs a switch time")
        if kind == md.AUTONOMOUS and st is not None:
            raise ValueError(f"schedule event {sched.events[i]!r} is autonomous; its switch time is found by the run")
    fixed = [st for st in switch_times if st is not None]
    if any(not t0 < st < tf for st in fixed) or any(b <= a for a, b in zip(fixed, fixed[1:])):
        raise ValueError(f"controlled switch times must be increasing inside ({t0}, {tf}); got {fixed}")
    if L > config.max_switches:
        raise ValueError(f"schedule has {L} switches, exceeding the guard of {config.max_switches}")

    dwell_floor = config.dwell(t0, tf)
    x = np.asarray(x0, dtype=np.float64).copy()
    t = t0
    segments: list[TrajectorySegment] = []
    jumps: list[JumpRecord] = []

    def stop(outcome: str, reason: str) -> HybridTrajectory:
        return HybridTrajectory(outcome, reason, t0, tf, tuple(segments), tuple(jumps), sched)

    for i, name in enumerate(sched.locations):
        loc = model.location(name)
        if x.shape != (loc.state_dim,):
            return stop(ERROR, f"state dimension {x.shape[0]} does not match location {name!r}")
        last = i == len(sched.locations) - 1
        scheduled_event = None if last else sched.events[i]
        scheduled_kind = None if last else kinds[i]
        t_stop = tf if last or scheduled_kind == md.AUTONOMOUS else float(switch_times[i])
        if t_stop < t:
            return stop(ERROR, f"controlled switch time {t_stop} precedes the current time {t!r}")

        watch = tuple(tr.event for tr in model.transitions_from(name) if tr.kind == md.AUTONOMOUS)
        seg, res = integrate_segment(
            model, name, x, (t, t_stop), inputs.controls[i], watch, config, compiled
        )
        segments.append(seg)

        if res.status == bp.ST_TERMINATION:
            ev = watch[res.event_index]
            return stop(MANIFOLD_TERMINATION, f"tangential contact with manifold of {ev!r} at t={res.t_event!r}")
        if res.status == bp.ST_SIMULTANEOUS:
            return stop(ERROR, res.message + f" (t={res.t_event!r} in location {name!r})")
        if res.status in (bp.ST_DOMAIN, bp.ST_STEPFAIL, bp.ST_MAXSTEPS):
            return stop(ERROR, f"integration failed in location {name!r}: {res.message}")

        if res.status == bp.ST_EVENT:
            fired = watch[res.event_index]
            if last or scheduled_kind != md.AUTONOMOUS or fired != scheduled_event:
                if last:
                    why = f"but the schedule ends in location {name!r}"
                else:
                    why = f"but the schedule expects {scheduled_event!r}"
                return stop(ERROR, f"manifold of {fired!r} crossed at t={res.t_event!r} {why}")
            if res.t_event - t < dwell_floor:
                return stop(ZENO, f"dwell {res.t_event - t!r} in {name!r} below the floor {dwell_floor!r}")
            tr = model.transition(fired)
            x_minus = seg.ys[-1].copy()
            x = compiled.apply_jump(tr, res.t_event, x_minus)
            if not np.all(np.isfinite(x)):
                return stop(ERROR, f"jump map of {fired!r} produced a non-finite state at t={res.t_event!r}")
            cost = ex.evaluate(tr.switch_cost, _jump_env(x_minus, res.t_event))
            jumps.append(JumpRecord(fired, md.AUTONOMOUS, res.t_event, x_minus, x, cost, res.transversal))
            t = res.t_event
            continue

        # Reached t_stop without an event.
        if last:
            return stop(COMPLETED, "")
        if scheduled_kind == md.AUTONOMOUS:
            return stop(ERROR, f"manifold of {scheduled_event!r} was never crossed before t={t_stop!r}")
        if t_stop - t < dwell_floor:
            return stop(ZENO, f"dwell {t_stop - t!r} in {name!r} below the floor {dwell_floor!r}")
        tr = model.transition(scheduled_event)
        x_minus = seg.ys[-1].copy()
        x = compiled.apply_jump(tr, t_stop, x_minus)
        if not np.all(np.isfinite(x)):
            return stop(ERROR, f"jump map of {scheduled_event!r} produced a non-finite state at t={t_stop!r}")
        cost = ex.evaluate(tr.switch_cost, _jump_env(x_minus, t_stop))
        jumps.append(JumpRecord(scheduled_event, md.CONTROLLED, t_stop, x_minus, x, cost, None))
        t = t_stop

    return stop(COMPLETED, "")


def _jump_env(x: np.ndarray, t: float) -> dict[str, float]:
    env = {f"x{i + 1}": float(v) for i, v in enumerate(x)}
    env["t"] = t
    return env


# ---------------------------------------------------------------------------
# Audits


def replay_check(model: md.HybridModel, traj: HybridTrajectory, control_fn: Callable | None = None) -> float:
    """Largest ODE residual of the dense output at step midpoints.

    The interpolant's time derivative is compared against the vector field
    evaluated on the interpolated state and the recorded control. With
    ``control_fn(location, t, x) -> u`` the control is recomputed instead,
    which is the right check for feedback-generated trajectories.
    """
    worst = 0.0
    for seg in traj.segments:
        loc = model.location(seg.location)
        if seg.hs.shape[0] == 0:
            continue
        for i in range(seg.hs.shape[0]):
            th = 0.5 * (seg.ts[i] + seg.ts[i + 1])
            theta = (th - seg.t0s[i]) / seg.hs[i]
            powers = np.array([1.0, theta, theta**2, theta**3])
            dp = bp.DP_P @ (powers * np.array([1.0, 2.0, 3.0, 4.0]))
            ydot = dp @ seg.ks[i]
            x = seg.states(th)
            if control_fn is not None:
                u = np.asarray(control_fn(seg.location, th, x), dtype=np.float64)
            else:
                u = _node_control(seg, th)
            env = _jump_env(x, th)
            env.update({f"u{j + 1}": float(v) for j, v in enumerate(u)})
            f = np.array([ex.evaluate(fe, env) for fe in loc.field])
            scale = 1.0 + float(np.max(np.abs(f)))
            worst = max(worst, float(np.max(np.abs(ydot - f))) / scale)
    return worst


def _node_control(seg: TrajectorySegment, t: float) -> np.ndarray:
    if seg.us.shape[1] == 0:
        return np.zeros(0)
    idx = int(np.searchsorted(seg.ts, t, side="right")) - 1
    idx = min(max(idx, 0), len(seg.ts) - 2)
    t_a, t_b = seg.ts[idx], seg.ts[idx + 1]
    w = 0.0 if t_b == t_a else (t - t_a) / (t_b - t_a)
    return seg.us[idx] + w * (seg.us[idx + 1] - seg.us[idx])


# ---------------------------------------------------------------------------
# Exports


def _fmt(v: float) -> str:
    return f"{v:.17g}"


def trajectory_to_csv(traj: HybridTrajectory, path) -> None:
    """One row per dense node; jumps produce paired rows marked -/+."""
    n_x = max(seg.state_dim for seg in traj.segments)
    n_u = max(seg.us.shape[1] for seg in traj.segments)
    header = ["t", "location", "side"] + [f"x{i + 1}" for i in range(n_x)] + [f"u{j + 1}" for j in range(n_u)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for s_i, seg in enumerate(traj.segments):
            for r in range(seg.ys.shape[0]):
                side = ""
                if r == 0 and s_i > 0:
                    side = "+"
                elif r == seg.ys.shape[0] - 1 and s_i < len(traj.segments) - 1:
                    side = "-"
                row = [_fmt(seg.ts[r]), seg.location, side]
                row += [_fmt(v) for v in seg.ys[r]] + [""] * (n_x - seg.state_dim)
                row += [_fmt(v) for v in seg.us[r]] + [""] * (n_u - seg.us.shape[1])
                w.writerow(row)


def trajectory_to_json(traj: HybridTrajectory, path=None):
    doc = {
        "outcome": traj.outcome,
        "reason": traj.reason,
        "t_span": [traj.t0, traj.tf],
        "schedule": {"locations": list(traj.schedule.locations), "events": list(traj.schedule.events)},
        "switching_times": list(traj.switching_times),
        "segments": [
            {
                "location": seg.location,
                "t": seg.ts.tolist(),
                "x": seg.ys.tolist(),
                "u": seg.us.tolist(),
            }
            for seg in traj.segments
        ],
        "jumps": [
            {
                "event": j.event,
                "kind": j.kind,
                "t": j.time,
                "x_minus": j.x_minus.tolist(),
                "x_plus": j.x_plus.tolist(),
                "switch_cost": j.switch_cost,
                "transversal": j.transversal,
            }
            for j in traj.jumps
        ],
    }
    if path is not None:
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=1)
    return doc
