"""Derivative-free direct transcription, used to cross-check extremals.

The control of every segment is parameterized as a piecewise linear curve
over a fixed node grid spanning the whole horizon, and controlled switch
times are extra decision variables. Each candidate is evaluated by an
actual hybrid simulation, so autonomous switching times and the cost come
out of the same machinery the rest of the toolkit uses; any failed or
incomplete run scores +inf. The search is a cyclic coordinate descent
with per-coordinate adaptive steps, interleaved with occasional
finite-difference gradient polish steps. The incumbent cost is monotone
by construction.

This is deliberately independent of the adjoint machinery: no
Hamiltonians, no multipliers, only forward simulation. An extremal found
by shooting should never be beaten by this search by more than the
transcription error.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import hmp
from . import model as md
from . import simulate as sm


@dataclass(frozen=True)
class OracleConfig:
    n_nodes: int = 9
    budget: int = 10000
    seed: int = 0
    sim: sm.SimConfig = field(default_factory=lambda: sm.SimConfig(rtol=1e-7, atol=1e-10))
    polish_every: int = 4  # coordinate cycles between gradient polishes
    step_tol: float = 1e-7  # stop when every coordinate step falls below this
    time_margin_frac: float = 1e-4  # keeps switch times off the horizon ends


@dataclass
class Transcription:
    """Decision vector layout for one schedule."""

    model: md.HybridModel
    sched: md.LocationSchedule
    x0: np.ndarray
    t0: float
    tf: float
    nodes: np.ndarray  # shared absolute-time node grid
    kinds: tuple[str, ...]
    ctrl_slices: tuple[tuple[slice, ...], ...]  # per segment, per control channel
    time_index: dict[int, int]  # switch index -> position in the decision vector
    n_params: int
    lo: np.ndarray  # per-parameter bounds
    hi: np.ndarray

    def inputs_of(self, params: np.ndarray) -> sm.HybridInput:
        controls = []
        for i, name in enumerate(self.sched.locations):
            slices = self.ctrl_slices[i]
            if not slices:
                controls.append(sm.ConstantControl(()))
                continue
            controls.append(
                sm.PiecewiseLinearControl(
                    tuple(self.nodes), tuple(tuple(params[s]) for s in slices)
                )
            )
        times = [None] * self.sched.n_switches
        for j, pos in self.time_index.items():
            times[j] = float(params[pos])
        return sm.HybridInput(tuple(controls), tuple(times))

    def evaluate(self, params: np.ndarray, config: OracleConfig) -> tuple[float, sm.HybridTrajectory | None]:
        decided = [self.t0] + [float(params[p]) for p in self.time_index.values()] + [self.tf]
        if any(b <= a for a, b in zip(decided[:-1], decided[1:])):
            return float("inf"), None
        try:
            traj = sm.run(self.model, self.sched, self.x0, (self.t0, self.tf),
                          self.inputs_of(params), config.sim)
        except (ValueError, ArithmeticError):
            return float("inf"), None
        if traj.outcome != sm.COMPLETED:
            return float("inf"), None
        try:
            return hmp.cost_of(self.model, traj), traj
        except (hmp.HmpError, ValueError, ArithmeticError):
            return float("inf"), None


def transcribe(
    model: md.HybridModel,
    sched: md.LocationSchedule,
    x0,
    t_span: tuple[float, float],
    config: OracleConfig = OracleConfig(),
) -> Transcription:
    md.schedule_check(model, sched)
    t0, tf = float(t_span[0]), float(t_span[1])
    if not tf > t0:
        raise ValueError(f"empty horizon [{t0}, {tf}]")
    x0 = np.asarray(x0, dtype=np.float64)
    nodes = np.linspace(t0, tf, max(2, config.n_nodes))
    kinds = md.schedule_kinds(model, sched)
    margin = config.time_margin_frac * (tf - t0)

    pos = 0
    ctrl_slices: list[tuple[slice, ...]] = []
    lo: list[float] = []
    hi: list[float] = []
    for name in sched.locations:
        loc = model.location(name)
        slices = []
        for j in range(loc.control_dim):
            slices.append(slice(pos, pos + len(nodes)))
            b_lo, b_hi = loc.control_box[j]
            lo.extend([b_lo] * len(nodes))
            hi.extend([b_hi] * len(nodes))
            pos += len(nodes)
        ctrl_slices.append(tuple(slices))
    time_index: dict[int, int] = {}
    for j, kind in enumerate(kinds):
        if kind == md.CONTROLLED:
            time_index[j] = pos
            lo.append(t0 + margin)
            hi.append(tf - margin)
            pos += 1

    return Transcription(
        model=model, sched=sched, x0=x0, t0=t0, tf=tf, nodes=nodes, kinds=kinds,
        ctrl_slices=tuple(ctrl_slices), time_index=time_index, n_params=pos,
        lo=np.array(lo), hi=np.array(hi),
    )


@dataclass
class OracleResult:
    cost: float
    params: np.ndarray
    inputs: sm.HybridInput
    trajectory: sm.HybridTrajectory | None
    n_evals: int
    trace: tuple[tuple[int, float], ...]  # (evaluation count, incumbent cost)
    exhausted: bool  # budget ran out before the steps collapsed
    n_nodes: int


def _initial_params(tx: Transcription, config: OracleConfig) -> np.ndarray:
    params = np.zeros(tx.n_params)
    for i, name in enumerate(tx.sched.locations):
        loc = tx.model.location(name)
        for j, s in enumerate(tx.ctrl_slices[i]):
            b_lo, b_hi = loc.control_box[j]
            params[s] = min(max(0.0, b_lo), b_hi)  # zero, clipped into the box
    for j, pos in tx.time_index.items():
        params[pos] = tx.t0 + (tx.tf - tx.t0) * (j + 1.0) / (tx.sched.n_switches + 1.0)
    return params


def search(
    model: md.HybridModel,
    sched: md.LocationSchedule,
    x0,
    t_span: tuple[float, float],
    config: OracleConfig = OracleConfig(),
    initial_params: np.ndarray | None = None,
) -> OracleResult:
    """Minimize the transcribed cost within the evaluation budget."""
    tx = transcribe(model, sched, x0, t_span, config)
    evals = [0]
    span = tx.tf - tx.t0

    def f(p: np.ndarray) -> float:
        evals[0] += 1
        return tx.evaluate(p, config)[0]

    params = (
        np.clip(np.asarray(initial_params, dtype=np.float64), tx.lo, tx.hi)
        if initial_params is not None
        else _initial_params(tx, config)
    )
    best = f(params)
    trace: list[tuple[int, float]] = [(evals[0], best)]
    if not np.isfinite(best):
        # Nudge the starting point until the schedule completes at all.
        rng = np.random.default_rng(config.seed)
        for _ in range(64):
            if evals[0] >= config.budget:
                break
            trial = np.clip(tx.lo + (tx.hi - tx.lo) * rng.random(tx.n_params), tx.lo, tx.hi)
            c = f(trial)
            if c < best:
                params, best = trial, c
                trace.append((evals[0], best))
                if np.isfinite(best):
                    break

    steps = np.empty(tx.n_params)
    for i in range(tx.n_params):
        width = tx.hi[i] - tx.lo[i]
        steps[i] = 0.25 * width if np.isfinite(width) else 0.25 * (1.0 + abs(params[i]))
    for pos in tx.time_index.values():
        steps[pos] = 0.1 * span / (len(tx.time_index) + 1)

    cycle = 0
    exhausted = True
    while evals[0] < config.budget:
        evals_at_cycle_start = evals[0]
        improved_any = False
        for i in range(tx.n_params):
            if evals[0] + 2 > config.budget:
                break
            for sign in (+1.0, -1.0):
                trial = params.copy()
                trial[i] = np.clip(trial[i] + sign * steps[i], tx.lo[i], tx.hi[i])
                if trial[i] == params[i]:
                    continue
                c = f(trial)
                if c < best:
                    params, best = trial, c
                    trace.append((evals[0], best))
                    width = tx.hi[i] - tx.lo[i]
                    cap = width if np.isfinite(width) else 4.0 * (1.0 + abs(params[i]))
                    steps[i] = min(steps[i] * 1.6, cap)
                    improved_any = True
                    break
            else:
                steps[i] *= 0.5
        cycle += 1

        if cycle % config.polish_every == 0 and np.isfinite(best) and evals[0] + tx.n_params + 8 <= config.budget:
            g = np.zeros(tx.n_params)
            h_fd = np.maximum(1e-7, 1e-4 * steps)
            for i in range(tx.n_params):
                trial = params.copy()
                trial[i] = np.clip(trial[i] + h_fd[i], tx.lo[i], tx.hi[i])
                dh = trial[i] - params[i]
                if dh == 0.0:
                    trial[i] = params[i] - h_fd[i]
                    dh = trial[i] - params[i]
                c = f(trial)
                g[i] = (c - best) / dh if np.isfinite(c) else 0.0
            gn = np.max(np.abs(g))
            if gn > 0:
                alpha = np.min(steps) / gn
                for _ in range(8):
                    trial = np.clip(params - alpha * g, tx.lo, tx.hi)
                    c = f(trial)
                    if c < best:
                        params, best = trial, c
                        trace.append((evals[0], best))
                        improved_any = True
                        break
                    alpha *= 0.25

        if not improved_any and np.max(steps) < config.step_tol:
            exhausted = False
            break
        if evals[0] == evals_at_cycle_start:
            break  # too little budget left to evaluate anything

    cost, traj = tx.evaluate(params, config)
    return OracleResult(
        cost=cost,
        params=params,
        inputs=tx.inputs_of(params),
        trajectory=traj,
        n_evals=evals[0] + 1,
        trace=tuple(trace),
        exhausted=exhausted,
        n_nodes=len(tx.nodes),
    )


def refine_check(
    model: md.HybridModel,
    sched: md.LocationSchedule,
    x0,
    t_span: tuple[float, float],
    coarse: OracleResult,
    config: OracleConfig = OracleConfig(),
    factor: int = 2,
) -> tuple[float, float]:
    """Re-search on a node grid ``factor`` times finer, warm-started from the
    coarse incumbent; returns (coarse cost, refined cost)."""
    fine_cfg = OracleConfig(
        n_nodes=factor * (config.n_nodes - 1) + 1,
        budget=config.budget,
        seed=config.seed + 1,
        sim=config.sim,
        polish_every=config.polish_every,
        step_tol=config.step_tol,
        time_margin_frac=config.time_margin_frac,
    )
    tx_c = transcribe(model, sched, x0, t_span, config)
    tx_f = transcribe(model, sched, x0, t_span, fine_cfg)
    warm = np.zeros(tx_f.n_params)
    for i in range(len(sched.locations)):
        for s_c, s_f in zip(tx_c.ctrl_slices[i], tx_f.ctrl_slices[i]):
            warm[s_f] = np.interp(tx_f.nodes, tx_c.nodes, coarse.params[s_c])
    for j, pos_f in tx_f.time_index.items():
        warm[pos_f] = coarse.params[tx_c.time_index[j]]
    fine = search(model, sched, x0, t_span, fine_cfg, initial_params=warm)
    return coarse.cost, fine.cost


def oracle_to_dict(result: OracleResult) -> dict:
    return {
        "cost": result.cost,
        "n_evals": result.n_evals,
        "n_nodes": result.n_nodes,
        "exhausted": result.exhausted,
        "switch_times": [t for t in result.inputs.switch_times],
        "trace": [{"evals": n, "cost": c} for n, c in result.trace],
    }


def oracle_to_json(result: OracleResult, indent: int = 2) -> str:
    return json.dumps(oracle_to_dict(result), indent=indent)
