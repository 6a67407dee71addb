"""Multipoint boundary value solver for hybrid extremals (indirect shooting).

For a fixed location schedule the first-order conditions form a square
system. The state and adjoint are integrated jointly forward with the
control replaced by the pointwise Hamiltonian minimizer; autonomous
switching times come from event detection, controlled ones are decision
variables. The unknowns are

    lambda(t0),  each post-jump adjoint lambda(t_j+),  each free controlled t_j,

and the residuals are

    lambda(t_j-) - [(grad xi)^T lambda(t_j+) + grad c + p_j grad m],
    H-(t_j) - H+(t_j)        at controlled switches with free times,
    lambda(t_f) - grad g(x(t_f)),

with p_j = 0 at controlled switches and p_j solved from Hamiltonian
continuity at autonomous ones, so the system is always square. Controlled
switch times may be pinned, which removes both the unknown and the
matching continuity row. A damped Newton iteration with a finite
difference Jacobian runs from several deterministic random starts and the
lowest-cost converged solution wins.

Time-varying models are rejected here: rewrite them with the clock state
first, which makes every piece autonomous.
"""

from __future__ import annotations

import json
import time as _time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import exprlang as ex
from . import hmp
from . import model as md
from . import simulate as sm
from .kernels import backend_name, programs as bp, rk45_segment


class SolverError(ValueError):
    pass


@dataclass(frozen=True)
class SolveConfig:
    sim: sm.SimConfig = field(default_factory=sm.SimConfig)
    newton_tol: float = 1e-8
    max_iterations: int = 200
    fd_step: float = 1e-6
    armijo: float = 1e-4
    max_backtracks: int = 30
    n_starts: int = 16
    seed: int = 0
    penalty: float = 1e3
    min_dwell_frac: float = 1e-6  # smallest segment length, as a horizon fraction
    stop_on_converged: bool = True  # skip remaining starts once one closes


# ---------------------------------------------------------------------------
# Assembly


@dataclass
class Shooting:
    """Assembled shooting problem: layout, caches and the residual map."""

    model: md.HybridModel
    sched: md.LocationSchedule
    x0: np.ndarray
    t0: float
    tf: float
    hams: dict[str, hmp.Hamiltonian]
    kinds: tuple[str, ...]
    pinned: dict[int, float]
    free_times: tuple[int, ...]
    dims: tuple[int, ...]
    unknown_labels: tuple[str, ...]
    residual_labels: tuple[str, ...]
    _packs: dict = field(default_factory=dict)

    @property
    def n_unknowns(self) -> int:
        return len(self.unknown_labels)

    @property
    def n_switches(self) -> int:
        return self.sched.n_switches

    # -- packing

    def unpack(self, z: np.ndarray):
        """Split z into (lam0, times by switch index, post-jump adjoints)."""
        pos = self.dims[0]
        lam0 = np.asarray(z[:pos], dtype=np.float64)
        times: list[float | None] = []
        lam_plus: list[np.ndarray] = []
        for j in range(self.n_switches):
            if j in self.pinned:
                times.append(self.pinned[j])
            elif j in self.free_times:
                times.append(float(z[pos]))
                pos += 1
            else:
                times.append(None)  # autonomous: found by event detection
            n = self.dims[j + 1]
            lam_plus.append(np.asarray(z[pos:pos + n], dtype=np.float64))
            pos += n
        return lam0, times, lam_plus

    def pack(self, lam0, times: Sequence[float | None], lam_plus) -> np.ndarray:
        out = [np.asarray(lam0, dtype=np.float64)]
        for j in range(self.n_switches):
            if j in self.free_times:
                out.append(np.array([times[j]], dtype=np.float64))
            out.append(np.asarray(lam_plus[j], dtype=np.float64))
        return np.concatenate(out) if out else np.zeros(0)

    # -- starting points

    def adjoint_scale(self) -> float:
        """Magnitude guess for adjoint components, from the terminal gradient
        evaluated at the initial state padded to the final dimension."""
        n_f = self.dims[-1]
        x_pad = np.zeros(n_f)
        x_pad[: min(len(self.x0), n_f)] = self.x0[:n_f]
        try:
            g = hmp.terminal_adjoint(self.model, x_pad, self.tf)
            return 1.0 + float(np.max(np.abs(g)))
        except ex.EvalDomainError:
            return 1.0

    def default_guess(self) -> np.ndarray:
        times = [None] * self.n_switches
        span = self.tf - self.t0
        for j in self.free_times:
            times[j] = self.t0 + span * (j + 1.0) / (self.n_switches + 1.0)
        return self.pack(
            np.zeros(self.dims[0]), times, [np.zeros(self.dims[j + 1]) for j in range(self.n_switches)]
        )

    def random_guess(self, rng: np.random.Generator) -> np.ndarray:
        span = self.tf - self.t0
        sigma = self.adjoint_scale()
        times = [None] * self.n_switches
        for j in range(self.n_switches):
            if j in self.pinned:
                times[j] = self.pinned[j]
        for _ in range(32):
            for j in self.free_times:
                times[j] = self.t0 + span * (j + rng.uniform(0.15, 0.85)) / (self.n_switches + 1.0)
            known = [self.t0] + [t for t in times if t is not None] + [self.tf]
            if all(b - a > 0 for a, b in zip(known[:-1], known[1:])):
                break
        lam0 = rng.normal(0.0, sigma, self.dims[0])
        lam_plus = [rng.normal(0.0, sigma, self.dims[j + 1]) for j in range(self.n_switches)]
        return self.pack(lam0, times, lam_plus)

    # -- forward shooting

    def _joint_pack(self, location: str, watch_event: str | None) -> bp.RhsPack:
        key = (location, watch_event)
        rhs = self._packs.get(key)
        if rhs is not None:
            return rhs
        ham = self.hams[location]
        if watch_event is None:
            man, man_grad = bp.EMPTY_PACK, bp.EMPTY_PACK
        else:
            tr = self.model.transition(watch_event)
            order = ("t",) + ham.x_vars  # guard reads the buffer's (t, x) prefix
            man = bp.pack_programs([ex.compile_expr(tr.guard, order)])
            man_grad = bp.pack_programs(
                [ex.compile_expr(ex.differentiate(tr.guard, v), order) for v in ham.x_vars]
            )
        rhs = bp.RhsPack(
            n_x=ham.n_x,
            n_u=ham.n_u,
            n_lam=ham.n_x,
            f=ham.pack("f"),
            g=ham.pack("lam_dot"),
            man=man,
            man_grad=man_grad,
            **ham.control_fields(),
        )
        self._packs[key] = rhs
        return rhs

    def shoot(self, z: np.ndarray, config: SolveConfig = SolveConfig()) -> "ShootResult":
        lam0, times, lam_plus = self.unpack(z)
        L = self.n_switches
        span = self.tf - self.t0
        dwell = config.min_dwell_frac * span

        # Ordering barrier on decided times before any integration.
        decided = [self.t0] + [t for t in times if t is not None] + [self.tf]
        gaps = np.diff(decided)
        if np.any(gaps < dwell):
            viol = float(np.sum(np.maximum(dwell - gaps, 0.0))) / max(span, 1e-300)
            r = np.full(self.n_unknowns, config.penalty * (1.0 + viol))
            return ShootResult(residuals=r, feasible=False, note="switch times out of order")

        residuals: list[np.ndarray] = []
        segments: list[tuple[str, bp.SegResult]] = []
        switches: list[dict] = []
        x = self.x0
        lam = lam0
        t_cur = self.t0

        for i, loc_name in enumerate(self.sched.locations):
            ham = self.hams[loc_name]
            event = self.sched.events[i] if i < L else None
            autonomous = event is not None and self.kinds[i] == md.AUTONOMOUS
            t_stop = self.tf if (event is None or autonomous) else times[i]
            if not autonomous and t_stop - t_cur < dwell:
                # An event-detected switching time overran the next decided
                # one; the pre-integration barrier cannot see these.
                viol = (dwell - (t_stop - t_cur)) / max(span, 1e-300)
                return self._fill(residuals, config, 1.0 + viol, "switch times out of order", segments)
            rhs = self._joint_pack(loc_name, event if autonomous else None)
            res = rk45_segment(
                rhs,
                np.concatenate([x, lam]),
                t_cur,
                t_stop,
                rtol=config.sim.rtol,
                atol=config.sim.atol,
                event_tol=config.sim.event_tol,
                trans_eps=config.sim.transversality_eps,
                max_steps=config.sim.max_steps,
            )
            segments.append((loc_name, res))
            if autonomous and res.status == bp.ST_OK:
                # Never reached the guard: penalize by the remaining gap.
                env = hmp._env_xt(res.ys[-1][: ham.n_x], self.tf)
                m_end = abs(ex.evaluate(self.model.transition(event).guard, env))
                return self._fill(residuals, config, 1.0 + m_end, "guard not reached", segments)
            if autonomous and res.status != bp.ST_EVENT:
                return self._fill(residuals, config, 2.0, f"integration failed: {res.message}", segments)
            if not autonomous and res.status != bp.ST_OK:
                return self._fill(residuals, config, 2.0, f"integration failed: {res.message}", segments)

            y_end = res.ys[-1]
            x_minus, lam_minus = y_end[: ham.n_x], y_end[ham.n_x:]
            t_j = float(res.ts[-1])

            if event is None:
                lam_f = hmp.terminal_adjoint(self.model, x_minus, self.tf)
                residuals.append(lam_minus - lam_f)
                break

            if autonomous and self.tf - t_j < dwell:
                return self._fill(residuals, config, 1.5, "crossing too close to the final time", segments)

            tr = self.model.transition(event)
            env_minus = hmp._env_xt(x_minus, t_j)
            x_plus = np.array([ex.evaluate(jx, env_minus) for jx in tr.jump])
            lam_next = lam_plus[i]
            ham_next = self.hams[self.sched.locations[i + 1]]
            u_plus, h_plus = ham_next.minimize(x_plus, lam_next, t_j)
            u_minus = res.us[-1] if res.us.shape[1] else np.zeros(0)
            h_minus = ham.value(x_minus, lam_minus, u_minus, t_j)

            if autonomous:
                try:
                    p = hmp.solve_p_from_continuity(
                        ham, tr, x_minus, u_minus, lam_next, h_plus, t_j,
                        transversality_eps=config.sim.transversality_eps,
                    )
                except hmp.HmpError:
                    return self._fill(residuals, config, 2.0, "non-transversal crossing", segments)
            else:
                p = 0.0
            lam_target = hmp.adjoint_jump(tr, x_minus, lam_next, p, t_j)
            residuals.append(lam_minus - lam_target)
            if i in self.free_times:
                residuals.append(np.array([h_minus - h_plus]))

            switches.append(
                dict(event=event, kind=tr.kind, time=t_j, x_minus=x_minus, x_plus=x_plus,
                     lam_minus=lam_minus, lam_plus=lam_next, p=p, h_minus=h_minus, h_plus=h_plus,
                     switch_cost=float(ex.evaluate(tr.switch_cost, env_minus)),
                     u_minus=u_minus, u_plus=u_plus)
            )
            x, lam, t_cur = x_plus, lam_next, t_j

        r = np.concatenate(residuals)
        if not np.all(np.isfinite(r)):
            return ShootResult(
                residuals=np.full(self.n_unknowns, config.penalty * 2.0),
                feasible=False, note="non-finite residuals",
            )
        return ShootResult(residuals=r, feasible=True, segments=tuple(segments), switches=tuple(switches))

    def _fill(self, partial: list[np.ndarray], config: SolveConfig, factor: float,
              note: str, segments) -> "ShootResult":
        done = sum(len(r) for r in partial)
        fill = np.full(self.n_unknowns - done, config.penalty * factor)
        r = np.concatenate([*partial, fill]) if partial else fill
        return ShootResult(residuals=r, feasible=False, note=note, segments=tuple(segments))

    def residual_table(self, r: np.ndarray) -> list[tuple[str, float]]:
        return [(lbl, float(v)) for lbl, v in zip(self.residual_labels, r)]


@dataclass
class ShootResult:
    residuals: np.ndarray
    feasible: bool
    note: str = ""
    segments: tuple = ()
    switches: tuple = ()

    @property
    def max_residual(self) -> float:
        return float(np.max(np.abs(self.residuals))) if len(self.residuals) else 0.0


def assemble(
    model: md.HybridModel,
    sched: md.LocationSchedule,
    x0,
    t_span: tuple[float, float],
    pinned_times: dict[int, float] | None = None,
    hams: dict[str, hmp.Hamiltonian] | None = None,
) -> Shooting:
    """Lay out the square shooting system for one location schedule."""
    if model.time_varying:
        raise SolverError(
            "the shooting system needs time-invariant pieces; rewrite the model "
            "with the clock state first (to_time_invariant)"
        )
    md.schedule_check(model, sched)
    t0, tf = float(t_span[0]), float(t_span[1])
    if not tf > t0:
        raise SolverError(f"empty horizon [{t0}, {tf}]")
    kinds = md.schedule_kinds(model, sched)
    dims = tuple(model.location(name).state_dim for name in sched.locations)
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.shape != (dims[0],):
        raise SolverError(f"initial state has shape {x0.shape}, location {sched.locations[0]!r} needs ({dims[0]},)")

    pinned = {int(j): float(t) for j, t in (pinned_times or {}).items()}
    for j, t in pinned.items():
        if j < 0 or j >= sched.n_switches:
            raise SolverError(f"pinned time index {j} outside 0..{sched.n_switches - 1}")
        if kinds[j] != md.CONTROLLED:
            raise SolverError(f"switch {j} ({sched.events[j]!r}) is autonomous; its time cannot be pinned")
        if not t0 < t < tf:
            raise SolverError(f"pinned time {t} for switch {j} outside ({t0}, {tf})")
    pin_seq = sorted(pinned.items())
    for (j1, v1), (j2, v2) in zip(pin_seq[:-1], pin_seq[1:]):
        if v2 <= v1:
            raise SolverError(f"pinned times out of order: t[{j1}]={v1} >= t[{j2}]={v2}")

    free_times = tuple(
        j for j in range(sched.n_switches) if kinds[j] == md.CONTROLLED and j not in pinned
    )

    unknowns = [f"lam0[{i + 1}]" for i in range(dims[0])]
    residual_labels: list[str] = []
    for j in range(sched.n_switches):
        if j in free_times:
            unknowns.append(f"t_switch[{j}]")
        unknowns.extend(f"lam_plus[{j}][{i + 1}]" for i in range(dims[j + 1]))
        residual_labels.extend(f"jump[{j}][{i + 1}]" for i in range(dims[j]))
        if j in free_times:
            residual_labels.append(f"continuity[{j}]")
    residual_labels.extend(f"terminal[{i + 1}]" for i in range(dims[-1]))
    assert len(unknowns) == len(residual_labels)

    return Shooting(
        model=model,
        sched=sched,
        x0=x0,
        t0=t0,
        tf=tf,
        hams=hams or hmp.build_hamiltonians(model),
        kinds=kinds,
        pinned=pinned,
        free_times=free_times,
        dims=dims,
        unknown_labels=tuple(unknowns),
        residual_labels=tuple(residual_labels),
    )


# ---------------------------------------------------------------------------
# Damped Newton iteration


@dataclass
class NewtonOutcome:
    z: np.ndarray
    converged: bool
    iterations: int
    residual_norm: float
    n_shoots: int
    message: str


def _newton(shooting: Shooting, z0: np.ndarray, config: SolveConfig) -> NewtonOutcome:
    z = np.asarray(z0, dtype=np.float64).copy()
    n = len(z)
    shoots = [0]

    def r_of(zz):
        shoots[0] += 1
        return shooting.shoot(zz, config).residuals

    r = r_of(z)
    weights = 1.0 / (1.0 + np.abs(r))  # fixed row scaling from the first iterate
    phi = 0.5 * float(np.sum((weights * r) ** 2))

    for it in range(config.max_iterations):
        norm = float(np.max(np.abs(r)))
        if norm <= config.newton_tol:
            return NewtonOutcome(z, True, it, norm, shoots[0], "converged")

        J = np.empty((n, n))
        for i in range(n):
            h = config.fd_step * (1.0 + abs(z[i]))
            zp = z.copy(); zp[i] += h
            zm = z.copy(); zm[i] -= h
            J[:, i] = (r_of(zp) - r_of(zm)) / (2.0 * h)
        Jw = weights[:, None] * J
        try:
            d = np.linalg.solve(Jw, -(weights * r))
        except np.linalg.LinAlgError:
            d, *_ = np.linalg.lstsq(Jw, -(weights * r), rcond=None)
        if not np.all(np.isfinite(d)):
            return NewtonOutcome(z, False, it, norm, shoots[0], "singular Jacobian")

        alpha = 1.0
        for _ in range(config.max_backtracks):
            z_new = z + alpha * d
            r_new = r_of(z_new)
            phi_new = 0.5 * float(np.sum((weights * r_new) ** 2))
            if phi_new <= (1.0 - config.armijo * alpha) * phi:
                break
            alpha *= 0.5
        else:
            return NewtonOutcome(z, False, it, norm, shoots[0], "line search stalled")
        if np.max(np.abs(alpha * d)) < 1e-15 * (1.0 + np.max(np.abs(z))):
            z, r, phi = z_new, r_new, phi_new
            norm = float(np.max(np.abs(r)))
            if norm <= config.newton_tol:
                return NewtonOutcome(z, True, it + 1, norm, shoots[0], "converged")
            return NewtonOutcome(z, False, it, norm, shoots[0], "step underflow")
        z, r, phi = z_new, r_new, phi_new

    norm = float(np.max(np.abs(r)))
    return NewtonOutcome(z, norm <= config.newton_tol, config.max_iterations, norm, shoots[0],
                         "converged" if norm <= config.newton_tol else "iteration limit")


# ---------------------------------------------------------------------------
# Solution assembly and the public driver


@dataclass
class SolveResult:
    z: np.ndarray
    trajectory: sm.HybridTrajectory
    adjoint: hmp.AdjointTrajectory
    cost: float
    residual_norm: float
    residual_table: tuple[tuple[str, float], ...]
    lam0: np.ndarray
    switch_times: tuple[float, ...]
    hams: dict[str, hmp.Hamiltonian] = field(repr=False, default_factory=dict)

    def control(self, location: str, t: float, x) -> np.ndarray:
        """Pointwise Hamiltonian-minimizing control along this solution.

        Segments are picked by time, so a location repeated in the schedule
        stays aligned with the right adjoint arc.
        """
        idx = 0
        for st in self.switch_times:
            if t > st:
                idx += 1
        idx = min(idx, len(self.adjoint.segments) - 1)
        segs = self.trajectory.segments
        if segs[idx].location != location:
            # A switching instant belongs to both abutting segments; side with
            # the caller's location wins (the adjoint jumps, and may even
            # change dimension, across it).
            for j in (idx + 1, idx - 1):
                if 0 <= j < len(segs) and segs[j].location == location \
                        and segs[j].t_start <= t <= segs[j].t_end:
                    idx = j
                    break
        lam = self.adjoint.segments[idx].values(np.array([t]))[0]
        return self.hams[location].minimize(x, lam, t)[0]


@dataclass(frozen=True)
class StartRecord:
    index: int
    converged: bool
    iterations: int
    residual_norm: float
    cost: float | None
    message: str


@dataclass(frozen=True)
class SolveReport:
    success: bool
    result: SolveResult | None
    starts: tuple[StartRecord, ...]
    n_shoots: int
    wall_time: float
    backend: str
    unknown_labels: tuple[str, ...]

    @property
    def best_cost(self) -> float:
        return self.result.cost if self.result else float("nan")


def _result_from_shoot(shooting: Shooting, z: np.ndarray, shot: ShootResult) -> SolveResult:
    """Convert a feasible shoot into trajectory + adjoint records."""
    model = shooting.model
    segs: list[sm.TrajectorySegment] = []
    adj_segs: list[hmp.AdjointSegment] = []
    jumps: list[sm.JumpRecord] = []
    for (loc_name, res), sw in zip(shot.segments, list(shot.switches) + [None]):
        n_x = model.location(loc_name).state_dim
        segs.append(
            sm.TrajectorySegment(
                loc_name, res.ts, res.t0s, res.hs,
                res.y0s[:, :n_x], res.ks[:, :, :n_x], res.ys[:, :n_x], res.us, None,
            )
        )
        # The lambda block, reversed into the descending convention.
        adj_segs.append(
            hmp.AdjointSegment(
                loc_name, res.ts[::-1].copy(), res.t0s[::-1].copy(), res.hs[::-1].copy(),
                res.y0s[::-1, n_x:].copy(), res.ks[::-1, :, n_x:].copy(),
                res.ys[::-1, n_x:].copy(), res.us[::-1].copy(),
            )
        )
        if sw is not None:
            transversal = None
            if sw["kind"] == md.AUTONOMOUS:
                tr = model.transition(sw["event"])
                env = hmp._env_xt(sw["x_minus"], sw["time"])
                names = [f"x{i + 1}" for i in range(len(sw["x_minus"]))]
                gm = hmp._grad_at(tr.guard, names, env)
                loc = model.location(loc_name)
                env_u = dict(env)
                env_u.update({v: float(val) for v, val in zip(loc.control_vars, sw["u_minus"])})
                f_minus = np.array([ex.evaluate(f, env_u) for f in loc.field])
                transversal = float(gm @ f_minus)
            jumps.append(
                sm.JumpRecord(
                    sw["event"], sw["kind"], sw["time"], sw["x_minus"], sw["x_plus"],
                    sw["switch_cost"], transversal,
                )
            )

    traj = sm.HybridTrajectory(
        outcome=sm.COMPLETED, reason="", t0=shooting.t0, tf=shooting.tf,
        segments=tuple(segs), jumps=tuple(jumps), schedule=shooting.sched,
    )
    x_f = traj.final_state
    adjoint = hmp.AdjointTrajectory(
        segments=tuple(adj_segs),
        switches=tuple(
            hmp.SwitchConditions(
                sw["event"], sw["kind"], sw["time"], sw["lam_minus"], sw["lam_plus"],
                sw["p"], sw["h_minus"], sw["h_plus"],
            )
            for sw in shot.switches
        ),
        terminal_gradient=hmp.terminal_adjoint(model, x_f, shooting.tf),
    )
    result = SolveResult(
        z=z,
        trajectory=traj,
        adjoint=adjoint,
        cost=float("nan"),
        residual_norm=shot.max_residual,
        residual_table=tuple(shooting.residual_table(shot.residuals)),
        lam0=shooting.unpack(z)[0],
        switch_times=tuple(sw["time"] for sw in shot.switches),
        hams=shooting.hams,
    )
    result.cost = hmp.cost_of(model, traj, control_fn=result.control)
    return result


def rebuild(shooting: Shooting, z, config: SolveConfig = SolveConfig()) -> SolveResult:
    """Trajectory, adjoint and residual table for a given unknown vector.

    Used to re-derive and re-check a previously reported solution without
    running Newton; the vector must shoot feasibly.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (shooting.n_unknowns,):
        raise SolverError(f"candidate has shape {z.shape}, need ({shooting.n_unknowns},)")
    shot = shooting.shoot(z, config)
    if not shot.feasible:
        raise SolverError(f"candidate does not shoot feasibly: {shot.note or 'penalty fill'}")
    return _result_from_shoot(shooting, z, shot)


def solve(
    model: md.HybridModel,
    sched: md.LocationSchedule,
    x0,
    t_span: tuple[float, float],
    pinned_times: dict[int, float] | None = None,
    initial_guess: np.ndarray | None = None,
    config: SolveConfig = SolveConfig(),
    shooting: Shooting | None = None,
) -> SolveReport:
    """Solve the schedule's boundary value system by multistart shooting.

    Starts are tried in order until one converges (all of them when
    ``stop_on_converged`` is off, keeping the lowest-cost extremal);
    ``success`` is False when no start converges, in which case ``result``
    holds the best residual point.
    """
    t_begin = _time.perf_counter()
    shooting = shooting or assemble(model, sched, x0, t_span, pinned_times)
    rng = np.random.default_rng(config.seed)
    starts: list[np.ndarray] = []
    if initial_guess is not None:
        z0 = np.asarray(initial_guess, dtype=np.float64)
        if z0.shape != (shooting.n_unknowns,):
            raise SolverError(f"initial guess has shape {z0.shape}, need ({shooting.n_unknowns},)")
        starts.append(z0)
    else:
        starts.append(shooting.default_guess())
    while len(starts) < max(1, config.n_starts):
        starts.append(shooting.random_guess(rng))

    records: list[StartRecord] = []
    best: tuple[float, float, np.ndarray, ShootResult] | None = None  # (cost, norm, z, shot)
    fallback: tuple[float, np.ndarray] | None = None
    total_shoots = 0
    for k, z0 in enumerate(starts):
        out = _newton(shooting, z0, config)
        total_shoots += out.n_shoots
        cost = None
        if out.converged:
            shot = shooting.shoot(out.z, config)
            total_shoots += 1
            if shot.feasible:
                try:
                    probe = _result_from_shoot(shooting, out.z, shot)
                    cost = probe.cost
                except (hmp.HmpError, ex.EvalDomainError):
                    cost = None
                if cost is not None and (
                    best is None
                    or cost < best[0] - 1e-12
                    or (abs(cost - best[0]) <= 1e-12 and out.residual_norm < best[1])
                ):
                    best = (cost, out.residual_norm, out.z, shot)
        if fallback is None or out.residual_norm < fallback[0]:
            fallback = (out.residual_norm, out.z)
        records.append(
            StartRecord(k, out.converged, out.iterations, out.residual_norm, cost, out.message)
        )
        if best is not None and config.stop_on_converged:
            break

    result = None
    success = best is not None
    if best is not None:
        result = _result_from_shoot(shooting, best[2], best[3])
    else:
        shot = shooting.shoot(fallback[1], config)
        total_shoots += 1
        if shot.feasible:
            try:
                result = _result_from_shoot(shooting, fallback[1], shot)
            except (hmp.HmpError, ex.EvalDomainError):
                result = None

    return SolveReport(
        success=success,
        result=result,
        starts=tuple(records),
        n_shoots=total_shoots,
        wall_time=_time.perf_counter() - t_begin,
        backend=backend_name(),
        unknown_labels=shooting.unknown_labels,
    )


# ---------------------------------------------------------------------------
# Verification and serialization


def hamiltonian_constancy(model: md.HybridModel, result: SolveResult,
                          hams: dict[str, hmp.Hamiltonian] | None = None,
                          samples_per_segment: int = 33) -> tuple[float, float]:
    """Largest deviation of H(t) from its trajectory-wide median, and the
    median itself. For a time-invariant extremal H is constant everywhere."""
    hams = hams or result.hams or hmp.build_hamiltonians(model)
    values = []
    for seg, adj in zip(result.trajectory.segments, result.adjoint.segments):
        ham = hams[seg.location]
        tq = np.linspace(seg.t_start, seg.t_end, samples_per_segment)
        xq = seg.states(tq)
        lq = adj.values(tq)
        for t, x, lam in zip(tq, xq, lq):
            u, h = ham.minimize(x, lam, float(t))
            values.append(h)
    values = np.asarray(values)
    h_ref = float(np.median(values))
    return float(np.max(np.abs(values - h_ref))), h_ref


def verify_solution(model: md.HybridModel, result: SolveResult,
                    config: SolveConfig = SolveConfig()) -> dict:
    """Independent optimality checks on a solved extremal."""
    from . import sensitivity as sv

    drift, h_ref = hamiltonian_constancy(model, result)
    lin = sv.Linearization(model, result.trajectory, control_fn=result.control)
    audit = sv.duality_audit(model, result.trajectory, result.adjoint, lin)
    replay = sm.replay_check(model, result.trajectory, control_fn=result.control)
    return {
        "max_residual": result.residual_norm,
        "hamiltonian_drift": drift,
        "hamiltonian_value": h_ref,
        "duality_drift": audit.max_drift,
        "duality_scale": audit.scale,
        "replay_residual": replay,
        "cost": result.cost,
    }


def report_to_dict(report: SolveReport) -> dict:
    d = {
        "success": report.success,
        "backend": report.backend,
        "n_shoots": report.n_shoots,
        "wall_time": report.wall_time,
        "unknowns": list(report.unknown_labels),
        "starts": [
            {
                "index": s.index,
                "converged": s.converged,
                "iterations": s.iterations,
                "residual_norm": s.residual_norm,
                "cost": s.cost,
                "message": s.message,
            }
            for s in report.starts
        ],
    }
    if report.result is not None:
        r = report.result
        d["solution"] = {
            "cost": r.cost,
            "residual_norm": r.residual_norm,
            "lam0": list(r.lam0),
            "switch_times": list(r.switch_times),
            "residuals": [{"label": lbl, "value": v} for lbl, v in r.residual_table],
            "switches": [
                {
                    "event": sw.event,
                    "kind": sw.kind,
                    "time": sw.time,
                    "p": sw.p,
                    "hamiltonian_minus": sw.h_minus,
                    "hamiltonian_plus": sw.h_plus,
                }
                for sw in r.adjoint.switches
            ],
        }
    return d


def report_to_json(report: SolveReport, indent: int = 2) -> str:
    return json.dumps(report_to_dict(report), indent=indent)
