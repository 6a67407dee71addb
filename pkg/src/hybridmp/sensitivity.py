"""First-order trajectory sensitivities and optimality audits.

Variations are propagated in the cost-augmented (Mayer) space: with
f_hat = [l; f] and x_hat = [z; x], a needle variation that replaces the
control by v on a vanishing interval at time t starts the variation

    y(t+) = f_hat(x(t), v) - f_hat(x(t), u(t)),

which then follows the linearized flow y_dot = (df_hat/dx_hat) y. At a
switching the variation is transported by

    y(+) = grad xi_hat y(-) + mu f_hat_xi,     mu = gamma * grad m_hat . y(-),

where gamma is 0 at controlled switchings and 1/(grad m_hat . f_hat(-)) at
autonomous ones (the first-order shift of the crossing time), and f_hat_xi
is the mismatch f_hat(+)(xi(x), u(+)) - grad xi_hat f_hat(-)(x, u(-)).

The first-order cost change of the needle is grad g_hat . y(t_f); along an
extremal this is nonnegative for every admissible needle, and the pairing
lambda_hat . y is conserved in time and across switchings (the duality
audit). Time-varying models should be clock-augmented before using this
module; the crossing-time shift here uses state gradients only.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import exprlang as ex
from . import hmp
from . import model as md
from . import simulate as sm
from .kernels import eval_program_vec

SUBSTEPS = 2  # classical RK4 sub-steps per accepted integrator step


def _hat_field(loc: md.Location) -> list[ex.Expr]:
    return [loc.running_cost, *loc.field]


class Linearization:
    """Linearized flow of a stored trajectory in the cost-augmented space.

    Jacobian samples are precomputed on a refined copy of the integration
    mesh (``substeps`` RK4 steps per accepted step, sampled at half-step
    spacing), so propagating many variations along one trajectory is cheap.
    """

    def __init__(
        self,
        model: md.HybridModel,
        traj: sm.HybridTrajectory,
        control_fn: Callable | None = None,
        substeps: int = SUBSTEPS,
    ):
        if traj.outcome != sm.COMPLETED:
            raise hmp.HmpError(f"linearization needs a completed trajectory, got {traj.outcome!r}")
        self.model = model
        self.traj = traj
        self.control_fn = control_fn
        self.substeps = max(1, int(substeps))
        self._jac_exprs: dict[str, list[list[ex.Expr]]] = {}
        self._grids: list[tuple[np.ndarray, np.ndarray]] = []  # (taus, A samples)
        self._phis: list[np.ndarray | None] = [None] * len(traj.segments)
        self._jumps = []
        for i, seg in enumerate(traj.segments):
            self._grids.append(self._sample_segment(i, seg))
        for k, jump in enumerate(traj.jumps):
            self._jumps.append(self._jump_data(k, jump))

    # -- construction

    def _jacobian_exprs(self, loc: md.Location) -> list[list[ex.Expr]]:
        rows = self._jac_exprs.get(loc.name)
        if rows is None:
            fhat = _hat_field(loc)
            rows = [[ex.differentiate(fi, xv) for xv in loc.state_vars] for fi in fhat]
            self._jac_exprs[loc.name] = rows
        return rows

    def _controls_at(self, seg: sm.TrajectorySegment, loc: md.Location, tq, xq) -> np.ndarray:
        if loc.control_dim == 0:
            return np.zeros((0, len(tq)))
        if self.control_fn is not None:
            return np.stack(
                [np.asarray(self.control_fn(seg.location, t, x), dtype=np.float64) for t, x in zip(tq, xq)],
                axis=1,
            )
        return np.stack([np.interp(tq, seg.ts, seg.us[:, j]) for j in range(loc.control_dim)])

    def _sample_segment(self, i: int, seg: sm.TrajectorySegment):
        loc = self.model.location(seg.location)
        S = self.substeps
        a = seg.ts[:-1]
        h = seg.ts[1:] - a
        # Half-step spacing: 2S samples per accepted step plus the final node.
        offs = np.arange(2 * S) / (2.0 * S)
        taus = np.concatenate([(a[:, None] + h[:, None] * offs[None, :]).ravel(), seg.ts[-1:]])
        xq = seg.states(taus)
        uq = self._controls_at(seg, loc, taus, xq)
        n_hat = loc.state_dim + 1
        A = np.zeros((len(taus), n_hat, n_hat))
        pts = np.vstack([taus[None, :], xq.T, uq])
        order = ("t",) + loc.state_vars + loc.control_vars
        for r, row in enumerate(self._jacobian_exprs(loc)):
            for c, entry in enumerate(row):
                if entry == ex.ZERO:
                    continue
                if isinstance(entry, ex.Const):
                    A[:, r, c + 1] = entry.value
                    continue
                prog = ex.compile_expr(entry, order)
                A[:, r, c + 1] = eval_program_vec(prog.code, prog.consts, pts)
        return taus, A

    def _hat_field_at(self, loc: md.Location, t: float, x, u) -> np.ndarray:
        env = {"t": float(t)}
        env.update({n: float(v) for n, v in zip(loc.state_vars, x)})
        env.update({n: float(v) for n, v in zip(loc.control_vars, u)})
        return np.array([ex.evaluate(f, env) for f in _hat_field(loc)])

    def _jump_data(self, k: int, jump: sm.JumpRecord):
        tr = self.model.transition(jump.event)
        src = self.model.location(tr.source)
        tgt = self.model.location(tr.target)
        env = {"t": jump.time}
        env.update({n: float(v) for n, v in zip(src.state_vars, jump.x_minus)})
        n_s, n_t = src.state_dim, tgt.state_dim
        # grad xi_hat: [[1, grad c], [0, grad xi]] in (z, x) blocks.
        xi_hat = np.zeros((n_t + 1, n_s + 1))
        xi_hat[0, 0] = 1.0
        for c, xv in enumerate(src.state_vars):
            xi_hat[0, c + 1] = ex.evaluate(ex.differentiate(tr.switch_cost, xv), env)
        for r, j_expr in enumerate(tr.jump):
            for c, xv in enumerate(src.state_vars):
                xi_hat[r + 1, c + 1] = ex.evaluate(ex.differentiate(j_expr, xv), env)
        seg_minus = self.traj.segments[k]
        seg_plus = self.traj.segments[k + 1]
        u_minus = seg_minus.us[-1] if seg_minus.us.shape[1] else np.zeros(0)
        u_plus = seg_plus.us[0] if seg_plus.us.shape[1] else np.zeros(0)
        fhat_minus = self._hat_field_at(src, jump.time, jump.x_minus, u_minus)
        fhat_plus = self._hat_field_at(tgt, jump.time, jump.x_plus, u_plus)
        if tr.kind == md.AUTONOMOUS:
            grad_m = np.array(
                [ex.evaluate(ex.differentiate(tr.guard, xv), env) for xv in src.state_vars]
            )
            denom = float(grad_m @ fhat_minus[1:])
            gamma = 1.0 / denom
        else:
            grad_m = np.zeros(n_s)
            gamma = 0.0
        f_xi = fhat_plus - xi_hat @ fhat_minus
        return {"xi_hat": xi_hat, "grad_m": grad_m, "gamma": gamma, "f_xi": f_xi, "kind": tr.kind}

    # -- queries

    def segment_index(self, t: float) -> int:
        for i, seg in enumerate(self.traj.segments):
            if t <= seg.t_end:
                return i
        return len(self.traj.segments) - 1

    def field_gap(self, i_seg: int, t: float, v) -> np.ndarray:
        """Initial needle variation [l(x,v) - l(x,u); f(x,v) - f(x,u)]."""
        seg = self.traj.segments[i_seg]
        loc = self.model.location(seg.location)
        x = seg.states(t)
        u = self._controls_at(seg, loc, np.array([t]), x[None, :])[:, 0]
        v = np.asarray(v, dtype=np.float64)
        return self._hat_field_at(loc, t, x, v) - self._hat_field_at(loc, t, x, u)

    def transport_jump(self, k: int, y_minus: np.ndarray) -> tuple[np.ndarray, float]:
        """Variation across switching k; returns (y_plus, mu)."""
        data = self._jumps[k]
        mu = data["gamma"] * float(data["grad_m"] @ y_minus[1:])
        return data["xi_hat"] @ y_minus + mu * data["f_xi"], mu

    def _sweep(self, i_seg: int, t_from: float, Y: np.ndarray, record=None) -> np.ndarray:
        """RK4 sweep of Y (columns are variations) to the segment end."""
        taus, A = self._grids[i_seg]
        n_grid = len(taus)
        # Position strictly after t_from on the even (step-boundary) grid.
        j = int(np.searchsorted(taus, t_from, side="left"))
        if j % 2 == 1:
            j += 1
        j = min(j, n_grid - 1)
        if record is not None and taus[-1] > t_from:
            record(t_from, Y)
        if taus[j] > t_from and j >= 1:
            # Partial leading step with freshly evaluated Jacobians.
            seg = self.traj.segments[i_seg]
            loc = self.model.location(seg.location)
            t_mid = 0.5 * (t_from + taus[j])
            Y = _rk4_step(
                Y,
                taus[j] - t_from,
                self._jacobian_at(seg, loc, t_from),
                self._jacobian_at(seg, loc, t_mid),
                self._jacobian_at(seg, loc, taus[j]),
            )
            if record is not None:
                record(taus[j], Y)
        while j + 2 <= n_grid - 1:
            Y = _rk4_step(Y, taus[j + 2] - taus[j], A[j], A[j + 1], A[j + 2])
            j += 2
            if record is not None:
                record(taus[j], Y)
        return Y

    def _jacobian_at(self, seg: sm.TrajectorySegment, loc: md.Location, t: float) -> np.ndarray:
        x = seg.states(t)
        u = self._controls_at(seg, loc, np.array([t]), x[None, :])[:, 0]
        env = {"t": float(t)}
        env.update({n: float(v) for n, v in zip(loc.state_vars, x)})
        env.update({n: float(v) for n, v in zip(loc.control_vars, u)})
        rows = self._jacobian_exprs(loc)
        n_hat = loc.state_dim + 1
        A = np.zeros((n_hat, n_hat))
        for r, row in enumerate(rows):
            for c, entry in enumerate(row):
                A[r, c + 1] = ex.evaluate(entry, env)
        return A

    def propagate(self, i_seg: int, t: float, y: np.ndarray, record=None) -> np.ndarray:
        """Carry a variation from (i_seg, t) to the final time."""
        Y = np.asarray(y, dtype=np.float64).reshape(-1, 1)
        Y = self._sweep(i_seg, t, Y, record)
        for k in range(i_seg, len(self.traj.jumps)):
            y_plus, _ = self.transport_jump(k, Y[:, 0])
            Y = y_plus.reshape(-1, 1)
            Y = self._sweep(k + 1, self.traj.segments[k + 1].t_start, Y, record)
        return Y[:, 0]

    def segment_transition_matrix(self, i_seg: int) -> np.ndarray:
        """Flow matrix of the linearized dynamics over one whole segment."""
        phi = self._phis[i_seg]
        if phi is None:
            seg = self.traj.segments[i_seg]
            n_hat = seg.state_dim + 1
            phi = self._sweep(i_seg, seg.t_start, np.eye(n_hat))
            self._phis[i_seg] = phi
        return phi

    def transition_matrix(self, i_seg: int, t_a: float, t_b: float) -> np.ndarray:
        """Flow matrix from t_a to t_b inside segment i_seg (t_a <= t_b)."""
        seg = self.traj.segments[i_seg]
        loc = self.model.location(seg.location)
        taus, A = self._grids[i_seg]
        Y = np.eye(seg.state_dim + 1)
        j = int(np.searchsorted(taus, t_a, side="left"))
        if j % 2 == 1:
            j += 1
        t_cur = t_a
        while t_cur < t_b - 1e-15:
            # Next target: the upcoming even grid node, clipped at t_b.
            while j <= len(taus) - 1 and taus[j] <= t_cur + 1e-15:
                j += 2
            t_nxt = min(taus[j], t_b) if j <= len(taus) - 1 else t_b
            on_grid = j <= len(taus) - 1 and abs(t_nxt - taus[j]) < 1e-15
            prev_on_grid = j >= 2 and abs(t_cur - taus[j - 2]) < 1e-15
            if on_grid and prev_on_grid:
                Y = _rk4_step(Y, t_nxt - t_cur, A[j - 2], A[j - 1], A[j])
            else:
                t_mid = 0.5 * (t_cur + t_nxt)
                Y = _rk4_step(
                    Y,
                    t_nxt - t_cur,
                    self._jacobian_at(seg, loc, t_cur),
                    self._jacobian_at(seg, loc, t_mid),
                    self._jacobian_at(seg, loc, t_nxt),
                )
            t_cur = t_nxt
        return Y


def _rk4_step(Y: np.ndarray, h: float, A0: np.ndarray, Am: np.ndarray, A1: np.ndarray) -> np.ndarray:
    k1 = A0 @ Y
    k2 = Am @ (Y + 0.5 * h * k1)
    k3 = Am @ (Y + 0.5 * h * k2)
    k4 = A1 @ (Y + h * k3)
    return Y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


# ---------------------------------------------------------------------------
# Needle variations


@dataclass(frozen=True)
class NeedleVariation:
    t: float
    v: np.ndarray
    segment_index: int
    y_start: np.ndarray
    y_final: np.ndarray
    first_order_cost_change: float


def terminal_hat_gradient(model: md.HybridModel, traj: sm.HybridTrajectory) -> np.ndarray:
    x_f = traj.final_state
    return np.concatenate([[1.0], hmp.terminal_adjoint(model, x_f, traj.tf)])


def needle_variation(lin: Linearization, t: float, v) -> NeedleVariation:
    """First-order cost effect of forcing the control to v near time t."""
    i_seg = lin.segment_index(t)
    y0 = lin.field_gap(i_seg, t, v)
    y_f = lin.propagate(i_seg, t, y0)
    grad = terminal_hat_gradient(lin.model, lin.traj)
    return NeedleVariation(t, np.asarray(v, dtype=np.float64), i_seg, y0, y_f, float(grad @ y_f))


def finite_needle_cost_change(
    model: md.HybridModel,
    sched: md.LocationSchedule,
    inputs: sm.HybridInput,
    traj: sm.HybridTrajectory,
    t: float,
    v,
    eps: float,
    config: sm.SimConfig = sm.SimConfig(),
) -> float:
    """(J(eps) - J(0)) / eps for an actual width-eps control replacement.

    The perturbed trajectory is computed by resimulating: the head is taken
    from the stored trajectory, the needle interval integrates with the
    constant control v, and the tail re-runs the remaining schedule from
    the perturbed state (autonomous switching times move accordingly).
    """
    i_seg = 0
    while traj.segments[i_seg].t_end < t:
        i_seg += 1
    seg = traj.segments[i_seg]
    if t + eps > seg.t_end:
        raise ValueError("needle interval crosses a switching; place it inside a segment")

    head = 0.0
    for s in range(i_seg):
        head += _partial_running_cost(model, traj.segments[s], traj.segments[s].t_start, traj.segments[s].t_end)
        head += traj.jumps[s].switch_cost
    head += _partial_running_cost(model, seg, seg.t_start, t)

    x_t = seg.states(t)
    needle_seg, res = sm.integrate_segment(
        model, seg.location, x_t, (t, t + eps), sm.ConstantControl(tuple(np.atleast_1d(v))),
        config=config,
    )
    if res.status != 0:
        raise hmp.HmpError(f"needle integration failed: {res.message}")
    head += _partial_running_cost(model, needle_seg, t, t + eps)

    tail_sched = md.LocationSchedule(sched.locations[i_seg:], sched.events[i_seg:])
    tail_inputs = sm.HybridInput(
        tuple(inputs.controls[i_seg:]),
        tuple(inputs.switch_times[i_seg:]) if inputs.switch_times else (None,) * tail_sched.n_switches,
    )
    tail = sm.run(model, tail_sched, needle_seg.ys[-1], (t + eps, traj.tf), tail_inputs, config)
    if tail.outcome != sm.COMPLETED:
        raise hmp.HmpError(f"perturbed tail failed: {tail.outcome} ({tail.reason})")
    j_eps = head + hmp.cost_of(model, tail)
    j_0 = hmp.cost_of(model, traj)
    return (j_eps - j_0) / eps


def _partial_running_cost(model: md.HybridModel, seg: sm.TrajectorySegment, a: float, b: float) -> float:
    """Simpson quadrature of the running cost over [a, b] within a segment."""
    loc = model.location(seg.location)
    if b <= a:
        return 0.0
    if isinstance(loc.running_cost, ex.Const):
        return loc.running_cost.value * (b - a)
    knots = seg.ts
    pw = hmp._control_kinks(seg)
    if pw is not None and len(pw):
        knots = np.unique(np.concatenate([knots, pw]))
    inner = knots[(knots > a) & (knots < b)]
    edges = np.concatenate([[a], inner, [b]])
    h = np.diff(edges)
    pts = np.concatenate([edges[:-1], edges[:-1] + 0.25 * h, edges[:-1] + 0.5 * h, edges[:-1] + 0.75 * h, edges[1:]])
    w = np.concatenate([h / 12.0, h / 3.0, h / 6.0, h / 3.0, h / 12.0])
    xq = seg.states(pts)
    uq = hmp._control_rows(seg, loc, pts, xq, None)
    order = ("t",) + loc.state_vars + loc.control_vars
    prog = ex.compile_expr(loc.running_cost, order)
    lv = eval_program_vec(prog.code, prog.consts, np.vstack([pts[None, :], xq.T, uq]))
    return float(w @ lv)


# ---------------------------------------------------------------------------
# Duality audit


@dataclass(frozen=True)
class DualityReport:
    max_drift: float
    scale: float
    n_probes: int


def duality_audit(
    model: md.HybridModel,
    traj: sm.HybridTrajectory,
    adj: hmp.AdjointTrajectory,
    lin: Linearization | None = None,
    needle_times: int = 3,
) -> DualityReport:
    """Conservation of the pairing lambda_hat . y along the trajectory.

    For a spread of needle variations, the augmented pairing
    y_z(t) + lambda(t) . y_x(t) is sampled along the propagated variation;
    it should be constant in time and across switchings. Returns the
    largest observed drift and the pairing magnitude for scaling.
    """
    lin = lin or Linearization(model, traj)
    drift = 0.0
    scale = 0.0
    count = 0
    for i_seg, seg in enumerate(traj.segments):
        loc = model.location(seg.location)
        span = seg.t_end - seg.t_start
        for r in range(needle_times):
            t = seg.t_start + span * (0.18 + 0.6 * (r + 0.5) / needle_times)
            if loc.control_dim:
                v = np.array([lo if (r + j) % 2 else hi for j, (lo, hi) in enumerate(loc.control_box)])
                v = np.clip(v, -1e3, 1e3)
            else:
                v = np.zeros(0)
            y0 = lin.field_gap(i_seg, t, v)
            if not np.any(y0):
                continue
            samples: list[tuple[int, float, np.ndarray]] = []
            _propagate_tracking(lin, i_seg, t, y0, samples)
            vals = []
            for s_idx, tt, y in samples:
                lam = adj.segments[s_idx].values(np.array([tt]))[0]
                vals.append(y[0] + float(lam @ y[1:]))
            if not vals:
                continue
            pair_end = vals[-1]
            for pv in vals:
                drift = max(drift, abs(pv - pair_end))
                scale = max(scale, abs(pv))
            count += len(vals)
    return DualityReport(drift, scale, count)


def _propagate_tracking(lin: Linearization, i_seg: int, t: float, y0: np.ndarray, samples: list):
    Y = y0.reshape(-1, 1)

    def make_rec(idx):
        def rec(tt, YY):
            samples.append((idx, tt, YY[:, 0].copy()))

        return rec

    Y = lin._sweep(i_seg, t, Y, make_rec(i_seg))
    for k in range(i_seg, len(lin.traj.jumps)):
        y_plus, _ = lin.transport_jump(k, Y[:, 0])
        Y = y_plus.reshape(-1, 1)
        Y = lin._sweep(k + 1, lin.traj.segments[k + 1].t_start, Y, make_rec(k + 1))
    return Y[:, 0]
