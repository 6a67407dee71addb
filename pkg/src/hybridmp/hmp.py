"""Hamiltonians, adjoint machinery and cost functionals for hybrid arcs.

For each location q with running cost l_q and field f_q the control
Hamiltonian is H_q = l_q + lambda . f_q over (x, lambda, u, t). This module
builds these symbolically, minimizes them pointwise over the control box,
integrates the adjoint equation lambda_dot = -dH/dx backward along a stored
trajectory, and applies the switching boundary conditions

    lambda(t_j-) = (grad xi)^T lambda(t_j+) + grad c + p grad m,

with p = 0 at controlled switchings and p determined by continuity of the
Hamiltonian at autonomous ones. Bolza problems can be rewritten in Mayer
form (cost absorbed into a leading state z = x1) and time-varying problems
in time-invariant form (clock state prepended), both as plain model
transformations.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import exprlang as ex
from . import model as md
from . import simulate as sm
from .kernels import eval_program_vec, programs as bp, rk45_segment


class HmpError(ValueError):
    pass


def lam_names(n: int) -> tuple[str, ...]:
    return tuple(f"lam{i + 1}" for i in range(n))


# ---------------------------------------------------------------------------
# Hamiltonians


@dataclass(frozen=True)
class SeparableRule:
    """dH/du_j = alpha_j(x, lam, t) + beta_j(x, lam, t) u_j, componentwise."""

    alpha: tuple[ex.Expr, ...]
    beta: tuple[ex.Expr, ...]


class Hamiltonian:
    """Symbolic Hamiltonian of one location with cached derivatives."""

    def __init__(self, loc: md.Location):
        self.location = loc.name
        self.n_x = loc.state_dim
        self.n_u = loc.control_dim
        self.box = loc.control_box
        self.l = loc.running_cost
        self.f = loc.field
        self.x_vars = loc.state_vars
        self.u_vars = loc.control_vars
        self.lam_vars = lam_names(loc.state_dim)
        self.var_order = ("t",) + self.x_vars + self.u_vars + self.lam_vars

        lam_dot_f = ex.ZERO
        for lam_v, f_i in zip(self.lam_vars, loc.field):
            lam_dot_f = ex.add(lam_dot_f, ex.mul(ex.Var(lam_v), f_i))
        self.H = ex.add(loc.running_cost, lam_dot_f)

        self.dH_dx = tuple(ex.differentiate(self.H, v) for v in self.x_vars)
        self.dH_du = tuple(ex.differentiate(self.H, v) for v in self.u_vars)
        self.dH_dlam = tuple(ex.differentiate(self.H, v) for v in self.lam_vars)
        self.lam_dot = tuple(ex.neg(d) for d in self.dH_dx)
        self.separable = self._detect_separable()
        self._packs: dict[str, object] = {}

    def _detect_separable(self) -> SeparableRule | None:
        if self.n_u == 0:
            return SeparableRule((), ())
        u_set = frozenset(self.u_vars)
        alphas: list[ex.Expr] = []
        betas: list[ex.Expr] = []
        for j, dj in enumerate(self.dH_du):
            beta = ex.differentiate(dj, self.u_vars[j])
            if ex.free_vars(beta) & u_set:
                return None
            alpha = ex.substitute(dj, {v: ex.ZERO for v in self.u_vars})
            if ex.free_vars(alpha) & u_set:
                return None
            # Cross terms must vanish identically for the componentwise rule.
            for k, vk in enumerate(self.u_vars):
                if k != j and ex.differentiate(dj, vk) != ex.ZERO:
                    return None
            alphas.append(alpha)
            betas.append(beta)
        rule = SeparableRule(tuple(alphas), tuple(betas))
        return rule if self._separable_sound(rule) else None

    def _separable_sound(self, rule: SeparableRule, samples: int = 16) -> bool:
        """Numeric spot check that dH/du_j == alpha_j + beta_j u_j."""
        rng = np.random.default_rng(7)
        for _ in range(samples):
            env = {v: float(rng.uniform(0.3, 1.7)) for v in self.var_order}
            for j, dj in enumerate(self.dH_du):
                try:
                    lhs = ex.evaluate(dj, env)
                    rhs = ex.evaluate(rule.alpha[j], env) + ex.evaluate(rule.beta[j], env) * env[self.u_vars[j]]
                except ex.EvalDomainError:
                    continue
                if abs(lhs - rhs) > 1e-9 * (1.0 + abs(lhs)):
                    return False
        return True

    # -- evaluation helpers

    def env(self, x, lam, u, t: float) -> dict[str, float]:
        env = {"t": float(t)}
        env.update({v: float(val) for v, val in zip(self.x_vars, x)})
        env.update({v: float(val) for v, val in zip(self.u_vars, u)})
        env.update({v: float(val) for v, val in zip(self.lam_vars, lam)})
        return env

    def value(self, x, lam, u, t: float) -> float:
        return ex.evaluate(self.H, self.env(x, lam, u, t))

    def pack(self, which: str) -> bp.ProgramPack:
        pk = self._packs.get(which)
        if pk is None:
            exprs = {
                "f": self.f,
                "lam_dot": self.lam_dot,
                "alpha": self.separable.alpha if self.separable else (),
                "beta": self.separable.beta if self.separable else (),
                "H": (self.H,),
                "l": (self.l,),
                "dH_du": self.dH_du,
            }[which]
            pk = bp.pack_programs(ex.compile_expr(e, self.var_order) for e in exprs)
            self._packs[which] = pk
        return pk

    def control_fields(self) -> dict:
        """Kernel control-mode fields for pointwise Hamiltonian minimization."""
        if self.n_u == 0:
            return {"ctrl_mode": bp.CTRL_NONE}
        if self.separable is not None:
            return {
                "ctrl_mode": bp.CTRL_HMIN,
                "hm_alpha": self.pack("alpha"),
                "hm_beta": self.pack("beta"),
                "box_lo": np.array([b[0] for b in self.box]),
                "box_hi": np.array([b[1] for b in self.box]),
            }
        ham = self

        def fallback(t, x, lam):
            return ham.minimize(x, lam, t)[0]

        return {"ctrl_mode": bp.CTRL_PYFN, "py_ctrl": fallback}

    def minimize(self, x, lam, t: float) -> tuple[np.ndarray, float]:
        """Pointwise minimizer of H over the control box and its value.

        The componentwise rule applies when dH/du is affine and diagonal in
        u (detected symbolically); candidates are the box ends and the
        clamped stationary point, scanned in ascending u so ties resolve to
        the smallest control. Otherwise projected gradient descent from a
        deterministic set of box points is used.
        """
        if self.n_u == 0:
            u = np.zeros(0)
            return u, self.value(x, lam, u, t)
        if self.separable is not None:
            env = self.env(x, lam, np.zeros(self.n_u), t)
            u = np.empty(self.n_u)
            for j in range(self.n_u):
                a = ex.evaluate(self.separable.alpha[j], env)
                b = ex.evaluate(self.separable.beta[j], env)
                lo, hi = self.box[j]
                best_u = lo
                best_phi = (0.5 * b * lo + a) * lo
                if b > 0.0:
                    u_st = -a / b
                    if lo < u_st < hi:
                        phi = (0.5 * b * u_st + a) * u_st
                        if phi < best_phi:
                            best_phi = phi
                            best_u = u_st
                phi = (0.5 * b * hi + a) * hi
                if phi < best_phi:
                    best_u = hi
                u[j] = best_u
            return u, self.value(x, lam, u, t)
        return self._minimize_general(x, lam, t)

    def _minimize_general(self, x, lam, t: float) -> tuple[np.ndarray, float]:
        lo = np.array([b[0] for b in self.box])
        hi = np.array([b[1] for b in self.box])
        mid = 0.5 * (lo + hi)
        starts = [mid]
        for s in range(7):
            u = np.empty(self.n_u)
            for j in range(self.n_u):
                u[j] = lo[j] if (s >> (j % 7)) & 1 else hi[j]
            starts.append(u)

        def h_of(u):
            try:
                return self.value(x, lam, u, t)
            except ex.EvalDomainError:
                return float("inf")

        def grad(u):
            env = self.env(x, lam, u, t)
            return np.array([ex.evaluate(d, env) for d in self.dH_du])

        best_u, best_h = None, float("inf")
        span = np.maximum(hi - lo, 1e-12)
        for u0 in starts:
            u = u0.copy()
            h_val = h_of(u)
            if not np.isfinite(h_val):
                continue
            eta = 0.25
            for _ in range(200):
                try:
                    g = grad(u)
                except ex.EvalDomainError:
                    break
                u_new = np.clip(u - eta * span * g, lo, hi)
                if np.max(np.abs(u_new - u)) < 1e-12:
                    break
                h_new = h_of(u_new)
                if h_new < h_val - 1e-16:
                    u, h_val = u_new, h_new
                    eta = min(eta * 1.6, 4.0)
                else:
                    eta *= 0.5
                    if eta < 1e-12:
                        break
            if h_val < best_h - 1e-14 or (
                abs(h_val - best_h) <= 1e-14 and best_u is not None and tuple(u) < tuple(best_u)
            ):
                best_u, best_h = u, h_val
        if best_u is None:
            raise HmpError(f"Hamiltonian of {self.location!r} has no finite value on the control box")
        return best_u, best_h


def build_hamiltonians(model: md.HybridModel) -> dict[str, Hamiltonian]:
    return {loc.name: Hamiltonian(loc) for loc in model.locations}


def minimize_hamiltonian(ham: Hamiltonian, x, lam, t: float = 0.0) -> tuple[np.ndarray, float]:
    return ham.minimize(x, lam, t)


# ---------------------------------------------------------------------------
# Switching boundary conditions


def _grad_at(e: ex.Expr, names: Sequence[str], env) -> np.ndarray:
    return np.array([ex.evaluate(ex.differentiate(e, v), env) for v in names])


def _env_xt(x, t: float) -> dict[str, float]:
    env = {f"x{i + 1}": float(v) for i, v in enumerate(x)}
    env["t"] = float(t)
    return env


def jump_jacobian(tr: md.Transition, x_minus, t: float) -> np.ndarray:
    """d xi / d x at the pre-jump state; shape (n_target, n_source)."""
    env = _env_xt(x_minus, t)
    names = [f"x{i + 1}" for i in range(len(x_minus))]
    return np.array([[ex.evaluate(ex.differentiate(j, v), env) for v in names] for j in tr.jump])


def adjoint_jump(tr: md.Transition, x_minus, lam_plus, p: float = 0.0, t: float = 0.0) -> np.ndarray:
    """Pre-switch adjoint from the post-switch one.

    lambda(t_j-) = (grad xi)^T lambda(t_j+) + grad c + p grad m. The
    manifold multiplier p must be zero at controlled switchings.
    """
    env = _env_xt(x_minus, t)
    names = [f"x{i + 1}" for i in range(len(x_minus))]
    jac = jump_jacobian(tr, x_minus, t)
    lam_plus = np.asarray(lam_plus, dtype=np.float64)
    if jac.shape[0] != lam_plus.shape[0]:
        raise HmpError(
            f"adjoint for {tr.event!r} has {lam_plus.shape[0]} component(s); the jump has {jac.shape[0]}"
        )
    out = jac.T @ lam_plus + _grad_at(tr.switch_cost, names, env)
    if tr.kind == md.AUTONOMOUS:
        out = out + p * _grad_at(tr.guard, names, env)
    elif p != 0.0:
        raise HmpError(f"{tr.event!r} is controlled; its manifold multiplier must be zero, got {p}")
    return out


def solve_p_from_continuity(
    ham_minus: Hamiltonian,
    tr: md.Transition,
    x_minus,
    u_minus,
    lam_plus,
    h_plus: float,
    t: float = 0.0,
    transversality_eps: float = 1e-6,
) -> float:
    """Manifold multiplier making the Hamiltonian continuous across an
    autonomous switching: using lambda(-) = base + p grad m,

        H-(p) = l- + (base + p grad m) . f-  ==  H+.
    """
    if tr.kind != md.AUTONOMOUS:
        raise HmpError(f"{tr.event!r} is controlled; p is fixed to zero there")
    env = _env_xt(x_minus, t)
    names = [f"x{i + 1}" for i in range(len(x_minus))]
    env_u = ham_minus.env(x_minus, np.zeros(ham_minus.n_x), u_minus, t)
    f_minus = np.array([ex.evaluate(f, env_u) for f in ham_minus.f])
    l_minus = ex.evaluate(ham_minus.l, env_u)
    base = jump_jacobian(tr, x_minus, t).T @ np.asarray(lam_plus, dtype=np.float64)
    base = base + _grad_at(tr.switch_cost, names, env)
    gm = _grad_at(tr.guard, names, env)
    denom = float(gm @ f_minus)
    if abs(denom) <= transversality_eps:
        raise HmpError(
            f"non-transversal crossing for {tr.event!r}: grad m . f = {denom!r}"
        )
    return (float(h_plus) - l_minus - float(base @ f_minus)) / denom


# ---------------------------------------------------------------------------
# Backward adjoint integration


@dataclass(frozen=True)
class AdjointSegment:
    location: str
    ts: np.ndarray  # descending accepted nodes (backward sweep order)
    t0s: np.ndarray
    hs: np.ndarray
    y0s: np.ndarray
    ks: np.ndarray
    ys: np.ndarray
    us: np.ndarray  # control used while integrating lambda

    def values(self, tq):
        return bp.dense_eval(self.ts, self.t0s, self.hs, self.y0s, self.ks, tq)

    @property
    def lam_start(self) -> np.ndarray:
        """lambda at the segment's earliest time."""
        return self.ys[-1]

    @property
    def lam_end(self) -> np.ndarray:
        """lambda at the segment's latest time."""
        return self.ys[0]


@dataclass(frozen=True)
class SwitchConditions:
    event: str
    kind: str
    time: float
    lam_minus: np.ndarray
    lam_plus: np.ndarray
    p: float
    h_minus: float
    h_plus: float


@dataclass(frozen=True)
class AdjointTrajectory:
    """Adjoint flow lambda(t) aligned with a state trajectory's segments."""

    segments: tuple[AdjointSegment, ...]
    switches: tuple[SwitchConditions, ...]
    terminal_gradient: np.ndarray
    abnormal_multiplier: float = 1.0  # cost multiplier lambda_0 (normal case)

    def lam(self, t: float, segment_index: int) -> np.ndarray:
        return self.segments[segment_index].values(t)


def terminal_adjoint(model: md.HybridModel, x_f, t_f: float) -> np.ndarray:
    env = _env_xt(x_f, t_f)
    names = [f"x{i + 1}" for i in range(len(x_f))]
    return _grad_at(model.terminal_cost, names, env)


def _recorded_control_fields(seg: sm.TrajectorySegment) -> dict:
    if seg.us.shape[1] == 0:
        return {"ctrl_mode": bp.CTRL_NONE}
    if len(seg.ts) < 2:
        return {"ctrl_mode": bp.CTRL_CONST, "ctrl_const": seg.us[0].copy()}
    return {
        "ctrl_mode": bp.CTRL_PWL,
        "pwl_ts": seg.ts.copy(),
        "pwl_vals": np.ascontiguousarray(seg.us.T),
    }


def integrate_adjoint_backward(
    model: md.HybridModel,
    traj: sm.HybridTrajectory,
    hams: dict[str, Hamiltonian] | None = None,
    config: sm.SimConfig = sm.SimConfig(),
    use_hamiltonian_control: bool = False,
) -> AdjointTrajectory:
    """Backward sweep of the adjoint equation along a stored trajectory.

    Starts from lambda(t_f) = grad g and walks the segments in reverse,
    applying the switching condition at every jump; at autonomous switches
    the multiplier p is solved from Hamiltonian continuity. The control is
    replayed from the recorded nodes, or regenerated by pointwise
    Hamiltonian minimization when ``use_hamiltonian_control`` is set (the
    consistent choice for extremal trajectories).
    """
    if traj.outcome != sm.COMPLETED:
        raise HmpError(f"adjoint integration needs a completed trajectory, got {traj.outcome!r}")
    hams = hams or build_hamiltonians(model)
    segs = traj.segments
    x_f = segs[-1].ys[-1]
    lam = terminal_adjoint(model, x_f, traj.tf)

    out_segs: list[AdjointSegment] = []
    out_switch: list[SwitchConditions] = []
    for i in range(len(segs) - 1, -1, -1):
        seg = segs[i]
        ham = hams[seg.location]
        ctrl = ham.control_fields() if use_hamiltonian_control else _recorded_control_fields(seg)
        rhs = bp.RhsPack(
            n_x=ham.n_x,
            n_u=ham.n_u,
            n_lam=ham.n_x,
            g=ham.pack("lam_dot"),
            interp_ts=seg.ts,
            interp_t0s=seg.t0s,
            interp_hs=seg.hs,
            interp_y0s=seg.y0s,
            interp_ks=seg.ks,
            **ctrl,
        )
        res = rk45_segment(
            rhs,
            lam,
            seg.t_end,
            seg.t_start,
            rtol=config.rtol,
            atol=config.atol,
            max_steps=config.max_steps,
        )
        if res.status != bp.ST_OK:
            raise HmpError(
                f"adjoint integration failed in {seg.location!r}: status {res.status} {res.message}"
            )
        out_segs.append(
            AdjointSegment(seg.location, res.ts, res.t0s, res.hs, res.y0s, res.ks, res.ys, res.us)
        )
        lam_plus_here = res.ys[-1]  # lambda at this segment's start

        if i > 0:
            jump = traj.jumps[i - 1]
            tr = model.transition(jump.event)
            prev = segs[i - 1]
            ham_minus = hams[prev.location]
            u_plus = seg.us[0] if seg.us.shape[1] else np.zeros(0)
            h_plus = ham.value(jump.x_plus, lam_plus_here, u_plus, jump.time)
            u_minus = prev.us[-1] if prev.us.shape[1] else np.zeros(0)
            if tr.kind == md.AUTONOMOUS:
                p = solve_p_from_continuity(
                    ham_minus, tr, jump.x_minus, u_minus, lam_plus_here, h_plus, jump.time,
                    transversality_eps=config.transversality_eps,
                )
            else:
                p = 0.0
            lam_minus = adjoint_jump(tr, jump.x_minus, lam_plus_here, p, jump.time)
            h_minus = ham_minus.value(jump.x_minus, lam_minus, u_minus, jump.time)
            out_switch.append(
                SwitchConditions(jump.event, tr.kind, jump.time, lam_minus, lam_plus_here, p, h_minus, h_plus)
            )
            lam = lam_minus

    return AdjointTrajectory(
        tuple(reversed(out_segs)),
        tuple(reversed(out_switch)),
        terminal_adjoint(model, x_f, traj.tf),
    )


# ---------------------------------------------------------------------------
# Model rewrites


def _shift_states(e: ex.Expr, n: int, extra: dict[str, ex.Expr] | None = None) -> ex.Expr:
    mapping: dict[str, ex.Expr] = {f"x{i + 1}": ex.Var(f"x{i + 2}") for i in range(n)}
    if extra:
        mapping.update(extra)
    return ex.substitute(e, mapping)


def to_mayer(model: md.HybridModel) -> md.HybridModel:
    """Absorb running and switching costs into a leading cost state.

    Every location gains z = x1 with z_dot = l_q and running cost 0; jumps
    become [z + c; xi] with switching cost 0; the terminal cost becomes
    x1 + g. Initial states must be lifted to [0, x0]; the original total
    cost is then the lifted terminal cost at the endpoint.
    """
    locations = []
    for loc in model.locations:
        n = loc.state_dim
        field = (_shift_states(loc.running_cost, n),) + tuple(_shift_states(f, n) for f in loc.field)
        locations.append(
            md.location(loc.name, field, running_cost=ex.ZERO, control_box=loc.control_box)
        )
    transitions = []
    for tr in model.transitions:
        n_src = model.location(tr.source).state_dim
        jump = (ex.add(ex.Var("x1"), _shift_states(tr.switch_cost, n_src)),) + tuple(
            _shift_states(j, n_src) for j in tr.jump
        )
        guard = None if tr.guard is None else _shift_states(tr.guard, n_src)
        transitions.append(md.Transition(tr.event, tr.source, tr.target, tr.kind, jump, ex.ZERO, guard))
    n_max = max(loc.state_dim for loc in model.locations)
    terminal = ex.add(ex.Var("x1"), _shift_states(model.terminal_cost, n_max))
    return md.build_model(locations, transitions, terminal)


def lift_state_to_mayer(x0) -> np.ndarray:
    return np.concatenate([[0.0], np.asarray(x0, dtype=np.float64)])


def to_time_invariant(model: md.HybridModel) -> md.HybridModel:
    """Prepend a clock state so no expression references t.

    The clock becomes x1 with x1_dot = 1, copied unchanged by every jump;
    all occurrences of t are rewritten to x1. Initial states must be lifted
    to [t0, x0].
    """
    clock = {"t": ex.Var("x1")}
    locations = []
    for loc in model.locations:
        n = loc.state_dim
        field = (ex.ONE,) + tuple(_shift_states(f, n, clock) for f in loc.field)
        locations.append(
            md.location(
                loc.name,
                field,
                running_cost=_shift_states(loc.running_cost, n, clock),
                control_box=loc.control_box,
            )
        )
    transitions = []
    for tr in model.transitions:
        n_src = model.location(tr.source).state_dim
        jump = (ex.Var("x1"),) + tuple(_shift_states(j, n_src, clock) for j in tr.jump)
        guard = None if tr.guard is None else _shift_states(tr.guard, n_src, clock)
        cost = _shift_states(tr.switch_cost, n_src, clock)
        transitions.append(md.Transition(tr.event, tr.source, tr.target, tr.kind, jump, cost, guard))
    n_max = max(loc.state_dim for loc in model.locations)
    terminal = _shift_states(model.terminal_cost, n_max, clock)
    return md.build_model(locations, transitions, terminal)


def lift_state_with_clock(x0, t0: float) -> np.ndarray:
    return np.concatenate([[float(t0)], np.asarray(x0, dtype=np.float64)])


# ---------------------------------------------------------------------------
# Cost evaluation


def _segment_quadrature(seg: sm.TrajectorySegment, extra_edges: np.ndarray | None = None):
    """Sample times, states and Simpson weights over one segment.

    Each accepted step contributes a two-interval composite Simpson rule
    (nodes, quarter points and midpoint), which keeps the quadrature error
    comfortably below the integrator tolerance. Control kinks (piecewise
    linear node times) must be added as edges: the integrand loses
    smoothness there and an unsplit rule is exploitable by optimizers.
    """
    edges = seg.ts
    if extra_edges is not None and len(extra_edges):
        inner = extra_edges[(extra_edges > seg.ts[0]) & (extra_edges < seg.ts[-1])]
        if len(inner):
            edges = np.unique(np.concatenate([seg.ts, inner]))
    a = edges[:-1]
    b = edges[1:]
    h = b - a
    pts = np.concatenate([a, a + 0.25 * h, a + 0.5 * h, a + 0.75 * h, b])
    order = np.argsort(pts, kind="stable")
    w = np.concatenate([h / 12.0, h / 3.0, h / 6.0, h / 3.0, h / 12.0])
    return pts[order], w[order]


def _control_kinks(seg: sm.TrajectorySegment) -> np.ndarray | None:
    if isinstance(seg.control, sm.PiecewiseLinearControl):
        return np.asarray(seg.control.times, dtype=np.float64)
    return None


def _control_rows(seg: sm.TrajectorySegment, loc: md.Location, tq: np.ndarray, xq: np.ndarray,
                  control_fn: Callable | None) -> np.ndarray:
    m = loc.control_dim
    if m == 0:
        return np.zeros((0, tq.shape[0]))
    if control_fn is not None:
        return np.stack([np.asarray(control_fn(seg.location, t, x), dtype=np.float64)
                         for t, x in zip(tq, xq)], axis=1)
    c = seg.control
    if isinstance(c, sm.ConstantControl):
        return np.tile(np.asarray(c.values, dtype=np.float64)[:, None], (1, tq.shape[0]))
    if isinstance(c, sm.PiecewiseLinearControl):
        times = np.asarray(c.times)
        return np.stack([np.interp(tq, times, np.asarray(row, dtype=np.float64)) for row in c.values])
    if isinstance(c, sm.FeedbackControl):
        order = ("t",) + loc.state_vars
        pts = np.vstack([tq[None, :], xq.T])
        rows = []
        for e in c.exprs:
            prog = ex.compile_expr(e, order)
            rows.append(eval_program_vec(prog.code, prog.consts, pts))
        return np.stack(rows)
    # No recorded input spec: interpolate the stored node controls.
    return np.stack([np.interp(tq, seg.ts, seg.us[:, j]) for j in range(m)])


def running_cost_integral(model: md.HybridModel, traj: sm.HybridTrajectory,
                          control_fn: Callable | None = None) -> float:
    total = 0.0
    for seg in traj.segments:
        loc = model.location(seg.location)
        if isinstance(loc.running_cost, ex.Const):
            total += loc.running_cost.value * (seg.t_end - seg.t_start)
            continue
        tq, w = _segment_quadrature(seg, extra_edges=_control_kinks(seg))
        xq = seg.states(tq)
        uq = _control_rows(seg, loc, tq, xq, control_fn)
        order = ("t",) + loc.state_vars + loc.control_vars
        prog = ex.compile_expr(loc.running_cost, order)
        pts = np.vstack([tq[None, :], xq.T, uq])
        lv = eval_program_vec(prog.code, prog.consts, pts)
        if not np.all(np.isfinite(lv)):
            raise HmpError(f"running cost of {seg.location!r} undefined along the trajectory")
        total += float(w @ lv)
    return total


def cost_of(model: md.HybridModel, traj: sm.HybridTrajectory,
            control_fn: Callable | None = None) -> float:
    """Total cost of a completed trajectory: integrated running costs plus
    switching costs plus the terminal cost."""
    if traj.outcome != sm.COMPLETED:
        raise HmpError(f"cost is defined for completed trajectories, got {traj.outcome!r}")
    total = running_cost_integral(model, traj, control_fn)
    total += sum(j.switch_cost for j in traj.jumps)
    x_f = traj.final_state
    total += ex.evaluate(model.terminal_cost, _env_xt(x_f, traj.tf))
    return float(total)


# ---------------------------------------------------------------------------
# Hamiltonian values along a solved arc


def hamiltonian_values(
    ham: Hamiltonian,
    seg: sm.TrajectorySegment,
    adj_seg: AdjointSegment,
    tq: np.ndarray,
    control_fn: Callable | None = None,
) -> np.ndarray:
    """H(x(t), u(t), lambda(t)) sampled along one segment."""
    tq = np.asarray(tq, dtype=np.float64)
    xq = seg.states(tq)
    lamq = adj_seg.values(tq)
    if control_fn is not None:
        uq = np.stack([np.asarray(control_fn(seg.location, t, x, lam), dtype=np.float64)
                       for t, x, lam in zip(tq, xq, lamq)], axis=1) if ham.n_u else np.zeros((0, len(tq)))
    elif ham.n_u:
        uq = np.stack([np.interp(tq, seg.ts, seg.us[:, j]) for j in range(ham.n_u)])
    else:
        uq = np.zeros((0, len(tq)))
    pts = np.vstack([tq[None, :], xq.T, uq, lamq.T])
    pk = ham.pack("H")
    return eval_program_vec(pk.code[pk.code_off[0]:pk.code_off[1]], pk.consts, pts)


# ---------------------------------------------------------------------------
# Adjoint exports


def adjoint_to_csv(traj: sm.HybridTrajectory, adj: AdjointTrajectory, path) -> None:
    import csv as _csv

    n = max(s.ys.shape[1] for s in adj.segments)
    header = ["t", "location", "side"] + [f"lam{i + 1}" for i in range(n)]
    with open(path, "w", newline="") as fh:
        w = _csv.writer(fh)
        w.writerow(header)
        for s_i, seg in enumerate(adj.segments):
            ts = seg.ts[::-1]
            ys = seg.ys[::-1]
            for r in range(ys.shape[0]):
                side = ""
                if r == 0 and s_i > 0:
                    side = "+"
                elif r == ys.shape[0] - 1 and s_i < len(adj.segments) - 1:
                    side = "-"
                row = [f"{ts[r]:.17g}", seg.location, side]
                row += [f"{v:.17g}" for v in ys[r]] + [""] * (n - ys.shape[1])
                w.writerow(row)


def adjoint_to_json(traj: sm.HybridTrajectory, adj: AdjointTrajectory, path=None):
    doc = {
        "terminal_gradient": adj.terminal_gradient.tolist(),
        "abnormal_multiplier": adj.abnormal_multiplier,
        "segments": [
            {
                "location": seg.location,
                "t": seg.ts[::-1].tolist(),
                "lam": seg.ys[::-1].tolist(),
            }
            for seg in adj.segments
        ],
        "switches": [
            {
                "event": sw.event,
                "kind": sw.kind,
                "t": sw.time,
                "lam_minus": sw.lam_minus.tolist(),
                "lam_plus": sw.lam_plus.tolist(),
                "p": sw.p,
                "H_minus": sw.h_minus,
                "H_plus": sw.h_plus,
            }
            for sw in adj.switches
        ],
    }
    if path is not None:
        import json as _json

        with open(path, "w") as fh:
            _json.dump(doc, fh, indent=1)
    return doc
