"""Pure-Python integration kernel, the fallback twin of _speedups.

Both twins expose the same three entry points with identical semantics:

``eval_program(code, consts, varbuf)``
    run one bytecode program; domain failures yield NaN, never an exception.
``eval_program_vec(code, consts, points)``
    vectorized evaluation over a (n_var, n_points) matrix of variable values.
``rk45_segment(rhs, y0, t0, t1, ...)``
    one Dormand-Prince 5(4) integration with dense output, in-loop control
    evaluation and optional switching-manifold event localization.

The control structure here deliberately mirrors the compiled version so a
discrepancy between the twins is a bug, not a tolerance question.
"""

from __future__ import annotations

import math

import numpy as np

from .programs import (
    CTRL_CONST,
    CTRL_FEEDBACK,
    CTRL_HMIN,
    CTRL_NONE,
    CTRL_PWL,
    CTRL_PYFN,
    DP_A,
    DP_B,
    DP_C,
    DP_E,
    DP_P,
    OP_ABS,
    OP_ADD,
    OP_CONST,
    OP_COS,
    OP_DIV,
    OP_EXP,
    OP_LOG,
    OP_MUL,
    OP_NEG,
    OP_POW,
    OP_SAT,
    OP_SIN,
    OP_SQRT,
    OP_STEP,
    OP_SUB,
    OP_VAR,
    ST_DOMAIN,
    ST_EVENT,
    ST_MAXSTEPS,
    ST_OK,
    ST_SIMULTANEOUS,
    ST_STEPFAIL,
    ST_TERMINATION,
    RhsPack,
    SegResult,
)

IS_COMPILED = False

_NAN = float("nan")


def eval_program(code, consts, varbuf) -> float:
    """Evaluate one program; NaN signals a domain failure."""
    stack = [0.0] * 8
    return _eval(np.asarray(code, dtype=np.int32), np.asarray(consts, dtype=np.float64), varbuf, stack, 0, len(code))


def _eval(code, consts, varbuf, stack, lo: int, hi: int) -> float:
    """Core stack machine over code rows [lo, hi)."""
    sp = 0
    if len(stack) < 64:
        stack.extend([0.0] * (64 - len(stack)))
    for i in range(lo, hi):
        op = code[i, 0]
        if op == OP_CONST:
            stack[sp] = consts[code[i, 1]]
            sp += 1
        elif op == OP_VAR:
            stack[sp] = varbuf[code[i, 1]]
            sp += 1
        elif op == OP_ADD:
            sp -= 1
            stack[sp - 1] = stack[sp - 1] + stack[sp]
        elif op == OP_SUB:
            sp -= 1
            stack[sp - 1] = stack[sp - 1] - stack[sp]
        elif op == OP_MUL:
            sp -= 1
            stack[sp - 1] = stack[sp - 1] * stack[sp]
        elif op == OP_DIV:
            sp -= 1
            den = stack[sp]
            stack[sp - 1] = stack[sp - 1] / den if den != 0.0 else _NAN
        elif op == OP_POW:
            sp -= 1
            try:
                v = stack[sp - 1] ** stack[sp]
                stack[sp - 1] = v if not isinstance(v, complex) else _NAN
            except (OverflowError, ZeroDivisionError, ValueError):
                stack[sp - 1] = _NAN
        elif op == OP_NEG:
            stack[sp - 1] = -stack[sp - 1]
        elif op == OP_SIN:
            v = stack[sp - 1]
            stack[sp - 1] = math.sin(v) if math.isfinite(v) else _NAN
        elif op == OP_COS:
            v = stack[sp - 1]
            stack[sp - 1] = math.cos(v) if math.isfinite(v) else _NAN
        elif op == OP_EXP:
            v = stack[sp - 1]
            try:
                stack[sp - 1] = math.exp(v)
            except OverflowError:
                stack[sp - 1] = _NAN
        elif op == OP_LOG:
            v = stack[sp - 1]
            stack[sp - 1] = math.log(v) if v > 0.0 else _NAN
        elif op == OP_SQRT:
            v = stack[sp - 1]
            stack[sp - 1] = math.sqrt(v) if v >= 0.0 else _NAN
        elif op == OP_ABS:
            stack[sp - 1] = abs(stack[sp - 1])
        elif op == OP_STEP:
            stack[sp - 1] = 1.0 if stack[sp - 1] >= 0.0 else 0.0
        elif op == OP_SAT:
            sp -= 2
            v = stack[sp - 1]
            lo_v = stack[sp]
            hi_v = stack[sp + 1]
            if v < lo_v:
                v = lo_v
            if v > hi_v:
                v = hi_v
            stack[sp - 1] = v
    return stack[0]


def eval_program_vec(code, consts, points) -> np.ndarray:
    """Vectorized program evaluation; points has shape (n_var, n_points)."""
    code = np.asarray(code, dtype=np.int32)
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[1]
    stack: list[np.ndarray] = []
    with np.errstate(all="ignore"):
        for op, arg in code:
            if op == OP_CONST:
                stack.append(np.full(n, consts[arg]))
            elif op == OP_VAR:
                stack.append(points[arg].copy())
            elif op == OP_ADD:
                b = stack.pop()
                stack[-1] = stack[-1] + b
            elif op == OP_SUB:
                b = stack.pop()
                stack[-1] = stack[-1] - b
            elif op == OP_MUL:
                b = stack.pop()
                stack[-1] = stack[-1] * b
            elif op == OP_DIV:
                b = stack.pop()
                out = np.divide(stack[-1], b, out=np.full(n, _NAN), where=b != 0.0)
                stack[-1] = out
            elif op == OP_POW:
                b = stack.pop()
                stack[-1] = np.power(stack[-1], b)
            elif op == OP_NEG:
                stack[-1] = -stack[-1]
            elif op == OP_SIN:
                stack[-1] = np.sin(stack[-1])
            elif op == OP_COS:
                stack[-1] = np.cos(stack[-1])
            elif op == OP_EXP:
                stack[-1] = np.exp(stack[-1])
            elif op == OP_LOG:
                a = stack[-1]
                stack[-1] = np.where(a > 0.0, np.log(np.where(a > 0.0, a, 1.0)), _NAN)
            elif op == OP_SQRT:
                a = stack[-1]
                stack[-1] = np.where(a >= 0.0, np.sqrt(np.abs(a)), _NAN)
            elif op == OP_ABS:
                stack[-1] = np.abs(stack[-1])
            elif op == OP_STEP:
                stack[-1] = np.where(stack[-1] >= 0.0, 1.0, 0.0)
            elif op == OP_SAT:
                hi_v = stack.pop()
                lo_v = stack.pop()
                stack[-1] = np.minimum(np.maximum(stack[-1], lo_v), hi_v)
    return stack[0]


# ---------------------------------------------------------------------------
# Segment integration


def _fill_controls(rhs: RhsPack, t: float, varbuf, stack) -> bool:
    """Write u into varbuf[1+n_x : 1+n_x+n_u]; False on failure."""
    mode = rhs.ctrl_mode
    if mode == CTRL_NONE or rhs.n_u == 0:
        return True
    base = 1 + rhs.n_x
    if mode == CTRL_CONST:
        for j in range(rhs.n_u):
            varbuf[base + j] = rhs.ctrl_const[j]
        return True
    if mode == CTRL_PWL:
        ts = rhs.pwl_ts
        k = ts.shape[0]
        if t <= ts[0]:
            idx, w = 0, 0.0
        elif t >= ts[k - 1]:
            idx, w = k - 2, 1.0
        else:
            idx = int(np.searchsorted(ts, t, side="right")) - 1
            if idx > k - 2:
                idx = k - 2
            w = (t - ts[idx]) / (ts[idx + 1] - ts[idx])
        for j in range(rhs.n_u):
            row = rhs.pwl_vals[j]
            varbuf[base + j] = row[idx] + w * (row[idx + 1] - row[idx])
        return True
    if mode == CTRL_FEEDBACK:
        pk = rhs.fb
        for j in range(rhs.n_u):
            v = _eval(pk.code, pk.consts, varbuf, stack, pk.code_off[j], pk.code_off[j + 1])
            if not math.isfinite(v):
                return False
            varbuf[base + j] = v
        return True
    if mode == CTRL_HMIN:
        # dH/du_j = alpha_j + beta_j u_j, componentwise; pick the box point
        # or clamped stationary point minimizing 0.5 beta u^2 + alpha u.
        # Candidates are scanned in ascending u so ties go to the smaller u.
        pa, pb = rhs.hm_alpha, rhs.hm_beta
        for j in range(rhs.n_u):
            a = _eval(pa.code, pa.consts, varbuf, stack, pa.code_off[j], pa.code_off[j + 1])
            b = _eval(pb.code, pb.consts, varbuf, stack, pb.code_off[j], pb.code_off[j + 1])
            if not (math.isfinite(a) and math.isfinite(b)):
                return False
            lo = rhs.box_lo[j]
            hi = rhs.box_hi[j]
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
            varbuf[base + j] = best_u
        return True
    if mode == CTRL_PYFN:
        x = np.array(varbuf[1 : 1 + rhs.n_x])
        lam = np.array(varbuf[1 + rhs.n_x + rhs.n_u : 1 + rhs.n_x + rhs.n_u + rhs.n_lam])
        u = rhs.py_ctrl(t, x, lam)
        for j in range(rhs.n_u):
            v = float(u[j])
            if not math.isfinite(v):
                return False
            varbuf[base + j] = v
        return True
    raise ValueError(f"unknown control mode {mode}")


def _interp_x(rhs: RhsPack, t: float, varbuf) -> None:
    ts = rhs.interp_ts
    n_steps = ts.shape[0] - 1
    idx = int(np.searchsorted(ts, t, side="right")) - 1
    if idx < 0:
        idx = 0
    if idx > n_steps - 1:
        idx = n_steps - 1
    th = (t - rhs.interp_t0s[idx]) / rhs.interp_hs[idx]
    th2 = th * th
    w = DP_P[:, 0] * th + DP_P[:, 1] * th2 + DP_P[:, 2] * th2 * th + DP_P[:, 3] * th2 * th2
    # Stage sum accumulated in fixed order so both kernel twins agree bitwise.
    ks = rhs.interp_ks[idx]
    acc = w[0] * ks[0]
    for q in range(1, 7):
        acc = acc + w[q] * ks[q]
    x = rhs.interp_y0s[idx] + rhs.interp_hs[idx] * acc
    for j in range(rhs.n_x):
        varbuf[1 + j] = x[j]


def _rhs_full(rhs: RhsPack, t: float, y, varbuf, stack, dy, out_u=None) -> bool:
    """Fill varbuf for time t and integrated vector y, then evaluate.

    Writes the y-derivative into dy; returns False on any domain failure.
    """
    varbuf[0] = t
    interp = rhs.interp_ts.shape[0] > 0
    if interp:
        _interp_x(rhs, t, varbuf)
        lam_off = 0
    else:
        for j in range(rhs.n_x):
            varbuf[1 + j] = y[j]
        lam_off = rhs.n_x
    lam_base = 1 + rhs.n_x + rhs.n_u
    for j in range(rhs.n_lam):
        varbuf[lam_base + j] = y[lam_off + j]
    if not _fill_controls(rhs, t, varbuf, stack):
        return False
    if out_u is not None:
        base = 1 + rhs.n_x
        for j in range(rhs.n_u):
            out_u[j] = varbuf[base + j]
    i_out = 0
    if not interp:
        pk = rhs.f
        for j in range(rhs.n_x):
            v = _eval(pk.code, pk.consts, varbuf, stack, pk.code_off[j], pk.code_off[j + 1])
            if not math.isfinite(v):
                return False
            dy[i_out] = v
            i_out += 1
    pg = rhs.g
    for j in range(rhs.n_lam):
        v = _eval(pg.code, pg.consts, varbuf, stack, pg.code_off[j], pg.code_off[j + 1])
        if not math.isfinite(v):
            return False
        dy[i_out] = v
        i_out += 1
    return True


def _manifold_value(rhs: RhsPack, j: int, t: float, x_first: bool, varbuf, stack) -> float:
    varbuf[0] = t
    pk = rhs.man
    return _eval(pk.code, pk.consts, varbuf, stack, pk.code_off[j], pk.code_off[j + 1])


def _initial_step(rhs, t0, y0, f0, direction, span, rtol, atol, varbuf, stack):
    n = len(y0)
    d0 = 0.0
    d1 = 0.0
    for i in range(n):
        sc = atol + rtol * abs(y0[i])
        v0 = y0[i] / sc
        v1 = f0[i] / sc
        # Explicit products, not ** 2: scalar pow can be off by an ulp from
        # the multiply, and the kernel twins must agree bitwise.
        d0 += v0 * v0
        d1 += v1 * v1
    d0 = math.sqrt(d0 / n)
    d1 = math.sqrt(d1 / n)
    h0 = 1e-6 if (d0 < 1e-5 or d1 < 1e-5) else 0.01 * d0 / d1
    h0 = min(h0, span)
    y1 = y0 + direction * h0 * f0
    f1 = np.empty_like(f0)
    if _rhs_full(rhs, t0 + direction * h0, y1, varbuf, stack, f1):
        d2 = 0.0
        for i in range(n):
            sc = atol + rtol * abs(y0[i])
            v2 = (f1[i] - f0[i]) / sc
            d2 += v2 * v2
        d2 = math.sqrt(d2 / n) / h0
        dm = max(d1, d2)
        h1 = max(1e-6, h0 * 1e-3) if dm <= 1e-15 else (0.01 / dm) ** 0.2
        return direction * min(100.0 * h0, h1, span)
    return direction * min(h0, span)


def rk45_segment(
    rhs: RhsPack,
    y0,
    t0: float,
    t1: float,
    rtol: float = 1e-9,
    atol: float = 1e-12,
    event_tol: float = 1e-9,
    trans_eps: float = 1e-6,
    max_steps: int = 10000,
    first_step: float = 0.0,
) -> SegResult:
    """Integrate one location segment from t0 to t1 (either direction).

    Stops early when an active switching manifold changes sign; the crossing
    is then bisected on the dense interpolant to within event_tol. A start
    exactly on a manifold does not trigger until the value leaves zero and
    crosses again, which gives departure-then-return semantics.
    """
    n_y = rhs.n_y
    n_u = rhs.n_u
    n_man = rhs.man.n
    y0 = np.asarray(y0, dtype=np.float64).copy()
    varbuf = [0.0] * rhs.n_var
    stack = [0.0] * 64

    ts = np.empty(max_steps + 1)
    t0s = np.empty(max_steps)
    hs = np.empty(max_steps)
    y0s = np.empty((max_steps, n_y))
    kss = np.empty((max_steps, 7, n_y))
    ys = np.empty((max_steps + 1, n_y))
    us = np.zeros((max_steps + 1, n_u))
    nfev = 0

    def finish(status, n_steps, message="", event_index=-1, t_event=0.0, transversal=0.0):
        return SegResult(
            status,
            ts[: n_steps + 1].copy(),
            t0s[:n_steps].copy(),
            hs[:n_steps].copy(),
            y0s[:n_steps].copy(),
            kss[:n_steps].copy(),
            ys[: n_steps + 1].copy(),
            us[: n_steps + 1].copy(),
            event_index,
            t_event,
            transversal,
            nfev,
            message,
        )

    span = abs(t1 - t0)
    direction = 1.0 if t1 >= t0 else -1.0
    t = t0
    y = y0
    ts[0] = t0
    ys[0] = y0
    k = np.empty((7, n_y))
    u_node = np.zeros(n_u)
    if not _rhs_full(rhs, t0, y0, varbuf, stack, k[0], u_node):
        return finish(ST_DOMAIN, 0, "right-hand side undefined at the segment start")
    nfev += 1
    us[0] = u_node

    m_prev = np.empty(n_man)
    for j in range(n_man):
        m_prev[j] = _manifold_value(rhs, j, t0, True, varbuf, stack)

    if span == 0.0:
        return finish(ST_OK, 0)

    h = abs(first_step) if first_step else abs(
        _initial_step(rhs, t0, y0, k[0], direction, span, rtol, atol, varbuf, stack)
    )
    nfev += 1
    h = min(h, span)

    # Piecewise linear controls kink at known times; never step across one,
    # or a feature narrower than the step is silently skipped.
    barr = None
    b_idx = 0
    b_skip = 1e-10 * span
    if rhs.ctrl_mode == CTRL_PWL and rhs.pwl_ts.shape[0]:
        barr = np.sort(np.asarray(rhs.pwl_ts, dtype=np.float64))
        if direction < 0.0:
            barr = barr[::-1].copy()

    n_steps = 0
    yw = np.empty(n_y)
    y_new = np.empty(n_y)
    err = np.empty(n_y)
    last_reject_domain = False
    growth_cap = 10.0

    while direction * (t - t1) < 0.0:
        if n_steps >= max_steps:
            return finish(ST_MAXSTEPS, n_steps, f"step budget {max_steps} exhausted at t={t!r}")
        if t + direction * h == t or h < 1e-15 * span:
            status = ST_DOMAIN if last_reject_domain else ST_STEPFAIL
            return finish(status, n_steps, f"step size underflow at t={t!r}")
        if barr is not None:
            while b_idx < barr.shape[0] and direction * (barr[b_idx] - t) <= b_skip:
                b_idx += 1
            if b_idx < barr.shape[0]:
                gap = direction * (barr[b_idx] - t)
                if gap < h:
                    h = gap
        if direction * (t + direction * h - t1) > 0.0:
            h = abs(t1 - t)
        h_signed = direction * h

        ok = True
        for s in range(1, 6):
            yw[:] = y
            for q in range(s):
                a = DP_A[s, q]
                if a != 0.0:
                    yw += (h_signed * a) * k[q]
            if not _rhs_full(rhs, t + DP_C[s] * h_signed, yw, varbuf, stack, k[s]):
                ok = False
                break
            nfev += 1
        if ok:
            y_new[:] = y
            for q in range(6):
                b = DP_B[q]
                if b != 0.0:
                    y_new += (h_signed * b) * k[q]
            t_new = t1 if direction * (t + h_signed - t1) >= 0.0 else t + h_signed
            ok = _rhs_full(rhs, t_new, y_new, varbuf, stack, k[6], u_node)
            nfev += 1
        if not ok:
            last_reject_domain = True
            h *= 0.25
            growth_cap = 1.0
            continue

        err_norm = 0.0
        for i in range(n_y):
            e = 0.0
            for q in range(7):
                e += DP_E[q] * k[q][i]
            e *= h_signed
            sc = atol + rtol * max(abs(y[i]), abs(y_new[i]))
            r = e / sc
            err_norm += r * r
        err_norm = math.sqrt(err_norm / n_y)

        if err_norm > 1.0:
            last_reject_domain = False
            factor = max(0.2, 0.9 * err_norm**-0.2)
            h *= factor
            growth_cap = 1.0
            continue

        # Step accepted.
        t0s[n_steps] = t
        hs[n_steps] = h_signed
        y0s[n_steps] = y
        kss[n_steps] = k
        ts[n_steps + 1] = t_new
        ys[n_steps + 1] = y_new
        us[n_steps + 1] = u_node

        if n_man:
            hit = -1
            hit2 = -1
            t_hit = 0.0
            t_hit2 = 0.0
            for j in range(n_man):
                for q in range(rhs.n_x):
                    varbuf[1 + q] = y_new[q]
                m_new = _manifold_value(rhs, j, t_new, True, varbuf, stack)
                crossed = (m_prev[j] > 0.0 and m_new < 0.0) or (m_prev[j] < 0.0 and m_new > 0.0)
                grazed = m_new == 0.0 and m_prev[j] != 0.0
                if crossed or grazed:
                    t_star = t_new if grazed else _bisect_event(
                        rhs, j, n_steps, t, h_signed, y0s, kss, m_prev[j], event_tol, varbuf, stack
                    )
                    if hit < 0 or direction * (t_star - t_hit) < 0.0:
                        hit2, t_hit2 = hit, t_hit
                        hit, t_hit = j, t_star
                    elif hit2 < 0 or direction * (t_star - t_hit2) < 0.0:
                        hit2, t_hit2 = j, t_star
                m_prev[j] = m_new
            if hit >= 0:
                if hit2 >= 0 and abs(t_hit2 - t_hit) <= event_tol:
                    return finish(
                        ST_SIMULTANEOUS,
                        n_steps + 1,
                        "two switching manifolds vanish at the same time",
                        hit,
                        t_hit,
                    )
                y_star = _dense_step(n_steps, t_hit, t0s, hs, y0s, kss, n_y)
                dy = np.empty(n_y)
                if not _rhs_full(rhs, t_hit, y_star, varbuf, stack, dy, u_node):
                    return finish(ST_DOMAIN, n_steps + 1, "right-hand side undefined at the event point")
                nfev += 1
                # Transversality: grad m . f at the localized crossing.
                gm = rhs.man_grad
                dot = 0.0
                for q in range(rhs.n_x):
                    gq = _eval(
                        gm.code, gm.consts, varbuf, stack,
                        gm.code_off[hit * rhs.n_x + q], gm.code_off[hit * rhs.n_x + q + 1],
                    )
                    dot += gq * dy[q]
                ts[n_steps + 1] = t_hit
                ys[n_steps + 1] = y_star
                us[n_steps + 1] = u_node
                status = ST_TERMINATION if abs(dot) <= trans_eps else ST_EVENT
                msg = "trajectory meets the manifold tangentially" if status == ST_TERMINATION else ""
                return finish(status, n_steps + 1, msg, hit, t_hit, dot)

        n_steps += 1
        t = t_new
        y, y_new = y_new, y
        k[0] = k[6]
        last_reject_domain = False
        factor = growth_cap if err_norm == 0.0 else min(growth_cap, max(0.2, 0.9 * err_norm**-0.2))
        h *= factor
        growth_cap = 10.0

    return finish(ST_OK, n_steps)


def _dense_step(i: int, t: float, t0s, hs, y0s, kss, n_y: int) -> np.ndarray:
    th = (t - t0s[i]) / hs[i]
    th2 = th * th
    w = DP_P[:, 0] * th + DP_P[:, 1] * th2 + DP_P[:, 2] * th2 * th + DP_P[:, 3] * th2 * th2
    ks = kss[i]
    acc = w[0] * ks[0]
    for q in range(1, 7):
        acc = acc + w[q] * ks[q]
    return y0s[i] + hs[i] * acc


def _bisect_event(rhs, j, i_step, t_lo, h_signed, y0s, kss, m_lo_sign, event_tol, varbuf, stack):
    """Bisect m_j on the dense interpolant of the current step.

    Returns the first bracket endpoint at or past the sign change; the
    bracket is narrowed below event_tol in time.
    """
    a = 0.0
    b = 1.0
    s0 = 1.0 if m_lo_sign > 0.0 else -1.0
    while abs(b - a) * abs(h_signed) > event_tol:
        mid = 0.5 * (a + b)
        th2 = mid * mid
        w = DP_P[:, 0] * mid + DP_P[:, 1] * th2 + DP_P[:, 2] * th2 * mid + DP_P[:, 3] * th2 * th2
        ks = kss[i_step]
        acc = w[0] * ks[0]
        for q in range(1, 7):
            acc = acc + w[q] * ks[q]
        y_mid = y0s[i_step] + h_signed * acc
        for q in range(rhs.n_x):
            varbuf[1 + q] = y_mid[q]
        m_mid = _manifold_value(rhs, j, t_lo + mid * h_signed, True, varbuf, stack)
        if m_mid == 0.0:
            b = mid
            break
        if (m_mid > 0.0) == (s0 > 0.0):
            a = mid
        else:
            b = mid
    return t_lo + b * h_signed
