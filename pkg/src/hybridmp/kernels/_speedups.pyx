# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled integration kernel, the fast twin of _pykernels.

Statement-for-statement port of the pure-Python kernel: same stack machine,
same Dormand-Prince loop, same event localization, same floating-point
evaluation order.  The twins are meant to be bitwise interchangeable; any
observable difference between them is a bug here, not a tolerance question.
"""

import numpy as np

from libc.math cimport cos, exp, fabs, isfinite, log, pow, sin, sqrt

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
    SegResult,
)

IS_COMPILED = True

cdef double _NAN = float("nan")

# Opcode and mode constants mirrored into C globals (single source of truth
# stays in programs.py).
cdef int C_CONST = OP_CONST
cdef int C_VAR = OP_VAR
cdef int C_ADD = OP_ADD
cdef int C_SUB = OP_SUB
cdef int C_MUL = OP_MUL
cdef int C_DIV = OP_DIV
cdef int C_POW = OP_POW
cdef int C_NEG = OP_NEG
cdef int C_SIN = OP_SIN
cdef int C_COS = OP_COS
cdef int C_EXP = OP_EXP
cdef int C_LOG = OP_LOG
cdef int C_SQRT = OP_SQRT
cdef int C_ABS = OP_ABS
cdef int C_STEP = OP_STEP
cdef int C_SAT = OP_SAT

cdef int M_NONE = CTRL_NONE
cdef int M_CONST = CTRL_CONST
cdef int M_PWL = CTRL_PWL
cdef int M_FEEDBACK = CTRL_FEEDBACK
cdef int M_HMIN = CTRL_HMIN
cdef int M_PYFN = CTRL_PYFN

cdef double DPC[7]
cdef double DPA[6][6]
cdef double DPB[7]
cdef double DPE[7]
cdef double DPP[7][4]

def _load_tableau():
    cdef int i, j
    for i in range(7):
        DPC[i] = DP_C[i]
        DPB[i] = DP_B[i]
        DPE[i] = DP_E[i]
        for j in range(4):
            DPP[i][j] = DP_P[i, j]
    for i in range(6):
        for j in range(6):
            DPA[i][j] = DP_A[i, j]

_load_tableau()


# ---------------------------------------------------------------------------
# Stack machine


cdef double _eval_c(const int[:, ::1] code, const double[::1] consts,
                    double* varbuf, double* stack, int lo, int hi) noexcept:
    """Scalar-semantics core: domain failures yield NaN, never an exception.

    pow and exp map non-finite results of finite inputs to NaN, which is
    exactly where Python arithmetic raises in the pure twin.
    """
    cdef int sp = 0, i, op
    cdef double v, a, b, den, lo_v, hi_v
    for i in range(lo, hi):
        op = code[i, 0]
        if op == C_CONST:
            stack[sp] = consts[code[i, 1]]
            sp += 1
        elif op == C_VAR:
            stack[sp] = varbuf[code[i, 1]]
            sp += 1
        elif op == C_ADD:
            sp -= 1
            stack[sp - 1] = stack[sp - 1] + stack[sp]
        elif op == C_SUB:
            sp -= 1
            stack[sp - 1] = stack[sp - 1] - stack[sp]
        elif op == C_MUL:
            sp -= 1
            stack[sp - 1] = stack[sp - 1] * stack[sp]
        elif op == C_DIV:
            sp -= 1
            den = stack[sp]
            stack[sp - 1] = stack[sp - 1] / den if den != 0.0 else _NAN
        elif op == C_POW:
            sp -= 1
            a = stack[sp - 1]
            b = stack[sp]
            v = pow(a, b)
            if isfinite(a) and isfinite(b) and not isfinite(v):
                v = _NAN
            stack[sp - 1] = v
        elif op == C_NEG:
            stack[sp - 1] = -stack[sp - 1]
        elif op == C_SIN:
            v = stack[sp - 1]
            stack[sp - 1] = sin(v) if isfinite(v) else _NAN
        elif op == C_COS:
            v = stack[sp - 1]
            stack[sp - 1] = cos(v) if isfinite(v) else _NAN
        elif op == C_EXP:
            a = stack[sp - 1]
            v = exp(a)
            if isfinite(a) and not isfinite(v):
                v = _NAN
            stack[sp - 1] = v
        elif op == C_LOG:
            v = stack[sp - 1]
            stack[sp - 1] = log(v) if v > 0.0 else _NAN
        elif op == C_SQRT:
            v = stack[sp - 1]
            stack[sp - 1] = sqrt(v) if v >= 0.0 else _NAN
        elif op == C_ABS:
            stack[sp - 1] = fabs(stack[sp - 1])
        elif op == C_STEP:
            stack[sp - 1] = 1.0 if stack[sp - 1] >= 0.0 else 0.0
        elif op == C_SAT:
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


cdef double _eval_vec_point(const int[:, ::1] code, const double[::1] consts,
                            double* varbuf, double* stack, int lo, int hi) noexcept:
    """Elementwise-numpy-semantics core: overflow passes through as inf."""
    cdef int sp = 0, i, op
    cdef double v, den, lo_v, hi_v
    for i in range(lo, hi):
        op = code[i, 0]
        if op == C_CONST:
            stack[sp] = consts[code[i, 1]]
            sp += 1
        elif op == C_VAR:
            stack[sp] = varbuf[code[i, 1]]
            sp += 1
        elif op == C_ADD:
            sp -= 1
            stack[sp - 1] = stack[sp - 1] + stack[sp]
        elif op == C_SUB:
            sp -= 1
            stack[sp - 1] = stack[sp - 1] - stack[sp]
        elif op == C_MUL:
            sp -= 1
            stack[sp - 1] = stack[sp - 1] * stack[sp]
        elif op == C_DIV:
            sp -= 1
            den = stack[sp]
            stack[sp - 1] = stack[sp - 1] / den if den != 0.0 else _NAN
        elif op == C_POW:
            sp -= 1
            stack[sp - 1] = pow(stack[sp - 1], stack[sp])
        elif op == C_NEG:
            stack[sp - 1] = -stack[sp - 1]
        elif op == C_SIN:
            stack[sp - 1] = sin(stack[sp - 1])
        elif op == C_COS:
            stack[sp - 1] = cos(stack[sp - 1])
        elif op == C_EXP:
            stack[sp - 1] = exp(stack[sp - 1])
        elif op == C_LOG:
            v = stack[sp - 1]
            stack[sp - 1] = log(v) if v > 0.0 else _NAN
        elif op == C_SQRT:
            v = stack[sp - 1]
            stack[sp - 1] = sqrt(fabs(v)) if v >= 0.0 else _NAN
        elif op == C_ABS:
            stack[sp - 1] = fabs(stack[sp - 1])
        elif op == C_STEP:
            stack[sp - 1] = 1.0 if stack[sp - 1] >= 0.0 else 0.0
        elif op == C_SAT:
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


def eval_program(code, consts, varbuf):
    """Evaluate one program; NaN signals a domain failure."""
    cdef const int[:, ::1] c = np.ascontiguousarray(code, dtype=np.intc)
    cdef const double[::1] k = np.ascontiguousarray(consts, dtype=np.float64)
    cdef double[::1] vb = np.ascontiguousarray(varbuf, dtype=np.float64)
    st_arr = np.zeros(max(64, c.shape[0]))
    cdef double[::1] st = st_arr
    cdef double* vb_p = NULL
    if vb.shape[0] > 0:
        vb_p = &vb[0]
    return _eval_c(c, k, vb_p, &st[0], 0, c.shape[0])


def eval_program_vec(code, consts, points):
    """Vectorized program evaluation; points has shape (n_var, n_points)."""
    cdef const int[:, ::1] c = np.ascontiguousarray(code, dtype=np.intc)
    cdef const double[::1] k = np.ascontiguousarray(consts, dtype=np.float64)
    cdef const double[:, ::1] pts = np.ascontiguousarray(points, dtype=np.float64)
    cdef int n_var = pts.shape[0]
    cdef int n = pts.shape[1]
    out_arr = np.empty(n)
    cdef double[::1] out = out_arr
    st_arr = np.zeros(max(64, c.shape[0]))
    cdef double[::1] st = st_arr
    vb_arr = np.empty(max(n_var, 1))
    cdef double[::1] vb = vb_arr
    cdef int p, j
    for p in range(n):
        for j in range(n_var):
            vb[j] = pts[j, p]
        out[p] = _eval_vec_point(c, k, &vb[0], &st[0], 0, c.shape[0])
    return out_arr


# ---------------------------------------------------------------------------
# Segment integration


cdef class _Ctx:
    """Flattened RhsPack: typed views of every array the hot loop touches."""

    cdef int n_x, n_u, n_lam, n_man, n_y, n_var, ctrl_mode
    cdef bint interp
    cdef const int[:, ::1] f_code, g_code, fb_code, ha_code, hb_code, man_code, mg_code
    cdef const int[::1] f_off, g_off, fb_off, ha_off, hb_off, man_off, mg_off
    cdef const double[::1] f_consts, g_consts, fb_consts, ha_consts, hb_consts
    cdef const double[::1] man_consts, mg_consts
    cdef const double[::1] ctrl_const, pwl_ts, box_lo, box_hi
    cdef const double[:, ::1] pwl_vals
    cdef const double[::1] interp_ts, interp_t0s, interp_hs
    cdef const double[:, ::1] interp_y0s
    cdef const double[:, :, ::1] interp_ks
    cdef object py_ctrl
    cdef double[::1] varbuf
    cdef double[::1] stack


cdef _pack_views(_Ctx ctx, pack, kind):
    code = np.ascontiguousarray(pack.code, dtype=np.intc)
    off = np.ascontiguousarray(pack.code_off, dtype=np.intc)
    consts = np.ascontiguousarray(pack.consts, dtype=np.float64)
    if kind == 0:
        ctx.f_code, ctx.f_off, ctx.f_consts = code, off, consts
    elif kind == 1:
        ctx.g_code, ctx.g_off, ctx.g_consts = code, off, consts
    elif kind == 2:
        ctx.fb_code, ctx.fb_off, ctx.fb_consts = code, off, consts
    elif kind == 3:
        ctx.ha_code, ctx.ha_off, ctx.ha_consts = code, off, consts
    elif kind == 4:
        ctx.hb_code, ctx.hb_off, ctx.hb_consts = code, off, consts
    elif kind == 5:
        ctx.man_code, ctx.man_off, ctx.man_consts = code, off, consts
    else:
        ctx.mg_code, ctx.mg_off, ctx.mg_consts = code, off, consts


cdef _Ctx _make_ctx(rhs):
    cdef _Ctx ctx = _Ctx()
    ctx.n_x = rhs.n_x
    ctx.n_u = rhs.n_u
    ctx.n_lam = rhs.n_lam
    ctx.n_man = rhs.man.n
    ctx.n_y = rhs.n_y
    ctx.n_var = rhs.n_var
    ctx.ctrl_mode = rhs.ctrl_mode
    _pack_views(ctx, rhs.f, 0)
    _pack_views(ctx, rhs.g, 1)
    _pack_views(ctx, rhs.fb, 2)
    _pack_views(ctx, rhs.hm_alpha, 3)
    _pack_views(ctx, rhs.hm_beta, 4)
    _pack_views(ctx, rhs.man, 5)
    _pack_views(ctx, rhs.man_grad, 6)
    ctx.ctrl_const = np.ascontiguousarray(rhs.ctrl_const, dtype=np.float64)
    ctx.pwl_ts = np.ascontiguousarray(rhs.pwl_ts, dtype=np.float64)
    ctx.pwl_vals = np.ascontiguousarray(rhs.pwl_vals, dtype=np.float64)
    ctx.box_lo = np.ascontiguousarray(rhs.box_lo, dtype=np.float64)
    ctx.box_hi = np.ascontiguousarray(rhs.box_hi, dtype=np.float64)
    ctx.interp_ts = np.ascontiguousarray(rhs.interp_ts, dtype=np.float64)
    ctx.interp_t0s = np.ascontiguousarray(rhs.interp_t0s, dtype=np.float64)
    ctx.interp_hs = np.ascontiguousarray(rhs.interp_hs, dtype=np.float64)
    ctx.interp_y0s = np.ascontiguousarray(rhs.interp_y0s, dtype=np.float64)
    ctx.interp_ks = np.ascontiguousarray(rhs.interp_ks, dtype=np.float64)
    ctx.interp = ctx.interp_ts.shape[0] > 0
    ctx.py_ctrl = rhs.py_ctrl
    stack_need = 64
    for pack in (rhs.f, rhs.g, rhs.fb, rhs.hm_alpha, rhs.hm_beta, rhs.man, rhs.man_grad):
        if pack.stack_need > stack_need:
            stack_need = pack.stack_need
    ctx.varbuf = np.zeros(max(ctx.n_var, 1))
    ctx.stack = np.zeros(stack_need)
    return ctx


cdef int _searchsorted_right(const double[::1] ts, double t) noexcept:
    cdef int lo = 0, hi = ts.shape[0], mid
    while lo < hi:
        mid = (lo + hi) // 2
        if ts[mid] <= t:
            lo = mid + 1
        else:
            hi = mid
    return lo


cdef bint _fill_controls(_Ctx ctx, double t):
    """Write u into varbuf[1+n_x : 1+n_x+n_u]; False on failure."""
    cdef int mode = ctx.ctrl_mode
    if mode == M_NONE or ctx.n_u == 0:
        return True
    cdef int base = 1 + ctx.n_x
    cdef double* varbuf = &ctx.varbuf[0]
    cdef double* stack = &ctx.stack[0]
    cdef int j, idx, k
    cdef double w, v, a, b, lo, hi, best_u, best_phi, u_st, phi
    if mode == M_CONST:
        for j in range(ctx.n_u):
            varbuf[base + j] = ctx.ctrl_const[j]
        return True
    if mode == M_PWL:
        k = ctx.pwl_ts.shape[0]
        if t <= ctx.pwl_ts[0]:
            idx = 0
            w = 0.0
        elif t >= ctx.pwl_ts[k - 1]:
            idx = k - 2
            w = 1.0
        else:
            idx = _searchsorted_right(ctx.pwl_ts, t) - 1
            if idx > k - 2:
                idx = k - 2
            w = (t - ctx.pwl_ts[idx]) / (ctx.pwl_ts[idx + 1] - ctx.pwl_ts[idx])
        for j in range(ctx.n_u):
            varbuf[base + j] = ctx.pwl_vals[j, idx] + w * (ctx.pwl_vals[j, idx + 1] - ctx.pwl_vals[j, idx])
        return True
    if mode == M_FEEDBACK:
        for j in range(ctx.n_u):
            v = _eval_c(ctx.fb_code, ctx.fb_consts, varbuf, stack,
                        ctx.fb_off[j], ctx.fb_off[j + 1])
            if not isfinite(v):
                return False
            varbuf[base + j] = v
        return True
    if mode == M_HMIN:
        # dH/du_j = alpha_j + beta_j u_j, componentwise; pick the box point
        # or clamped stationary point minimizing 0.5 beta u^2 + alpha u.
        # Candidates are scanned in ascending u so ties go to the smaller u.
        for j in range(ctx.n_u):
            a = _eval_c(ctx.ha_code, ctx.ha_consts, varbuf, stack,
                        ctx.ha_off[j], ctx.ha_off[j + 1])
            b = _eval_c(ctx.hb_code, ctx.hb_consts, varbuf, stack,
                        ctx.hb_off[j], ctx.hb_off[j + 1])
            if not (isfinite(a) and isfinite(b)):
                return False
            lo = ctx.box_lo[j]
            hi = ctx.box_hi[j]
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
    if mode == M_PYFN:
        x = np.empty(ctx.n_x)
        lam = np.empty(ctx.n_lam)
        for j in range(ctx.n_x):
            x[j] = varbuf[1 + j]
        for j in range(ctx.n_lam):
            lam[j] = varbuf[1 + ctx.n_x + ctx.n_u + j]
        u = ctx.py_ctrl(t, x, lam)
        for j in range(ctx.n_u):
            v = float(u[j])
            if not isfinite(v):
                return False
            varbuf[base + j] = v
        return True
    raise ValueError(f"unknown control mode {mode}")


cdef void _interp_x(_Ctx ctx, double t) noexcept:
    cdef int n_steps = ctx.interp_ts.shape[0] - 1
    cdef int idx = _searchsorted_right(ctx.interp_ts, t) - 1
    cdef int j, q
    cdef double th, th2, acc
    cdef double w[7]
    if idx < 0:
        idx = 0
    if idx > n_steps - 1:
        idx = n_steps - 1
    th = (t - ctx.interp_t0s[idx]) / ctx.interp_hs[idx]
    th2 = th * th
    for q in range(7):
        w[q] = DPP[q][0] * th + DPP[q][1] * th2 + DPP[q][2] * th2 * th + DPP[q][3] * th2 * th2
    # Stage sum accumulated in fixed order so both kernel twins agree bitwise.
    for j in range(ctx.n_x):
        acc = w[0] * ctx.interp_ks[idx, 0, j]
        for q in range(1, 7):
            acc = acc + w[q] * ctx.interp_ks[idx, q, j]
        ctx.varbuf[1 + j] = ctx.interp_y0s[idx, j] + ctx.interp_hs[idx] * acc


cdef bint _rhs_full(_Ctx ctx, double t, double[::1] y, double[::1] dy,
                    double[::1] out_u, bint want_u):
    """Fill varbuf for time t and integrated vector y, then evaluate.

    Writes the y-derivative into dy; returns False on any domain failure.
    """
    cdef double* varbuf = &ctx.varbuf[0]
    cdef double* stack = &ctx.stack[0]
    cdef int j, lam_off, lam_base, base, i_out
    cdef double v
    varbuf[0] = t
    if ctx.interp:
        _interp_x(ctx, t)
        lam_off = 0
    else:
        for j in range(ctx.n_x):
            varbuf[1 + j] = y[j]
        lam_off = ctx.n_x
    lam_base = 1 + ctx.n_x + ctx.n_u
    for j in range(ctx.n_lam):
        varbuf[lam_base + j] = y[lam_off + j]
    if not _fill_controls(ctx, t):
        return False
    if want_u:
        base = 1 + ctx.n_x
        for j in range(ctx.n_u):
            out_u[j] = varbuf[base + j]
    i_out = 0
    if not ctx.interp:
        for j in range(ctx.n_x):
            v = _eval_c(ctx.f_code, ctx.f_consts, varbuf, stack,
                        ctx.f_off[j], ctx.f_off[j + 1])
            if not isfinite(v):
                return False
            dy[i_out] = v
            i_out += 1
    for j in range(ctx.n_lam):
        v = _eval_c(ctx.g_code, ctx.g_consts, varbuf, stack,
                    ctx.g_off[j], ctx.g_off[j + 1])
        if not isfinite(v):
            return False
        dy[i_out] = v
        i_out += 1
    return True


cdef double _manifold_value(_Ctx ctx, int j, double t) noexcept:
    ctx.varbuf[0] = t
    return _eval_c(ctx.man_code, ctx.man_consts, &ctx.varbuf[0], &ctx.stack[0],
                   ctx.man_off[j], ctx.man_off[j + 1])


cdef double _initial_step(_Ctx ctx, double t0, double[::1] y0, double[::1] f0,
                          double direction, double span, double rtol, double atol):
    cdef int n = y0.shape[0], i
    cdef double d0 = 0.0, d1 = 0.0, d2 = 0.0, sc, h0, h1, dm
    for i in range(n):
        sc = atol + rtol * fabs(y0[i])
        d0 += (y0[i] / sc) * (y0[i] / sc)
        d1 += (f0[i] / sc) * (f0[i] / sc)
    d0 = sqrt(d0 / n)
    d1 = sqrt(d1 / n)
    h0 = 1e-6 if (d0 < 1e-5 or d1 < 1e-5) else 0.01 * d0 / d1
    h0 = min(h0, span)
    y1_arr = np.empty(n)
    f1_arr = np.empty(n)
    cdef double[::1] y1 = y1_arr
    cdef double[::1] f1 = f1_arr
    for i in range(n):
        y1[i] = y0[i] + (direction * h0) * f0[i]
    cdef double[::1] no_u = y1
    if _rhs_full(ctx, t0 + direction * h0, y1, f1, no_u, False):
        for i in range(n):
            sc = atol + rtol * fabs(y0[i])
            d2 += ((f1[i] - f0[i]) / sc) * ((f1[i] - f0[i]) / sc)
        d2 = sqrt(d2 / n) / h0
        dm = max(d1, d2)
        h1 = max(1e-6, h0 * 1e-3) if dm <= 1e-15 else pow(0.01 / dm, 0.2)
        return direction * min(min(100.0 * h0, h1), span)
    return direction * min(h0, span)


cdef void _dense_into(int i, double t, const double[::1] t0s, const double[::1] hs,
                      const double[:, ::1] y0s, const double[:, :, ::1] kss,
                      int n_y, double[::1] out) noexcept:
    cdef double th = (t - t0s[i]) / hs[i]
    cdef double th2 = th * th
    cdef double w[7]
    cdef double acc
    cdef int q, c
    for q in range(7):
        w[q] = DPP[q][0] * th + DPP[q][1] * th2 + DPP[q][2] * th2 * th + DPP[q][3] * th2 * th2
    for c in range(n_y):
        acc = w[0] * kss[i, 0, c]
        for q in range(1, 7):
            acc = acc + w[q] * kss[i, q, c]
        out[c] = y0s[i, c] + hs[i] * acc


cdef double _bisect_event(_Ctx ctx, int j, int i_step, double t_lo, double h_signed,
                          const double[:, ::1] y0s, const double[:, :, ::1] kss,
                          double m_lo_sign, double event_tol) noexcept:
    """Bisect m_j on the dense interpolant of the current step.

    Returns the first bracket endpoint at or past the sign change; the
    bracket is narrowed below event_tol in time.
    """
    cdef double a = 0.0, b = 1.0, s0, mid, th2, m_mid, acc
    cdef double w[7]
    cdef int q, c
    s0 = 1.0 if m_lo_sign > 0.0 else -1.0
    while fabs(b - a) * fabs(h_signed) > event_tol:
        mid = 0.5 * (a + b)
        th2 = mid * mid
        for q in range(7):
            w[q] = DPP[q][0] * mid + DPP[q][1] * th2 + DPP[q][2] * th2 * mid + DPP[q][3] * th2 * th2
        for c in range(ctx.n_x):
            acc = w[0] * kss[i_step, 0, c]
            for q in range(1, 7):
                acc = acc + w[q] * kss[i_step, q, c]
            ctx.varbuf[1 + c] = y0s[i_step, c] + h_signed * acc
        m_mid = _manifold_value(ctx, j, t_lo + mid * h_signed)
        if m_mid == 0.0:
            b = mid
            break
        if (m_mid > 0.0) == (s0 > 0.0):
            a = mid
        else:
            b = mid
    return t_lo + b * h_signed


def rk45_segment(
    rhs,
    y0,
    double t0,
    double t1,
    double rtol=1e-9,
    double atol=1e-12,
    double event_tol=1e-9,
    double trans_eps=1e-6,
    int max_steps=10000,
    double first_step=0.0,
):
    """Integrate one location segment from t0 to t1 (either direction).

    Stops early when an active switching manifold changes sign; the crossing
    is then bisected on the dense interpolant to within event_tol. A start
    exactly on a manifold does not trigger until the value leaves zero and
    crosses again, which gives departure-then-return semantics.
    """
    cdef _Ctx ctx = _make_ctx(rhs)
    cdef int n_y = ctx.n_y
    cdef int n_u = ctx.n_u
    cdef int n_man = ctx.n_man
    y0_arr = np.asarray(y0, dtype=np.float64).copy()

    ts_arr = np.empty(max_steps + 1)
    t0s_arr = np.empty(max_steps)
    hs_arr = np.empty(max_steps)
    y0s_arr = np.empty((max_steps, n_y))
    kss_arr = np.empty((max_steps, 7, n_y))
    ys_arr = np.empty((max_steps + 1, n_y))
    us_arr = np.zeros((max_steps + 1, n_u))
    cdef double[::1] ts = ts_arr
    cdef double[::1] t0s = t0s_arr
    cdef double[::1] hs = hs_arr
    cdef double[:, ::1] y0s = y0s_arr
    cdef double[:, :, ::1] kss = kss_arr
    cdef double[:, ::1] ys = ys_arr
    cdef double[:, ::1] us = us_arr
    cdef int nfev = 0

    def finish(int status, int n_steps, str message="", int event_index=-1,
               double t_event=0.0, double transversal=0.0):
        return SegResult(
            status,
            ts_arr[: n_steps + 1].copy(),
            t0s_arr[:n_steps].copy(),
            hs_arr[:n_steps].copy(),
            y0s_arr[:n_steps].copy(),
            kss_arr[:n_steps].copy(),
            ys_arr[: n_steps + 1].copy(),
            us_arr[: n_steps + 1].copy(),
            event_index,
            t_event,
            transversal,
            nfev,
            message,
        )

    cdef double span = fabs(t1 - t0)
    cdef double direction = 1.0 if t1 >= t0 else -1.0
    cdef double t = t0
    cdef double[::1] y = y0_arr
    k_arr = np.empty((7, n_y))
    cdef double[:, ::1] k = k_arr
    u_node_arr = np.zeros(n_u)
    cdef double[::1] u_node = u_node_arr
    cdef int i, j, q, s
    ts[0] = t0
    for i in range(n_y):
        ys[0, i] = y[i]
    if not _rhs_full(ctx, t0, y, k[0], u_node, True):
        return finish(ST_DOMAIN, 0, "right-hand side undefined at the segment start")
    nfev += 1
    for j in range(n_u):
        us[0, j] = u_node[j]

    m_prev_arr = np.empty(n_man)
    cdef double[::1] m_prev = m_prev_arr
    for j in range(n_man):
        m_prev[j] = _manifold_value(ctx, j, t0)

    if span == 0.0:
        return finish(ST_OK, 0)

    cdef double h
    if first_step:
        h = fabs(first_step)
    else:
        h = fabs(_initial_step(ctx, t0, y, k[0], direction, span, rtol, atol))
    nfev += 1
    h = min(h, span)

    # Piecewise linear controls kink at known times; never step across one,
    # or a feature narrower than the step is silently skipped.
    cdef bint have_barr = False
    barr_arr = None
    cdef double[::1] barr = u_node  # placeholder binding, unused until set
    cdef int b_idx = 0
    cdef double b_skip = 1e-10 * span
    if ctx.ctrl_mode == M_PWL and ctx.pwl_ts.shape[0]:
        barr_arr = np.sort(np.asarray(rhs.pwl_ts, dtype=np.float64))
        if direction < 0.0:
            barr_arr = barr_arr[::-1].copy()
        barr = barr_arr
        have_barr = True

    cdef int n_steps = 0
    yw_arr = np.empty(n_y)
    y_new_arr = np.empty(n_y)
    cdef double[::1] yw = yw_arr
    cdef double[::1] y_new = y_new_arr
    cdef double[::1] y_tmp
    cdef bint last_reject_domain = False
    cdef double growth_cap = 10.0
    cdef bint ok
    cdef double h_signed, t_new, err_norm, e, sc, factor, a_st, b_w, gap
    cdef int status_us
    cdef int hit, hit2
    cdef double t_hit, t_hit2, m_new, t_star, dot, gq
    cdef bint crossed, grazed
    y_star_arr = np.empty(n_y)
    dy_arr = np.empty(n_y)
    cdef double[::1] y_star = y_star_arr
    cdef double[::1] dy = dy_arr

    while direction * (t - t1) < 0.0:
        if n_steps >= max_steps:
            return finish(ST_MAXSTEPS, n_steps, f"step budget {max_steps} exhausted at t={t!r}")
        if t + direction * h == t or h < 1e-15 * span:
            status_us = ST_DOMAIN if last_reject_domain else ST_STEPFAIL
            return finish(status_us, n_steps, f"step size underflow at t={t!r}")
        if have_barr:
            while b_idx < barr.shape[0] and direction * (barr[b_idx] - t) <= b_skip:
                b_idx += 1
            if b_idx < barr.shape[0]:
                gap = direction * (barr[b_idx] - t)
                if gap < h:
                    h = gap
        if direction * (t + direction * h - t1) > 0.0:
            h = fabs(t1 - t)
        h_signed = direction * h

        ok = True
        for s in range(1, 6):
            for i in range(n_y):
                yw[i] = y[i]
            for q in range(s):
                a_st = DPA[s][q]
                if a_st != 0.0:
                    for i in range(n_y):
                        yw[i] += (h_signed * a_st) * k[q, i]
            if not _rhs_full(ctx, t + DPC[s] * h_signed, yw, k[s], u_node, False):
                ok = False
                break
            nfev += 1
        if ok:
            for i in range(n_y):
                y_new[i] = y[i]
            for q in range(6):
                b_w = DPB[q]
                if b_w != 0.0:
                    for i in range(n_y):
                        y_new[i] += (h_signed * b_w) * k[q, i]
            t_new = t1 if direction * (t + h_signed - t1) >= 0.0 else t + h_signed
            ok = _rhs_full(ctx, t_new, y_new, k[6], u_node, True)
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
                e += DPE[q] * k[q, i]
            e *= h_signed
            sc = atol + rtol * max(fabs(y[i]), fabs(y_new[i]))
            err_norm += (e / sc) * (e / sc)
        err_norm = sqrt(err_norm / n_y)

        if err_norm > 1.0:
            last_reject_domain = False
            factor = max(0.2, 0.9 * pow(err_norm, -0.2))
            h *= factor
            growth_cap = 1.0
            continue

        # Step accepted.
        t0s[n_steps] = t
        hs[n_steps] = h_signed
        for i in range(n_y):
            y0s[n_steps, i] = y[i]
        for q in range(7):
            for i in range(n_y):
                kss[n_steps, q, i] = k[q, i]
        ts[n_steps + 1] = t_new
        for i in range(n_y):
            ys[n_steps + 1, i] = y_new[i]
        for j in range(n_u):
            us[n_steps + 1, j] = u_node[j]

        if n_man:
            hit = -1
            hit2 = -1
            t_hit = 0.0
            t_hit2 = 0.0
            for j in range(n_man):
                for q in range(ctx.n_x):
                    ctx.varbuf[1 + q] = y_new[q]
                m_new = _manifold_value(ctx, j, t_new)
                crossed = (m_prev[j] > 0.0 and m_new < 0.0) or (m_prev[j] < 0.0 and m_new > 0.0)
                grazed = m_new == 0.0 and m_prev[j] != 0.0
                if crossed or grazed:
                    if grazed:
                        t_star = t_new
                    else:
                        t_star = _bisect_event(
                            ctx, j, n_steps, t, h_signed, y0s, kss, m_prev[j], event_tol
                        )
                    if hit < 0 or direction * (t_star - t_hit) < 0.0:
                        hit2 = hit
                        t_hit2 = t_hit
                        hit = j
                        t_hit = t_star
                    elif hit2 < 0 or direction * (t_star - t_hit2) < 0.0:
                        hit2 = j
                        t_hit2 = t_star
                m_prev[j] = m_new
            if hit >= 0:
                if hit2 >= 0 and fabs(t_hit2 - t_hit) <= event_tol:
                    return finish(
                        ST_SIMULTANEOUS,
                        n_steps + 1,
                        "two switching manifolds vanish at the same time",
                        hit,
                        t_hit,
                    )
                _dense_into(n_steps, t_hit, t0s, hs, y0s, kss, n_y, y_star)
                if not _rhs_full(ctx, t_hit, y_star, dy, u_node, True):
                    return finish(ST_DOMAIN, n_steps + 1, "right-hand side undefined at the event point")
                nfev += 1
                # Transversality: grad m . f at the localized crossing.
                dot = 0.0
                for q in range(ctx.n_x):
                    gq = _eval_c(
                        ctx.mg_code, ctx.mg_consts, &ctx.varbuf[0], &ctx.stack[0],
                        ctx.mg_off[hit * ctx.n_x + q], ctx.mg_off[hit * ctx.n_x + q + 1],
                    )
                    dot += gq * dy[q]
                ts[n_steps + 1] = t_hit
                for i in range(n_y):
                    ys[n_steps + 1, i] = y_star[i]
                for j in range(n_u):
                    us[n_steps + 1, j] = u_node[j]
                status_us = ST_TERMINATION if fabs(dot) <= trans_eps else ST_EVENT
                msg = "trajectory meets the manifold tangentially" if status_us == ST_TERMINATION else ""
                return finish(status_us, n_steps + 1, msg, hit, t_hit, dot)

        n_steps += 1
        t = t_new
        y_tmp = y
        y = y_new
        y_new = y_tmp
        for i in range(n_y):
            k[0, i] = k[6, i]
        last_reject_domain = False
        if err_norm == 0.0:
            factor = growth_cap
        else:
            factor = min(growth_cap, max(0.2, 0.9 * pow(err_norm, -0.2)))
        h *= factor
        growth_cap = 10.0

    return finish(ST_OK, n_steps)
