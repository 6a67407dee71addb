"""Flat bytecode form of scalar expressions, shared by both kernel twins.

An expression tree is flattened to a postfix instruction stream so the
integrators can evaluate right-hand sides without touching Python objects.
A Program is a pair of arrays: ``code`` with one (opcode, argument) row per
instruction and ``consts`` holding literal values referenced by OP_CONST.
Variables are referenced by index into a caller-supplied buffer, so the
variable ordering is fixed at compile time.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

OP_CONST = 0
OP_VAR = 1
OP_ADD = 2
OP_SUB = 3
OP_MUL = 4
OP_DIV = 5
OP_POW = 6
OP_NEG = 7
OP_SIN = 8
OP_COS = 9
OP_EXP = 10
OP_LOG = 11
OP_SQRT = 12
OP_ABS = 13
OP_STEP = 14
OP_SAT = 15

# Integration outcome codes shared by the kernels and the simulate layer.
ST_OK = 0
ST_EVENT = 1
ST_TERMINATION = 2
ST_STEPFAIL = 3
ST_DOMAIN = 4
ST_MAXSTEPS = 5
ST_SIMULTANEOUS = 6

# Control evaluation modes inside the integrator loop.
CTRL_NONE = 0
CTRL_CONST = 1
CTRL_PWL = 2
CTRL_FEEDBACK = 3
CTRL_HMIN = 4
CTRL_PYFN = 5


@dataclass(frozen=True)
class Program:
    """One compiled scalar expression."""

    code: np.ndarray  # int32, shape (k, 2): opcode, argument
    consts: np.ndarray  # float64, shape (m,)
    stack_need: int

    def __post_init__(self):
        object.__setattr__(self, "code", np.ascontiguousarray(self.code, dtype=np.int32))
        object.__setattr__(self, "consts", np.ascontiguousarray(self.consts, dtype=np.float64))


_EMPTY_I32 = np.zeros((0,), dtype=np.int32)
_EMPTY_F64 = np.zeros((0,), dtype=np.float64)


@dataclass(frozen=True)
class ProgramPack:
    """Several programs packed into shared flat arrays.

    Program ``i`` occupies code rows ``code_off[i]:code_off[i+1]``; OP_CONST
    arguments index the shared ``consts`` array.
    """

    n: int
    code: np.ndarray  # int32 (total, 2)
    code_off: np.ndarray  # int32 (n + 1,)
    consts: np.ndarray  # float64
    stack_need: int


def pack_programs(programs) -> ProgramPack:
    programs = list(programs)
    if not programs:
        return ProgramPack(0, np.zeros((0, 2), dtype=np.int32), np.zeros((1,), dtype=np.int32), _EMPTY_F64, 1)
    codes = []
    offs = [0]
    consts = []
    cbase = 0
    for prog in programs:
        code = prog.code.copy()
        mask = code[:, 0] == OP_CONST
        code[mask, 1] += cbase
        codes.append(code)
        consts.append(prog.consts)
        cbase += prog.consts.shape[0]
        offs.append(offs[-1] + code.shape[0])
    return ProgramPack(
        len(programs),
        np.ascontiguousarray(np.concatenate(codes), dtype=np.int32),
        np.asarray(offs, dtype=np.int32),
        np.ascontiguousarray(np.concatenate(consts)) if cbase else _EMPTY_F64,
        max(p.stack_need for p in programs),
    )


EMPTY_PACK = pack_programs([])


@dataclass
class RhsPack:
    """Everything one segment integration needs, as plain arrays.

    The integrated vector y is the state x alone (``n_lam == 0``) or the
    joint (x, lambda) stack. Programs read a variable buffer laid out as
    [t, x_1..x_nx, u_1..u_nu, lam_1..lam_nlam]; the control values are
    written into the buffer before the field programs run.

    When ``interp_ts`` is set the x part is not integrated but interpolated
    from a previously stored mesh (used for backward adjoint sweeps), and y
    consists of lambda alone.
    """

    n_x: int
    n_u: int
    n_lam: int = 0
    f: ProgramPack = EMPTY_PACK  # n_x programs for xdot
    g: ProgramPack = EMPTY_PACK  # n_lam programs for lamdot
    ctrl_mode: int = CTRL_NONE
    ctrl_const: np.ndarray = field(default_factory=lambda: _EMPTY_F64)
    pwl_ts: np.ndarray = field(default_factory=lambda: _EMPTY_F64)
    pwl_vals: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))  # (n_u, K)
    fb: ProgramPack = EMPTY_PACK  # n_u feedback programs
    hm_alpha: ProgramPack = EMPTY_PACK  # n_u programs: dH/du_j at u_j = 0
    hm_beta: ProgramPack = EMPTY_PACK  # n_u programs: d2H/du_j^2
    box_lo: np.ndarray = field(default_factory=lambda: _EMPTY_F64)
    box_hi: np.ndarray = field(default_factory=lambda: _EMPTY_F64)
    py_ctrl: object = None  # callable(t, x, lam) -> u
    man: ProgramPack = EMPTY_PACK  # manifold programs over (t, x)
    man_grad: ProgramPack = EMPTY_PACK  # n_man * n_x gradient programs, row-major
    interp_ts: np.ndarray = field(default_factory=lambda: _EMPTY_F64)
    interp_t0s: np.ndarray = field(default_factory=lambda: _EMPTY_F64)
    interp_hs: np.ndarray = field(default_factory=lambda: _EMPTY_F64)
    interp_y0s: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    interp_ks: np.ndarray = field(default_factory=lambda: np.zeros((0, 7, 0)))

    @property
    def n_y(self) -> int:
        if self.interp_ts.shape[0]:
            return self.n_lam
        return self.n_x + self.n_lam

    @property
    def n_var(self) -> int:
        return 1 + self.n_x + self.n_u + self.n_lam


@dataclass
class SegResult:
    """Accepted-mesh record of one integration with dense coefficients.

    ``ts`` holds the accepted nodes (monotone in the integration direction);
    step i is interpolated with theta = (t - t0s[i]) / hs[i], valid for theta
    in [0, 1]. The final step of an event-terminated segment keeps the full
    step's coefficients while ``ts`` ends at the localized event time.
    """

    status: int
    ts: np.ndarray
    t0s: np.ndarray
    hs: np.ndarray
    y0s: np.ndarray  # (steps, n_y) value at t0s[i]
    ks: np.ndarray  # (steps, 7, n_y)
    ys: np.ndarray  # (steps + 1, n_y) values at nodes
    us: np.ndarray  # (steps + 1, n_u)
    event_index: int = -1
    t_event: float = 0.0
    transversal: float = 0.0
    nfev: int = 0
    message: str = ""


# Dormand-Prince 5(4) tableau and the matching quartic dense-output weights.
DP_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
DP_A = np.array(
    [
        [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        [1 / 5, 0.0, 0.0, 0.0, 0.0, 0.0],
        [3 / 40, 9 / 40, 0.0, 0.0, 0.0, 0.0],
        [44 / 45, -56 / 15, 32 / 9, 0.0, 0.0, 0.0],
        [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729, 0.0, 0.0],
        [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656, 0.0],
    ]
)
DP_B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
# Difference between the 5th and embedded 4th order weights.
DP_E = np.array([71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40])
# y(t0 + theta h) = y0 + h * sum_i k_i * (P[i,0] th + P[i,1] th^2 + P[i,2] th^3 + P[i,3] th^4)
DP_P = np.array(
    [
        [1.0, -8048581381 / 2820520608, 8663915743 / 2820520608, -12715105075 / 11282082432],
        [0.0, 0.0, 0.0, 0.0],
        [0.0, 131558114200 / 32700410799, -68118460800 / 10900136933, 87487479700 / 32700410799],
        [0.0, -1754552775 / 470086768, 14199869525 / 1410260304, -10690763975 / 1880347072],
        [0.0, 127303824393 / 49829197408, -318862633887 / 49829197408, 701980252875 / 199316789632],
        [0.0, -282668133 / 205662961, 2019193451 / 616988883, -1453857185 / 822651844],
        [0.0, 40617522 / 29380423, -110615467 / 29380423, 69997945 / 29380423],
    ]
)


def dense_weights(theta: float) -> np.ndarray:
    """Dense-output stage weights at relative position theta in [0, 1]."""
    return DP_P @ np.array([theta, theta**2, theta**3, theta**4])


def dense_point(t0: float, h: float, y0: np.ndarray, k: np.ndarray, t: float) -> np.ndarray:
    theta = (t - t0) / h
    return y0 + h * (dense_weights(theta) @ k)


def dense_eval(ts, t0s, hs, y0s, ks, tq):
    """Evaluate a stored mesh at query times (scalar or array).

    Handles ascending and descending node sequences; queries outside the
    mesh are clamped to the boundary steps (mild extrapolation).
    """
    tq = np.asarray(tq, dtype=np.float64)
    scalar = tq.ndim == 0
    tqa = np.atleast_1d(tq)
    n_steps = len(ts) - 1
    ascending = ts[-1] >= ts[0]
    nodes = ts if ascending else ts[::-1]
    idx = np.clip(np.searchsorted(nodes, tqa, side="right") - 1, 0, n_steps - 1)
    if not ascending:
        idx = n_steps - 1 - idx
    th = (tqa - t0s[idx]) / hs[idx]
    w = DP_P @ np.vstack([th, th**2, th**3, th**4])
    out = y0s[idx] + hs[idx][:, None] * np.einsum("qsn,sq->qn", ks[idx], w)
    return out[0] if scalar else out
