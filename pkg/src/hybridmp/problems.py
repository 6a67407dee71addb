"""Builtin problem library.

Three ready-made models, each returned as a ProblemSpec bundling the
automaton, a schedule, the initial hybrid state, the horizon and a handful
of reference values used by the regression suite:

* ``lq_toy`` -- scalar linear-quadratic baseline with a closed-form
  optimum; every layer of the toolchain can be checked against it exactly.
* ``analytic_example`` -- two bilinear modes joined by one controlled
  switch whose jump flips the state sign and charges a bell-shaped
  switching cost.  The Hamiltonian minimizer is u = -lam*x in both modes,
  which gives clean algebraic identities at the switch.
* ``ev_transmission`` -- six-location model of an electric vehicle with a
  dual planetary transmission: torque- and power-limited modes for each of
  two fixed gear ratios plus a two-degree-of-freedom pair of locations for
  the gear change itself, where engaging band brakes (the u2, u3 channels)
  transfers speed between the shafts.

Reference values carry an ``origin`` note saying where each number comes
from (closed form, construction, or a frozen regression run).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple

from . import model as md
from . import simulate as sm


class Reference(NamedTuple):
    value: object
    origin: str


@dataclass(frozen=True)
class ProblemSpec:
    name: str
    model: md.HybridModel
    schedule: md.LocationSchedule
    q0: str
    x0: tuple[float, ...]
    t_span: tuple[float, float]
    sim: sm.SimConfig = field(default_factory=sm.SimConfig)
    reference: dict[str, Reference] = field(default_factory=dict)

    @property
    def h0(self) -> tuple[str, tuple[float, ...]]:
        return (self.q0, self.x0)

    def __post_init__(self):
        issues = md.validate(self.model) + md.schedule_check(self.model, self.schedule)
        if issues:
            raise md.ModelError(f"problem {self.name!r}: " + "; ".join(issues))
        if self.q0 != self.schedule.locations[0]:
            raise md.ModelError(f"problem {self.name!r}: q0 {self.q0!r} is not the schedule head")


def lq_toy() -> ProblemSpec:
    """Single integrator, quadratic effort, quadratic terminal penalty.

    min  ∫ 1/2 u^2 dt + 1/2 x(1)^2   s.t.  xdot = u, x(0) = 1.

    The optimum is u = -1/2 with constant adjoint lam = 1/2 and J = 1/4.
    """
    integ = md.location(
        "integrator", field=("u1",), running_cost="0.5*u1^2",
        control_box=((-10.0, 10.0),),
    )
    model = md.build_model([integ], [], "0.5*x1^2")
    sched = md.schedule(model, ["integrator"])
    return ProblemSpec(
        name="lq",
        model=model,
        schedule=sched,
        q0="integrator",
        x0=(1.0,),
        t_span=(0.0, 1.0),
        reference={
            "J_opt": Reference(0.25, "closed form: constant u = -1/2"),
            "lam": Reference(0.5, "closed form: adjoint is constant"),
            "u": Reference(-0.5, "closed form"),
            "J_zero_control": Reference(0.5, "g(1) with u = 0"),
        },
    )


def analytic_example() -> ProblemSpec:
    """Two bilinear modes with one controlled sign-flipping switch.

    Mode "grow" runs xdot = x + x*u, mode "decay" runs xdot = -x + x*u;
    both pay 1/2 u^2.  The single controlled transition maps x to -x and
    charges 1/(1 + x^2).  Terminal cost 1/2 x(tf)^2, x(0) = 0.5, tf = 4.

    In both modes the Hamiltonian minimizer is interior, u = -lam*x, so
    Hamiltonian continuity at the optimal switching time reduces to
    x(ts-)*(lam- - lam+) = 1/2 x(ts-)^2 * (lam-^2 - lam+^2), which the
    regression suite checks directly.
    """
    box = ((-10.0, 10.0),)
    grow = md.location("grow", field=("x1 + x1*u1",), running_cost="0.5*u1^2", control_box=box)
    decay = md.location("decay", field=("-x1 + x1*u1",), running_cost="0.5*u1^2", control_box=box)
    flip = md.controlled("flip", "grow", "decay", jump=("-x1",), switch_cost="1/(1 + x1^2)")
    model = md.build_model([grow, decay], [flip], "0.5*x1^2")
    sched = md.schedule(model, ["grow", "decay"])
    return ProblemSpec(
        name="analytic",
        model=model,
        schedule=sched,
        q0="grow",
        x0=(0.5,),
        t_span=(0.0, 4.0),
        reference={
            "stationary_control": Reference("-lam*x", "interior minimum of H in either mode"),
            "n_unknowns": Reference(3, "lam(t0), the free switching time, lam(ts+)"),
            "J_extremal": Reference(
                0.1387540, "multistart shooting fixed point (solver regression, "
                "residuals ~1e-13)"),
            "switch_times": Reference((1.7335435,), "switching instant of the same extremal"),
            "lam0": Reference((-0.1582898,), "initial adjoint of the same extremal"),
        },
    )


# ---------------------------------------------------------------------------
# Electric vehicle with a dual planetary transmission


# Default coefficient table, in normalized units.  Values are chosen so
# that the upshift story is robust from rest: positive damping and drag
# everywhere, drive torque comfortably above rolling resistance (B1 > D1),
# the torque/power handover speed k1 well inside gear 1's range, gear
# ratios in (0, 1], and band brakes strong enough that the shift-mode
# sun shaft speed x1 is driven to zero even under full motor torque.
DEFAULT_EV_PARAMS: dict[str, float] = {
    # fixed gear 1, torque-limited (q 1) and power-limited (q 2); short gear,
    # strong wheel torque
    "A1": 0.06, "B1": 4.5, "C1": 0.25, "D1": 0.08,
    "A2": 0.06, "B2": 4.5, "C2": 0.25, "D2": 0.08,
    # fixed gear 2, torque-limited (q 5) and power-limited (q 6); tall gear,
    # holds speed but climbs poorly
    "A5": 0.05, "B5": 1.8, "C5": 0.22, "D5": 0.08,
    "A6": 0.05, "B6": 1.8, "C6": 0.22, "D6": 0.08,
    # shift modes, shared speed coupling; A_RS >> A_SR so engine speed feeds
    # the driveline during a shift, not the reverse
    "A_SS": 0.45, "A_SR": 0.03, "A_RS": 2.0, "A_RR": 0.45,
    "A_SA": 0.02, "A_RA": 0.02, "D_SL": 0.06, "D_RL": 0.06,
    # shift mode control gains: torque-limited (q 3) ...
    "B3_SM": 1.5, "B3_SS": 2.6, "B3_SR": 0.5,
    "B3_RM": 0.7, "B3_RS": 0.2, "B3_RR": 0.5,
    # ... and power-limited (q 4); the sun brake u2 mainly stops the sun
    # shaft (B_SS) and only weakly reacts on the ring (B_RS)
    "B_SM": 1.5, "B_SS": 2.6, "B_SR": 0.5,
    "B_RM": 0.7, "B_RS": 0.2, "B_RR": 0.5,
    # planetary ring/sun ratios and gear ratios
    "R1": 0.7, "R2": 0.4, "gtr1": 0.8, "gtr2": 0.9,
    # switching speeds
    "k1": 0.6, "k2": 4.0, "k3": 0.05,
    # electric power draw coefficients per location; the shift modes pay a
    # slip loss d*w and an inflated motor-effort weight
    "a1": 0.1, "b1": 0.06, "c1": 0.03, "d1": 0.02,
    "a2": 0.1, "b2": 0.06, "c2": 0.03, "d2": 0.02,
    "a3": 3.5, "b3": 0.06, "c3": 0.03, "d3": 0.25,
    "a4": 3.5, "b4": 0.06, "c4": 0.03, "d4": 0.25,
    "a5": 0.6, "b5": 0.06, "c5": 0.03, "d5": 0.02,
    "a6": 0.6, "b6": 0.06, "c6": 0.03, "d6": 0.02,
    # terminal cost g = d0 + dT1*x + dT2*x^2 (speed reward, convex)
    "d0": 0.0, "dT1": -1.2, "dT2": 0.08,
}


def _fmt(v: float) -> str:
    return f"({float(v)!r})"


def ev_transmission(params: dict[str, float] | None = None) -> ProblemSpec:
    """Electric vehicle with a two-gear dual planetary transmission.

    Locations (state dims 1,1,2,2,1,1):

    * ``g1_torque`` / ``g1_power`` -- gear 1, motor torque- resp.
      power-limited; the handover happens autonomously at speed k1.
    * ``shift_torque`` / ``shift_power`` -- gear change in progress; the
      state is the pair of free shaft speeds (x1, x2) and the input gains
      the two band brake channels u2, u3 with boxes [-1, 0] (brakes only
      dissipate).  Entering a shift location is a controlled decision with
      a dimension-raising jump; leaving it is autonomous, at full stop of
      one shaft (x2 = 0 back to gear 1, x1 = 0 forward to gear 2).
    * ``g2_torque`` / ``g2_power`` -- gear 2, handover at speed k3.

    The running costs are electric power draw; the terminal cost rewards
    final speed.  The bundled schedule is the energy-optimal launch
    g1_torque -> g1_power -> shift_power -> g2_power from x(0) = 0, in
    which only the shift initiation time is a free decision: the first and
    third switches are autonomous, so the indirect solver determines them
    by event detection and recovers their Hamiltonian-continuity
    multipliers p1, p3.

    ``params`` must supply the complete coefficient table (defaults:
    DEFAULT_EV_PARAMS); unknown or missing keys raise ModelError.
    """
    table = DEFAULT_EV_PARAMS if params is None else dict(params)
    missing = sorted(set(DEFAULT_EV_PARAMS) - set(table))
    if missing:
        raise md.ModelError(f"ev_transmission: missing parameter(s) {', '.join(missing)}")
    unknown = sorted(set(table) - set(DEFAULT_EV_PARAMS))
    if unknown:
        raise md.ModelError(f"ev_transmission: unknown parameter(s) {', '.join(unknown)}")
    p = {k: _fmt(v) for k, v in table.items()}

    def gear_torque(name: str, i: int) -> md.Location:
        A, B, C, D = p[f"A{i}"], p[f"B{i}"], p[f"C{i}"], p[f"D{i}"]
        a, b, c, d = p[f"a{i}"], p[f"b{i}"], p[f"c{i}"], p[f"d{i}"]
        return md.location(
            name,
            field=(f"-{A}*x1^2 + {B}*u1 - {C}*x1 - {D}",),
            running_cost=f"{a}*u1^2 + {b}*x1*u1 + {c}*u1 + {d}*x1",
            control_box=((-1.0, 1.0),),
        )

    def gear_power(name: str, i: int) -> md.Location:
        # motor power acts through 1/x; valid only while x > 0
        A, B, C, D = p[f"A{i}"], p[f"B{i}"], p[f"C{i}"], p[f"D{i}"]
        a, b, c, d = p[f"a{i}"], p[f"b{i}"], p[f"c{i}"], p[f"d{i}"]
        return md.location(
            name,
            field=(f"-{A}*x1^2 + {B}*u1/x1 - {C}*x1 - {D}",),
            running_cost=f"{a}*u1^2/x1^2 + {b}*u1 + {c}*u1/x1 + {d}*x1",
            control_box=((-1.0, 1.0),),
        )

    # u1 motor, u2/u3 band brakes (dissipative only)
    shift_box = ((-1.0, 1.0), (-1.0, 0.0), (-1.0, 0.0))
    spin = f"(x1 + {p['R2']}*x2)"   # inertia-weighted speed entering the drag terms
    w = f"(x1 + {p['R1']}*x2)"      # motor shaft speed in the shift modes

    shift_torque = md.location(
        "shift_torque",
        field=(
            f"-{p['A_SS']}*x1 + {p['A_SR']}*x2 - {p['A_SA']}*{spin}^2"
            f" + {p['B3_SM']}*u1 + {p['B3_SS']}*u2 - {p['B3_SR']}*u3 - {p['D_SL']}",
            f"{p['A_RS']}*x1 - {p['A_RR']}*x2 - {p['A_RA']}*{spin}^2"
            f" + {p['B3_RM']}*u1 - {p['B3_RS']}*u2 - {p['B3_RR']}*u3 - {p['D_RL']}",
        ),
        running_cost=f"{p['a3']}*u1^2 + {p['b3']}*{w}*u1 + {p['c3']}*u1 + {p['d3']}*{w}",
        control_box=shift_box,
    )
    shift_power = md.location(
        "shift_power",
        field=(
            f"-{p['A_SS']}*x1 + {p['A_SR']}*x2 - {p['A_SA']}*{spin}^2"
            f" + {p['B_SM']}*u1/{w} + {p['B_SS']}*u2 - {p['B_SR']}*u3 - {p['D_SL']}",
            f"{p['A_RS']}*x1 - {p['A_RR']}*x2 - {p['A_RA']}*{spin}^2"
            f" + {p['B_RM']}*(1 + {p['R1']})*u1/{w} - {p['B_RS']}*u2 + {p['B_RR']}*u3 - {p['D_RL']}",
        ),
        running_cost=f"{p['a4']}*u1^2/{w}^2 + {p['b4']}*u1 + {p['c4']}*u1/{w} + {p['d4']}*{w}",
        control_box=shift_box,
    )

    locations = [
        gear_torque("g1_torque", 1),
        gear_power("g1_power", 2),
        shift_torque,
        shift_power,
        gear_torque("g2_torque", 5),
        gear_power("g2_power", 6),
    ]

    ident = ("x1",)
    up1 = (f"{p['gtr1']}*x1", "0")          # engage shift from gear 1
    down1 = (f"x1/{p['gtr1']}",)            # back to gear 1 when the ring stops
    up2 = ("0", f"x1/{p['gtr2']}")          # re-engage shift from gear 2
    down2 = (f"{p['gtr2']}*x2",)            # into gear 2 when the sun stops
    m_shift = f"x1 + {p['R1']}*x2 - {p['k2']}"
    transitions = [
        md.autonomous("s12", "g1_torque", "g1_power", f"x1 - {p['k1']}", ident),
        md.autonomous("s21", "g1_power", "g1_torque", f"x1 - {p['k1']}", ident),
        md.controlled("s13", "g1_torque", "shift_torque", up1),
        md.autonomous("s31", "shift_torque", "g1_torque", "x2", down1),
        md.controlled("s24", "g1_power", "shift_power", up1),
        md.autonomous("s42", "shift_power", "g1_power", "x2", down1),
        md.autonomous("s34", "shift_torque", "shift_power", m_shift, ("x1", "x2")),
        md.autonomous("s43", "shift_power", "shift_torque", m_shift, ("x1", "x2")),
        md.autonomous("s35", "shift_torque", "g2_torque", "x1", down2),
        md.controlled("s53", "g2_torque", "shift_torque", up2),
        md.autonomous("s46", "shift_power", "g2_power", "x1", down2),
        md.controlled("s64", "g2_power", "shift_power", up2),
        md.autonomous("s56", "g2_torque", "g2_power", f"x1 - {p['k3']}", ident),
        md.autonomous("s65", "g2_power", "g2_torque", f"x1 - {p['k3']}", ident),
    ]

    terminal = f"{p['d0']} + {p['dT1']}*x1 + {p['dT2']}*x1^2"
    model = md.build_model(locations, transitions, terminal)
    sched = md.schedule(model, ["g1_torque", "g1_power", "shift_power", "g2_power"])
    return ProblemSpec(
        name="ev",
        model=model,
        schedule=sched,
        q0="g1_torque",
        x0=(0.0,),
        t_span=(0.0, 4.0),
        reference={
            "state_dims": Reference((1, 1, 2, 2, 1, 1), "construction"),
            "adjoint_dims": Reference((1, 1, 2, 1), "schedule walks dims 1 -> 1 -> 2 -> 1"),
            "schedule_kinds": Reference(
                ("autonomous", "controlled", "autonomous"),
                "only shift initiation is a free decision",
            ),
            "feasible_controls": Reference(
                ((1.0,), (1.0,), (0.3, -1.0, 0.0), (0.6,)),
                "hand-picked constant inputs; with ts2 = 0.9 the run completes "
                "the schedule (regression of a recorded feasibility check)",
            ),
            "feasible_switch_times": Reference(
                (None, 0.9, None),
                "controlled switch times going with feasible_controls "
                "(None marks autonomous positions)",
            ),
            "J_extremal": Reference(
                -1.123545,
                "multistart shooting fixed point, default table (solver "
                "regression, residuals ~3e-9)",
            ),
            "switch_times": Reference(
                (1.6368, 2.2053, 3.1891),
                "switching instants of the same extremal, 4 decimals",
            ),
        },
    )


BUILTINS: dict[str, Callable[[], ProblemSpec]] = {
    "lq": lq_toy,
    "analytic": analytic_example,
    "ev": ev_transmission,
}


def builtin(name: str) -> ProblemSpec:
    try:
        maker = BUILTINS[name]
    except KeyError:
        known = ", ".join(sorted(BUILTINS))
        raise md.ModelError(f"no builtin problem {name!r} (known: {known})") from None
    return maker()
