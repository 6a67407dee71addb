"""Command-line front end.

Commands operate on a problem reference, either ``builtin:<name>`` or the
path of a problem document, and drop CSV/JSON artifacts into ``--out`` for
plotting and regression.  Exit codes: 0 success, 1 usage or file errors,
2 a run that ended in a non-completed dynamics outcome, 3 non-convergence
(failed solve, failed verification, unoptimized oracle).

All artifacts are deterministic under fixed seeds: JSON is written with
sorted keys, timing measurements are never serialized, and CSV floats use
17 significant digits.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import exprlang as ex
from . import hmp
from . import model as md
from . import oracle as oc
from . import problemfile as pf
from . import sensitivity as sens
from . import simulate as sm
from . import solver as sv

__all__ = ["main"]

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DYNAMICS = 2
EXIT_NO_CONVERGENCE = 3

# verification bounds; residual rows use --tol (default 1e-6)
DUALITY_TOL = 1e-6
NEEDLE_TOL = 1e-4
COST_TOL = 1e-9
N_VERIFY_NEEDLES = 20


def _fail(msg: str) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return EXIT_USAGE


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _finite(v: float):
    v = float(v)
    return v if np.isfinite(v) else None


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _sim_config(spec, tol: float | None) -> sm.SimConfig:
    if tol is None:
        return spec.sim
    return dataclasses.replace(
        spec.sim, rtol=tol, atol=1e-3 * tol, event_tol=min(spec.sim.event_tol, tol))


# ---------------------------------------------------------------------------
# Inputs for simulate


def _zero_input(spec) -> sm.HybridInput:
    """u = 0 everywhere; controlled switches spread evenly over the horizon."""
    n_seg = len(spec.schedule.locations)
    controls = tuple(
        sm.ConstantControl((0.0,) * spec.model.location(name).control_dim)
        for name in spec.schedule.locations
    )
    t0, tf = spec.t_span
    kinds = md.schedule_kinds(spec.model, spec.schedule)
    times = tuple(
        t0 + (k + 1) * (tf - t0) / n_seg if kinds[k] == md.CONTROLLED else None
        for k in range(n_seg - 1)
    )
    return sm.HybridInput(controls, times)


def _feasible_input(spec) -> sm.HybridInput:
    try:
        values = spec.reference["feasible_controls"].value
        times = spec.reference["feasible_switch_times"].value
    except KeyError:
        raise pf.FileError(
            f"problem {spec.name!r} records no feasible reference input") from None
    controls = tuple(sm.ConstantControl(tuple(v)) for v in values)
    return sm.HybridInput(controls, tuple(times))


def _parse_control(node, n_u: int, n_x: int, ptr: str) -> sm.Control:
    if not isinstance(node, dict):
        raise pf.FileError(f"expected an object, got {type(node).__name__}", ptr)
    kind = node.get("type")
    if kind == "constant":
        pf._check_keys(node, ptr, ("type", "values"))
        values = pf._typed(node, "values", list, ptr)
        return sm.ConstantControl(tuple(float(v) for v in values))
    if kind == "pwl":
        pf._check_keys(node, ptr, ("type", "times", "values"))
        times = pf._typed(node, "times", list, ptr)
        values = pf._typed(node, "values", list, ptr)
        return sm.PiecewiseLinearControl(
            tuple(float(t) for t in times),
            tuple(tuple(float(v) for v in row) for row in values),
        )
    if kind == "feedback":
        pf._check_keys(node, ptr, ("type", "exprs"))
        exprs = pf._typed(node, "exprs", list, ptr)
        return sm._parse_feedback(tuple(exprs), n_x)
    raise pf.FileError(
        f"type must be 'constant', 'pwl' or 'feedback', got {kind!r}", f"{ptr}/type")


def _input_from_file(spec, path: str) -> sm.HybridInput:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise pf.FileError(f"cannot read {path!r}: {e.strerror or e}") from None
    doc = pf.parse_text(text)
    pf._check_keys(doc, "", ("controls",), ("switch_times",))
    entries = pf._typed(doc, "controls", list, "")
    n_seg = len(spec.schedule.locations)
    if len(entries) != n_seg:
        raise pf.FileError(
            f"{len(entries)} control(s) for a {n_seg}-location schedule", "/controls")
    controls = []
    for i, (node, name) in enumerate(zip(entries, spec.schedule.locations)):
        loc = spec.model.location(name)
        controls.append(_parse_control(node, loc.control_dim, loc.state_dim, f"/controls/{i}"))
    times: tuple[float | None, ...] = (None,) * (n_seg - 1)
    if "switch_times" in doc:
        raw = pf._typed(doc, "switch_times", list, "")
        if len(raw) != n_seg - 1:
            raise pf.FileError(
                f"{len(raw)} switch time(s) for {n_seg - 1} boundary(ies)", "/switch_times")
        times = tuple(None if v is None else float(v) for v in raw)
    return sm.HybridInput(tuple(controls), times)


def _events_doc(traj: sm.HybridTrajectory) -> dict:
    return {
        "outcome": traj.outcome,
        "reason": traj.reason,
        "locations": list(traj.locations),
        "switching_times": [float(t) for t in traj.switching_times],
        "events": [
            {
                "event": j.event,
                "kind": j.kind,
                "time": float(j.time),
                "x_minus": [float(v) for v in j.x_minus],
                "x_plus": [float(v) for v in j.x_plus],
                "switch_cost": float(j.switch_cost),
                "transversal": None if j.transversal is None else float(j.transversal),
            }
            for j in traj.jumps
        ],
    }


def cmd_simulate(args) -> int:
    spec, _doc = pf.load_problem(args.problem)
    if args.input == "zero":
        inputs = _zero_input(spec)
    elif args.input == "feasible":
        inputs = _feasible_input(spec)
    else:
        inputs = _input_from_file(spec, args.input)
    traj = sm.run(spec.model, spec.schedule, spec.x0, spec.t_span, inputs,
                  _sim_config(spec, args.tol))
    out = _out_dir(args)
    sm.trajectory_to_csv(traj, out / "trajectory.csv")
    _write_json(out / "events.json", _events_doc(traj))
    if traj.outcome == sm.COMPLETED:
        print(f"completed: {len(traj.jumps)} switch(es), "
              f"final state {np.array2string(traj.final_state, precision=6)}")
        return EXIT_OK
    print(f"{traj.outcome}: {traj.reason}", file=sys.stderr)
    return EXIT_DYNAMICS


# ---------------------------------------------------------------------------
# Solve


def _hamiltonian_csv(result: sv.SolveResult, path: Path) -> None:
    """t, side, H rows; each switch contributes a '-' and a '+' row."""
    rows = []
    n_seg = len(result.trajectory.segments)
    for i, (seg, adj_seg) in enumerate(zip(result.trajectory.segments, result.adjoint.segments)):
        hs = hmp.hamiltonian_values(result.hams[seg.location], seg, adj_seg, seg.ts)
        for r, (t, h) in enumerate(zip(seg.ts, hs)):
            side = ""
            if r == 0 and i > 0:
                side = "+"
            elif r == len(seg.ts) - 1 and i < n_seg - 1:
                side = "-"
            rows.append((t, side, h))
    with open(path, "w", newline="") as fh:
        fh.write("t,side,H\n")
        for t, side, h in rows:
            fh.write(f"{t:.17g},{side},{h:.17g}\n")


def _report_doc(args, doc: dict, report: sv.SolveReport, config: sv.SolveConfig) -> dict:
    res = report.result
    return {
        "problem": {"ref": args.problem, "fingerprint": pf.fingerprint(doc)},
        "success": report.success,
        "backend": report.backend,
        "n_shoots": report.n_shoots,
        "unknown_labels": list(report.unknown_labels),
        "config": {"n_starts": config.n_starts, "seed": config.seed,
                   "newton_tol": config.newton_tol},
        "starts": [
            {
                "index": s.index,
                "converged": s.converged,
                "iterations": s.iterations,
                "residual_norm": _finite(s.residual_norm),
                "cost": None if s.cost is None else _finite(s.cost),
                "message": s.message,
            }
            for s in report.starts
        ],
        "result": None if res is None else {
            "cost": _finite(res.cost),
            "residual_norm": _finite(res.residual_norm),
            "z": [float(v) for v in res.z],
            "lam0": [float(v) for v in res.lam0],
            "switch_times": [float(t) for t in res.switch_times],
            "residual_table": [
                {"label": lbl, "value": _finite(v)} for lbl, v in res.residual_table
            ],
        },
    }


def cmd_solve(args) -> int:
    if args.starts < 1:
        return _fail("--starts must be at least 1")
    spec, doc = pf.load_problem(args.problem)
    config = sv.SolveConfig(sim=spec.sim, n_starts=args.starts, seed=args.seed)
    if args.tol is not None:
        config = dataclasses.replace(config, newton_tol=args.tol)
    report = sv.solve(spec.model, spec.schedule, spec.x0, spec.t_span, config=config)
    out = _out_dir(args)
    _write_json(out / "report.json", _report_doc(args, doc, report, config))
    if report.result is not None:
        res = report.result
        sm.trajectory_to_csv(res.trajectory, out / "trajectory.csv")
        hmp.adjoint_to_csv(res.trajectory, res.adjoint, out / "adjoint.csv")
        _hamiltonian_csv(res, out / "hamiltonian.csv")
    if not report.success:
        best = min((s.residual_norm for s in report.starts), default=float("inf"))
        print(f"no start converged (best residual {best:.3e})", file=sys.stderr)
        return EXIT_NO_CONVERGENCE
    res = report.result
    print(f"converged: J = {res.cost:.9g}, max residual {res.residual_norm:.3e}, "
          f"switches at {[round(t, 6) for t in res.switch_times]}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Verify


def _verify_checks(spec, res: sv.SolveResult, reported_cost, tol: float, seed: int) -> list[dict]:
    checks = [
        {"name": f"residual {lbl}", "value": _finite(abs(v)), "bound": tol,
         "passed": bool(abs(v) <= tol)}
        for lbl, v in res.residual_table
    ]
    if reported_cost is not None:
        dev = abs(res.cost - float(reported_cost))
        bound = COST_TOL * (1.0 + abs(res.cost))
        checks.append({"name": "reported cost matches trajectory cost",
                       "value": _finite(dev), "bound": bound, "passed": bool(dev <= bound)})

    lin = sens.Linearization(spec.model, res.trajectory)
    audit = sens.duality_audit(spec.model, res.trajectory, res.adjoint, lin)
    bound = DUALITY_TOL * (1.0 + audit.scale)
    checks.append({"name": "adjoint-variation pairing conserved",
                   "value": _finite(audit.max_drift), "bound": bound,
                   "passed": bool(audit.max_drift <= bound)})

    rng = np.random.default_rng(seed)
    t0, tf = res.trajectory.t0, res.trajectory.tf
    switch_times = list(res.trajectory.switching_times)
    bounds_t = [t0] + switch_times + [tf]
    worst = 0.0
    for _ in range(N_VERIFY_NEEDLES):
        i_seg = int(rng.integers(len(res.trajectory.segments)))
        a, b = bounds_t[i_seg], bounds_t[i_seg + 1]
        t = a + (0.1 + 0.8 * rng.random()) * (b - a)
        loc = spec.model.location(res.trajectory.segments[i_seg].location)
        v = [lo + (hi - lo) * rng.random() for lo, hi in loc.control_box]
        worst = min(worst, sens.needle_variation(lin, t, v).first_order_cost_change)
    bound = NEEDLE_TOL * (1.0 + abs(res.cost))
    checks.append({"name": f"needle variations nonnegative ({N_VERIFY_NEEDLES} draws)",
                   "value": _finite(worst), "bound": -bound, "passed": bool(worst >= -bound)})
    return checks


def cmd_verify(args) -> int:
    spec, doc = pf.load_problem(args.problem)
    try:
        rep = json.loads(Path(args.solution).read_text())
    except OSError as e:
        return _fail(f"cannot read {args.solution!r}: {e.strerror or e}")
    except json.JSONDecodeError as e:
        return _fail(f"{args.solution}: invalid JSON at line {e.lineno}: {e.msg}")
    fp = pf.fingerprint(doc)
    rep_fp = rep.get("problem", {}).get("fingerprint")
    if rep_fp != fp:
        return _fail(f"provenance mismatch: report was produced for fingerprint "
                     f"{rep_fp!r}, this problem is {fp!r}")
    if not isinstance(rep.get("result"), dict) or "z" not in rep["result"]:
        return _fail(f"{args.solution}: no solution vector to verify")

    tol = args.tol if args.tol is not None else 1e-6
    out = _out_dir(args)
    shooting = sv.assemble(spec.model, spec.schedule, spec.x0, spec.t_span)
    config = sv.SolveConfig(sim=spec.sim)
    try:
        res = sv.rebuild(shooting, rep["result"]["z"], config)
    except sv.SolverError as e:
        _write_json(out / "verify.json", {
            "problem": {"ref": args.problem, "fingerprint": fp},
            "checks": [{"name": "solution rebuilds", "value": None, "bound": None,
                        "passed": False, "detail": str(e)}],
            "passed": False,
        })
        print(f"verification failed: {e}", file=sys.stderr)
        return EXIT_NO_CONVERGENCE

    checks = _verify_checks(spec, res, rep["result"].get("cost"), tol, args.seed)
    passed = all(c["passed"] for c in checks)
    _write_json(out / "verify.json", {
        "problem": {"ref": args.problem, "fingerprint": fp},
        "checks": checks,
        "passed": passed,
    })
    n_bad = sum(not c["passed"] for c in checks)
    if passed:
        print(f"all {len(checks)} conditions hold")
        return EXIT_OK
    for c in checks:
        if not c["passed"]:
            print(f"FAIL {c['name']}: {c['value']} vs bound {c['bound']}", file=sys.stderr)
    print(f"{n_bad} of {len(checks)} condition(s) failed", file=sys.stderr)
    return EXIT_NO_CONVERGENCE


# ---------------------------------------------------------------------------
# Oracle


def cmd_oracle(args) -> int:
    spec, doc = pf.load_problem(args.problem)
    config = oc.OracleConfig(n_nodes=args.nodes, budget=max(args.budget, 0), seed=args.seed)
    if args.tol is not None:
        config = dataclasses.replace(config, step_tol=args.tol)
    result = oc.search(spec.model, spec.schedule, spec.x0, spec.t_span, config)
    unoptimized = args.budget <= 0
    out = _out_dir(args)
    body = oc.oracle_to_dict(result)
    body["cost"] = _finite(body["cost"])
    body["trace"] = [{"evals": e["evals"], "cost": _finite(e["cost"])} for e in body["trace"]]
    body["unoptimized"] = unoptimized
    body["problem"] = {"ref": args.problem, "fingerprint": pf.fingerprint(doc)}
    body["config"] = {"nodes": config.n_nodes, "budget": args.budget, "seed": config.seed}
    _write_json(out / "oracle.json", body)
    if result.trajectory is not None:
        sm.trajectory_to_csv(result.trajectory, out / "trajectory.csv")
    if unoptimized:
        print("unoptimized: evaluation budget is 0, reporting the initial point",
              file=sys.stderr)
        return EXIT_NO_CONVERGENCE
    print(f"J_direct = {result.cost:.9g} after {result.n_evals} evaluation(s)"
          + (" (budget exhausted)" if result.exhausted else ""))
    return EXIT_OK


def cmd_export_builtin(args) -> int:
    name = args.name
    if name.startswith(pf.BUILTIN_PREFIX):
        name = name[len(pf.BUILTIN_PREFIX):]
    spec, doc = pf.load_problem(pf.BUILTIN_PREFIX + name)
    out = Path(args.out)
    path = out / f"{name}.json" if out.is_dir() or args.out.endswith("/") else out
    if path.parent != Path(""):
        path.parent.mkdir(parents=True, exist_ok=True)
    _write_json(path, doc)
    print(f"wrote {path}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="hybridmp",
        description="Simulate, solve and verify hybrid optimal control problems.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_default="."):
        sp.add_argument("--out", default=out_default,
                        help="output directory (default: current directory)")
        sp.add_argument("--seed", type=int, default=0, help="random seed")
        sp.add_argument("--tol", type=float, default=None,
                        help="tolerance override (integration / Newton / check "
                             "threshold, depending on the command)")

    sp = sub.add_parser("simulate", help="run a schedule under a given input")
    sp.add_argument("problem", help="builtin:<name> or a problem file")
    sp.add_argument("--input", default="zero",
                    help="controls file, or policy 'zero' / 'feasible'")
    common(sp)
    sp.set_defaults(fn=cmd_simulate)

    sp = sub.add_parser("solve", help="multistart indirect shooting")
    sp.add_argument("problem", help="builtin:<name> or a problem file")
    sp.add_argument("--starts", type=int, default=16, help="number of starts")
    common(sp)
    sp.set_defaults(fn=cmd_solve)

    sp = sub.add_parser("verify", help="re-check a solve report against its problem")
    sp.add_argument("problem", help="builtin:<name> or a problem file")
    sp.add_argument("--solution", required=True, help="report.json from solve")
    common(sp)
    sp.set_defaults(fn=cmd_verify)

    sp = sub.add_parser("oracle", help="direct-transcription reference cost")
    sp.add_argument("problem", help="builtin:<name> or a problem file")
    sp.add_argument("--nodes", type=int, default=9, help="control nodes per location")
    sp.add_argument("--budget", type=int, default=10000, help="evaluation budget")
    common(sp)
    sp.set_defaults(fn=cmd_oracle)

    sp = sub.add_parser("export-builtin", help="write a builtin as a problem file")
    sp.add_argument("name", help="builtin name, e.g. 'ev'")
    common(sp)
    sp.set_defaults(fn=cmd_export_builtin)

    return p


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    try:
        return args.fn(args)
    except (pf.FileError, md.ModelError, ex.ExprError, OSError) as e:
        return _fail(str(e))
    except (sv.SolverError, hmp.HmpError) as e:
        print(f"solver error: {e}", file=sys.stderr)
        return EXIT_NO_CONVERGENCE


if __name__ == "__main__":
    sys.exit(main())
