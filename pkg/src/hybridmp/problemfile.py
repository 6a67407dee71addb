"""Problem documents: JSON serialization of a model plus one solvable setup.

A document carries the same information as a ProblemSpec minus the reference
values: locations with their vector fields and running costs, transitions,
the terminal cost, and a ``problem`` section fixing schedule, initial data
and horizon.  Schema violations are reported with JSON-pointer diagnostics
(and line/column for syntax errors) before any model construction happens;
semantic errors (bad expressions, dimension mismatches) then surface from
the model layer as usual.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

from . import exprlang as ex
from . import model as md
from . import simulate as sm
from .problems import BUILTINS, ProblemSpec, builtin

__all__ = [
    "FileError",
    "parse_text",
    "validate_document",
    "document_to_spec",
    "spec_to_document",
    "canonical_json",
    "fingerprint",
    "load_problem",
]

BUILTIN_PREFIX = "builtin:"

_SIM_KEYS = {
    "rtol": float,
    "atol": float,
    "event_tol": float,
    "transversality_eps": float,
    "min_dwell": float,
    "max_switches": int,
    "max_steps": int,
}


class FileError(ValueError):
    """Schema or syntax problem in a problem document."""

    def __init__(self, message: str, pointer: str | None = None):
        self.pointer = pointer
        super().__init__(f"{pointer or '/'}: {message}" if pointer is not None else message)


def parse_text(text: str) -> dict:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise FileError(f"invalid JSON at line {e.lineno}, column {e.colno}: {e.msg}") from None
    if not isinstance(doc, dict):
        raise FileError(f"document must be an object, got {type(doc).__name__}")
    return doc


# ---------------------------------------------------------------------------
# Schema walk


def _check_keys(node: dict, pointer: str, required: tuple[str, ...], optional: tuple[str, ...] = ()):
    unknown = sorted(set(node) - set(required) - set(optional))
    if unknown:
        raise FileError(f"unknown key(s): {', '.join(unknown)}", pointer)
    missing = sorted(set(required) - set(node))
    if missing:
        raise FileError(f"missing required key(s): {', '.join(missing)}", pointer)


def _typed(node: dict, key: str, kind, pointer: str):
    v = node[key]
    if kind is float:
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise FileError(f"expected a number, got {type(v).__name__}", f"{pointer}/{key}")
        return float(v)
    if kind is int:
        if isinstance(v, bool) or not isinstance(v, int):
            raise FileError(f"expected an integer, got {type(v).__name__}", f"{pointer}/{key}")
        return v
    if kind is str:
        if not isinstance(v, str):
            raise FileError(f"expected a string, got {type(v).__name__}", f"{pointer}/{key}")
        return v
    if kind is list:
        if not isinstance(v, list):
            raise FileError(f"expected an array, got {type(v).__name__}", f"{pointer}/{key}")
        return v
    if kind is dict:
        if not isinstance(v, dict):
            raise FileError(f"expected an object, got {type(v).__name__}", f"{pointer}/{key}")
        return v
    raise AssertionError(kind)


def _expr_list(node: dict, key: str, pointer: str) -> list[str]:
    items = _typed(node, key, list, pointer)
    out = []
    for i, item in enumerate(items):
        if not isinstance(item, str):
            raise FileError(f"expected an expression string, got {type(item).__name__}",
                            f"{pointer}/{key}/{i}")
        out.append(item)
    return out


def validate_document(doc: dict) -> None:
    """Structural checks only; expression syntax is left to the model layer."""
    _check_keys(doc, "", ("locations", "transitions", "terminal", "problem"), ("config",))

    locs = _typed(doc, "locations", list, "")
    if not locs:
        raise FileError("at least one location is required", "/locations")
    seen: set[str] = set()
    for i, loc in enumerate(locs):
        ptr = f"/locations/{i}"
        if not isinstance(loc, dict):
            raise FileError(f"expected an object, got {type(loc).__name__}", ptr)
        _check_keys(loc, ptr, ("id", "state_dim", "control_box", "f", "l"))
        name = _typed(loc, "id", str, ptr)
        if name in seen:
            raise FileError(f"duplicate location id {name!r}", f"{ptr}/id")
        seen.add(name)
        n = _typed(loc, "state_dim", int, ptr)
        if n < 1:
            raise FileError("state_dim must be positive", f"{ptr}/state_dim")
        f = _expr_list(loc, "f", ptr)
        if len(f) != n:
            raise FileError(f"f has {len(f)} component(s), state_dim says {n}", f"{ptr}/f")
        box = _typed(loc, "control_box", list, ptr)
        for j, pair in enumerate(box):
            if (not isinstance(pair, list) or len(pair) != 2
                    or any(isinstance(v, bool) or not isinstance(v, (int, float)) for v in pair)):
                raise FileError("expected a [lo, hi] number pair", f"{ptr}/control_box/{j}")
            if pair[0] > pair[1]:
                raise FileError(f"empty interval [{pair[0]}, {pair[1]}]", f"{ptr}/control_box/{j}")
        _typed(loc, "l", str, ptr)

    trs = _typed(doc, "transitions", list, "")
    events: set[str] = set()
    for i, tr in enumerate(trs):
        ptr = f"/transitions/{i}"
        if not isinstance(tr, dict):
            raise FileError(f"expected an object, got {type(tr).__name__}", ptr)
        kind = tr.get("kind")
        if kind not in (md.AUTONOMOUS, md.CONTROLLED):
            raise FileError(
                f"kind must be {md.AUTONOMOUS!r} or {md.CONTROLLED!r}, got {kind!r}", f"{ptr}/kind")
        keys = ("sigma", "from", "to", "kind", "xi", "c")
        _check_keys(tr, ptr, keys + (("m",) if kind == md.AUTONOMOUS else ()))
        sigma = _typed(tr, "sigma", str, ptr)
        if sigma in events:
            raise FileError(f"duplicate event name {sigma!r}", f"{ptr}/sigma")
        events.add(sigma)
        for key in ("from", "to"):
            src = _typed(tr, key, str, ptr)
            if src not in seen:
                raise FileError(f"unknown location {src!r}", f"{ptr}/{key}")
        if kind == md.AUTONOMOUS:
            _typed(tr, "m", str, ptr)
        _expr_list(tr, "xi", ptr)
        _typed(tr, "c", str, ptr)

    term = _typed(doc, "terminal", dict, "")
    _check_keys(term, "/terminal", ("g",))
    _typed(term, "g", str, "/terminal")

    prob = _typed(doc, "problem", dict, "")
    _check_keys(prob, "/problem", ("schedule", "x0", "q0", "t0", "tf"))
    sched = _typed(prob, "schedule", list, "/problem")
    if not sched:
        raise FileError("schedule must not be empty", "/problem/schedule")
    for i, name in enumerate(sched):
        if not isinstance(name, str) or name not in seen:
            raise FileError(f"unknown location {name!r}", f"/problem/schedule/{i}")
    x0 = _typed(prob, "x0", list, "/problem")
    for i, v in enumerate(x0):
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise FileError(f"expected a number, got {type(v).__name__}", f"/problem/x0/{i}")
    q0 = _typed(prob, "q0", str, "/problem")
    if q0 not in seen:
        raise FileError(f"unknown location {q0!r}", "/problem/q0")
    t0 = _typed(prob, "t0", float, "/problem")
    tf = _typed(prob, "tf", float, "/problem")
    if not tf > t0:
        raise FileError(f"empty horizon [{t0}, {tf}]", "/problem/tf")

    if "config" in doc:
        cfg = _typed(doc, "config", dict, "")
        _check_keys(cfg, "/config", (), ("sim",))
        if "sim" in cfg:
            simc = _typed(cfg, "sim", dict, "/config")
            _check_keys(simc, "/config/sim", (), tuple(_SIM_KEYS))
            for key, kind in _SIM_KEYS.items():
                if key in simc:
                    _typed(simc, key, kind, "/config/sim")


# ---------------------------------------------------------------------------
# Document <-> spec


def document_to_spec(doc: dict, name: str = "problem") -> ProblemSpec:
    validate_document(doc)
    locations = [
        md.location(
            loc["id"],
            tuple(loc["f"]),
            running_cost=loc["l"],
            control_box=tuple((float(lo), float(hi)) for lo, hi in loc["control_box"]),
        )
        for loc in doc["locations"]
    ]
    transitions = []
    for tr in doc["transitions"]:
        if tr["kind"] == md.AUTONOMOUS:
            transitions.append(md.autonomous(
                tr["sigma"], tr["from"], tr["to"], tr["m"], tuple(tr["xi"]), tr["c"]))
        else:
            transitions.append(md.controlled(
                tr["sigma"], tr["from"], tr["to"], tuple(tr["xi"]), tr["c"]))
    model = md.build_model(locations, transitions, doc["terminal"]["g"])
    prob = doc["problem"]
    sched = md.schedule(model, list(prob["schedule"]))
    sim_over = doc.get("config", {}).get("sim", {})
    sim = sm.SimConfig(**sim_over) if sim_over else sm.SimConfig()
    return ProblemSpec(
        name=name,
        model=model,
        schedule=sched,
        q0=prob["q0"],
        x0=tuple(float(v) for v in prob["x0"]),
        t_span=(float(prob["t0"]), float(prob["tf"])),
        sim=sim,
    )


def spec_to_document(spec: ProblemSpec) -> dict:
    """Inverse of document_to_spec up to expression formatting.

    Reference values are regression data, not problem content, and are not
    serialized; a default-config spec gets no config section.
    """
    model = spec.model
    locations = [
        {
            "id": loc.name,
            "state_dim": loc.state_dim,
            "control_box": [[lo, hi] for lo, hi in loc.control_box],
            "f": [ex.to_source(f) for f in loc.field],
            "l": ex.to_source(loc.running_cost),
        }
        for loc in model.locations
    ]
    transitions = []
    for tr in model.transitions:
        entry = {
            "sigma": tr.event,
            "from": tr.source,
            "to": tr.target,
            "kind": tr.kind,
            "xi": [ex.to_source(e) for e in tr.jump],
            "c": ex.to_source(tr.switch_cost),
        }
        if tr.kind == md.AUTONOMOUS:
            entry["m"] = ex.to_source(tr.guard)
        transitions.append(entry)
    doc = {
        "locations": locations,
        "transitions": transitions,
        "terminal": {"g": ex.to_source(model.terminal_cost)},
        "problem": {
            "schedule": list(spec.schedule.locations),
            "x0": [float(v) for v in spec.x0],
            "q0": spec.q0,
            "t0": spec.t_span[0],
            "tf": spec.t_span[1],
        },
    }
    default = sm.SimConfig()
    over = {k: getattr(spec.sim, k) for k in _SIM_KEYS
            if getattr(spec.sim, k) != getattr(default, k)}
    if over:
        doc["config"] = {"sim": over}
    return doc


def canonical_json(doc: dict) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), allow_nan=False)


def fingerprint(doc: dict) -> str:
    """Stable identity of a problem document, for report provenance checks."""
    return hashlib.sha256(canonical_json(doc).encode()).hexdigest()


def load_problem(ref: str) -> tuple[ProblemSpec, dict]:
    """Resolve ``builtin:<name>`` or a file path to (spec, document)."""
    if ref.startswith(BUILTIN_PREFIX):
        name = ref[len(BUILTIN_PREFIX):]
        if name not in BUILTINS:
            known = ", ".join(sorted(BUILTINS))
            raise FileError(f"unknown builtin {name!r} (known: {known})")
        spec = builtin(name)
        return spec, spec_to_document(spec)
    path = Path(ref)
    try:
        text = path.read_text()
    except OSError as e:
        raise FileError(f"cannot read {ref!r}: {e.strerror or e}") from None
    doc = parse_text(text)
    return document_to_spec(doc, name=path.stem), doc
