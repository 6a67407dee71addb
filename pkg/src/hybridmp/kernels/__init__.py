"""Numeric kernel selection.

The compiled extension is preferred when present; the pure-Python twin is
behaviorally identical and is selected automatically when the extension is
missing, or explicitly by setting HYBRIDMP_PURE=1 in the environment.
"""

from __future__ import annotations

import os

from . import programs  # noqa: F401  (re-export)

if os.environ.get("HYBRIDMP_PURE", "").strip() not in ("", "0"):
    from . import _pykernels as impl
else:
    try:
        from . import _speedups as impl  # type: ignore[attr-defined]
    except ImportError:
        from . import _pykernels as impl

eval_program = impl.eval_program
eval_program_vec = impl.eval_program_vec
rk45_segment = impl.rk45_segment
IS_COMPILED = impl.IS_COMPILED


def backend_name() -> str:
    return "compiled" if IS_COMPILED else "pure-python"
