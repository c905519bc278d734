"""Kernel backend selection.

The compiled ``_kernels`` extension is used when it imports; otherwise (or
with ``TRAFFICLOOP_PURE_PYTHON=1``) the pure-Python twins are used.
"""

from __future__ import annotations

import os
from types import ModuleType

from . import _pykernels

try:
    if os.environ.get("TRAFFICLOOP_PURE_PYTHON"):
        raise ImportError("pure Python requested")
    from . import _kernels as _compiled
except ImportError:
    _compiled = None

BACKENDS: dict[str, ModuleType] = {"python": _pykernels}
if _compiled is not None:
    BACKENDS["compiled"] = _compiled

active: ModuleType = _compiled if _compiled is not None else _pykernels
MAX_TOTAL_WEIGHT = _pykernels.MAX_TOTAL_WEIGHT


def backend_name() -> str:
    return "compiled" if active is _compiled else "python"


def set_backend(name: str) -> None:
    global active
    try:
        active = BACKENDS[name]
    except KeyError:
        raise ValueError(f"backend {name!r} unavailable (have {sorted(BACKENDS)})") from None
