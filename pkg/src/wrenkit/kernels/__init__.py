"""Per-frame inner loops of the streaming runtime.

The compiled ``_core`` extension is used when it has been built; otherwise
(or when ``WRENKIT_PURE_PYTHON=1`` is set) the numpy implementations in
``_fallback`` are selected.  Both expose the same four functions.
"""

from __future__ import annotations

import os

from . import _fallback

BACKENDS = {"python": _fallback}

try:
    from . import _core
except ImportError:  # extension not built
    _core = None
else:
    BACKENDS["compiled"] = _core

if _core is not None and os.environ.get("WRENKIT_PURE_PYTHON", "") in ("", "0"):
    BACKEND = "compiled"
else:
    BACKEND = "python"


def get_backend(name: str | None = None):
    """Return the kernel module for ``name`` (default: the selected one)."""
    name = name or BACKEND
    if name not in BACKENDS:
        raise ValueError(f"kernel backend {name!r} unavailable; have {sorted(BACKENDS)}")
    return BACKENDS[name]
