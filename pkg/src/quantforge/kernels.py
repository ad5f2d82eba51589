"""Kernel backend selection.

The compiled Cython module is used when it was built; otherwise (or when
``QUANTFORGE_PURE_PYTHON=1`` is set) the numpy fallback is used. Both produce
identical bytes.
"""

from __future__ import annotations

import os
from types import ModuleType

from . import _pykernels


def _load_compiled() -> ModuleType | None:
    try:
        from . import _ckernels
    except ImportError:
        return None
    return _ckernels


_compiled = _load_compiled()


def available_backends() -> dict[str, ModuleType]:
    out = {"numpy": _pykernels}
    if _compiled is not None:
        out["cython"] = _compiled
    return out


def _select() -> ModuleType:
    if os.environ.get("QUANTFORGE_PURE_PYTHON", "") not in ("", "0") or _compiled is None:
        return _pykernels
    return _compiled


backend = _select()
BACKEND = backend.NAME


def nf4_encode(normalized, codebook):
    return backend.nf4_encode(normalized, codebook)


def q4k_search(x, numerators, iters, qmax=15):
    return backend.q4k_search(x, numerators, iters, qmax)
