"""Projection kernel backend, chosen at import.

The compiled extension is used when it was built; otherwise the scipy.sparse
fallback takes over. :func:`use` switches backends at runtime (tests and the
benchmark exercise both).
"""
from __future__ import annotations

import logging
from types import ModuleType

from . import _kernels_py

log = logging.getLogger(__name__)

try:
    from . import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None

_active: ModuleType = _compiled if _compiled is not None else _kernels_py


def available() -> list[str]:
    names = ["python"]
    if _compiled is not None:
        names.insert(0, "cython")
    return names


def backend() -> str:
    return "cython" if _active is _compiled and _compiled is not None else "python"


def use(name: str) -> None:
    global _active
    if name == "cython":
        if _compiled is None:
            raise RuntimeError("compiled kernels are not built; run `pip install -e .`")
        _active = _compiled
    elif name == "python":
        _active = _kernels_py
    else:
        raise ValueError(f"unknown kernel backend {name!r}")
    log.debug("kernel backend: %s", name)


def impl() -> ModuleType:
    return _active
