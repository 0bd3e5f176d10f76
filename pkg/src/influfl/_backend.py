"""Kernel backend selection.

The compiled extension is used when importable; otherwise the numpy
fallback. ``INFLUFL_BACKEND`` (``auto`` | ``compiled`` | ``python``) forces a
choice at import time, and :func:`set_backend` switches at runtime.
"""

import importlib
import os

from . import _kernels_py

_VALID = ("auto", "compiled", "python")


def load(name):
    """Return the kernel module for ``name`` ("compiled" or "python")."""
    if name == "python":
        return _kernels_py
    if name == "compiled":
        return importlib.import_module("influfl._kernels")
    raise ValueError(f"unknown backend {name!r}; expected one of {_VALID}")


def compiled_available():
    try:
        load("compiled")
    except ImportError:
        return False
    return True


def _select(choice):
    if choice not in _VALID:
        raise ValueError(f"INFLUFL_BACKEND={choice!r}; expected one of {_VALID}")
    if choice == "auto":
        return ("compiled", load("compiled")) if compiled_available() else ("python", _kernels_py)
    return choice, load(choice)


name, active = _select(os.environ.get("INFLUFL_BACKEND", "auto"))


def set_backend(choice):
    """Switch the active kernels; returns the name of the previous backend."""
    global name, active
    previous = name
    name, active = _select(choice)
    return previous
