"""Kernel backend selection.

Two implementations of one kernel API ship with the package: a compiled
Cython core (editlab.backend._fastops) and a pure-numpy fallback
(editlab.backend.numpy_ops).  Import picks the compiled core when it
built successfully, else the fallback.  Set EDITLAB_BACKEND=numpy or
EDITLAB_BACKEND=compiled to force a choice; forcing "compiled" when the
extension is absent raises so a benchmark can't silently compare numpy
against itself.

The active module is the attribute `K`; tape ops call through it, so
swapping backends mid-process (use()) affects every subsequent op.
"""

import os

from . import numpy_ops

try:
    from . import _fastops

    HAVE_COMPILED = True
except ImportError:
    _fastops = None
    HAVE_COMPILED = False

K = numpy_ops


def use(name):
    """Select the kernel backend by name ("numpy" or "compiled")."""
    global K
    if name == "numpy":
        K = numpy_ops
    elif name == "compiled":
        if not HAVE_COMPILED:
            raise RuntimeError("compiled kernel backend requested but not built")
        K = _fastops
    else:
        raise ValueError(f"unknown backend {name!r}")
    return K


def active_backend():
    return K.BACKEND_NAME


_env = os.environ.get("EDITLAB_BACKEND")
if _env:
    use(_env)
elif HAVE_COMPILED:
    use("compiled")
