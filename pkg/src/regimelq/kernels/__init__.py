"""Kernel backend selection.

The compiled Cython core is preferred when importable; set
``REGIMELQ_BACKEND=python`` to force the numpy fallback (``compiled`` to
require the extension). Both implementations share draw order and segment
arithmetic, so results agree to floating round-off.
"""

import os

from . import _python

_requested = os.environ.get("REGIMELQ_BACKEND", "auto").lower()

if _requested == "python":
    _impl = _python
elif _requested in ("auto", "compiled", "c"):
    try:
        from . import _core as _impl  # type: ignore[no-redef]
    except ImportError:
        if _requested != "auto":
            raise
        _impl = _python
else:
    raise ValueError(f"unknown REGIMELQ_BACKEND {_requested!r}")

BACKEND = _impl.BACKEND_NAME

KernelBlowup = _impl.KernelBlowup
chain_jumps_constant = _impl.chain_jumps_constant
modulator_paths = _impl.modulator_paths
simulate_paths = _impl.simulate_paths

MODE_OPEN = _python.MODE_OPEN
MODE_CLOSED_TABLE = _python.MODE_CLOSED_TABLE
MODE_CLOSED_SCENARIO = _python.MODE_CLOSED_SCENARIO


def backend_name() -> str:
    return BACKEND


def get_backend(name: str):
    """Explicit backend module (used by the benchmark and agreement tests)."""
    if name == "python":
        return _python
    if name == "compiled":
        from . import _core

        return _core
    raise ValueError(f"unknown backend {name!r}")
