"""Kernel backend selection.

The compiled extension is used when it imports; set ``TLBIAS_KERNELS=python``
to force the numpy fallback.
"""

import os

from . import _pykernels

BACKENDS = {"python": _pykernels}

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None
else:
    BACKENDS["compiled"] = _ckernels

if os.environ.get("TLBIAS_KERNELS", "").lower() == "python" or _ckernels is None:
    BACKEND = "python"
else:
    BACKEND = "compiled"

_active = BACKENDS[BACKEND]


def use(name):
    """Switch the active backend at runtime (``"compiled"`` or ``"python"``)."""
    global BACKEND, _active
    if name not in BACKENDS:
        raise ValueError(f"kernel backend {name!r} unavailable; have {sorted(BACKENDS)}")
    BACKEND = name
    _active = BACKENDS[name]


def active():
    return _active
