"""Kernel backend selection.

The compiled extension is used when it imports; setting ``QDIT_PURE_PYTHON=1``
forces the pure-Python twins (useful for benchmarking and for checking that
both paths agree).
"""

import logging
import os

from . import _fallback

log = logging.getLogger(__name__)

fallback = _fallback

if os.environ.get("QDIT_PURE_PYTHON", "") not in ("", "0"):
    kernels = _fallback
    BACKEND = "python"
else:
    try:
        from . import _kernels as kernels  # type: ignore[attr-defined]

        BACKEND = "compiled"
    except ImportError:  # extension not built
        log.debug("compiled kernels unavailable, using pure-Python fallback")
        kernels = _fallback
        BACKEND = "python"

compiled = kernels if BACKEND == "compiled" else None
