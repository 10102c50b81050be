"""Inner-loop kernel selection: compiled extension or numpy fallback.

``BACKEND`` reports which implementation is live.  Set the environment
variable ``LOADSTEER_PURE_PYTHON=1`` before import to force the fallback.
"""

from __future__ import annotations

import os

if os.environ.get("LOADSTEER_PURE_PYTHON", "").strip() not in ("", "0"):
    from .fallback import admm_run

    BACKEND = "python"
else:
    try:
        from ._admm import admm_run  # type: ignore[attr-defined]

        BACKEND = "compiled"
    except ImportError:
        from .fallback import admm_run

        BACKEND = "python"

__all__ = ["admm_run", "BACKEND"]
