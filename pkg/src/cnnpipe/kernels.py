"""Backend selection for the segment kernels.

The compiled extension is used when it was built; otherwise the pure-Python
module is used. Set ``CNNPIPE_KERNELS=python`` to force the fallback.
"""

import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("CNNPIPE_KERNELS", "").lower() != "python":
    try:
        from . import _kernels as _compiled  # type: ignore[attr-defined]
    except ImportError:  # extension not built
        pass
    else:
        _impl = _compiled
        BACKEND = "cython"

touched_rows = _impl.touched_rows
segment_rows = _impl.segment_rows
owned_rows = _impl.owned_rows


def available_backends():
    out = {"python": _kernels_py}
    try:
        from . import _kernels as _compiled  # type: ignore[attr-defined]
    except ImportError:
        pass
    else:
        out["cython"] = _compiled
    return out
