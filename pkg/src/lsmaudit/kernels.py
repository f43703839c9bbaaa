"""Hot-kernel backend selection.

The compiled extension is preferred; set ``LSMAUDIT_PURE=1`` to force the
pure-Python fallback.  Both expose ``run_chain``, ``topo_order``,
``flow_pairs`` and ``CaptureCore`` with identical results.
"""

from __future__ import annotations

import os

from lsmaudit import _kernels_py as python_backend

compiled_backend = None
if not os.environ.get("LSMAUDIT_PURE"):
    try:
        from lsmaudit import _kernels as compiled_backend  # type: ignore[no-redef]
    except ImportError:  # extension not built
        compiled_backend = None

_impl = compiled_backend or python_backend
BACKEND = "compiled" if compiled_backend is not None else "python"

run_chain = _impl.run_chain
topo_order = _impl.topo_order
flow_pairs = _impl.flow_pairs
CaptureCore = _impl.CaptureCore

__all__ = ["BACKEND", "compiled_backend", "python_backend", "run_chain", "topo_order", "flow_pairs", "CaptureCore"]
