"""Kernel dispatch: compiled extension when available, numpy otherwise.

Set ``VNLA_PURE_PYTHON=1`` to force the fallback.
"""
import os

from vnla import _pykernels

_impl = _pykernels
if os.environ.get("VNLA_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from vnla import _ckernels as _impl
    except ImportError:  # extension not built
        _impl = _pykernels

BACKEND = _impl.BACKEND

ACT_NONE = _pykernels.ACT_NONE
ACT_TANH = _pykernels.ACT_TANH
ACT_RELU = _pykernels.ACT_RELU

lstm_forward = _impl.lstm_forward
lstm_backward = _impl.lstm_backward
linear_forward = _impl.linear_forward
linear_backward = _impl.linear_backward
attention_forward = _impl.attention_forward
attention_backward = _impl.attention_backward
dijkstra = _impl.dijkstra


def implementations():
    """All importable backends, keyed by name (used by parity tests and benchmarks)."""
    out = {"python": _pykernels}
    try:
        from vnla import _ckernels
        out["cython"] = _ckernels
    except ImportError:
        pass
    return out
