"""Kernel selection: compiled extension when importable, else pure Python.

Set ``DOMAINRESCORE_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py
if os.environ.get("DOMAINRESCORE_PURE_PYTHON") != "1":
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py

MATCH, SUB, DEL, INS = _kernels_py.MATCH, _kernels_py.SUB, _kernels_py.DEL, _kernels_py.INS

edit_distance = _impl.edit_distance
align_ops = _impl.align_ops
char_distance = _impl.char_distance
char_distance_row = _impl.char_distance_row
channel_viterbi = _impl.channel_viterbi

__all__ = [
    "BACKEND",
    "MATCH",
    "SUB",
    "DEL",
    "INS",
    "edit_distance",
    "align_ops",
    "char_distance",
    "char_distance_row",
    "channel_viterbi",
]
