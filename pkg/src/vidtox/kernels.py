"""Kernel backend selection.

The compiled ``_ckernels`` extension is used when it imports; otherwise the
numpy versions in ``_pykernels`` are used. Set ``VIDTOX_PURE_PYTHON=1`` to
force the fallback.
"""

import os

from vidtox import _pykernels

if os.environ.get("VIDTOX_PURE_PYTHON", "") not in ("", "0"):
    _impl = _pykernels
    BACKEND = "python"
else:
    try:
        from vidtox import _ckernels as _impl

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _pykernels
        BACKEND = "python"

conv1d_forward = _impl.conv1d_forward
conv1d_backward = _impl.conv1d_backward
masked_softmax = _impl.masked_softmax
softmax_backward = _impl.softmax_backward
attention_forward = _impl.attention_forward
attention_backward = _impl.attention_backward


def available_backends():
    """Return ``{name: module}`` for every backend importable here."""
    out = {"python": _pykernels}
    try:
        from vidtox import _ckernels

        out["cython"] = _ckernels
    except ImportError:
        pass
    return out
