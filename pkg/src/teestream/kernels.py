"""Kernel dispatch: the compiled ``_kernels`` extension when built, numpy otherwise.

Set ``TEESTREAM_PURE=1`` to force the fallback (used by tests that check the
two paths agree).
"""

from __future__ import annotations

import os

from . import _fallback

BACKEND = "python"

if os.environ.get("TEESTREAM_PURE") != "1":
    try:
        from . import _kernels as _impl

        BACKEND = "compiled"
    except ImportError:  # extension not built
        _impl = _fallback
else:
    _impl = _fallback

sort_perm = _impl.sort_perm
merge_perm = _impl.merge_perm
join_pairs = _impl.join_pairs
varint_encode = _impl.varint_encode
varint_decode = _impl.varint_decode

__all__ = [
    "BACKEND",
    "sort_perm",
    "merge_perm",
    "join_pairs",
    "varint_encode",
    "varint_decode",
]
