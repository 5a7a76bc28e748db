"""Process-level tuning for the training workload."""

from __future__ import annotations

import ctypes
import ctypes.util
import logging

log = logging.getLogger(__name__)

_M_TRIM_THRESHOLD = -1
_M_TOP_PAD = -2
_M_MMAP_THRESHOLD = -3


def tune_allocator(mmap_threshold: int = 64 << 20, trim_threshold: int = 256 << 20, top_pad: int = 64 << 20) -> bool:
    """Keep large activation buffers on the glibc heap instead of fresh mmaps.

    Training allocates and frees many multi-megabyte arrays per step; letting
    glibc return each one to the kernel costs page faults on every reuse.
    Returns False where glibc's ``mallopt`` is unavailable.
    """
    try:
        libc = ctypes.CDLL(ctypes.util.find_library("c") or "libc.so.6")
        ok = all(libc.mallopt(k, v) == 1 for k, v in ((_M_MMAP_THRESHOLD, mmap_threshold), (_M_TRIM_THRESHOLD, trim_threshold), (_M_TOP_PAD, top_pad)))
    except (OSError, AttributeError):
        return False
    log.debug("allocator tuned: %s", ok)
    return ok
