"""Keep freed large buffers in the heap.

The engine allocates and frees many same-sized activation buffers per step.
With glibc's default mmap threshold each one is a fresh mapping whose pages
fault in again on first touch, which dominates runtime for float64 batches.
"""

import ctypes
import ctypes.util
import sys

_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3


def tune_allocator() -> bool:
    if not sys.platform.startswith("linux"):
        return False
    try:
        libc = ctypes.CDLL(ctypes.util.find_library("c") or "libc.so.6")
        ok = libc.mallopt(_M_MMAP_THRESHOLD, 1 << 30) == 1
        ok &= libc.mallopt(_M_TRIM_THRESHOLD, (1 << 31) - 1) == 1
        return bool(ok)
    except (OSError, AttributeError):
        return False
