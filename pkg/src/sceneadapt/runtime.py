"""Process-level niceties for long numpy loops."""

import ctypes

_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3


def tune_allocator() -> bool:
    """Keep large array buffers on the heap across iterations.

    The training loops cycle tens of megabytes of temporaries per update;
    with glibc's default mmap threshold every such buffer is a fresh mmap
    and a page-fault storm.  Raising the thresholds lets the allocator
    reuse the same pages.  Best effort: returns False where unavailable.
    """
    try:
        libc = ctypes.CDLL("libc.so.6", use_errno=True)
    except OSError:
        return False
    try:
        ok = libc.mallopt(_M_MMAP_THRESHOLD, 1 << 29)
        ok &= libc.mallopt(_M_TRIM_THRESHOLD, 1 << 29)
        return bool(ok)
    except AttributeError:
        return False
