"""glibc allocator tuning for array-heavy optimization loops.

The optimizers allocate megabyte-scale temporaries thousands of times per
run.  With default glibc thresholds those blocks are served by mmap/munmap,
which is extremely slow under sandboxed kernels.  Raising the thresholds
keeps big blocks on the heap free lists.
"""

import ctypes
import sys

_M_TRIM_THRESHOLD = -1
_M_TOP_PAD = -2
_M_MMAP_THRESHOLD = -3


def tune_malloc() -> None:
    if not sys.platform.startswith("linux"):
        return
    try:
        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(_M_MMAP_THRESHOLD, 1 << 30)
        libc.mallopt(_M_TRIM_THRESHOLD, 1 << 30)
        libc.mallopt(_M_TOP_PAD, 1 << 26)
    except OSError:
        pass
