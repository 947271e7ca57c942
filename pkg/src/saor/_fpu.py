"""Flush-to-zero control for subnormal floats.

Saturated sigmoid/exp chains in the soft rasterizer produce gradient values
deep in the float32 subnormal range; x86 cores handle subnormal arithmetic
with microcode assists that slow elementwise numpy by 30-100x.  Setting the
FTZ and DAZ bits of MXCSR flushes them to zero, which is harmless at the
magnitudes involved (< 1e-38).

No-op on non-x86 platforms or when executable memory is unavailable.
"""

from __future__ import annotations

import ctypes
import logging
import mmap
import platform

log = logging.getLogger("saor")

_FTZ_DAZ_CODE = bytes([
    0x0f, 0xae, 0x5c, 0x24, 0xfc,  # stmxcsr -4(%rsp)
    0x8b, 0x44, 0x24, 0xfc,        # mov     -4(%rsp), %eax
    0x0d, 0x40, 0x80, 0x00, 0x00,  # or      $0x8040, %eax  (FTZ | DAZ)
    0x89, 0x44, 0x24, 0xfc,        # mov     %eax, -4(%rsp)
    0x0f, 0xae, 0x54, 0x24, 0xfc,  # ldmxcsr -4(%rsp)
    0xc3,                          # ret
])

_buf = None
_done = False


def flush_subnormals():
    """Enable FTZ/DAZ on the calling thread (idempotent, best effort)."""
    global _buf, _done
    if _done:
        return
    _done = True
    if platform.machine() not in ("x86_64", "AMD64"):
        return
    try:
        _buf = mmap.mmap(-1, len(_FTZ_DAZ_CODE),
                         prot=mmap.PROT_READ | mmap.PROT_WRITE | mmap.PROT_EXEC)
        _buf.write(_FTZ_DAZ_CODE)
        addr = ctypes.addressof(ctypes.c_char.from_buffer(_buf))
        ctypes.CFUNCTYPE(None)(addr)()
    except (OSError, ValueError) as err:
        log.debug("could not enable flush-to-zero: %s", err)
