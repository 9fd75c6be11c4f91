"""Flush-to-zero control for the x86 SSE unit of the calling thread.

Late in training, backward passes produce float32 subnormals that make
BLAS and the numba kernels several times slower. Setting FTZ/DAZ in
MXCSR turns them into zeros at the hardware level. The flags are per
thread; with single-threaded BLAS all numeric work runs on the caller.
"""

from __future__ import annotations

import platform

FTZ = 0x8000
DAZ = 0x0040

_SUPPORTED = platform.machine().lower() in ("x86_64", "amd64")

if _SUPPORTED:
    from llvmlite import ir
    from numba import njit, types
    from numba.core import cgutils
    from numba.extending import intrinsic

    @intrinsic
    def _ldmxcsr(typingctx, value):
        def codegen(context, builder, signature, args):
            slot = cgutils.alloca_once_value(builder, args[0])
            fnty = ir.FunctionType(ir.VoidType(), [ir.IntType(8).as_pointer()])
            fn = cgutils.get_or_insert_function(builder.module, fnty, "llvm.x86.sse.ldmxcsr")
            builder.call(fn, [builder.bitcast(slot, ir.IntType(8).as_pointer())])
            return context.get_dummy_value()
        return types.void(types.uint32), codegen

    @intrinsic
    def _stmxcsr(typingctx):
        def codegen(context, builder, signature, args):
            slot = cgutils.alloca_once(builder, ir.IntType(32))
            fnty = ir.FunctionType(ir.VoidType(), [ir.IntType(8).as_pointer()])
            fn = cgutils.get_or_insert_function(builder.module, fnty, "llvm.x86.sse.stmxcsr")
            builder.call(fn, [builder.bitcast(slot, ir.IntType(8).as_pointer())])
            return builder.load(slot)
        return types.uint32(), codegen

    @njit(cache=True)
    def _get():
        return _stmxcsr()

    @njit(cache=True)
    def _set(v):
        _ldmxcsr(v)


def get_mxcsr() -> int | None:
    return int(_get()) if _SUPPORTED else None


def set_flush_to_zero(enabled: bool = True) -> bool:
    """Set or clear FTZ+DAZ; returns the previous state (False off x86)."""
    if not _SUPPORTED:
        return False
    cur = int(_get())
    prev = bool(cur & FTZ and cur & DAZ)
    _set(cur | FTZ | DAZ if enabled else cur & ~(FTZ | DAZ) & 0xFFFF)
    return prev


class flush_to_zero:
    """Context manager enabling FTZ/DAZ and restoring the previous state."""

    def __enter__(self):
        self.prev = set_flush_to_zero(True)
        return self

    def __exit__(self, *exc):
        set_flush_to_zero(self.prev)
        return False
