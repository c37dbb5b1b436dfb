"""Kernel backend selection.

Tries the compiled extension first and falls back to the pure-numpy lane when
the extension is missing (source checkout without a compiler, unsupported
platform). Set DIVE_KERNELS=py to force the fallback; DIVE_KERNELS=cython
demands the extension and raises if it is absent.

Both lanes expose the same functions with the same array contracts: float32
C-contiguous inputs, forward kernels return fresh arrays, backward kernels
accumulate in place into caller-owned gradient buffers.
"""

import os

from .errors import CompatibilityError

_choice = os.environ.get("DIVE_KERNELS", "").strip().lower()

if _choice in ("py", "numpy", "python"):
    from . import _kernels_py as _impl
elif _choice in ("cython", "ext", "c"):
    try:
        from . import _kernels as _impl
    except ImportError as exc:
        raise CompatibilityError(
            "DIVE_KERNELS=%s requested the compiled backend but the extension "
            "is not importable: %s" % (_choice, exc)
        ) from exc
elif _choice == "":
    try:
        from . import _kernels as _impl
    except ImportError:
        from . import _kernels_py as _impl
else:
    raise CompatibilityError(
        "unrecognized DIVE_KERNELS value %r (expected 'py' or 'cython')" % _choice
    )

BACKEND = _impl.BACKEND

swish_fwd = _impl.swish_fwd
swish_bwd = _impl.swish_bwd
rmsnorm_fwd = _impl.rmsnorm_fwd
rmsnorm_bwd = _impl.rmsnorm_bwd
softmax_temp_fwd = _impl.softmax_temp_fwd
softmax_temp_bwd = _impl.softmax_temp_bwd
causal_softmax_fwd = _impl.causal_softmax_fwd
causal_softmax_bwd = _impl.causal_softmax_bwd
masked_softmax_fwd = _impl.masked_softmax_fwd
masked_softmax_bwd = _impl.masked_softmax_bwd
cross_entropy_fwd = _impl.cross_entropy_fwd
cross_entropy_bwd = _impl.cross_entropy_bwd
rope_fwd = _impl.rope_fwd
rope_bwd = _impl.rope_bwd
adamw_update = _impl.adamw_update
