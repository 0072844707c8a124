"""Hot inner-loop kernels with a compiled backend and a numpy fallback.

The Cython extension ``_ckernels`` is used when it was built at install
time. Setting ``EMDIFF_PURE_PYTHON=1`` forces the numpy implementations,
which is also what happens silently when the extension is missing.

Both backends expose the same five functions:

silu_forward, silu_backward
    Fused SiLU activation and its vector-Jacobian product.
adamw_update
    In-place AdamW step on one parameter buffer.
ema_update
    In-place exponential moving average of one buffer.
circular_conv2d
    Periodic 2-D convolution used by the blur operator.
"""

import os

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("EMDIFF_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # noqa: F811
        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels

silu_forward = _impl.silu_forward
silu_backward = _impl.silu_backward
adamw_update = _impl.adamw_update
ema_update = _impl.ema_update
circular_conv2d = _impl.circular_conv2d

python_backend = _pykernels


def compiled_backend():
    """Return the compiled module, or None when it is not built."""
    try:
        from . import _ckernels
    except ImportError:
        return None
    return _ckernels
