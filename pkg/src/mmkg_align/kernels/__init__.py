"""Segment/scatter kernels with a compiled core and a numpy fallback.

The compiled extension (_ckernels, built from Cython) is preferred when
importable. Set MMKG_ALIGN_KERNELS=numpy to force the fallback or
MMKG_ALIGN_KERNELS=cython to require the extension. Both backends
accumulate scatters and segment sums in input order, so those outputs
are bit-identical; only the weight-gradient row dot in
segment_weighted_sum_backward may differ by float association.
"""

import os

_choice = os.environ.get("MMKG_ALIGN_KERNELS", "auto")
if _choice not in ("auto", "cython", "numpy"):
    raise ImportError(f"MMKG_ALIGN_KERNELS must be auto, cython or numpy, got {_choice!r}")

if _choice == "numpy":
    from mmkg_align.kernels import _npkernels as _impl
else:
    try:
        from mmkg_align.kernels import _ckernels as _impl
    except ImportError:
        if _choice == "cython":
            raise
        from mmkg_align.kernels import _npkernels as _impl

BACKEND = _impl.BACKEND

scatter_add_rows = _impl.scatter_add_rows
scatter_add_vec = _impl.scatter_add_vec
segment_sum = _impl.segment_sum
segment_max = _impl.segment_max
segment_weighted_sum = _impl.segment_weighted_sum
segment_weighted_sum_backward = _impl.segment_weighted_sum_backward
