"""Pure numpy fallback for the compiled segment/scatter kernels.

All accumulations run in index order (np.add.at and np.bincount both walk
the input sequentially), so results are bit-identical to the C loops.
"""

import numpy as np

BACKEND = "numpy"


def scatter_add_rows(out, idx, rows):
    np.add.at(out, idx, rows)
    return out


def scatter_add_vec(out, idx, vals):
    np.add.at(out, idx, vals)
    return out


def segment_sum(x, seg, out_rows):
    return np.bincount(seg, weights=x, minlength=out_rows).astype(x.dtype, copy=False)


def segment_max(x, seg, out_rows):
    out = np.full(out_rows, -np.inf, dtype=x.dtype)
    np.maximum.at(out, seg, x)
    return out


def segment_weighted_sum(values, weights, seg, out_rows):
    out = np.zeros((out_rows, values.shape[1]), dtype=values.dtype)
    np.add.at(out, seg, weights[:, None] * values)
    return out


def segment_weighted_sum_backward(gout, values, weights, seg):
    picked = gout[seg]
    gvalues = picked * weights[:, None]
    gweights = np.einsum("ij,ij->i", picked, values)
    return gvalues, gweights
