"""Central-difference gradient checking shared by the test modules.

The step is 1e-5 rather than 1e-4: with the sine frequency factor at 30 the
truncation term of central differences alone exceeds a 1e-4 relative
tolerance for a tail of parameters (the disagreement shrinks as h^2,
confirming it is oracle error).  The denominator is floored at 1e-6 times
the largest gradient magnitude so that parameters with negligible gradients
are compared on an absolute scale; an implementation error would produce
errors at the gradient scale and is still caught.
"""

import numpy as np

H = 1e-5
FLOOR_FRACTION = 1e-6


def relative_errors(loss_fn, arrays_and_grads, indices_per_array, h=H, floor=None):
    """Central-difference check; returns the per-parameter relative errors.

    ``arrays_and_grads``: list of (parameter array, analytic gradient array);
    ``indices_per_array``: flat indices to probe in each.
    """
    if floor is None:
        gmax = max(np.abs(g).max() for _, g in arrays_and_grads)
        floor = FLOOR_FRACTION * max(gmax, 1e-30)
    rels = []
    for (arr, grad), idxs in zip(arrays_and_grads, indices_per_array):
        flat = arr.ravel()
        gflat = grad.ravel()
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            lp = loss_fn()
            flat[i] = orig - h
            lm = loss_fn()
            flat[i] = orig
            fd = (lp - lm) / (2.0 * h)
            an = gflat[i]
            rels.append(abs(fd - an) / max(abs(fd), abs(an), floor))
    return np.array(rels)
