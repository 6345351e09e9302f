import numpy as np
import pytest

import panosynth.autodiff as ad


def finite_diff_check(build_loss, params, h=1e-5, rel_tol=1e-4, max_coords=24, seed=0):
    """Central-difference gradient check at 64-bit.

    `build_loss` re-runs the forward pass and returns a scalar Tensor; every
    param must be float64.  A random subset of coordinates per parameter is
    probed to keep large checks affordable.  Returns the worst relative error.
    """
    for p in params:
        assert p.data.dtype == np.float64, "finite differences need float64 params"
    loss = build_loss()
    grads = ad.gradients(loss, params)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, g in zip(params, grads):
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        count = min(max_coords, flat.size)
        coords = rng.choice(flat.size, size=count, replace=False)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            lp = build_loss().item()
            flat[c] = orig - h
            lm = build_loss().item()
            flat[c] = orig
            num = (lp - lm) / (2.0 * h)
            denom = max(abs(num), abs(gflat[c]), 1e-6)
            worst = max(worst, abs(num - gflat[c]) / denom)
    assert worst < rel_tol, f"finite-difference mismatch: rel err {worst:.3e}"
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
