"""Central finite differences, independent of the analytic backward code."""

import numpy as np

# (step, tolerance) per dtype
TOLERANCES = {np.float32: (1e-3, 1e-2), np.float64: (1e-5, 1e-5)}


def numerical_grad(f, x: np.ndarray, h: float) -> np.ndarray:
    """d f / d x by central differences; ``f`` returns a scalar, ``x`` is perturbed in place."""
    grad = np.zeros(x.shape, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def relative_error(analytic, numeric) -> float:
    """Largest entrywise deviation, scaled by the largest gradient magnitude."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(numeric).max(), np.abs(analytic).max(), 1e-12)
    return float(np.abs(analytic - numeric).max() / scale)


def projection(out_shape, rng):
    """Random weights turning a tensor output into a scalar objective."""
    return rng.standard_normal(out_shape)


def away_from_zero(rng, shape, dtype, margin=0.05):
    """Normal draws with |x| >= margin, keeping ReLU kinks out of the difference stencil."""
    x = rng.standard_normal(shape)
    x = np.where(np.abs(x) < margin, np.sign(x + 1e-12) * (margin + np.abs(x)), x)
    return x.astype(dtype)
