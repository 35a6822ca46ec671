"""Central finite-difference gradient checking shared by the test modules."""

import numpy as np

STEP = 1e-5
TOL = 1e-4


def numeric_grad(fn, array, step=STEP):
    """Central-difference gradient of scalar fn with respect to one array,
    perturbing entries in place."""
    grad = np.zeros_like(array)
    flat = array.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = fn()
        flat[i] = orig - step
        fm = fn()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * step)
    return grad


def rel_err(analytic, numeric):
    na = np.linalg.norm(analytic)
    nn = np.linalg.norm(numeric)
    return np.linalg.norm(analytic - numeric) / (na + nn + 1e-12)


def assert_grad_close(analytic, numeric, tol=TOL, label=""):
    err = rel_err(analytic, numeric)
    assert err < tol, f"gradient mismatch{f' for {label}' if label else ''}: rel err {err:.3e}"
