import numpy as np


def fd_grad(f, x, h=1e-5):
    """Central finite differences of a scalar function at x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.ravel()
    gf = g.ravel()
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def max_rel_err(analytic, numeric, floor=1e-3):
    """Worst per-coordinate relative error; `floor` keeps near-zero entries
    from turning finite-difference noise into spurious failures."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = np.maximum(floor, np.abs(a) + np.abs(n))
    return float(np.max(np.abs(a - n) / denom))
