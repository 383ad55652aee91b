"""Pure-numpy Sinkhorn kernel; same contract as the compiled ``_kernels``."""

from __future__ import annotations

import numpy as np

ABSORB_LOG = 30.0
TINY = np.finfo(np.float64).tiny


def _kernel(f: np.ndarray, g: np.ndarray, C: np.ndarray, inv: float) -> tuple[np.ndarray, float]:
    """``K`` and the largest exponent seen."""
    a = (f[:, None] + g[None, :] - C) * inv
    top = float(a.max())
    K = np.exp(a, out=a)
    # subnormals make every later matvec several times slower
    K[K < TINY] = 0.0
    return K, top


def _lse_rows(a: np.ndarray) -> np.ndarray:
    m = a.max(axis=1)
    return m + np.log(np.exp(a - m[:, None]).sum(axis=1))


def _half_steps(f, g, C, log_mu, log_nu, eps):
    """Exact log-domain row then column updates, so every row and column has mass."""
    inv = 1.0 / eps
    f = eps * (log_mu - _lse_rows((g[None, :] - C) * inv))
    g = eps * (log_nu - _lse_rows(((f[:, None] - C) * inv).T))
    return f, g


def sinkhorn_scaling(C, log_mu, log_nu, eps, tol, max_iter, f0, g0, trace=False):
    """Log-stabilised Sinkhorn with absorption of the scaling vectors.

    Returns ``(gamma, f, g, iterations, err, costs)``; ``err`` is the largest
    row-marginal violation of ``gamma`` (columns are exact after each sweep),
    and ``costs`` holds ``<gamma_k, C>`` per iteration when ``trace`` is set.
    """
    C = np.ascontiguousarray(C, dtype=np.float64)
    mu = np.exp(log_mu)
    nu = np.exp(log_nu)
    f = np.array(f0, dtype=np.float64)
    g = np.array(g0, dtype=np.float64)
    inv = 1.0 / eps
    K, top = _kernel(f, g, C, inv)
    # a warm start is used as is unless its kernel would overflow
    cols_exact = top > ABSORB_LOG
    if cols_exact:
        f, g = _half_steps(f, g, C, log_mu, log_nu, eps)
        K, _ = _kernel(f, g, C, inv)
    u = np.ones_like(f)
    v = np.ones_like(g)
    costs = []
    it = 0
    err = np.inf
    while True:
        Kv = K @ v
        err = float(np.max(np.abs(u * Kv - mu)))
        # the row error only measures convergence once the columns are exact
        if (err < tol and cols_exact) or it >= max_iter:
            break
        cols_exact = True
        degenerate = bool(np.any(Kv <= 0.0))
        if not degenerate:
            u = mu / Kv
            KTu = K.T @ u
            degenerate = bool(np.any(KTu <= 0.0))
        if degenerate:
            f, g = _half_steps(f + eps * np.log(u), g + eps * np.log(v), C, log_mu, log_nu, eps)
            K, _ = _kernel(f, g, C, inv)
            u = np.ones_like(f)
            v = np.ones_like(g)
            it += 1
            continue
        v = nu / KTu
        it += 1
        if trace:
            costs.append(float(u @ ((K * C) @ v)))
        lu = np.log(u)
        lv = np.log(v)
        if max(np.abs(lu).max(), np.abs(lv).max()) > ABSORB_LOG:
            f = f + eps * lu
            g = g + eps * lv
            K, _ = _kernel(f, g, C, inv)
            u[:] = 1.0
            v[:] = 1.0
    gamma = u[:, None] * K * v[None, :]
    f = f + eps * np.log(u)
    g = g + eps * np.log(v)
    return gamma, f, g, it, err, np.array(costs)
