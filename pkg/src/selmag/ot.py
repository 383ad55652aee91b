"""Entropic optimal transport with selectively reweighted costs.

The solver is log-stabilised Sinkhorn (see :mod:`selmag.kernels`). Gradients
of the alignment loss flow through the cost entries only, with the plan held
fixed at the solution. :func:`entropic_plan` also differentiates the plan
itself, which second-order (meta) gradients need.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog
from scipy.special import logsumexp

from . import kernels
from . import tensor as tn
from .tensor import Tensor


@dataclass
class TransportProblem:
    cost: np.ndarray
    mu: np.ndarray
    nu: np.ndarray
    epsilon: float

    def __post_init__(self):
        self.cost = np.asarray(self.cost, dtype=np.float64)
        m, n = self.cost.shape
        self.mu = np.full(m, 1.0 / m) if self.mu is None else np.asarray(self.mu, dtype=np.float64)
        self.nu = np.full(n, 1.0 / n) if self.nu is None else np.asarray(self.nu, dtype=np.float64)
        if self.mu.shape != (m,) or self.nu.shape != (n,):
            raise ValueError("marginal lengths do not match the cost matrix")
        if (self.cost < 0).any():
            raise ValueError("cost entries must be nonnegative")
        for name, p in (("mu", self.mu), ("nu", self.nu)):
            if (p <= 0).any() or abs(p.sum() - 1.0) > 1e-9:
                raise ValueError(f"{name} must be a strictly positive probability vector")
        if self.epsilon < 0:
            raise ValueError("epsilon must be nonnegative")

    @classmethod
    def uniform(cls, cost, epsilon: float) -> "TransportProblem":
        return cls(cost, None, None, epsilon)


@dataclass
class TransportPlan:
    gamma: np.ndarray
    epsilon: float
    iterations: int
    converged: bool
    transport_cost: float
    marginal_error: float
    f: np.ndarray
    g: np.ndarray
    trace: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def cost_value(self) -> float:
        """Transport cost plus ``eps`` times the negative entropy of the plan."""
        return self.transport_cost + self.epsilon * negentropy(self.gamma)

    def kl_value(self, problem: TransportProblem) -> float:
        """Transport cost plus ``eps * KL(gamma || mu x nu)``; equals the dual optimum."""
        g = self.gamma
        ref = np.outer(problem.mu, problem.nu)
        pos = g > 0
        kl = float(np.sum(g[pos] * np.log(g[pos] / ref[pos])))
        return self.transport_cost + problem.epsilon * kl


def cost_matrix(xs, xt) -> np.ndarray:
    """Squared Euclidean distances between rows of ``xs`` and rows of ``xt``."""
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    xt = np.atleast_2d(np.asarray(xt, dtype=np.float64))
    if xs.shape[1] != xt.shape[1]:
        raise ValueError(f"embedding dims differ: {xs.shape[1]} vs {xt.shape[1]}")
    c = (xs * xs).sum(1)[:, None] + (xt * xt).sum(1)[None, :] - 2.0 * xs @ xt.T
    return np.maximum(c, 0.0)


def selective_cost(cost: np.ndarray, s_global: float, s_local) -> np.ndarray:
    """Scale row ``v`` of ``cost`` by ``s_global * s_local[v]``."""
    s_local = np.asarray(s_local, dtype=np.float64).reshape(-1)
    if s_local.shape[0] != cost.shape[0]:
        raise ValueError("s_local length must equal the number of cost rows")
    if s_global <= 0 or (s_local <= 0).any():
        raise ValueError("selection weights must be positive")
    return cost * (s_global * s_local)[:, None]


def negentropy(gamma: np.ndarray) -> float:
    pos = gamma > 0
    return float(np.sum(gamma[pos] * np.log(gamma[pos])))


def sinkhorn(problem: TransportProblem, tol: float = 1e-9, max_iter: int = 10000,
             init: tuple[np.ndarray, np.ndarray] | None = None, anneal: bool = True,
             anneal_factor: float = 0.5, trace: bool = False) -> TransportPlan:
    """Entropic OT plan; ``converged`` is False when ``max_iter`` is reached.

    Without ``init`` the regulariser is annealed geometrically from the cost
    range down to ``epsilon`` with warm-started potentials, each stage capped
    at ``max_iter`` iterations.
    """
    eps = problem.epsilon
    if eps <= 0:
        raise ValueError("sinkhorn needs epsilon > 0")
    C = problem.cost
    m, n = C.shape
    log_mu, log_nu = np.log(problem.mu), np.log(problem.nu)
    if init is None:
        f, g = np.zeros(m), np.zeros(n)
    else:
        f, g = (np.asarray(a, dtype=np.float64) for a in init)
    total = 0
    stage = max(eps, float(C.max() - C.min())) if (anneal and init is None) else eps
    while stage > eps:
        _, f, g, it, _, _ = kernels.sinkhorn_scaling(C, log_mu, log_nu, stage, max(tol, 1e-6),
                                                     max_iter, f, g)
        total += it
        stage = max(eps, stage * anneal_factor)
    gamma, f, g, it, err, costs = kernels.sinkhorn_scaling(C, log_mu, log_nu, eps, tol, max_iter,
                                                           f, g, trace)
    total += it
    transport = float(np.sum(gamma * C))
    col_err = float(np.max(np.abs(gamma.sum(axis=0) - problem.nu)))
    err = max(err, col_err)
    return TransportPlan(
        gamma=gamma, epsilon=eps, iterations=total,
        converged=bool(err < tol), transport_cost=transport, marginal_error=err,
        f=f, g=g, trace=costs,
    )


def exact_ot_oracle(cost, mu, nu, max_size: int = 6) -> float:
    """Unregularised OT value by linear programming (small instances only)."""
    C = np.asarray(cost, dtype=np.float64)
    m, n = C.shape
    if m > max_size or n > max_size:
        raise ValueError(f"exact oracle limited to {max_size}x{max_size}, got {m}x{n}")
    rows = np.kron(np.eye(m), np.ones((1, n)))
    cols = np.kron(np.ones((1, m)), np.eye(n))
    res = linprog(C.ravel(), A_eq=np.vstack([rows, cols]), b_eq=np.concatenate([mu, nu]),
                  bounds=(0, None), method="highs")
    if res.status != 0:
        raise RuntimeError(f"LP oracle failed: {res.message}")
    return float(res.fun)


def c_transform(beta, problem: TransportProblem) -> np.ndarray:
    """Soft (``eps > 0``) or hard (``eps == 0``) c-transform of a source potential."""
    beta = np.asarray(beta, dtype=np.float64)
    C = problem.cost
    if problem.epsilon == 0:
        return np.min(C - beta[:, None], axis=0)
    eps = problem.epsilon
    z = (beta[:, None] - C) / eps + np.log(problem.mu)[:, None]
    return -eps * logsumexp(z, axis=0)


def dual_objective(beta, problem: TransportProblem) -> float:
    beta = np.asarray(beta, dtype=np.float64)
    if beta.shape != (problem.cost.shape[0],):
        raise ValueError("beta must have one entry per source atom")
    return float(problem.mu @ beta + problem.nu @ c_transform(beta, problem))


def dual_gradient(beta, problem: TransportProblem) -> np.ndarray:
    eps = problem.epsilon
    z = (np.asarray(beta)[:, None] - problem.cost) / eps + np.log(problem.mu)[:, None]
    pi = np.exp(z - logsumexp(z, axis=0, keepdims=True))
    return problem.mu - pi @ problem.nu


def maximize_dual(problem: TransportProblem, steps: int = 200000, lr: float | None = None,
                  tol: float = 1e-12, beta0=None) -> tuple[np.ndarray, float]:
    """Gradient ascent on the semi-dual; returns the potential and its value.

    The default step is ``eps / (2 mu_i)`` per coordinate. Coordinate ``i`` of the
    gradient and of the curvature both scale with ``mu_i``, so a single scalar step
    crawls along atoms with little mass. A scalar ``lr`` gives plain ascent.
    """
    if problem.epsilon <= 0:
        raise ValueError("gradient ascent needs epsilon > 0")
    beta = np.zeros(problem.cost.shape[0]) if beta0 is None else np.array(beta0, dtype=np.float64)
    step = 0.5 * problem.epsilon / problem.mu if lr is None else lr
    for _ in range(steps):
        grad = dual_gradient(beta, problem)
        if np.max(np.abs(grad)) < tol:
            break
        beta += step * grad
    return beta, dual_objective(beta, problem)


# ---------------------------------------------------------------------------
# differentiable alignment loss
# ---------------------------------------------------------------------------

class WarmStart:
    """Carries Sinkhorn potentials between successive solves of similar problems."""

    def __init__(self):
        self.duals: tuple[np.ndarray, np.ndarray] | None = None
        self.plan: TransportPlan | None = None

    def init_for(self, shape: tuple[int, int]):
        if self.duals is None:
            return None
        f, g = self.duals
        if f.shape[0] != shape[0] or g.shape[0] != shape[1]:
            return None
        return self.duals

    def remember(self, plan: TransportPlan) -> None:
        self.plan = plan
        self.duals = (plan.f, plan.g)


def cost_scale(source_embeddings: list[np.ndarray], target_embeddings: np.ndarray) -> float:
    """Mean squared distance between stacked sources and target: the unit costs are measured in."""
    c = cost_matrix(np.vstack(source_embeddings), target_embeddings)
    return float(c.mean()) if c.mean() > 0 else 1.0


def membership(sizes: list[int]) -> np.ndarray:
    """``(sum(sizes), len(sizes))`` indicator of which source each stacked row came from."""
    out = np.zeros((int(np.sum(sizes)), len(sizes)))
    start = 0
    for k, s in enumerate(sizes):
        out[start:start + s, k] = 1.0
        start += s
    return out


def solve_selective_plan(xs: np.ndarray, xt: np.ndarray, weights: np.ndarray, epsilon: float,
                         tol: float = 1e-9, max_iter: int = 10000,
                         warm: WarmStart | None = None) -> TransportPlan:
    c = cost_matrix(xs, xt) * np.asarray(weights, dtype=np.float64).reshape(-1, 1)
    problem = TransportProblem.uniform(c, epsilon)
    init = warm.init_for(c.shape) if warm is not None else None
    plan = sinkhorn(problem, tol=tol, max_iter=max_iter, init=init)
    if warm is not None:
        warm.remember(plan)
    return plan


def plan_cost_adjoint(gamma: np.ndarray, g_bar: np.ndarray, epsilon: float) -> np.ndarray:
    """Pull an adjoint on the entropic plan back to its cost matrix.

    Differentiates ``gamma = exp((f + g - C) / eps)`` with both marginals held
    fixed. The dual perturbation solves a Laplacian-like system on the smaller
    side; its one singular direction (a constant shifted between ``f`` and
    ``g``) leaves the plan unchanged and is pinned by a rank-one term.
    """
    gb = g_bar * gamma
    flip = gamma.shape[0] > gamma.shape[1]
    gam = gamma.T if flip else gamma
    r, c = (gb.sum(0), gb.sum(1)) if flip else (gb.sum(1), gb.sum(0))
    a, b = gam.sum(1), gam.sum(0)
    scaled = gam / b[None, :]
    S = np.diag(a) - scaled @ gam.T
    S += a.mean() * np.ones_like(S) / len(a)
    rhs = r - scaled @ c
    try:
        u = np.linalg.solve(S, rhs)
    except np.linalg.LinAlgError:
        u = np.linalg.lstsq(S, rhs, rcond=None)[0]
    v = (c - gam.T @ u) / b
    if flip:
        u, v = v, u
    return gamma * (u[:, None] + v[None, :] - g_bar) / epsilon


def entropic_plan(cost, epsilon: float, tol: float = 1e-9, max_iter: int = 10000,
                  warm: WarmStart | None = None) -> tuple[Tensor, TransportPlan]:
    """Plan for uniform marginals as a tape node that is differentiable in ``cost``."""
    cost = tn.const(cost)
    problem = TransportProblem.uniform(np.maximum(cost.value, 0.0), epsilon)
    init = warm.init_for(problem.cost.shape) if warm is not None else None
    plan = sinkhorn(problem, tol=tol, max_iter=max_iter, init=init)
    if warm is not None:
        warm.remember(plan)
    gamma = plan.gamma
    out = tn.custom_op("entropic_plan", gamma, (cost,),
                       lambda g: (plan_cost_adjoint(gamma, g, epsilon),))
    return out, plan


def sq_dist(xs, xt) -> Tensor:
    """Tape version of :func:`cost_matrix` (no clipping)."""
    xs, xt = tn.const(xs), tn.const(xt)
    cross = tn.scalar_mul(tn.matmul(xs, tn.transpose(xt)), -2.0)
    return tn.add(tn.add(cross, tn.row_sq_norms(xs)), tn.transpose(tn.row_sq_norms(xt)))


def stacked_weights(s_global, s_local, sizes: list[int]) -> Tensor:
    """Per-row weight ``s_global[source(v)] * s_local[v]`` as an ``(M, 1)`` tensor."""
    if not isinstance(s_global, Tensor):
        s_global = np.asarray(s_global, dtype=np.float64).reshape(-1, 1)
    per_row = tn.matmul(membership(sizes), s_global)
    if s_local is None:
        return per_row
    if not isinstance(s_local, Tensor):
        s_local = np.asarray(s_local, dtype=np.float64).reshape(-1, 1)
    return tn.mul(per_row, s_local)


def selot_loss(source_embeddings: list[np.ndarray], target_embeddings, s_global, s_local,
               epsilon: float, tol: float = 1e-9, max_iter: int = 10000,
               warm: WarmStart | None = None, scale: float = 1.0) -> Tensor:
    """``sum(gamma * C_sel) / scale`` over all stacked source atoms against the target.

    ``s_global`` holds one weight per source, ``s_local`` one per stacked source
    row (or None for unit weights). Either may be a tensor; ``gamma`` is a
    constant of the tape. ``scale`` is a fixed cost unit, so ``epsilon`` is
    relative to it.
    """
    if scale <= 0:
        raise ValueError("cost scale must be positive")
    if not source_embeddings or any(len(x) == 0 for x in source_embeddings):
        raise ValueError("selot_loss needs at least one non-empty source")
    sizes = [len(x) for x in source_embeddings]
    xs = np.vstack(source_embeddings)
    xt = tn.const(target_embeddings)
    w = tn.scalar_mul(stacked_weights(s_global, s_local, sizes), 1.0 / scale)
    plan = solve_selective_plan(xs, xt.value, w.value, epsilon, tol, max_iter, warm)
    c_sel = tn.mul(sq_dist(xs, xt), w)
    return tn.sum(tn.mul(c_sel, plan.gamma))
