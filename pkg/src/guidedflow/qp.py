"""Dense minimum-norm QP: ``min |u|^2`` subject to ``G u >= r``.

Solved with a dual active-set method (Goldfarb-Idnani) specialised to an
identity Hessian: start from the unconstrained minimiser ``u = 0``, add the
most violated row, and move primal and dual variables along the projected row
direction, dropping rows whose multipliers would turn negative.  The working
set always stays linearly independent, so dependent or duplicated rows are
handled without special cases.

Multipliers are reported for the objective ``|u|^2`` (not ``1/2 |u|^2``), so
stationarity reads ``2u = sum_i lambda_i g_i``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

OPTIMAL = "optimal"
RECOVERED = "recovered-with-slack"
BARRIER_SLACK = "barrier-slack"
FAILED = "failed"
INFEASIBLE = "infeasible"


@dataclass
class QpInstance:
    """Rows ``G[i] @ u >= r[i]``; ``clf_row`` marks the row allowed to take slack."""

    G: np.ndarray
    r: np.ndarray
    labels: np.ndarray = None  # stable row ids used for warm starts
    clf_row: int | None = None
    dropped: int = 0  # zero-gradient rows removed during assembly

    def __post_init__(self):
        self.G = np.atleast_2d(np.asarray(self.G, dtype=float))
        self.r = np.asarray(self.r, dtype=float).reshape(-1)
        if self.G.shape[0] != self.r.size:
            if self.r.size == 0:
                self.G = self.G.reshape(0, self.G.shape[-1] if self.G.size else 0)
            else:
                raise ValueError("G and r disagree on the number of rows")
        if self.labels is None:
            self.labels = np.arange(self.r.size)
        if not (np.all(np.isfinite(self.G)) and np.all(np.isfinite(self.r))):
            raise ValueError("QP instance has non-finite entries")

    @property
    def n_rows(self) -> int:
        return self.r.size

    @property
    def dim(self) -> int:
        return self.G.shape[1]


@dataclass
class QpSolution:
    u: np.ndarray
    duals: np.ndarray
    active: np.ndarray
    status: str
    iterations: int = 0
    slack: float = 0.0
    kkt: dict = field(default_factory=dict)

    @property
    def active_labels(self) -> np.ndarray:
        return self.active


def kkt_residuals(G, r, u, lam) -> dict:
    """Stationarity, primal/dual feasibility and complementarity for ``min |u|^2``."""
    G = np.atleast_2d(G)
    if r.size == 0:
        return {"stationarity": float(np.linalg.norm(2 * u)), "primal": 0.0, "dual": 0.0,
                "complementarity": 0.0}
    gap = G @ u - r
    return {
        "stationarity": float(np.linalg.norm(2.0 * u - G.T @ lam)),
        "primal": float(max(0.0, -gap.min())),
        "dual": float(max(0.0, -lam.min())),
        "complementarity": float(np.max(np.abs(lam * gap))),
    }


def max_kkt(kkt: dict) -> float:
    return max(kkt.values()) if kkt else 0.0


class _Infeasible(Exception):
    pass


class _IterationLimit(Exception):
    pass


def _independent_subset(N, rows, tol=1e-9):
    """Greedy subset of ``rows`` whose (unit) vectors are linearly independent."""
    keep = []
    basis = np.zeros((N.shape[1], 0))
    for i in rows:
        g = N[i]
        resid = g - basis @ (basis.T @ g)
        nr = np.linalg.norm(resid)
        if nr > tol:
            keep.append(i)
            basis = np.column_stack([basis, resid / nr])
    return keep


def _equality_solve(N, b, A):
    """Min-norm point on the face ``N_A u = b_A``: returns ``(u, mu)`` with ``u = N_A^T mu``."""
    if not A:
        return np.zeros(N.shape[1]), np.zeros(0)
    NA = N[A]
    mu = np.linalg.solve(NA @ NA.T, b[A])
    return NA.T @ mu, mu


def _warm_set(N, b, labels, warm):
    pos = {lab: i for i, lab in enumerate(labels)}
    A = _independent_subset(N, [pos[w] for w in warm if w in pos])
    while A:
        u, mu = _equality_solve(N, b, A)
        worst = int(np.argmin(mu))
        if mu[worst] >= 0:
            return u, A, list(mu)
        A.pop(worst)
    return np.zeros(N.shape[1]), [], []


def _dual_active_set(N, b, tol, max_iter, warm=None, labels=None):
    """Goldfarb-Idnani on ``min 1/2|u|^2, N u >= b`` with unit-norm rows ``N``.

    Returns ``(u, A, mu, iterations)``; multipliers belong to the 1/2-scaled objective.
    """
    R, d = N.shape
    if warm is not None and len(warm):
        u, A, mu = _warm_set(N, b, labels, warm)
    else:
        u, A, mu = np.zeros(d), [], []
    it = 0
    in_active = np.zeros(R, dtype=bool)
    in_active[A] = True
    while True:
        slack = N @ u - b
        slack[in_active] = np.inf
        p = int(np.argmin(slack)) if R else 0
        if R == 0 or slack[p] >= -tol:
            return u, A, np.asarray(mu, dtype=float), it
        mu_p = 0.0
        n_p = N[p]
        while True:
            it += 1
            if it > max_iter:
                raise _IterationLimit
            if A:
                Q, Rm = np.linalg.qr(N[A].T)
                w = Q.T @ n_p
                z = n_p - Q @ w
                rdir = np.linalg.solve(Rm, w)
            else:
                z, rdir = n_p, np.zeros(0)
            t1, drop = np.inf, -1
            for j, rj in enumerate(rdir):
                if rj > 1e-12:
                    ratio = mu[j] / rj
                    if ratio < t1:
                        t1, drop = ratio, j
            zz = float(z @ n_p)
            t2 = -(float(n_p @ u) - b[p]) / zz if zz > 1e-20 else np.inf
            step = min(t1, t2)
            if not np.isfinite(step):
                raise _Infeasible
            if np.isfinite(t2):
                u = u + step * z
            mu = [m - step * rj for m, rj in zip(mu, rdir)]
            mu_p += step
            if t2 <= t1:
                A.append(p)
                mu.append(mu_p)
                in_active[p] = True
                break
            in_active[A[drop]] = False
            A.pop(drop)
            mu.pop(drop)


def _solve_normalized(G, r, tol, max_iter, warm, labels):
    norms = np.linalg.norm(G, axis=1)
    if np.any(norms == 0):
        raise ValueError("rows with zero gradient must be removed before solving")
    N = G / norms[:, None]
    b = r / norms
    u, A, mu, it = _dual_active_set(N, b, tol, max_iter, warm, labels)
    # polish: recompute the point on the final face directly
    if A:
        u, mu = _equality_solve(N, b, A)
        mu = np.maximum(mu, 0.0)
    lam = np.zeros(G.shape[0])
    lam[A] = 2.0 * mu / norms[A]
    return u, lam, np.asarray(A, dtype=int), it


def solve_qp(qp: QpInstance, tol: float = 1e-10, max_iter: int = 5000, slack_penalty: float = 1e6,
             warm=None) -> QpSolution:
    """Solve ``min |u|^2, G u >= r``; on infeasibility retry with slack on the CLF row.

    ``warm`` is an iterable of row labels active at a nearby instance.  If the
    barrier rows alone are infeasible, a last-resort solve puts slack on every
    row and reports status ``barrier-slack``.
    """
    G, r, d = qp.G, qp.r, qp.dim
    try:
        u, lam, A, it = _solve_normalized(G, r, tol, max_iter, warm, qp.labels)
        sol = QpSolution(u, lam, qp.labels[A], OPTIMAL, it)
        sol.kkt = kkt_residuals(G, r, u, lam)
        return sol
    except _IterationLimit:
        return QpSolution(np.zeros(d), np.zeros(qp.n_rows), np.zeros(0, int), FAILED, max_iter)
    except _Infeasible:
        pass
    scale = 1.0 / np.sqrt(slack_penalty)
    if qp.clf_row is not None:
        Gs = np.hstack([G, np.zeros((qp.n_rows, 1))])
        Gs[qp.clf_row, -1] = scale
        try:
            x, lam, A, it = _solve_normalized(Gs, r, tol, max_iter, None, qp.labels)
            sol = QpSolution(x[:d], lam, qp.labels[A], RECOVERED, it, slack=float(x[-1] * scale))
            sol.kkt = kkt_residuals(Gs, r, x, lam)
            return sol
        except _IterationLimit:
            return QpSolution(np.zeros(d), np.zeros(qp.n_rows), np.zeros(0, int), FAILED, max_iter)
        except _Infeasible:
            pass
    log.warning("barrier rows jointly infeasible (%d rows); relaxing every row", qp.n_rows)
    Gs = np.hstack([G, scale * np.eye(qp.n_rows)])
    try:
        x, lam, A, it = _solve_normalized(Gs, r, tol, max_iter, None, qp.labels)
    except (_IterationLimit, _Infeasible):
        return QpSolution(np.zeros(d), np.zeros(qp.n_rows), np.zeros(0, int), FAILED, max_iter)
    sol = QpSolution(x[:d], lam, qp.labels[A], BARRIER_SLACK, it,
                     slack=float(np.max(np.abs(x[d:])) * scale))
    sol.kkt = kkt_residuals(Gs, r, x, lam)
    return sol


def brute_force_qp(G, r, tol=1e-9):
    """Reference solver: enumerate every active set (exponential; for small tests only).

    Returns the feasible KKT point of least norm, or ``None`` if no subset works.
    """
    from itertools import combinations

    G = np.atleast_2d(np.asarray(G, dtype=float))
    r = np.asarray(r, dtype=float)
    R, d = G.shape
    best = None
    for size in range(0, min(R, d) + 1):
        for A in combinations(range(R), size):
            A = list(A)
            if A:
                GA = G[A]
                M = GA @ GA.T
                if np.linalg.matrix_rank(M) < len(A):
                    continue
                mu = np.linalg.solve(M, r[A])
                if np.any(mu < -tol):
                    continue
                u = GA.T @ mu
            else:
                u = np.zeros(d)
            if np.all(G @ u - r >= -tol):
                if best is None or u @ u < best @ best - 1e-14:
                    best = u
    return best
