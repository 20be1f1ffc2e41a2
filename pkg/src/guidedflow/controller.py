"""Prescribed-time CBF/CLF guidance: per-node QP assembly and solve.

At flow time ``t`` with drift ``v`` the controller looks for the smallest
correction ``u`` such that every barrier row satisfies
``grad_h . (v + u) >= -phi h`` and the consistency function satisfies
``grad_V . (v + u) <= -phi V``.  All rows are stored in ``>=`` form, so the
CLF row carries ``-grad_V`` as its gradient.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from .barriers import STATE, ConstraintSpec, RowSet, row_set
from .lyapunov import value_and_gradient
from .qp import QpInstance, QpSolution, solve_qp

log = logging.getLogger(__name__)

CLF_LABEL = -1


def phi(t: float, c: float = 0.5) -> float:
    """Prescribed-time gain ``c / (1 - t)^2``."""
    if c <= 0:
        raise ValueError("c must be positive")
    if t >= 1.0:
        raise ValueError("phi is singular at t >= 1")
    return c / (1.0 - t) ** 2


@dataclass(frozen=True)
class GuidanceConfig:
    c: float = 0.5
    T0: float = 0.6
    ode_steps: int = 100
    slack_penalty: float = 1e6
    robust: bool = False
    control_norm_bound: float | None = None  # u-bar: first-pass |u| surrogate and cap in the robust margin
    kkt_tol: float = 1e-8
    feas_tol: float = 1e-10
    max_iter: int = 5000
    # how phi becomes the rate of one Euler step: "exp" saturates phi*dt smoothly
    # at rate_cap, "clip" caps it hard, "none" uses phi as is
    discrete_rate: str = "exp"
    rate_cap: float = 0.7
    c_barrier: float | None = None
    c_clf: float | None = None
    use_clf: bool = True
    warm_start: bool = True

    def __post_init__(self):
        if not 0.0 < self.T0 <= 1.0:
            raise ValueError(f"T0 must lie in (0, 1], got {self.T0}")
        if self.c <= 0 or self.slack_penalty <= 0:
            raise ValueError("c and slack_penalty must be positive")
        if int(self.ode_steps) != self.ode_steps or self.ode_steps < 2:
            raise ValueError("ode_steps must be an integer >= 2")
        if self.discrete_rate not in ("exp", "clip", "none"):
            raise ValueError(f"unknown discrete_rate {self.discrete_rate!r}")
        if self.robust and not (self.control_norm_bound and self.control_norm_bound > 0):
            # without a cap the |u| surrogate and the margin can feed each other without bound
            raise ValueError("robust mode needs a positive control_norm_bound")

    @property
    def dt(self) -> float:
        return 1.0 / self.ode_steps

    def rate(self, t: float, c: float | None = None) -> float:
        raw = phi(t, self.c if c is None else c)
        if self.discrete_rate == "none":
            return raw
        if self.discrete_rate == "clip":
            return min(raw, self.rate_cap / self.dt)
        k = self.rate_cap
        return -k * math.expm1(-raw * self.dt / k) / self.dt

    def barrier_rate(self, t):
        return self.rate(t, self.c_barrier)

    def clf_rate(self, t):
        return self.rate(t, self.c_clf)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GuidanceConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)

    def with_overrides(self, **kw) -> "GuidanceConfig":
        return replace(self, **{k: v for k, v in kw.items() if v is not None})


def robust_margin(rows: RowSet, lipschitz, phi_b: float, u_norm: float) -> np.ndarray:
    """Right-hand-side tightening ``(phi L_h + |u| L_grad_h) xi_k`` for state rows."""
    margin = np.zeros(len(rows))
    if lipschitz is None:
        return margin
    state = rows.kind == STATE
    xi = np.array([lipschitz.xi_at(int(k)) for k in rows.step[state]])
    margin[state] = (phi_b * rows.lip_h[state] + u_norm * rows.lip_gradh[state]) * xi
    return margin


def assemble_qp(v, rows: RowSet, clf, phi_b: float, phi_v: float, free=None,
                margin: np.ndarray | None = None) -> QpInstance:
    """Build the QP rows for drift ``v``.

    ``clf`` is ``(V, grad_V)`` or ``None``.  Gradients are restricted to
    ``free`` entries (the conditioned block cannot move).  Rows whose
    gradient vanishes are dropped and counted in ``QpInstance.dropped``.
    """
    v = np.asarray(v, dtype=float)
    G = rows.grads if free is None else rows.grads * free
    r = -phi_b * rows.values - G @ v
    if margin is not None:
        r = r + margin
    labels = np.arange(len(rows))
    clf_row = None
    if clf is not None:
        V, gV = clf
        gV = gV if free is None else gV * free
        if V > 0 or np.any(gV):
            G = np.vstack([G, -gV])
            r = np.append(r, phi_v * V + gV @ v)
            labels = np.append(labels, CLF_LABEL)
            clf_row = len(r) - 1
    keep = np.any(G != 0, axis=1)
    dropped = int(np.sum(~keep))
    if dropped:
        log.debug("dropping %d zero-gradient rows", dropped)
        if clf_row is not None:
            clf_row = int(np.sum(keep[:clf_row])) if keep[clf_row] else None
        G, r, labels = G[keep], r[keep], labels[keep]
    return QpInstance(G, r, labels, clf_row, dropped)


@dataclass
class ControlStep:
    u: np.ndarray
    solution: QpSolution
    qp: QpInstance
    rows: RowSet
    V: float


class GuidanceController:
    """Per-trajectory controller; keeps warm-start and robust-surrogate state between nodes."""

    def __init__(self, dynamics, spec: ConstraintSpec, cfg: GuidanceConfig, layout, free=None):
        self.dynamics = dynamics
        self.spec = spec
        self.cfg = cfg
        self.layout = layout
        self.free = np.ones(layout.size, dtype=bool) if free is None else np.asarray(free, dtype=bool)
        self._warm = None
        self._u_norm = cfg.control_norm_bound or 0.0

    def _surrogate(self, u) -> float:
        # |u| stand-in for the robust margin, capped by control_norm_bound when set
        nrm = float(np.linalg.norm(u))
        bound = self.cfg.control_norm_bound
        return nrm if bound is None else min(nrm, bound)

    def _instance(self, values, v, t, rows, clf, u_norm):
        phi_b = self.cfg.barrier_rate(t)
        phi_v = self.cfg.clf_rate(t)
        margin = None
        if self.cfg.robust and self.spec.robust:
            margin = robust_margin(rows, self.spec.lipschitz, phi_b, u_norm)
        return assemble_qp(v, rows, clf, phi_b, phi_v, self.free, margin)

    def _solve(self, qp):
        warm = self._warm if self.cfg.warm_start else None
        return solve_qp(qp, tol=self.cfg.feas_tol, max_iter=self.cfg.max_iter,
                        slack_penalty=self.cfg.slack_penalty, warm=warm)

    def step(self, values, v, t) -> ControlStep:
        rows = row_set(values, self.layout, self.spec)
        clf = value_and_gradient(values, self.dynamics, self.layout) if self.cfg.use_clf else None
        qp = self._instance(values, v, t, rows, clf, self._u_norm)
        sol = self._solve(qp)
        if self.cfg.robust and self.spec.robust:
            # second pass with the norm of the first-pass control
            qp = self._instance(values, v, t, rows, clf, self._surrogate(sol.u))
            sol = self._solve(qp)
        u = np.where(self.free, sol.u, 0.0)
        self._warm = sol.active
        self._u_norm = self._surrogate(u)
        return ControlStep(u, sol, qp, rows, clf[0] if clf is not None else 0.0)


def control(tau, t, dynamics, spec: ConstraintSpec, flow, cfg: GuidanceConfig):
    """Stateless single-node control: returns ``(u, QpSolution)``."""
    from .flow import velocity

    values = getattr(tau, "values", tau)
    layout = getattr(tau, "layout", None) or flow.layout
    v = velocity(flow, values, t)
    ctl = GuidanceController(dynamics, spec, cfg, layout, flow.free)
    step = ctl.step(values, v, t)
    return step.u, step.solution
