"""Two-phase Euler sampling of the flow ODE, with and without guidance.

Nodes are ``t_j = j / N`` for ``j = 0..N``.  The step from node ``j`` uses the
drift (and, when active, the control) evaluated at ``t_j``, so the schedule is
never evaluated at ``t = 1``.  The conditioned block is re-pinned after every
step.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .barriers import ACTION, STATE, ConstraintSpec, row_set
from .controller import GuidanceConfig, GuidanceController
from .flow import VectorFieldModel, conditioned_prior, velocity
from .lyapunov import lyapunov_value, value_and_gradient
from .qp import FAILED, max_kkt
from .trajectory import FlatTrajectory


class SolverFailure(RuntimeError):
    def __init__(self, message, result):
        super().__init__(message)
        self.result = result


@dataclass
class TraceNode:
    t: float
    min_state: float
    min_action: float
    V: float
    u_norm: float = 0.0
    status: str = "uncontrolled"
    n_rows: int = 0
    iterations: int = 0
    kkt: float = 0.0
    slack: float = 0.0
    drift_time: float = 0.0
    qp_time: float = 0.0


@dataclass
class PlanResult:
    trajectory: FlatTrajectory
    trace: list
    sampler: str
    seed: int | None = None
    config: dict = field(default_factory=dict)

    @property
    def values(self) -> np.ndarray:
        return self.trajectory.values

    def to_dict(self) -> dict:
        return {
            "sampler": self.sampler,
            "seed": self.seed,
            "layout": self.trajectory.layout.to_dict(),
            "trajectory": self.trajectory.values.tolist(),
            "trace": [asdict(n) for n in self.trace],
            "config": self.config,
        }

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "PlanResult":
        from .trajectory import TrajectoryLayout

        d = json.loads(Path(path).read_text())
        tau = FlatTrajectory(TrajectoryLayout.from_dict(d["layout"]), np.asarray(d["trajectory"]))
        return cls(tau, [TraceNode(**n) for n in d["trace"]], d["sampler"], d.get("seed"), d.get("config", {}))


def _node_stats(values, layout, spec, dynamics):
    if spec is not None and (spec.state or spec.action):
        rs = row_set(values, layout, spec)
        ms, ma = rs.min_value(STATE), rs.min_value(ACTION)
    else:
        ms = ma = math.inf
    V = lyapunov_value(values, dynamics, layout) if dynamics is not None else float("nan")
    return ms, ma, V


def _prior(flow: VectorFieldModel, s0, seed):
    rng = np.random.default_rng(seed)
    return conditioned_prior(flow, s0, rng)


def _pin(flow, values, s0):
    if flow.conditioned:
        values[flow.frozen] = s0
    return values


def first_controlled_node(cfg: GuidanceConfig) -> int:
    return int(math.ceil(cfg.T0 * cfg.ode_steps - 1e-9))


def _run(flow, cfg, s0, seed, kind, spec=None, dynamics=None, correction=None,
         tau_init=None, t_init: float = 0.0, trace_file=None):
    """Shared Euler loop.  ``correction(values, v, t, node)`` returns ``(u, info)`` or ``None``."""
    N = cfg.ode_steps
    dt = 1.0 / N
    s0 = np.asarray(s0, dtype=float)
    layout = flow.layout
    if tau_init is None:
        x = _pin(flow, _prior(flow, s0, seed), s0)
        j0 = 0
    else:
        x = _pin(flow, np.array(getattr(tau_init, "values", tau_init), dtype=float), s0)
        j0 = int(round(t_init * N))
    trace = []
    fh = open(trace_file, "a") if trace_file else None
    try:
        for j in range(j0, N + 1):
            t = j * dt
            ms, ma, V = _node_stats(x, layout, spec, dynamics)
            node = TraceNode(t, ms, ma, V)
            trace.append(node)
            if j == N:
                node.status = "final"
                break
            start = time.perf_counter()
            v = velocity(flow, x, t)
            node.drift_time = time.perf_counter() - start
            u = None
            if correction is not None:
                start = time.perf_counter()
                out = correction(x, v, t, node)
                node.qp_time = time.perf_counter() - start
                if out is not None:
                    u = out
                    if fh is not None and node.status not in ("uncontrolled", "guided"):
                        fh.write(json.dumps({"seed": seed, "t": t, "rows": node.n_rows, "status": node.status,
                                             "iterations": node.iterations, "kkt": node.kkt,
                                             "slack": node.slack}) + "\n")
                    if node.status == FAILED:
                        tau = FlatTrajectory(layout, x)
                        raise SolverFailure(f"QP failed at t={t:.3f}", PlanResult(tau, trace, kind, seed))
            step = v if u is None else v + u
            nxt = _pin(flow, x + dt * step, s0)
            if not np.all(np.isfinite(nxt)):
                raise SolverFailure(f"trajectory became non-finite after t={t:.3f}",
                                    PlanResult(FlatTrajectory(layout, x), trace, kind, seed))
            x = nxt
    finally:
        if fh is not None:
            fh.close()
    return PlanResult(FlatTrajectory(layout, x), trace, kind, seed, {"guidance": cfg.to_dict()})


def sample_uncontrolled(flow, cfg: GuidanceConfig, s0, seed, spec=None, dynamics=None) -> PlanResult:
    """Plain flow-matching sample (``u = 0`` throughout)."""
    return _run(flow, cfg, s0, seed, "fm", spec, dynamics)


def sample_sad(flow, dynamics, spec: ConstraintSpec, cfg: GuidanceConfig, s0, seed,
               tau_init=None, t_init: float | None = None, trace_file=None) -> PlanResult:
    """Guided sample: free flow before ``T0``, QP-corrected drift from ``T0`` on.

    ``tau_init``/``t_init`` start the integration from a given trajectory at a
    given node instead of from a prior draw.
    """
    spec.check_layout(flow.layout)
    ctl = GuidanceController(dynamics, spec, cfg, flow.layout, flow.free)
    j_on = first_controlled_node(cfg)

    def correction(values, v, t, node):
        if int(round(t * cfg.ode_steps)) < j_on:
            return None
        step = ctl.step(values, v, t)
        sol = step.solution
        node.status = sol.status
        node.u_norm = float(np.linalg.norm(step.u))
        node.n_rows = step.qp.n_rows
        node.iterations = sol.iterations
        node.kkt = max_kkt(sol.kkt)
        node.slack = sol.slack
        return step.u

    if tau_init is not None and t_init is None:
        t_init = cfg.T0
    return _run(flow, cfg, s0, seed, "sad", spec, dynamics, correction,
                tau_init, t_init or 0.0, trace_file)


def sample_truncation(flow, spec: ConstraintSpec, cfg: GuidanceConfig, s0, seed, dynamics=None) -> PlanResult:
    """Uncontrolled sample with every box constraint enforced by clipping afterwards.

    Non-box constraints cannot be enforced by clipping and are left alone.
    """
    res = sample_uncontrolled(flow, cfg, s0, seed, spec, dynamics)
    layout = flow.layout
    states, actions = (b.copy() for b in layout.split(res.values))
    for box in spec.boxes:
        if box.block == "action":
            actions = box.clip(actions)
        else:
            states[1:] = box.clip(states[1:])
    tau = FlatTrajectory.from_blocks(layout, states, actions)
    ms, ma, V = _node_stats(tau.values, layout, spec, dynamics)
    trace = res.trace[:-1] + [TraceNode(1.0, ms, ma, V, status="final")]
    return PlanResult(tau, trace, "trunc", seed, res.config)


def guidance_direction(values, layout, spec: ConstraintSpec, dynamics, free=None) -> np.ndarray:
    """Descent direction of ``1/2 sum_{h<0} h^2 + V``."""
    rs = row_set(values, layout, spec)
    viol = rs.values < 0
    grad = rs.grads[viol].T @ rs.values[viol]
    if dynamics is not None:
        grad = grad + value_and_gradient(values, dynamics, layout)[1]
    if free is not None:
        grad = grad * free
    return -grad


def sample_gradient_guidance(flow, spec: ConstraintSpec, dynamics, cfg: GuidanceConfig, s0, seed,
                             gain: float = 1.0) -> PlanResult:
    """Soft guidance: ``u = gain * (descent direction of the violation penalty and V)``
    from ``T0`` on; no feasibility certificate."""
    j_on = first_controlled_node(cfg)

    def correction(values, v, t, node):
        if gain == 0 or int(round(t * cfg.ode_steps)) < j_on:
            return None
        u = gain * guidance_direction(values, flow.layout, spec, dynamics, flow.free)
        node.status = "guided"
        node.u_norm = float(np.linalg.norm(u))
        return u

    return _run(flow, cfg, s0, seed, "grad", spec, dynamics, correction)


SAMPLERS = ("sad", "fm", "trunc", "grad")


def sample(kind: str, flow, dynamics, spec, cfg, s0, seed, **kw) -> PlanResult:
    if kind == "sad":
        return sample_sad(flow, dynamics, spec, cfg, s0, seed, trace_file=kw.get("trace_file"))
    if kind == "fm":
        return sample_uncontrolled(flow, cfg, s0, seed, spec, dynamics)
    if kind == "trunc":
        return sample_truncation(flow, spec, cfg, s0, seed, dynamics)
    if kind == "grad":
        return sample_gradient_guidance(flow, spec, dynamics, cfg, s0, seed, kw.get("gain", 1.0))
    raise ValueError(f"unknown sampler {kind!r}; choose from {SAMPLERS}")
