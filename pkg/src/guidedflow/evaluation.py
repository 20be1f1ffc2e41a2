"""Plan metrics, comparison and ablation harnesses, CSV and SVG reports."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .barriers import ACTION, STATE, ConstraintSpec, Obstacle, row_set
from .controller import GuidanceConfig
from .env import MazeWorld, reward, sample_start
from .flow import FlowTrainConfig, VectorFieldModel, train
from .lyapunov import lyapunov_value
from .sampler import SAMPLERS, PlanResult, sample

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MetricsRow:
    safety: float
    admissibility: float
    consistency: float
    reward: float
    wall_time: float = 0.0
    qp_time: float = 0.0
    drift_time: float = 0.0


METRICS = tuple(f.name for f in fields(MetricsRow))


def violation(values) -> float:
    """``-min(min(values), 0)``; zero for an empty set."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        return 0.0
    return float(max(0.0, -values.min()))


def evaluate(result: PlanResult, spec: ConstraintSpec, dynamics, world: MazeWorld,
             wall_time: float | None = None) -> MetricsRow:
    """Violations from the plan's barrier rows, ``V`` under ``dynamics``, surrogate reward,
    and per-node timings summed from the trace."""
    tau = result.trajectory
    if tau.layout != world.layout:
        raise ValueError(f"plan layout {tau.layout} does not match world layout {world.layout}")
    rs = row_set(tau.values, tau.layout, spec)
    return MetricsRow(
        safety=violation(rs.values[rs.kind == STATE]),
        admissibility=violation(rs.values[rs.kind == ACTION]),
        consistency=lyapunov_value(tau.values, dynamics, tau.layout),
        reward=reward(tau, world),
        wall_time=float(wall_time) if wall_time is not None else
        float(sum(n.drift_time + n.qp_time for n in result.trace)),
        qp_time=float(sum(n.qp_time for n in result.trace)),
        drift_time=float(sum(n.drift_time for n in result.trace)),
    )


def execute_open_loop(result: PlanResult, dynamics) -> np.ndarray:
    """Roll the plan's actions through ``dynamics`` from its ``s(0)``; returns the executed flat trajectory."""
    layout = result.trajectory.layout
    states, actions = layout.split(result.values)
    out = [states[0]]
    for k in range(layout.horizon - 1):
        out.append(dynamics.step(out[-1], actions[k]))
    return layout.join(np.array(out), actions)


def execution_metrics(result: PlanResult, spec: ConstraintSpec, dynamics, world: MazeWorld) -> MetricsRow:
    """Metrics of the open-loop execution of the plan's actions on ``dynamics``."""
    executed = result.trajectory.replace(execute_open_loop(result, dynamics))
    return evaluate(PlanResult(executed, [], result.sampler, result.seed), spec, dynamics, world)


# -- aggregation --------------------------------------------------------------

COMPARISON_COLUMNS = ("sampler", "n") + tuple(f"{m}_{s}" for m in METRICS for s in ("mean", "std"))


def aggregate(rows) -> dict:
    """Mean, population std, median and max of every metric."""
    arr = np.array([[getattr(r, m) for m in METRICS] for r in rows], dtype=float)
    out = {"n": len(rows)}
    for i, m in enumerate(METRICS):
        out[f"{m}_mean"] = float(arr[:, i].mean()) if len(rows) else math.nan
        out[f"{m}_std"] = float(arr[:, i].std()) if len(rows) else math.nan
        out[f"{m}_median"] = float(np.median(arr[:, i])) if len(rows) else math.nan
        out[f"{m}_max"] = float(arr[:, i].max()) if len(rows) else math.nan
    return out


def write_csv(path, columns, records) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for rec in records:
            w.writerow([_fmt(rec[c]) for c in columns])


def _fmt(x):
    if isinstance(x, float):
        return repr(x)
    return x


def run_plans(kind: str, flow: VectorFieldModel, dynamics, spec: ConstraintSpec, cfg: GuidanceConfig,
              world: MazeWorld, seeds, eval_spec: ConstraintSpec | None = None, eval_dynamics=None,
              trace_file=None, plan_dir=None):
    """Plan once per seed (start drawn from ``world`` with the same seed) and evaluate.

    Returns ``(results, metrics)``.  Violations are measured against
    ``eval_spec`` (default ``spec``) and consistency under ``eval_dynamics``
    (default the world's analytic model).
    """
    eval_spec = eval_spec or spec
    eval_dynamics = eval_dynamics or world.dynamics
    results, metrics = [], []
    for seed in seeds:
        s0 = sample_start(world, np.random.default_rng(int(seed)))
        start = time.perf_counter()
        res = sample(kind, flow, dynamics, spec, cfg, s0, int(seed), trace_file=trace_file)
        wall = time.perf_counter() - start
        results.append(res)
        metrics.append(evaluate(res, eval_spec, eval_dynamics, world, wall))
        if plan_dir is not None:
            res.save(Path(plan_dir) / f"{kind}_seed{int(seed)}.json")
    return results, metrics


def run_comparison(flow: VectorFieldModel, world: MazeWorld, seeds, cfg: GuidanceConfig | None = None,
                   samplers=SAMPLERS, dynamics=None, out_csv=None, gain: float = 1.0) -> list[dict]:
    """One aggregate row per sampler over ``seeds``; written to ``out_csv`` when given."""
    if flow is None:
        raise FileNotFoundError("run_comparison needs a trained flow checkpoint")
    cfg = cfg or GuidanceConfig()
    dynamics = dynamics or world.dynamics
    table = []
    for kind in samplers:
        _, metrics = run_plans(kind, flow, dynamics, world.test_spec, cfg, world, seeds)
        row = {"sampler": kind, **aggregate(metrics)}
        table.append(row)
        log.info("%s: safety %.3g adm %.3g V %.3g reward %.3f", kind, row["safety_mean"],
                 row["admissibility_mean"], row["consistency_mean"], row["reward_mean"])
    if out_csv is not None:
        write_csv(out_csv, COMPARISON_COLUMNS, table)
    return table


# -- ablations ----------------------------------------------------------------

ABLATIONS = ("t0", "ode_steps", "c_gain", "tighten", "data_fraction")
ABLATION_COLUMNS = ("kind", "value", "n") + tuple(
    f"{m}_{s}" for m in METRICS for s in ("mean", "std", "median", "max"))


def inflate(spec: ConstraintSpec, margin: float) -> ConstraintSpec:
    """Grow every obstacle's semi-axes by ``margin`` (smaller clearance to the original shape)."""
    state = [replace(c, axes=tuple(a + margin for a in c.axes)) if isinstance(c, Obstacle) else c
             for c in spec.state]
    return ConstraintSpec(state, list(spec.action), spec.robust, spec.lipschitz)


def run_ablation(kind: str, grid, flow: VectorFieldModel, world: MazeWorld, seeds,
                 cfg: GuidanceConfig | None = None, dynamics=None, out_csv=None, out_svg=None,
                 dataset=None, train_opts: FlowTrainConfig | None = None, hidden=None) -> list[dict]:
    """Sweep one knob of the guided sampler and aggregate metrics per grid point.

    ``tighten`` inflates the obstacles by each grid value for planning and
    evaluation alike.  ``data_fraction`` retrains the flow on that fraction of
    ``dataset`` with ``train_opts`` before planning.
    """
    if kind not in ABLATIONS:
        raise ValueError(f"unknown ablation {kind!r}; choose from {ABLATIONS}")
    grid = list(grid)
    if not grid:
        raise ValueError("ablation grid is empty")
    cfg = cfg or GuidanceConfig()
    dynamics = dynamics or world.dynamics
    table = []
    for value in grid:
        spec, model, point_cfg = world.test_spec, flow, cfg
        if kind == "t0":
            point_cfg = replace(cfg, T0=float(value))
        elif kind == "ode_steps":
            point_cfg = replace(cfg, ode_steps=int(value))
        elif kind == "c_gain":
            point_cfg = replace(cfg, c=float(value))
        elif kind == "tighten":
            spec = inflate(world.test_spec, float(value))
        else:
            if dataset is None:
                raise ValueError("data_fraction ablation needs a dataset")
            model = VectorFieldModel(world.layout, hidden=hidden or (256, 256, 256),
                                     seed=(train_opts or FlowTrainConfig()).seed)
            train(model, dataset.subset(float(value)), train_opts)
        _, metrics = run_plans("sad", model, dynamics, spec, point_cfg, world, seeds)
        table.append({"kind": kind, "value": float(value), **aggregate(metrics)})
    if out_csv is not None:
        write_csv(out_csv, ABLATION_COLUMNS, table)
    if out_svg is not None:
        line_plot_svg(out_svg, [r["value"] for r in table],
                      {"median V": [r["consistency_median"] for r in table],
                       "mean reward": [r["reward_mean"] for r in table]},
                      xlabel=kind)
    return table


# -- SVG ----------------------------------------------------------------------

_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd")


def line_plot_svg(path, x, series: dict, xlabel: str = "", width: int = 640, height: int = 240) -> None:
    """One small panel per series (each with its own y-range), shared x axis."""
    x = np.asarray(x, dtype=float)
    pad = 40
    panel_w = (width - pad * (len(series) + 1)) / max(len(series), 1)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}">',
             '<rect width="100%" height="100%" fill="white"/>']
    for i, (name, ys) in enumerate(series.items()):
        ys = np.asarray(ys, dtype=float)
        x0 = pad + i * (panel_w + pad)
        y0, h = 25, height - 65
        xmin, xmax = float(x.min()), float(x.max())
        ymin, ymax = float(np.nanmin(ys)), float(np.nanmax(ys))
        xs = (x - xmin) / (xmax - xmin or 1.0)
        yn = (ys - ymin) / (ymax - ymin or 1.0)
        pts = " ".join(f"{x0 + a * panel_w:.2f},{y0 + h - b * h:.2f}" for a, b in zip(xs, yn))
        color = _COLORS[i % len(_COLORS)]
        parts += [
            f'<rect x="{x0:.1f}" y="{y0}" width="{panel_w:.1f}" height="{h}" fill="none" stroke="#888"/>',
            f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="2"/>',
            f'<text x="{x0:.1f}" y="{y0 - 8}" font-size="12">{escape(name)}</text>',
            f'<text x="{x0:.1f}" y="{y0 + h + 15}" font-size="10">{xmin:g}</text>',
            f'<text x="{x0 + panel_w:.1f}" y="{y0 + h + 15}" font-size="10" text-anchor="end">{xmax:g}</text>',
            f'<text x="{x0 - 4:.1f}" y="{y0 + 10}" font-size="10" text-anchor="end">{ymax:.3g}</text>',
            f'<text x="{x0 - 4:.1f}" y="{y0 + h:.1f}" font-size="10" text-anchor="end">{ymin:.3g}</text>',
            f'<text x="{x0 + panel_w / 2:.1f}" y="{y0 + h + 30}" font-size="11" '
            f'text-anchor="middle">{escape(xlabel)}</text>',
        ]
    parts.append("</svg>")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(parts) + "\n")


def obstacle_outline(ob: Obstacle, points: int = 128) -> np.ndarray:
    """Points on the ``g = 0`` level set, ``(points, 2)``."""
    th = np.linspace(0.0, 2.0 * np.pi, points, endpoint=False)
    c, s = np.cos(th), np.sin(th)
    e = 2.0 / ob.exponent
    x = ob.center[0] + ob.axes[0] * np.sign(c) * np.abs(c) ** e
    y = ob.center[1] + ob.axes[1] * np.sign(s) * np.abs(s) ** e
    return np.stack([x, y], axis=1)


def plot_trajectory(result: PlanResult, world: MazeWorld, path, size: int = 480) -> None:
    """Workspace, obstacle outlines, start and goal markers, and the planned positions."""
    layout = result.trajectory.layout
    if layout.state_dim < 2 or len(world.bounds) != 2:
        raise ValueError("plot_trajectory needs a planar world with 2-D positions")
    (xlo, xhi), (ylo, yhi) = world.bounds

    def px(p):
        return ((p[..., 0] - xlo) / (xhi - xlo) * size, (yhi - p[..., 1]) / (yhi - ylo) * size)

    def pts(arr):
        xs, ys = px(np.asarray(arr))
        return " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(xs, ys))

    states, _ = layout.split(result.values)
    pos = states[:, :2]
    gx, gy = px(np.asarray(world.goal))
    sx, sy = px(pos[0])
    r_goal = world.goal_radius / (xhi - xlo) * size
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
             f'viewBox="0 0 {size} {size}">',
             f'<rect width="{size}" height="{size}" fill="white" stroke="black"/>']
    for ob in world.obstacles:
        parts.append(f'<polygon points="{pts(obstacle_outline(ob))}" fill="#ccc" stroke="black"/>')
    parts += [
        f'<circle cx="{gx:.2f}" cy="{gy:.2f}" r="{r_goal:.2f}" fill="none" stroke="green"/>',
        f'<circle cx="{sx:.2f}" cy="{sy:.2f}" r="4" fill="blue"/>',
        f'<polyline points="{pts(pos)}" fill="none" stroke="#d62728" stroke-width="2"/>',
        "</svg>",
    ]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(parts) + "\n")


def metrics_to_dict(row: MetricsRow) -> dict:
    return asdict(row)
