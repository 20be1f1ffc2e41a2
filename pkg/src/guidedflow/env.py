"""Desk-scale maze: world geometry, expert demonstrations, dataset files, reward.

The expert is a saturated PD controller on the analytic double integrator that
tracks the goal, optionally detouring around keep-out obstacles through a
tangent waypoint.  Every stored trajectory is an exact rollout, so it is
dynamically consistent by construction.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .barriers import Box, ConstraintSpec, Obstacle
from .dynamics import DoubleIntegrator, DoubleIntegratorParams
from .lyapunov import residuals
from .trajectory import FlatTrajectory, TrajectoryLayout

DATA_MAGIC = b"GFDATA01"
DATA_VERSION = 1
GENERATOR_VERSION = "pd-waypoint-1"
_HEADER = struct.Struct("<8sIIIIQ")


@dataclass
class ExpertGains:
    kp: float = 2.0
    kd: float = 2.5
    goal_jitter: float = 0.03  # expert targets are drawn inside this radius of the goal
    clearance: float = 0.04  # detour distance beyond an obstacle's outer radius
    switch_radius: float = 0.04


@dataclass
class MazeWorld:
    bounds: tuple = ((-0.5, 0.5), (-0.5, 0.5))
    goal: tuple = (0.0, 0.0)
    goal_radius: float = 0.05
    train_action_bound: float = 0.15
    test_spec: ConstraintSpec = field(default_factory=ConstraintSpec)
    start_radius: tuple = (0.22, 0.34)
    start_angle_deg: tuple = (100.0, 170.0)
    start_speed: float = 0.02
    start_clearance: float = 0.03
    dt: float = 0.1
    alpha: float = 1.0
    horizon: int = 32
    expert: ExpertGains = field(default_factory=ExpertGains)

    @property
    def layout(self) -> TrajectoryLayout:
        return TrajectoryLayout(4, 2, self.horizon)

    @property
    def dynamics(self) -> DoubleIntegrator:
        return DoubleIntegrator(DoubleIntegratorParams(self.dt, self.alpha))

    @property
    def obstacles(self) -> list:
        return [c for c in self.test_spec.state if isinstance(c, Obstacle)]

    def to_dict(self) -> dict:
        return {
            "bounds": [list(b) for b in self.bounds], "goal": {"center": list(self.goal), "radius": self.goal_radius},
            "train_action_bound": self.train_action_bound, "test": self.test_spec.to_dict(),
            "start": {"radius": list(self.start_radius), "angle_deg": list(self.start_angle_deg),
                      "speed": self.start_speed, "clearance": self.start_clearance},
            "dynamics": {"kind": "double_integrator", "dt": self.dt, "alpha": self.alpha},
            "horizon": self.horizon, "expert": self.expert.__dict__.copy(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MazeWorld":
        st = d.get("start", {})
        dyn = d.get("dynamics", {})
        goal = d.get("goal", {})
        base = cls()
        return cls(
            bounds=tuple(tuple(b) for b in d.get("bounds", base.bounds)),
            goal=tuple(goal.get("center", base.goal)), goal_radius=goal.get("radius", base.goal_radius),
            train_action_bound=d.get("train_action_bound", base.train_action_bound),
            test_spec=ConstraintSpec.from_dict(d.get("test", {})),
            start_radius=tuple(st.get("radius", base.start_radius)),
            start_angle_deg=tuple(st.get("angle_deg", base.start_angle_deg)),
            start_speed=st.get("speed", base.start_speed), start_clearance=st.get("clearance", base.start_clearance),
            dt=dyn.get("dt", base.dt), alpha=dyn.get("alpha", base.alpha), horizon=d.get("horizon", base.horizon),
            expert=ExpertGains(**d.get("expert", {})),
        )

    @classmethod
    def load(cls, path) -> "MazeWorld":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def default_world() -> MazeWorld:
    """Open arena with one superellipse and one quartic obstacle on the approach paths,
    and the +-0.1 action box used at test time."""
    spec = ConstraintSpec(
        state=[Obstacle((-0.08, 0.20), (0.05, 0.035), 2, name="superellipse"),
               Obstacle((-0.14, 0.06), (0.04, 0.04), 4, name="quartic")],
        action=[Box((-0.1, -0.1), (0.1, 0.1), "action")],
    )
    return MazeWorld(test_spec=spec)


def _clear(world: MazeWorld, pos) -> bool:
    for ob in world.obstacles:
        if ob.evaluate(np.array([[pos[0], pos[1], 0.0, 0.0]]))[0][0, 0] < world.start_clearance:
            return False
    return True


def sample_start(world: MazeWorld, rng) -> np.ndarray:
    """Initial state on the start annulus sector, away from obstacles, with a small velocity."""
    for _ in range(1000):
        rad = rng.uniform(*world.start_radius)
        ang = np.deg2rad(rng.uniform(*world.start_angle_deg))
        pos = np.asarray(world.goal) + rad * np.array([np.cos(ang), np.sin(ang)])
        if _clear(world, pos):
            heading = rng.uniform(0, 2 * np.pi)
            vel = rng.uniform(0, world.start_speed) * np.array([np.cos(heading), np.sin(heading)])
            return np.concatenate([pos, vel])
    raise RuntimeError("could not sample a start state clear of the obstacles")


def _outer_radius(ob: Obstacle) -> float:
    return max(ob.axes)


def _blocking(world, pos, target, clearance, skip=()):
    """Index of the first obstacle whose inflated disk the segment pos -> target crosses."""
    seg = target - pos
    L2 = float(seg @ seg)
    best, best_s = None, np.inf
    for i, ob in enumerate(world.obstacles):
        if i in skip:
            continue
        c = np.asarray(ob.center)
        s = 0.0 if L2 == 0 else float(np.clip((c - pos) @ seg / L2, 0.0, 1.0))
        closest = pos + s * seg
        if np.linalg.norm(closest - c) < _outer_radius(ob) + clearance and s < best_s:
            best, best_s = i, s
    return best


def _detour(ob, pos, target, clearance):
    # waypoint beside the obstacle, offset perpendicular to the centre->target line
    c = np.asarray(ob.center)
    axis = target - c
    normal = np.array([-axis[1], axis[0]]) / max(np.linalg.norm(axis), 1e-12)
    side = np.sign(normal @ (pos - c)) or 1.0
    return c + side * (_outer_radius(ob) + 1.5 * clearance) * normal


def expert_rollout(world: MazeWorld, s0, target, steps: int, bound: float, avoid: bool = False):
    """Roll out the PD (+ detour) expert; returns ``(states (steps, 4), actions (steps, 2))``.

    With ``avoid`` an obstacle blocking the straight line to the target is
    bypassed through a side waypoint; once that waypoint is reached the
    obstacle is considered passed.
    """
    dyn = world.dynamics
    g = world.expert
    s = np.asarray(s0, dtype=float)
    target = np.asarray(target, dtype=float)
    states, actions = [], []
    passed: set = set()
    for _ in range(steps):
        pos, vel = s[:2], s[2:]
        aim = target
        if avoid:
            ob = _blocking(world, pos, target, g.clearance, passed)
            if ob is not None:
                aim = _detour(world.obstacles[ob], pos, target, g.clearance)
                if np.linalg.norm(aim - pos) < g.switch_radius:
                    passed.add(ob)
        a = np.clip(g.kp * (aim - pos) - g.kd * vel, -bound, bound)
        states.append(s)
        actions.append(a)
        s = dyn.step(s, a)
    return np.array(states), np.array(actions)


@dataclass
class Dataset:
    layout: TrajectoryLayout
    values: np.ndarray  # (count, (n+m)H)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).reshape(-1, self.layout.size)

    def __len__(self) -> int:
        return self.values.shape[0]

    def __eq__(self, other) -> bool:
        return (isinstance(other, Dataset) and self.layout == other.layout
                and np.array_equal(self.values, other.values) and self.meta == other.meta)

    @property
    def trajectories(self) -> list:
        return [FlatTrajectory(self.layout, v) for v in self.values]

    def split(self, fraction: float, seed: int = 0) -> tuple["Dataset", "Dataset"]:
        """Random ``(train, eval)`` split with ``fraction`` of trajectories in train."""
        order = np.random.default_rng(seed).permutation(len(self))
        cut = int(round(fraction * len(self)))
        return (Dataset(self.layout, self.values[order[:cut]], dict(self.meta)),
                Dataset(self.layout, self.values[order[cut:]], dict(self.meta)))

    def subset(self, fraction: float, seed: int = 0) -> "Dataset":
        return self.split(fraction, seed)[0]

    def max_consistency_error(self) -> float:
        dyn = DoubleIntegrator(DoubleIntegratorParams(self.meta.get("dt", 0.1), self.meta.get("alpha", 1.0)))
        worst = 0.0
        for v in self.values:
            res = residuals(v, dyn, self.layout)
            worst = max(worst, 0.5 * float(np.sum(res * res)))
        return worst


def generate_expert(world: MazeWorld, count: int, horizon: int | None = None, seed: int = 0,
                    avoid: bool = False) -> Dataset:
    """Expert demonstrations from random starts towards jittered goals.

    Trajectories that do not arrive within the horizon are kept as they are.
    """
    H = world.horizon if horizon is None else horizon
    if count < 1 or H < 1:
        raise ValueError("count and horizon must be >= 1")
    layout = TrajectoryLayout(4, 2, H)
    rng = np.random.default_rng(seed)
    out = np.empty((count, layout.size))
    for i in range(count):
        s0 = sample_start(world, rng)
        ang = rng.uniform(0, 2 * np.pi)
        target = np.asarray(world.goal) + rng.uniform(0, world.expert.goal_jitter) * np.array([np.cos(ang), np.sin(ang)])
        S, A = expert_rollout(world, s0, target, H, world.train_action_bound, avoid)
        out[i] = layout.join(S, A)
    meta = {"dt": world.dt, "alpha": world.alpha, "count": count, "seed": seed,
            "generator": GENERATOR_VERSION, "train_action_bound": world.train_action_bound,
            "avoid": avoid}
    return Dataset(layout, out, meta)


def save_dataset(ds: Dataset, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    L = ds.layout
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(DATA_MAGIC, DATA_VERSION, L.state_dim, L.action_dim, L.horizon, len(ds)))
        fh.write(ds.values.astype("<f8").tobytes())
    Path(str(path) + ".json").write_text(json.dumps(ds.meta, indent=2, sort_keys=True))


def load_dataset(path, layout: TrajectoryLayout | None = None, validate: bool = True) -> Dataset:
    """Read a dataset file; ``layout`` (if given) must match the header.

    With ``validate`` every trajectory is checked for consistency under the
    analytic model recorded in the metadata.
    """
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated header")
    magic, version, n, m, H, count = _HEADER.unpack_from(raw)
    if magic != DATA_MAGIC:
        raise ValueError(f"{path}: not a dataset file (bad magic)")
    if version != DATA_VERSION:
        raise ValueError(f"{path}: unsupported dataset version {version}")
    found = TrajectoryLayout(n, m, H)
    if layout is not None and layout != found:
        raise ValueError(f"{path}: layout {found} does not match expected {layout}")
    body = raw[_HEADER.size:]
    if len(body) != 8 * count * found.size:
        raise ValueError(f"{path}: truncated data ({len(body)} bytes for {count} trajectories)")
    values = np.frombuffer(body, dtype="<f8").astype(float).reshape(count, found.size)
    side = Path(str(path) + ".json")
    meta = json.loads(side.read_text()) if side.exists() else {}
    ds = Dataset(found, values, meta)
    if validate and meta.get("dt") is not None:
        worst = ds.max_consistency_error()
        if worst > 1e-10:
            raise ValueError(f"{path}: stored trajectories are not dynamically consistent (V={worst:.2e})")
    return ds


def reward(tau, world: MazeWorld) -> float:
    """Progress surrogate ``1 - d_final / d_initial`` to the goal centre, clipped to [0, 1.5]."""
    values = getattr(tau, "values", tau)
    layout = getattr(tau, "layout", None) or world.layout
    states, _ = layout.split(values)
    goal = np.asarray(world.goal)
    d0 = float(np.linalg.norm(states[0, :2] - goal))
    d1 = float(np.linalg.norm(states[-1, :2] - goal))
    if d0 == 0.0:
        return 1.0 if d1 == 0.0 else 0.0
    return float(np.clip(1.0 - d1 / d0, 0.0, 1.5))


def reaches_goal(tau, world: MazeWorld) -> bool:
    values = getattr(tau, "values", tau)
    layout = getattr(tau, "layout", None) or world.layout
    states, _ = layout.split(values)
    return bool(np.linalg.norm(states[-1, :2] - np.asarray(world.goal)) <= world.goal_radius)
