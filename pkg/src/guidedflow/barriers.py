"""Signed-distance barrier functions for state and action constraints.

Convention everywhere: ``h > 0`` strictly inside the allowed set, ``h < 0``
outside, ``h = 0`` on the boundary.  Keep-out obstacles therefore have
positive ``h`` away from the obstacle.

Every constraint evaluates all of its timesteps at once and the results are
stacked into a :class:`RowSet` (dense gradients over the flat trajectory),
which is what the controller consumes.  :func:`assemble_rows` exposes the same
data as a list of :class:`BarrierRow` objects.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .trajectory import FlatTrajectory, TrajectoryLayout

log = logging.getLogger(__name__)

GRAD_EPS = 1e-6


@dataclass(frozen=True, eq=False)
class BarrierRow:
    value: float
    indices: np.ndarray  # flat positions carrying the gradient (one block)
    gradient: np.ndarray  # gradient entries at ``indices``
    label: tuple  # (kind, k, constraint id)

    def dense_gradient(self, size: int) -> np.ndarray:
        g = np.zeros(size)
        g[self.indices] = self.gradient
        return g


# -- scalar/vector SDF primitives ------------------------------------------

def sdf_box(x, lower, upper):
    """Rows ``upper_i - x_i`` and ``x_i - lower_i`` for each element.

    Returns ``(values, grads)`` with values ordered ``[up_0, lo_0, up_1, lo_1, ...]``
    along the last axis and ``grads`` the matching +-1 coefficient.
    """
    x = np.asarray(x, dtype=float)
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    vals = np.stack([upper - x, x - lower], axis=-1)
    vals = vals.reshape(x.shape[:-1] + (2 * x.shape[-1],))
    signs = np.tile([-1.0, 1.0], x.shape[-1])
    return vals, signs


def sdf_circle(pos, center, radius):
    """Exact Euclidean SDF outside a disk; gradient is zero at the exact center."""
    d = np.asarray(pos, dtype=float) - np.asarray(center, dtype=float)
    dist = np.linalg.norm(d, axis=-1)
    h = dist - radius
    safe = np.where(dist > 0.0, dist, 1.0)
    grad = np.where((dist > 0.0)[..., None], d / safe[..., None], 0.0)
    return h, grad


def superellipse_level(pos, center, axes, p):
    """``g = ((x-x0)/a)^p + ((y-y0)/b)^p - 1`` with gradient and diagonal Hessian."""
    axes = np.asarray(axes, dtype=float)
    q = (np.asarray(pos, dtype=float) - np.asarray(center, dtype=float)) / axes
    g = np.sum(q**p, axis=-1) - 1.0
    dg = p * q ** (p - 1) / axes
    d2g = p * (p - 1) * q ** (p - 2) / axes**2
    return g, dg, d2g


def sdf_superellipse(pos, center, axes, p, eps=GRAD_EPS):
    """First-order signed distance ``g / max(|grad g|, eps)``.

    The sign is exact; the magnitude approximates the Euclidean distance near
    the boundary.  The returned gradient is the exact derivative of the returned
    value (zero where the clamp is active).
    """
    g, dg, d2g = superellipse_level(pos, center, axes, p)
    nrm = np.linalg.norm(dg, axis=-1)
    clamped = nrm <= eps
    den = np.where(clamped, eps, nrm)
    h = g / den
    # grad(g/|dg|) = dg/|dg| - g * (H dg) / |dg|^3, with H diagonal
    hdg = d2g * dg
    grad = dg / den[..., None] - (g / den**3)[..., None] * hdg
    grad = np.where(clamped[..., None], 0.0, grad)
    return h, grad


def sdf_halfspace(x, bound, direction="below"):
    """``bound - x`` when the coordinate must stay below ``bound``, ``x - bound`` above it."""
    x = np.asarray(x, dtype=float)
    if direction == "below":
        return bound - x, -1.0
    if direction == "above":
        return x - bound, 1.0
    raise ValueError(f"direction must be 'below' or 'above', got {direction!r}")


# -- constraint objects -----------------------------------------------------

@dataclass(frozen=True)
class Obstacle:
    """Keep-out region ``((x-x0)/a)^p + ((y-y0)/b)^p < 1`` in two state coordinates."""

    center: tuple
    axes: tuple
    exponent: int = 2
    shape: str = "superellipse"  # or "circle" (exact SDF, requires a == b and p == 2)
    coords: tuple = (0, 1)
    name: str = ""

    block = "state"

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        object.__setattr__(self, "axes", tuple(float(c) for c in self.axes))
        object.__setattr__(self, "coords", tuple(int(c) for c in self.coords))
        if min(self.axes) <= 0:
            raise ValueError("obstacle semi-axes must be positive")
        if self.exponent % 2 or self.exponent < 2:
            raise ValueError("obstacle exponent must be an even integer >= 2")
        if self.shape == "circle" and (self.axes[0] != self.axes[1] or self.exponent != 2):
            raise ValueError("circle obstacles need equal axes and exponent 2")
        if self.shape not in ("circle", "superellipse"):
            raise ValueError(f"unknown obstacle shape {self.shape!r}")

    @property
    def n_rows(self) -> int:
        return 1

    def evaluate(self, block: np.ndarray):
        """``block``: (K, n) states -> values (K, 1), local grads (K, 1, n)."""
        pos = block[:, list(self.coords)]
        if self.shape == "circle":
            h, g2 = sdf_circle(pos, self.center, self.axes[0])
        else:
            h, g2 = sdf_superellipse(pos, self.center, self.axes, self.exponent)
        grads = np.zeros((block.shape[0], 1, block.shape[1]))
        grads[:, 0, list(self.coords)] = g2
        return h[:, None], grads

    def level(self, pos) -> np.ndarray:
        return superellipse_level(pos, self.center, self.axes, self.exponent)[0]

    @cached_property
    def lipschitz(self) -> tuple[float, float]:
        """``(L_h, L_grad_h)``; exact-SDF rows use (1, 0), superellipses are sampled."""
        if self.shape == "circle":
            return 1.0, 0.0
        return _sample_superellipse_lipschitz(self.center, self.axes, self.exponent)

    def to_dict(self) -> dict:
        d = {"center": list(self.center), "axes": list(self.axes), "exponent": self.exponent,
             "shape": self.shape, "coords": list(self.coords)}
        if self.name:
            d["name"] = self.name
        return d


def _sample_superellipse_lipschitz(center, axes, p, samples=4000, seed=0):
    # Sample the region outside the half-level set g >= -0.5, where rows are informative;
    # the Hessian of h is taken by central differences of the analytic gradient.
    rng = np.random.default_rng(seed)
    axes = np.asarray(axes)
    pts = np.asarray(center) + rng.uniform(-3.0, 3.0, size=(samples, 2)) * axes
    g, _, _ = superellipse_level(pts, center, axes, p)
    pts = pts[g >= -0.5]
    _, grad = sdf_superellipse(pts, center, axes, p)
    L_h = float(np.max(np.linalg.norm(grad, axis=1)))
    eps = 1e-6 * float(np.min(axes))
    hess = np.zeros((len(pts), 2, 2))
    for j in range(2):
        e = np.zeros(2)
        e[j] = eps
        hess[:, :, j] = (sdf_superellipse(pts + e, center, axes, p)[1]
                         - sdf_superellipse(pts - e, center, axes, p)[1]) / (2 * eps)
    L_gh = float(np.max(np.linalg.norm(hess, ord=2, axis=(1, 2))))
    return L_h, L_gh


@dataclass(frozen=True)
class Halfspace:
    """Single state coordinate kept below (or above) a bound, e.g. a roof height."""

    coord: int
    bound: float
    direction: str = "below"
    name: str = ""

    block = "state"
    lipschitz = (1.0, 0.0)

    @property
    def n_rows(self) -> int:
        return 1

    def evaluate(self, block):
        h, sign = sdf_halfspace(block[:, self.coord], self.bound, self.direction)
        grads = np.zeros((block.shape[0], 1, block.shape[1]))
        grads[:, 0, self.coord] = sign
        return h[:, None], grads

    def to_dict(self) -> dict:
        return {"coordinate": self.coord, "bound": self.bound, "direction": self.direction}


@dataclass(frozen=True)
class Box:
    """Per-element bounds on selected coordinates of a state or action block,
    decomposed into one linear row per element and side."""

    lower: tuple
    upper: tuple
    block: str = "action"
    coords: tuple | None = None
    name: str = ""

    lipschitz = (1.0, 0.0)

    def __post_init__(self):
        lo = tuple(float(v) for v in self.lower)
        up = tuple(float(v) for v in self.upper)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", up)
        if len(lo) != len(up):
            raise ValueError("box bounds differ in length")
        if any(a >= b for a, b in zip(lo, up)):
            raise ValueError("box needs lower < upper elementwise")
        coords = tuple(range(len(lo))) if self.coords is None else tuple(int(c) for c in self.coords)
        if len(coords) != len(lo):
            raise ValueError("box coords and bounds differ in length")
        object.__setattr__(self, "coords", coords)
        if self.block not in ("state", "action"):
            raise ValueError(f"box block must be 'state' or 'action', got {self.block!r}")

    @property
    def n_rows(self) -> int:
        return 2 * len(self.coords)

    def evaluate(self, block):
        x = block[:, list(self.coords)]
        vals, signs = sdf_box(x, self.lower, self.upper)
        grads = np.zeros((block.shape[0], self.n_rows, block.shape[1]))
        rows = np.arange(self.n_rows)
        grads[:, rows, np.repeat(self.coords, 2)] = signs
        return vals, grads

    def clip(self, block):
        out = np.array(block, dtype=float, copy=True)
        idx = list(self.coords)
        out[..., idx] = np.clip(out[..., idx], self.lower, self.upper)
        return out

    def to_dict(self) -> dict:
        return {"block": self.block, "lower": list(self.lower), "upper": list(self.upper),
                "coords": list(self.coords)}


@dataclass
class ConstraintSpec:
    """State constraints apply at ``k = 1..H-1`` (``s(0)`` is conditioned),
    action constraints at ``k = 0..H-1``."""

    state: list = field(default_factory=list)
    action: list = field(default_factory=list)
    robust: bool = False
    lipschitz: object = None  # dynamics.LipschitzEstimates when robust

    def __post_init__(self):
        for c in self.state:
            if c.block != "state":
                raise ValueError(f"{c} is not a state constraint")
        for c in self.action:
            if c.block != "action":
                raise ValueError(f"{c} is not an action constraint")

    @property
    def boxes(self):
        return [c for c in self.state + self.action if isinstance(c, Box)]

    def check_layout(self, layout: TrajectoryLayout) -> None:
        for c in self.state:
            dims = getattr(c, "coords", None) or (c.coord,)
            if max(dims) >= layout.state_dim:
                raise ValueError(f"{c} references state coordinate beyond n={layout.state_dim}")
        for c in self.action:
            if max(c.coords) >= layout.action_dim:
                raise ValueError(f"{c} references action coordinate beyond m={layout.action_dim}")

    def with_robust(self, lipschitz) -> "ConstraintSpec":
        return ConstraintSpec(list(self.state), list(self.action), True, lipschitz)

    # -- JSON ---------------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "obstacles": [c.to_dict() for c in self.state if isinstance(c, Obstacle)],
            "halfspaces": [c.to_dict() for c in self.state if isinstance(c, Halfspace)],
            "boxes": [c.to_dict() for c in self.state + self.action if isinstance(c, Box)],
            "robust": self.robust,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ConstraintSpec":
        state, action = [], []
        for o in d.get("obstacles", []):
            state.append(Obstacle(o["center"], o["axes"], int(o.get("exponent", 2)),
                                  o.get("shape", "superellipse"), tuple(o.get("coords", (0, 1))),
                                  o.get("name", "")))
        for h in d.get("halfspaces", []):
            state.append(Halfspace(int(h["coordinate"]), float(h["bound"]), h.get("direction", "below")))
        for b in d.get("boxes", []):
            box = Box(b["lower"], b["upper"], b.get("block", "action"), b.get("coords"))
            (state if box.block == "state" else action).append(box)
        return cls(state, action, bool(d.get("robust", False)))

    @classmethod
    def load(cls, path) -> "ConstraintSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


STATE, ACTION = 0, 1


@dataclass
class RowSet:
    """Struct-of-arrays view of every barrier row for one trajectory."""

    values: np.ndarray  # (R,)
    grads: np.ndarray  # (R, d) dense over the flat vector
    kind: np.ndarray  # STATE or ACTION
    step: np.ndarray  # time index k
    cid: np.ndarray  # constraint id within its kind
    lip_h: np.ndarray
    lip_gradh: np.ndarray

    def __len__(self) -> int:
        return self.values.size

    def min_value(self, kind: int) -> float:
        sel = self.values[self.kind == kind]
        return float(sel.min()) if sel.size else float("inf")


def _stack_kind(values, layout, constraints, kind, steps, base_idx):
    parts = []
    size = layout.size
    for cid, con in enumerate(constraints):
        block = values[base_idx[steps]]  # (K, dim)
        vals, lg = con.evaluate(block)
        K, r = vals.shape
        dense = np.zeros((K, r, size))
        cols = base_idx[steps]  # (K, dim)
        dense[np.arange(K)[:, None, None], np.arange(r)[None, :, None], cols[:, None, :]] = lg
        L_h, L_gh = con.lipschitz
        parts.append((vals.reshape(-1), dense.reshape(K * r, size),
                      np.full(K * r, kind), np.repeat(steps, r), np.full(K * r, cid),
                      np.full(K * r, L_h), np.full(K * r, L_gh)))
    return parts


def row_set(values: np.ndarray, layout: TrajectoryLayout, spec: ConstraintSpec) -> RowSet:
    values = np.asarray(values, dtype=float)
    H = layout.horizon
    parts = _stack_kind(values, layout, spec.state, STATE, np.arange(1, H), layout.state_indices())
    parts += _stack_kind(values, layout, spec.action, ACTION, np.arange(H), layout.action_indices())
    if not parts:
        z = np.zeros(0)
        return RowSet(z, np.zeros((0, layout.size)), z.astype(int), z.astype(int), z.astype(int), z, z)
    cols = list(zip(*parts))
    return RowSet(np.concatenate(cols[0]), np.concatenate(cols[1]), np.concatenate(cols[2]),
                  np.concatenate(cols[3]), np.concatenate(cols[4]), np.concatenate(cols[5]),
                  np.concatenate(cols[6]))


def assemble_rows(tau: FlatTrajectory, spec: ConstraintSpec) -> list[BarrierRow]:
    rs = row_set(tau.values, tau.layout, spec)
    rows = []
    for i in range(len(rs)):
        idx = np.flatnonzero(rs.grads[i])
        kind = "state" if rs.kind[i] == STATE else "action"
        if idx.size == 0:
            block = (tau.layout.state_slice if kind == "state" else tau.layout.action_slice)(int(rs.step[i]))
            idx = np.arange(block.start, block.stop)
        rows.append(BarrierRow(float(rs.values[i]), idx, rs.grads[i, idx].copy(),
                               (kind, int(rs.step[i]), int(rs.cid[i]))))
    return rows
