"""Conditional flow matching over flat trajectories.

The velocity field is an :class:`~guidedflow.mlp.MLP` fed with the flat
trajectory and a sinusoidal embedding of the flow time.  When the model is
conditioned on the initial state, the ``s(0)`` block is pinned in the prior,
excluded from the regression loss and given zero velocity.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dynamics import TrainingDiverged
from .mlp import MLP, make_optimizer
from .trajectory import FlatTrajectory, TrajectoryLayout

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class InterpolationSchedule:
    """``tau_t = alpha(t) tau_1 + beta(t) tau_0`` with ``alpha + beta = 1``.

    ``linear`` is the default; ``smoothstep`` (``alpha = 3t^2 - 2t^3``) is
    provided as a second admissible schedule.
    """

    name: str = "linear"

    def __post_init__(self):
        if self.name not in ("linear", "smoothstep"):
            raise ValueError(f"unknown schedule {self.name!r}")

    def alpha(self, t):
        t = np.asarray(t, dtype=float)
        return t if self.name == "linear" else t * t * (3.0 - 2.0 * t)

    def beta(self, t):
        return 1.0 - self.alpha(t)

    def dalpha(self, t):
        t = np.asarray(t, dtype=float)
        return np.ones_like(t) if self.name == "linear" else 6.0 * t * (1.0 - t)

    def dbeta(self, t):
        return -self.dalpha(t)


LINEAR = InterpolationSchedule("linear")


def _values(x):
    return x.values if isinstance(x, FlatTrajectory) else np.asarray(x, dtype=float)


def _check_pair(tau0, tau1):
    if isinstance(tau0, FlatTrajectory) and isinstance(tau1, FlatTrajectory) and tau0.layout != tau1.layout:
        raise ValueError(f"layout mismatch: {tau0.layout} vs {tau1.layout}")
    a, b = _values(tau0), _values(tau1)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def _col(t, x):
    # broadcast a per-sample time against a (B, d) batch
    t = np.asarray(t, dtype=float)
    return t[:, None] if t.ndim == 1 and x.ndim == 2 else t


def interpolate(tau0, tau1, t, sched: InterpolationSchedule = LINEAR):
    a, b = _check_pair(tau0, tau1)
    out = _col(sched.alpha(t), b) * b + _col(sched.beta(t), a) * a
    if isinstance(tau1, FlatTrajectory):
        return tau1.replace(out)
    return out


def target_velocity(tau0, tau1, t, sched: InterpolationSchedule = LINEAR) -> np.ndarray:
    a, b = _check_pair(tau0, tau1)
    return _col(sched.dalpha(t), b) * b + _col(sched.dbeta(t), a) * a


def time_embedding(t, dim: int = 32, max_freq: float = 100.0) -> np.ndarray:
    """Sinusoidal features ``[sin(w_i t), cos(w_i t)]`` with geometric ``w_i`` in [1, max_freq]."""
    if dim % 2:
        raise ValueError("embedding dimension must be even")
    t = np.atleast_1d(np.asarray(t, dtype=float))
    freqs = np.geomspace(1.0, max_freq, dim // 2)
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


class VectorFieldModel:
    """Learned velocity field ``v_t(tau)`` over flat trajectories of one layout."""

    def __init__(self, layout: TrajectoryLayout, hidden=(256, 256, 256, 256), embed_dim: int = 32,
                 activation: str = "silu", seed: int = 0, conditioned: bool = True,
                 schedule: InterpolationSchedule = LINEAR, net: MLP | None = None,
                 shift=None, scale=None):
        self.layout = layout
        self.embed_dim = int(embed_dim)
        self.conditioned = bool(conditioned)
        self.schedule = schedule
        self.seed = int(seed)
        d = layout.size
        self.net = net or MLP([d + self.embed_dim, *hidden, d], activation, rng=np.random.default_rng(seed))
        if self.net.sizes[0] != d + self.embed_dim or self.net.sizes[-1] != d:
            raise ValueError("network sizes do not match layout and embedding")
        # the network works in normalised coordinates (tau - shift) / scale
        self.shift = np.zeros(d) if shift is None else np.asarray(shift, dtype=float).copy()
        self.scale = np.ones(d) if scale is None else np.asarray(scale, dtype=float).copy()

    def fit_normalizer(self, data, floor: float = 1e-3) -> None:
        data = np.asarray(data, dtype=float)
        self.shift = data.mean(axis=0)
        self.scale = np.maximum(data.std(axis=0), floor)

    @property
    def frozen(self) -> np.ndarray:
        return np.arange(self.layout.state_dim) if self.conditioned else np.zeros(0, dtype=int)

    @property
    def free(self) -> np.ndarray:
        keep = np.ones(self.layout.size, dtype=bool)
        keep[self.frozen] = False
        return keep

    def normalize(self, tau):
        return (np.asarray(tau, dtype=float) - self.shift) / self.scale

    def denormalize(self, z):
        return np.asarray(z, dtype=float) * self.scale + self.shift

    def _inputs(self, tau, t):
        x = np.atleast_2d(np.asarray(tau, dtype=float))
        tt = np.broadcast_to(np.asarray(t, dtype=float), (x.shape[0],))
        return np.concatenate([x, time_embedding(tt, self.embed_dim)], axis=1)

    def __call__(self, tau, t) -> np.ndarray:
        return velocity(self, tau, t)

    def copy(self) -> "VectorFieldModel":
        return VectorFieldModel(self.layout, embed_dim=self.embed_dim, conditioned=self.conditioned,
                                schedule=self.schedule, seed=self.seed, net=self.net.copy(),
                                shift=self.shift, scale=self.scale)

    def save(self, path) -> None:
        self.net.save(path, extra={"kind": "vector_field", "layout": self.layout.to_dict(),
                                   "schedule": self.schedule.name, "seed": self.seed,
                                   "embed_dim": self.embed_dim, "conditioned": self.conditioned,
                                   "shift": self.shift.tolist(), "scale": self.scale.tolist()})

    @classmethod
    def load(cls, path) -> "VectorFieldModel":
        net, meta = MLP.load(path)
        if meta.get("kind") != "vector_field":
            raise ValueError(f"{path}: not a vector-field checkpoint")
        return cls(TrajectoryLayout.from_dict(meta["layout"]), embed_dim=meta["embed_dim"],
                   conditioned=meta["conditioned"], seed=meta["seed"],
                   schedule=InterpolationSchedule(meta["schedule"]), net=net,
                   shift=meta.get("shift"), scale=meta.get("scale"))


def velocity(model: VectorFieldModel, tau_t, t) -> np.ndarray:
    """Velocity in raw coordinates with the conditioned block zeroed; keeps the input's batch shape."""
    x = _values(tau_t)
    if np.any((np.asarray(t) < 0) | (np.asarray(t) > 1)):
        raise ValueError("flow time must lie in [0, 1]")
    out = model.net(model._inputs(model.normalize(x), t)) * model.scale
    out[:, model.frozen] = 0.0
    return out[0] if x.ndim == 1 else out


def conditioned_prior(model: VectorFieldModel, s0, rng, count: int | None = None) -> np.ndarray:
    """Prior draw in raw coordinates (standard normal in the model's normalised
    coordinates) with ``s(0)`` pinned when conditioned."""
    shape = (model.layout.size,) if count is None else (count, model.layout.size)
    tau0 = model.denormalize(rng.standard_normal(shape))
    if model.conditioned:
        tau0[..., model.frozen] = np.asarray(s0, dtype=float)
    return tau0


def cfm_loss(model: VectorFieldModel, tau0, tau1, t, with_grad: bool = False):
    """Mean over the batch of ``|v(tau_t, t) - target|^2`` on unfrozen entries.

    Inputs are in the model's normalised coordinates.  With ``with_grad``
    returns ``(loss, param_grads)``.
    """
    a = np.atleast_2d(_values(tau0))
    b = np.atleast_2d(_values(tau1))
    if a.shape[0] == 0:
        raise ValueError("empty batch")
    t = np.broadcast_to(np.asarray(t, dtype=float), (a.shape[0],))
    x = interpolate(a, b, t, model.schedule)
    target = target_velocity(a, b, t, model.schedule)
    out, cache = model.net.forward(model._inputs(x, t), keep=True)
    err = (out - target) * model.free
    loss = float(np.mean(np.sum(err * err, axis=1)))
    if not with_grad:
        return loss
    grads, _ = model.net.backward(cache, 2.0 * err / a.shape[0])
    return loss, grads


@dataclass
class FlowTrainConfig:
    epochs: int = 200
    batch_size: int = 256
    optimizer: str = "adam"
    lr: float = 1e-3
    seed: int = 0
    loss_csv: str | None = None
    normalize: bool = True


@dataclass
class TrainHistory:
    epoch_loss: list = field(default_factory=list)

    def write_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "mean_loss"])
            for i, v in enumerate(self.epoch_loss):
                w.writerow([i, repr(float(v))])


def train(model: VectorFieldModel, dataset, opts: FlowTrainConfig | None = None):
    """Fit ``model`` in place on expert trajectories; returns ``(model, history)``.

    Each step draws a fresh prior sample (with ``s(0)`` copied from the
    expert when conditioned) and a uniform flow time per trajectory.
    """
    opts = opts or FlowTrainConfig()
    data = np.asarray(getattr(dataset, "values", dataset), dtype=float)
    if data.ndim != 2 or data.shape[0] == 0:
        raise ValueError("training set is empty")
    if data.shape[1] != model.layout.size:
        raise ValueError(f"dataset width {data.shape[1]} does not match layout size {model.layout.size}")
    rng = np.random.default_rng(opts.seed)
    opt = make_optimizer(opts.optimizer, opts.lr)
    hist = TrainHistory()
    if opts.normalize and opts.epochs > 0:
        model.fit_normalizer(data)
    data = model.normalize(data)
    n = data.shape[0]
    for epoch in range(opts.epochs):
        perm = rng.permutation(n)
        total = 0.0
        for start in range(0, n, opts.batch_size):
            tau1 = data[perm[start : start + opts.batch_size]]
            tau0 = rng.standard_normal(tau1.shape)
            if model.conditioned:
                tau0[:, model.frozen] = tau1[:, model.frozen]
            t = rng.uniform(0.0, 1.0, size=len(tau1))
            loss, grads = cfm_loss(model, tau0, tau1, t, with_grad=True)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"flow-matching loss became {loss} at epoch {epoch}")
            opt.step(model.net.params, grads)
            total += loss * len(tau1)
        hist.epoch_loss.append(total / n)
        if epoch % 50 == 0:
            log.info("flow epoch %d mean loss %.4e", epoch, hist.epoch_loss[-1])
    if opts.loss_csv:
        hist.write_csv(opts.loss_csv)
    return model, hist


def integrate(model: VectorFieldModel, tau0, steps: int = 100) -> np.ndarray:
    """Plain forward-Euler transport of raw-coordinate prior sample(s) from t=0 to 1."""
    x = np.array(tau0, dtype=float, copy=True)
    dt = 1.0 / steps
    for j in range(steps):
        x = x + dt * velocity(model, x, j * dt)
    return x
