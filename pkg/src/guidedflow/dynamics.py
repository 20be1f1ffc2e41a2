"""Transition models ``s(k+1) = f(s(k), a(k))``: the analytic double integrator,
a learned feedforward forward model, and Lipschitz bounds used by the robust
barrier margin."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .mlp import ACTIVATIONS, MLP, make_optimizer

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """Raised when a training loss becomes non-finite."""


class Dynamics:
    """Common surface: batched ``step`` plus per-point Jacobians."""

    tag = "abstract"
    state_dim: int
    action_dim: int

    def step(self, s, a) -> np.ndarray:
        raise NotImplementedError

    def jacobians(self, s, a) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def jacobians_batch(self, S, A) -> tuple[np.ndarray, np.ndarray]:
        """Stacked Jacobians for rows of ``S`` (K, n) and ``A`` (K, m)."""
        pairs = [self.jacobians(s, a) for s, a in zip(S, A)]
        if not pairs:
            return (np.zeros((0, self.state_dim, self.state_dim)),
                    np.zeros((0, self.state_dim, self.action_dim)))
        return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])

    def jac_state(self, s, a) -> np.ndarray:
        return self.jacobians(s, a)[0]

    def jac_action(self, s, a) -> np.ndarray:
        return self.jacobians(s, a)[1]


@dataclass(frozen=True)
class DoubleIntegratorParams:
    dt: float = 0.1
    alpha: float = 1.0

    def __post_init__(self):
        if not self.dt > 0 or not self.alpha > 0:
            raise ValueError(f"dt and alpha must be positive, got dt={self.dt}, alpha={self.alpha}")


class DoubleIntegrator(Dynamics):
    """Planar point mass, state ``[x, y, vx, vy]`` and force input ``[ux, uy]``."""

    tag = "analytic"
    state_dim = 4
    action_dim = 2

    def __init__(self, params: DoubleIntegratorParams | None = None):
        self.params = params or DoubleIntegratorParams()
        dt, alpha = self.params.dt, self.params.alpha
        self.A = np.array([[1.0, 0.0, dt, 0.0],
                           [0.0, 1.0, 0.0, dt],
                           [0.0, 0.0, 1.0, 0.0],
                           [0.0, 0.0, 0.0, 1.0]])
        self.B = np.array([[0.5 * alpha * dt**2, 0.0],
                           [0.0, 0.5 * alpha * dt**2],
                           [alpha * dt, 0.0],
                           [0.0, alpha * dt]])

    def step(self, s, a) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        a = np.asarray(a, dtype=float)
        return s @ self.A.T + a @ self.B.T

    def jacobians(self, s=None, a=None):
        return self.A.copy(), self.B.copy()

    def jacobians_batch(self, S, A):
        k = len(S)
        return np.broadcast_to(self.A, (k, 4, 4)), np.broadcast_to(self.B, (k, 4, 2))

    def __repr__(self):
        return f"DoubleIntegrator(dt={self.params.dt}, alpha={self.params.alpha})"


def double_integrator_step(s, a, p: DoubleIntegratorParams | None = None) -> np.ndarray:
    return DoubleIntegrator(p).step(s, a)


def jacobians(model: Dynamics, s, a) -> tuple[np.ndarray, np.ndarray]:
    return model.jacobians(s, a)


class ForwardModel(Dynamics):
    """Learned transition model: an :class:`MLP` from ``[s, a]`` to ``s'``."""

    tag = "learned"

    def __init__(self, net: MLP, state_dim: int, action_dim: int):
        if net.sizes[0] != state_dim + action_dim or net.sizes[-1] != state_dim:
            raise ValueError(f"network sizes {net.sizes} inconsistent with n={state_dim}, m={action_dim}")
        self.net = net
        self.state_dim = state_dim
        self.action_dim = action_dim

    def step(self, s, a) -> np.ndarray:
        x = np.concatenate([np.asarray(s, dtype=float), np.asarray(a, dtype=float)], axis=-1)
        return self.net(x)

    def jacobians(self, s, a):
        x = np.concatenate([np.asarray(s, dtype=float).reshape(-1), np.asarray(a, dtype=float).reshape(-1)])
        jac = self.net.input_jacobian(x)
        return jac[:, : self.state_dim], jac[:, self.state_dim :]

    def jacobians_batch(self, S, A):
        # Batched forward-mode through the layers: J has shape (K, width, n+m).
        act, dact, _ = ACTIVATIONS[self.net.activation]
        h = np.concatenate([np.asarray(S, dtype=float), np.asarray(A, dtype=float)], axis=1)
        jac = None
        last = len(self.net.weights) - 1
        for i, (w, b) in enumerate(zip(self.net.weights, self.net.biases)):
            z = h @ w + b
            jac = np.broadcast_to(w.T, (len(h),) + w.T.shape) if jac is None else np.einsum("oi,kij->koj", w.T, jac)
            if i != last:
                jac = dact(z)[:, :, None] * jac
                h = act(z)
        jac = np.asarray(jac)
        return jac[:, :, : self.state_dim], jac[:, :, self.state_dim :]

    def save(self, path) -> None:
        self.net.save(path, extra={"kind": "forward_model", "state_dim": self.state_dim,
                                   "action_dim": self.action_dim,
                                   "nonlinearity": self.net.activation,
                                   "layer_sizes": self.net.sizes})

    @classmethod
    def load(cls, path) -> "ForwardModel":
        net, meta = MLP.load(path)
        if meta.get("kind") != "forward_model":
            raise ValueError(f"{path}: not a forward-model checkpoint")
        return cls(net, int(meta["state_dim"]), int(meta["action_dim"]))


@dataclass
class ForwardTrainConfig:
    hidden: tuple = (512, 512, 512)
    activation: str = "tanh"
    optimizer: str = "adam"
    lr: float = 1e-3
    batch_size: int = 256
    epochs: int = 50
    holdout: float = 0.1
    seed: int = 0
    lr_decay: float = 1.0  # multiplicative learning-rate factor applied after every epoch
    # relative increase of the epoch loss tolerated before flagging non-monotone training
    monotone_tol: float = 0.5


@dataclass
class ForwardFitReport:
    holdout_mse: float
    zeta: float
    loss_history: list = field(default_factory=list)
    monotone: bool = True


def fit_forward_model(transitions, config: ForwardTrainConfig | None = None) -> tuple[ForwardModel, ForwardFitReport]:
    """Fit a forward model on ``(S, A, S_next)`` arrays.

    ``zeta`` in the report is the 99th percentile of held-out one-step residual
    norms (a heuristic bound; the maximum is too outlier-sensitive).
    """
    cfg = config or ForwardTrainConfig()
    S, A, S1 = (np.asarray(x, dtype=float) for x in transitions)
    if S.ndim != 2 or len(S) == 0:
        raise ValueError("transition set is empty")
    if not (len(S) == len(A) == len(S1)) or S1.shape[1] != S.shape[1]:
        raise ValueError(f"dimension mismatch: S{S.shape}, A{A.shape}, S'{S1.shape}")
    n, m = S.shape[1], A.shape[1]
    rng = np.random.default_rng(cfg.seed)
    X = np.concatenate([S, A], axis=1)
    order = rng.permutation(len(X))
    n_hold = int(round(cfg.holdout * len(X))) if len(X) > 1 else 0
    hold, train = order[:n_hold], order[n_hold:]
    if train.size == 0:
        train = order
    net = MLP([n + m, *cfg.hidden, n], cfg.activation, rng=rng)
    opt = make_optimizer(cfg.optimizer, cfg.lr)
    history = []
    for epoch in range(cfg.epochs):
        perm = rng.permutation(train)
        total = 0.0
        for start in range(0, len(perm), cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            out, cache = net.forward(X[idx], keep=True)
            err = out - S1[idx]
            loss = float(np.mean(np.sum(err * err, axis=1)))
            if not np.isfinite(loss):
                raise TrainingDiverged(f"forward-model loss became {loss} at epoch {epoch}")
            grads, _ = net.backward(cache, 2.0 * err / len(idx))
            opt.step(net.params, grads)
            total += loss * len(idx)
        history.append(total / len(perm))
        opt.lr *= cfg.lr_decay
        log.debug("forward model epoch %d loss %.3e", epoch, history[-1])
    eval_idx = hold if hold.size else train
    resid = net(X[eval_idx]) - S1[eval_idx]
    mse = float(np.mean(resid**2))
    zeta = float(np.percentile(np.linalg.norm(resid, axis=1), 99))
    monotone = all(b <= a * (1.0 + cfg.monotone_tol) for a, b in zip(history, history[1:]))
    return ForwardModel(net, n, m), ForwardFitReport(mse, zeta, history, monotone)


@dataclass(frozen=True)
class LipschitzEstimates:
    L_f: float
    zeta: float
    xi: float
    horizon_index: int = 0

    def xi_at(self, k: int) -> float:
        return propagated_bound(self.zeta, self.L_f, k)


def propagated_bound(zeta: float, L_f: float, k: int) -> float:
    """``zeta * sum_{i<k} L_f**i``: worst-case drift after ``k`` model steps."""
    if zeta < 0 or L_f < 0:
        raise ValueError("zeta and L_f must be nonnegative")
    if k <= 0 or zeta == 0.0:
        return 0.0
    if abs(L_f - 1.0) < 1e-12:
        return zeta * k
    return zeta * ((L_f**k - 1.0) / (L_f - 1.0))


def estimate_lipschitz(net, zeta: float = 0.0, k: int = 0, state_only: bool = False,
                       state_dim: int | None = None) -> LipschitzEstimates:
    """Product-of-spectral-norms Lipschitz bound for a network.

    With ``state_only`` the first layer is restricted to its state columns,
    bounding the sensitivity to the state at fixed action (the quantity the
    error-propagation bound needs).
    """
    if isinstance(net, ForwardModel):
        state_dim = net.state_dim
        net = net.net
    cols = None
    if state_only:
        if state_dim is None:
            raise ValueError("state_only needs state_dim")
        cols = np.arange(state_dim)
    norms = net.spectral_norms(input_columns=cols)
    L = float(np.prod(norms)) * net.activation_lipschitz() ** (len(norms) - 1)
    return LipschitzEstimates(L, float(zeta), propagated_bound(float(zeta), L, k), k)


def transitions_from_trajectories(layout, trajectories) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    S, A, S1 = [], [], []
    for tau in trajectories:
        values = getattr(tau, "values", tau)
        states, actions = layout.split(values)
        S.append(states[:-1])
        A.append(actions[:-1])
        S1.append(states[1:])
    return np.concatenate(S), np.concatenate(A), np.concatenate(S1)


def load_dynamics(spec: dict | str | Path | None) -> Dynamics:
    """Build a model from a config entry: ``{"kind": "double_integrator", "dt": .., "alpha": ..}``
    or ``{"kind": "learned", "path": ...}``."""
    if spec is None:
        return DoubleIntegrator()
    if isinstance(spec, (str, Path)):
        return ForwardModel.load(spec)
    kind = spec.get("kind", "double_integrator")
    if kind == "double_integrator":
        return DoubleIntegrator(DoubleIntegratorParams(float(spec.get("dt", 0.1)), float(spec.get("alpha", 1.0))))
    if kind == "learned":
        return ForwardModel.load(spec["path"])
    raise ValueError(f"unknown dynamics kind {kind!r}")
