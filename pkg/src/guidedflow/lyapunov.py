"""Dynamic-consistency Lyapunov function ``V = 1/2 sum_k |s(k+1) - f(s(k), a(k))|^2``."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .trajectory import FlatTrajectory, TrajectoryLayout


def _unpack(tau, layout):
    if isinstance(tau, FlatTrajectory):
        return tau.values, tau.layout
    if layout is None:
        raise ValueError("a raw vector needs an explicit layout")
    return np.asarray(tau, dtype=float), layout


def _check(layout: TrajectoryLayout, model) -> None:
    if (layout.state_dim, layout.action_dim) != (model.state_dim, model.action_dim):
        raise ValueError(f"layout {layout} does not match dynamics dimensions "
                         f"n={model.state_dim}, m={model.action_dim}")


def residuals(tau, model, layout: TrajectoryLayout | None = None) -> np.ndarray:
    """``l_k = s(k+1) - f(s(k), a(k))`` for ``k = 0..H-2``, shape (H-1, n)."""
    values, layout = _unpack(tau, layout)
    _check(layout, model)
    states, actions = layout.split(values)
    if layout.horizon < 2:
        return np.zeros((0, layout.state_dim))
    return states[1:] - model.step(states[:-1], actions[:-1])


def lyapunov_value(tau, model, layout: TrajectoryLayout | None = None) -> float:
    res = residuals(tau, model, layout)
    return 0.5 * float(np.sum(res * res))


def value_and_gradient(tau, model, layout: TrajectoryLayout | None = None) -> tuple[float, np.ndarray]:
    """``V`` and its exact gradient over the flat vector.

    Block ``s(k)`` collects ``l_{k-1} - (df/ds)^T l_k``, block ``a(k)`` collects
    ``-(df/da)^T l_k``; the terms are absent where the index runs off the
    horizon, so the ``a(H-1)`` block is always zero.
    """
    values, layout = _unpack(tau, layout)
    _check(layout, model)
    n, H = layout.state_dim, layout.horizon
    grad = np.zeros(layout.size)
    if H < 2:
        return 0.0, grad
    states, actions = layout.split(values)
    res = states[1:] - model.step(states[:-1], actions[:-1])
    Js, Ja = model.jacobians_batch(states[:-1], actions[:-1])
    gs = np.zeros((H, n))
    gs[1:] += res
    gs[:-1] -= np.einsum("kij,ki->kj", Js, res)
    ga = np.zeros((H, layout.action_dim))
    ga[:-1] = -np.einsum("kij,ki->kj", Ja, res)
    grad[:] = layout.join(gs, ga)
    return 0.5 * float(np.sum(res * res)), grad


def lyapunov_gradient(tau, model, layout: TrajectoryLayout | None = None) -> np.ndarray:
    return value_and_gradient(tau, model, layout)[1]


@dataclass(frozen=True)
class RankCheck:
    ok: bool
    state_singular_values: np.ndarray
    action_singular_values: np.ndarray
    state_nonsingular: bool
    action_full_rank: bool

    def __bool__(self) -> bool:
        return self.ok


def rank_condition_check(model, s, a, rel_tol: float = 1e-8) -> RankCheck:
    """True when ``df/ds`` is nonsingular or ``df/da`` has full rank ``min(n, m)``.

    Singular values below ``rel_tol`` times the largest singular value of the
    respective Jacobian count as zero.  With both Jacobians identically zero
    the check fails.
    """
    Js, Ja = model.jacobians(s, a)
    sv_s = np.linalg.svd(np.atleast_2d(Js), compute_uv=False)
    sv_a = np.linalg.svd(np.atleast_2d(Ja), compute_uv=False)

    def rank(sv):
        top = sv.max() if sv.size else 0.0
        return int(np.sum(sv > rel_tol * top)) if top > 0 else 0

    state_ok = rank(sv_s) == Js.shape[0]
    action_ok = rank(sv_a) == min(Ja.shape)
    return RankCheck(state_ok or action_ok, sv_s, sv_a, state_ok, action_ok)
