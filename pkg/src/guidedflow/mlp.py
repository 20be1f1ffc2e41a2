"""Small feedforward network with hand-written backpropagation.

Both the learned velocity field and the learned forward model are built on
:class:`MLP`.  Only smooth activations are offered so input Jacobians exist
everywhere.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

PARAM_MAGIC = b"GFPARAM1"


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _silu(x):
    return x * _sigmoid(x)


def _silu_grad(x):
    s = _sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def _tanh_grad(x):
    y = np.tanh(x)
    return 1.0 - y * y


ACTIVATIONS = {
    "silu": (_silu, _silu_grad, 1.1),
    "tanh": (np.tanh, _tanh_grad, 1.0),
}


class MLP:
    """Dense network ``sizes[0] -> ... -> sizes[-1]`` with a smooth activation
    between layers and a linear output layer.

    Weights are stored as ``(fan_in, fan_out)`` so a batch ``x`` of shape
    ``(B, fan_in)`` maps through ``x @ W + b``.
    """

    def __init__(self, sizes, activation="silu", rng=None, weights=None, biases=None):
        self.sizes = [int(s) for s in sizes]
        if len(self.sizes) < 2 or min(self.sizes) < 1:
            raise ValueError(f"invalid layer sizes {sizes}")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}; choose from {sorted(ACTIVATIONS)}")
        self.activation = activation
        if weights is None:
            rng = np.random.default_rng(0) if rng is None else rng
            weights, biases = [], []
            for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
                weights.append(rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out)))
                biases.append(np.zeros(fan_out))
        self.weights = [np.asarray(w, dtype=float) for w in weights]
        self.biases = [np.asarray(b, dtype=float) for b in biases]
        for w, b, fi, fo in zip(self.weights, self.biases, self.sizes[:-1], self.sizes[1:]):
            if w.shape != (fi, fo) or b.shape != (fo,):
                raise ValueError("parameter shapes do not match layer sizes")

    @property
    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params)

    def copy(self) -> "MLP":
        return MLP(self.sizes, self.activation,
                   weights=[w.copy() for w in self.weights],
                   biases=[b.copy() for b in self.biases])

    def forward(self, x: np.ndarray, keep: bool = False):
        act, _, _ = ACTIVATIONS[self.activation]
        h = np.asarray(x, dtype=float)
        cache = []
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            if keep:
                cache.append((h, z))
            h = z if i == last else act(z)
        return (h, cache) if keep else h

    __call__ = forward

    def backward(self, cache, grad_out: np.ndarray):
        """Return ``(param_grads, grad_input)`` given dLoss/dOutput."""
        _, dact, _ = ACTIVATIONS[self.activation]
        grads: list[np.ndarray] = []
        g = grad_out
        for i in range(len(self.weights) - 1, -1, -1):
            h_in, z = cache[i]
            if i != len(self.weights) - 1:
                g = g * dact(z)
            grads = [h_in.T @ g, g.sum(axis=0)] + grads
            g = g @ self.weights[i].T
        return grads, g

    def input_jacobian(self, x: np.ndarray) -> np.ndarray:
        """Jacobian d out / d x at a single input, shape (out_dim, in_dim)."""
        _, dact, _ = ACTIVATIONS[self.activation]
        h = np.asarray(x, dtype=float).reshape(-1)
        jac = np.eye(h.size)
        act = ACTIVATIONS[self.activation][0]
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            jac = w.T @ jac
            if i != last:
                jac = dact(z)[:, None] * jac
                h = act(z)
        return jac

    def spectral_norms(self, iters: int = 1000, tol: float = 1e-12, input_columns=None) -> list[float]:
        """Power-iteration spectral norm of every weight matrix.

        ``input_columns`` restricts the first layer to a subset of inputs, which
        bounds the Lipschitz constant with respect to those inputs only.
        """
        norms = []
        for i, w in enumerate(self.weights):
            mat = w.T
            if i == 0 and input_columns is not None:
                mat = mat[:, input_columns]
            norms.append(power_iteration_norm(mat, iters=iters, tol=tol))
        return norms

    def activation_lipschitz(self) -> float:
        return ACTIVATIONS[self.activation][2]

    # -- serialization -------------------------------------------------
    def flat_params(self) -> np.ndarray:
        return np.concatenate([p.reshape(-1) for p in self.params])

    def set_flat_params(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=float).reshape(-1)
        if flat.size != self.n_params:
            raise ValueError(f"expected {self.n_params} parameters, got {flat.size}")
        pos = 0
        for p in self.params:
            p[...] = flat[pos : pos + p.size].reshape(p.shape)
            pos += p.size

    def architecture(self) -> dict:
        return {"sizes": self.sizes, "activation": self.activation}

    def save(self, path, extra: dict | None = None) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        flat = self.flat_params().astype("<f8")
        with open(path, "wb") as fh:
            fh.write(PARAM_MAGIC)
            fh.write(np.array([flat.size], dtype="<u8").tobytes())
            fh.write(flat.tobytes())
        meta = {"architecture": self.architecture(), **(extra or {})}
        sidecar(path).write_text(json.dumps(meta, indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> tuple["MLP", dict]:
        path = Path(path)
        meta = json.loads(sidecar(path).read_text())
        arch = meta["architecture"]
        net = cls(arch["sizes"], arch["activation"])
        net.set_flat_params(read_param_file(path, net.n_params))
        return net, meta


def sidecar(path) -> Path:
    path = Path(path)
    return path.with_suffix(path.suffix + ".json")


def read_param_file(path, expected: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[: len(PARAM_MAGIC)] != PARAM_MAGIC:
        raise ValueError(f"{path}: not a parameter file (bad magic)")
    count = int(np.frombuffer(raw[8:16], dtype="<u8")[0])
    if count != expected:
        raise ValueError(f"{path}: holds {count} parameters, architecture needs {expected}")
    body = raw[16:]
    if len(body) != 8 * count:
        raise ValueError(f"{path}: truncated parameter file")
    return np.frombuffer(body, dtype="<f8").astype(float)


def power_iteration_norm(mat: np.ndarray, iters: int = 1000, tol: float = 1e-12) -> float:
    """Largest singular value of ``mat`` by power iteration on ``mat.T @ mat``."""
    mat = np.asarray(mat, dtype=float)
    if mat.size == 0:
        return 0.0
    v = np.random.default_rng(0).standard_normal(mat.shape[1])
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(iters):
        w = mat.T @ (mat @ v)
        nrm = np.linalg.norm(w)
        if nrm == 0.0:
            return 0.0
        v = w / nrm
        new = np.sqrt(nrm)
        if abs(new - sigma) <= tol * max(new, 1.0):
            sigma = new
            break
        sigma = new
    # Power iteration approaches from below; converged to within tol of the true norm.
    est = float(np.linalg.norm(mat @ v))
    return max(est, sigma)


@dataclass
class Adam:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        self._m = None
        self._v = None
        self._t = 0

    def step(self, params, grads) -> None:
        if self._m is None:
            self._m = [np.zeros_like(p) for p in params]
            self._v = [np.zeros_like(p) for p in params]
        self._t += 1
        c1 = 1.0 - self.beta1 ** self._t
        c2 = 1.0 - self.beta2 ** self._t
        for p, g, m, v in zip(params, grads, self._m, self._v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class SGDMomentum:
    lr: float = 2e-4
    momentum: float = 0.9

    def __post_init__(self):
        self._buf = None

    def step(self, params, grads) -> None:
        if self._buf is None:
            self._buf = [np.zeros_like(p) for p in params]
        for p, g, b in zip(params, grads, self._buf):
            b *= self.momentum
            b += g
            p -= self.lr * b


def make_optimizer(name: str, lr: float):
    if name == "adam":
        return Adam(lr=lr)
    if name in ("sgd", "sgd_momentum"):
        return SGDMomentum(lr=lr)
    raise ValueError(f"unknown optimizer {name!r}")
