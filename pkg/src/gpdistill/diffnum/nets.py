"""Dense and masked (MADE) feedforward networks on the autodiff tape."""

from __future__ import annotations

import numpy as np

from .autodiff import Var, _softplus, as_var, sqrt_safe

__all__ = ["DenseNetwork", "MadeNetwork", "made_degrees", "made_masks", "glorot_uniform"]


def glorot_uniform(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_out, fan_in))


def _act(z: Var, kind: str) -> Var:
    if kind == "softplus":
        return z.softplus()
    if kind == "tanh":
        return z.tanh()
    raise ValueError(f"unsupported activation {kind!r}")


def _act_prime(z: Var, kind: str) -> Var:
    # built from tape ops so it can be differentiated again
    if kind == "softplus":
        return z.sigmoid()
    if kind == "tanh":
        t = z.tanh()
        return 1.0 - t * t
    raise ValueError(f"unsupported activation {kind!r}")


class DenseNetwork:
    """Fully connected scalar-output network ``R^n -> R``.

    Hidden layers can be spectrally normalized: the effective weight is
    ``W / sigma`` with ``sigma = u^T W v`` estimated by power iteration
    (``u`` persists across calls and is treated as a constant).
    """

    def __init__(self, sizes, activation="softplus", spectral_norm=True, seed=0, init_power_iterations=10):
        self.sizes = [int(s) for s in sizes]
        if len(self.sizes) < 2:
            raise ValueError("need at least input and output size")
        self.activation = activation
        self.spectral_norm = spectral_norm
        rng = np.random.default_rng(seed)
        self.weights, self.biases = [], []
        for l, (n_in, n_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            self.weights.append(Var(glorot_uniform(rng, n_out, n_in), requires_grad=True, name=f"W{l}"))
            self.biases.append(Var(np.zeros(n_out), requires_grad=True, name=f"b{l}"))
        self._u = [self._unit(rng.standard_normal(n)) for n in self.sizes[1:-1]]
        if spectral_norm:
            self.power_iteration(init_power_iterations)

    @staticmethod
    def _unit(x):
        return x / max(np.linalg.norm(x), 1e-12)

    @property
    def params(self) -> list[Var]:
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    @property
    def n_hidden(self) -> int:
        return len(self.sizes) - 2

    def power_iteration(self, n: int = 1) -> None:
        if not self.spectral_norm:
            return
        for l in range(self.n_hidden):
            W = self.weights[l].value
            u = self._u[l]
            for _ in range(n):
                v = self._unit(W.T @ u)
                u = self._unit(W @ v)
            self._u[l] = u

    def _sigma(self, l: int) -> Var:
        W = self.weights[l]
        u = self._u[l]
        v = self._unit(W.value.T @ u)
        return (W * np.outer(u, v)).sum()

    def effective_weights(self) -> list[Var]:
        out = []
        for l, W in enumerate(self.weights):
            if self.spectral_norm and l < self.n_hidden:
                out.append(W / self._sigma(l))
            else:
                out.append(W)
        return out

    def _forward(self, x):
        x = as_var(x)
        Ws = self.effective_weights()
        h, zs = x, []
        for l in range(self.n_hidden):
            z = h @ Ws[l].T + self.biases[l]
            zs.append(z)
            h = _act(z, self.activation)
        out = h @ Ws[-1].T + self.biases[-1]
        return out[:, 0], zs, Ws

    def forward(self, x) -> Var:
        """Batch forward ``(B, n) -> (B,)``."""
        return self._forward(x)[0]

    __call__ = forward

    def input_gradient(self, x) -> Var:
        """``d f / d x`` per row, ``(B, n)``, as a differentiable graph."""
        x = as_var(x)
        _, zs, Ws = self._forward(x)
        B = x.shape[0]
        g = as_var(np.ones((B, 1))) @ Ws[-1]
        for l in reversed(range(self.n_hidden)):
            g = (g * _act_prime(zs[l], self.activation)) @ Ws[l]
        return g

    def gradient_penalty(self, x, one_sided: bool = False) -> tuple[Var, np.ndarray]:
        """Mean of ``(||grad_x f|| - 1)^2`` and the per-row norms.

        ``one_sided`` penalises only norms above 1, ``max(0, ||grad|| - 1)^2``.
        """
        g = self.input_gradient(x)
        norms = sqrt_safe((g * g).sum(axis=1))
        excess = -((1.0 - norms).minimum(0.0)) if one_sided else norms - 1.0
        return (excess**2).mean(), norms.value

    def numpy_forward(self, x: np.ndarray) -> np.ndarray:
        """Tape-free forward pass."""
        h = np.asarray(x, dtype=float)
        for l, W in enumerate(self.weights):
            Wv = W.value
            if self.spectral_norm and l < self.n_hidden:
                u = self._u[l]
                v = self._unit(Wv.T @ u)
                Wv = Wv / float(u @ Wv @ v)
            h = h @ Wv.T + self.biases[l].value
            if l < self.n_hidden:
                h = _softplus(h) if self.activation == "softplus" else np.tanh(h)
        return h[:, 0]

    def state(self) -> dict[str, np.ndarray]:
        out = {p.name: p.value.copy() for p in self.params}
        for l, u in enumerate(self._u):
            out[f"u{l}"] = u.copy()
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for p in self.params:
            p.value = np.array(state[p.name], dtype=float)
        for l in range(len(self._u)):
            self._u[l] = np.array(state[f"u{l}"], dtype=float)


def made_degrees(n_in: int, hidden: list[int]) -> list[np.ndarray]:
    """Degrees for input, hidden and output units.

    Inputs get 1..n, hidden units round-robin over 1..n-1 (0 when n = 1),
    outputs 1..n repeated for the (location, scale) halves.
    """
    degs = [np.arange(1, n_in + 1)]
    for h in hidden:
        if n_in > 1:
            degs.append(np.arange(h) % (n_in - 1) + 1)
        else:
            degs.append(np.zeros(h, dtype=int))
    degs.append(np.tile(np.arange(1, n_in + 1), 2))
    return degs


def made_masks(degrees: list[np.ndarray]) -> list[np.ndarray]:
    """``M[u, v] = m_out(u) >= m_in(v)``; strict ``>`` for the output layer."""
    masks = []
    for l in range(1, len(degrees)):
        out, inp = degrees[l][:, None], degrees[l - 1][None, :]
        strict = l == len(degrees) - 1
        masks.append((out > inp if strict else out >= inp).astype(float))
    return masks


class MadeNetwork:
    """Masked autoencoder producing ``(location, unconstrained scale)``."""

    def __init__(self, n_in: int, hidden=None, activation="tanh", seed=0, zero_final=True):
        self.n_in = int(n_in)
        self.hidden = [4 * self.n_in] if hidden is None else [int(h) for h in hidden]
        self.activation = activation
        self.degrees = made_degrees(self.n_in, self.hidden)
        self.masks = made_masks(self.degrees)
        rng = np.random.default_rng(seed)
        sizes = [self.n_in] + self.hidden + [2 * self.n_in]
        self.weights, self.biases = [], []
        for l, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = l == len(sizes) - 2
            W = np.zeros((b, a)) if (last and zero_final) else glorot_uniform(rng, b, a)
            self.weights.append(Var(W, requires_grad=True, name=f"W{l}"))
            self.biases.append(Var(np.zeros(b), requires_grad=True, name=f"b{l}"))

    @property
    def params(self) -> list[Var]:
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def forward(self, z) -> tuple[Var, Var]:
        h = as_var(z)
        n_layers = len(self.weights)
        for l in range(n_layers):
            h = h @ (self.weights[l] * self.masks[l]).T + self.biases[l]
            if l < n_layers - 1:
                h = _act(h, self.activation)
        return h[:, : self.n_in], h[:, self.n_in :]

    def numpy_forward(self, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        h = np.asarray(z, dtype=float)
        n_layers = len(self.weights)
        for l in range(n_layers):
            h = h @ (self.weights[l].value * self.masks[l]).T + self.biases[l].value
            if l < n_layers - 1:
                h = np.tanh(h) if self.activation == "tanh" else _softplus(h)
        return h[:, : self.n_in], h[:, self.n_in :]
