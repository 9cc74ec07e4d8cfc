"""Inverse autoregressive flow over strictly positive material parameters.

``u ~ N(0, I)`` passes through ``n_T`` affine autoregressive layers
``z <- l(z) + sigmoid(s(z)) * z`` (each a :class:`MadeNetwork`), with the
component order reversed between layers.  The result is shifted by a
fixed offset, clamped to ``[-30, 30]`` and exponentiated, so every sample
is positive.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .diffnum import MadeNetwork, Var, as_var, diagnostics, load_tensors, save_tensors
from .diffnum.autodiff import _sigmoid, _softplus

__all__ = ["FlowModel", "FlowError", "LOG_CLAMP"]

LOG_CLAMP = (-30.0, 30.0)


class FlowError(ValueError):
    pass


def _log_sigmoid(x):
    return -_softplus(-x)


class FlowModel:
    def __init__(
        self,
        n_kappa: int,
        n_layers: int = 16,
        hidden=None,
        seed: int = 0,
        init_log_kappa=0.0,
        clamp=LOG_CLAMP,
        init_log_std: float | None = None,
    ):
        """``init_log_std`` sets the scale biases so the initial flow has that
        standard deviation in log space; by default every layer halves it."""
        if n_kappa < 1 or n_layers < 0:
            raise FlowError("need n_kappa >= 1 and n_layers >= 0")
        if init_log_std is not None and not 0 < init_log_std < 1:
            raise FlowError("init_log_std must lie in (0, 1)")
        self.n_kappa = int(n_kappa)
        self.n_layers = int(n_layers)
        self.seed = int(seed)
        self.clamp = (float(clamp[0]), float(clamp[1]))
        self.offset = np.broadcast_to(np.asarray(init_log_kappa, dtype=float), (self.n_kappa,)).copy()
        seeds = np.random.SeedSequence(seed).spawn(max(self.n_layers, 1))
        self.layers = [
            MadeNetwork(self.n_kappa, hidden, seed=int(s.generate_state(1)[0])) for s in seeds[: self.n_layers]
        ]
        self.hidden = self.layers[0].hidden if self.layers else ([] if hidden is None else list(hidden))
        if init_log_std is not None and self.layers:
            per_layer = init_log_std ** (1.0 / self.n_layers)
            for layer in self.layers:
                layer.biases[-1].value[self.n_kappa :] = np.log(per_layer / (1.0 - per_layer))
        # reversal before every layer but the first; undone at the end if odd
        self.reverse_at_end = (max(self.n_layers - 1, 0)) % 2 == 1

    @property
    def params(self) -> list[Var]:
        return [p for layer in self.layers for p in layer.params]

    # -- single layer ---------------------------------------------------
    def layer_forward(self, k: int, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Output of layer ``k`` and the per-component log scales."""
        loc, s = self.layers[k].numpy_forward(z)
        return loc + _sigmoid(s) * z, _log_sigmoid(s)

    def jacobian_logdet(self, k: int, z) -> np.ndarray:
        """``sum_i log sigmoid(s_i)`` of layer ``k`` at each row of ``z``."""
        z = np.atleast_2d(np.asarray(z, dtype=float))
        return self.layer_forward(k, z)[1].sum(axis=1)

    def layer_inverse(self, k: int, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Invert layer ``k`` one component at a time; returns ``(z, logdet)``."""
        z = np.zeros_like(y)
        for i in range(self.n_kappa):
            loc, s = self.layers[k].numpy_forward(z)
            z[:, i] = (y[:, i] - loc[:, i]) / _sigmoid(s[:, i])
        _, s = self.layers[k].numpy_forward(z)
        return z, _log_sigmoid(s).sum(axis=1)

    # -- whole flow -----------------------------------------------------
    def _transform(self, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        z, logdet = u, np.zeros(len(u))
        for k in range(self.n_layers):
            if k > 0:
                z = z[:, ::-1]
            z, ls = self.layer_forward(k, z)
            logdet = logdet + ls.sum(axis=1)
        if self.reverse_at_end:
            z = z[:, ::-1]
        return z + self.offset, logdet

    def log_kappa_var(self, u) -> Var:
        """Differentiable pre-exponential output ``log kappa`` (clamped)."""
        z = as_var(u)
        rev = np.arange(self.n_kappa)[::-1]
        for k, layer in enumerate(self.layers):
            if k > 0:
                z = z[:, rev]
            loc, s = layer.forward(z)
            z = loc + s.sigmoid() * z
        if self.reverse_at_end:
            z = z[:, rev]
        return (z + self.offset).clamp_straight_through(*self.clamp)

    def kappa_var(self, u) -> Var:
        return self.log_kappa_var(u).exp()

    def sample(self, count: int, rng) -> tuple[np.ndarray, np.ndarray]:
        """``(kappa (count, n_kappa), log density (count,))``."""
        rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        u = rng.standard_normal((int(count), self.n_kappa))
        return self.transform(u)

    def transform(self, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        u = np.atleast_2d(np.asarray(u, dtype=float))
        x, logdet = self._transform(u)
        lo, hi = self.clamp
        n = int(np.count_nonzero((x < lo) | (x > hi)))
        if n:
            diagnostics["clamped"] += n
        x = np.clip(x, lo, hi)
        log_base = -0.5 * (u * u).sum(axis=1) - 0.5 * self.n_kappa * np.log(2.0 * np.pi)
        return np.exp(x), log_base - logdet - x.sum(axis=1)

    def inverse(self, kappa) -> tuple[np.ndarray, np.ndarray]:
        """Base point ``u`` and total log-det of the affine layers."""
        kappa = np.atleast_2d(np.asarray(kappa, dtype=float))
        if kappa.shape[1] != self.n_kappa:
            raise FlowError(f"kappa must have {self.n_kappa} columns")
        if np.any(kappa <= 0) or not np.all(np.isfinite(kappa)):
            raise FlowError("kappa must be strictly positive and finite")
        z = np.log(kappa) - self.offset
        if self.reverse_at_end:
            z = z[:, ::-1]
        logdet = np.zeros(len(z))
        for k in reversed(range(self.n_layers)):
            z, ld = self.layer_inverse(k, z)
            logdet += ld
            if k > 0:
                z = z[:, ::-1]
        return z, logdet

    def log_density(self, kappa) -> np.ndarray:
        kappa = np.atleast_2d(np.asarray(kappa, dtype=float))
        u, logdet = self.inverse(kappa)
        log_base = -0.5 * (u * u).sum(axis=1) - 0.5 * self.n_kappa * np.log(2.0 * np.pi)
        return log_base - logdet - np.log(kappa).sum(axis=1)

    # -- persistence ----------------------------------------------------
    def state(self) -> dict[str, np.ndarray]:
        out = {}
        for k, layer in enumerate(self.layers):
            for p in layer.params:
                out[f"layer{k}.{p.name}"] = p.value.copy()
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, layer in enumerate(self.layers):
            for p in layer.params:
                p.value = np.array(state[f"layer{k}.{p.name}"], dtype=float)

    def metadata(self) -> dict:
        return {
            "n_kappa": self.n_kappa,
            "n_layers": self.n_layers,
            "hidden": list(self.hidden),
            "permutation": "reverse",
            "clamp": list(self.clamp),
            "offset": self.offset.tolist(),
            "seed": self.seed,
        }

    def save(self, path, extra: dict | None = None) -> Path:
        meta = self.metadata()
        meta.update(extra or {})
        return save_tensors(path, self.state(), meta)

    @classmethod
    def load(cls, path) -> "FlowModel":
        tensors, meta = load_tensors(path)
        flow = cls(meta["n_kappa"], meta["n_layers"], meta["hidden"], meta["seed"], meta["offset"], meta["clamp"])
        flow.load_state(tensors)
        return flow
