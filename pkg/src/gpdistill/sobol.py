"""Total-order Sobol' indices of stacked stresses and library reduction."""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import qmc

from .dataset import FunctionGrid
from .mechanics import ModelLibrary

__all__ = [
    "SobolError",
    "SobolReport",
    "saltelli_samples",
    "split_saltelli",
    "total_order_index",
    "deformation_resolved_indices",
    "average_indices",
    "reduce_library",
]


class SobolError(ValueError):
    pass


def _check_bounds(bounds) -> np.ndarray:
    b = np.atleast_2d(np.asarray(bounds, dtype=float))
    if b.ndim != 2 or b.shape[1] != 2:
        raise SobolError("bounds must be (n, 2)")
    if not np.all(np.isfinite(b)) or np.any(b[:, 1] <= b[:, 0]):
        raise SobolError(f"degenerate bounds: {b.tolist()}")
    return b


def _base_matrices(bounds: np.ndarray, N: int, seed) -> tuple[np.ndarray, np.ndarray]:
    n = len(bounds)
    sampler = qmc.Sobol(d=2 * n, scramble=True, seed=seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)  # balance warning for N not a power of 2
        U = sampler.random(N)
    X = bounds[:, 0] + U.reshape(N, 2, n) * (bounds[:, 1] - bounds[:, 0])
    return X[:, 0, :], X[:, 1, :]


def saltelli_samples(bounds, N: int, seed=0) -> np.ndarray:
    """Rows ``[A; B; A_B^(1); ...; A_B^(n)]``, ``N (n + 2)`` in total.

    ``A_B^(i)`` is ``A`` with column ``i`` taken from ``B``.  ``A`` and ``B``
    come from one scrambled Sobol' sequence of dimension ``2 n``.
    """
    b = _check_bounds(bounds)
    N = int(N)
    if N < 1:
        raise SobolError("N must be positive")
    A, B = _base_matrices(b, N, seed)
    blocks = [A, B]
    for i in range(len(b)):
        AB = A.copy()
        AB[:, i] = B[:, i]
        blocks.append(AB)
    return np.concatenate(blocks)


def split_saltelli(values, N: int, n: int):
    """Split evaluations of a Saltelli matrix into ``(fA, fB, fAB)``."""
    v = np.asarray(values, dtype=float)
    if v.shape[0] != N * (n + 2):
        raise SobolError(f"expected {N * (n + 2)} rows, got {v.shape[0]}")
    fAB = v[2 * N :].reshape((n, N) + v.shape[1:])
    return v[:N], v[N : 2 * N], fAB


def total_order_index(fA, fB, fAB, var_floor: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Jansen estimator ``mean((f(A) - f(A_B^i))^2) / 2 / Var([f(A), f(B)])``.

    Works elementwise over trailing output dimensions.  Returns
    ``(S_T (n, ...), degenerate (...))``; degenerate outputs (zero pooled
    variance) get index 0.
    """
    fA, fB, fAB = (np.asarray(x, dtype=float) for x in (fA, fB, fAB))
    if fA.shape != fB.shape or fAB.shape[1:] != fA.shape:
        raise SobolError("value arrays must share the base-sample length")
    var = np.concatenate([fA, fB]).var(axis=0, ddof=1)
    scale = np.maximum(np.abs(np.concatenate([fA, fB])).max(axis=0), 1.0)
    degenerate = var <= max(var_floor, 0.0) + 1e-28 * scale**2
    num = 0.5 * np.mean((fA[None] - fAB) ** 2, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        S = np.where(degenerate, 0.0, num / np.where(degenerate, 1.0, var))
    return S, degenerate


def average_indices(per_point: np.ndarray, grid: FunctionGrid) -> tuple[np.ndarray, np.ndarray]:
    """Mean over (q, s) within each test, then over tests with equal weight."""
    per_test = []
    for t in range(grid.n_t):
        cols = np.concatenate([np.arange(sl.start, sl.stop) for tt, _, sl in grid.layout if tt == t])
        per_test.append(per_point[:, cols].mean(axis=1))
    per_test = np.stack(per_test)
    return per_test.mean(axis=0), per_test


@dataclass
class SobolReport:
    param_names: list[str]
    per_point: np.ndarray  # (n_kappa, n_s) raw estimates
    degenerate: np.ndarray  # (n_s,)
    per_test: np.ndarray  # (n_t, n_kappa)
    averaged: np.ndarray  # (n_kappa,)
    bounds: np.ndarray  # (n_kappa, 2)
    N: int
    layout: list = field(default_factory=list)
    threshold: float | None = None
    kept: list[int] = field(default_factory=list)
    removed: list[int] = field(default_factory=list)

    def reported(self) -> np.ndarray:
        return np.clip(self.averaged, -0.05, 1.05)

    def to_dict(self, full: bool = False) -> dict:
        out = {
            "param_names": list(self.param_names),
            "averaged": self.averaged.tolist(),
            "averaged_reported": self.reported().tolist(),
            "per_test": self.per_test.tolist(),
            "bounds": self.bounds.tolist(),
            "N": self.N,
            "threshold": self.threshold,
            "kept": list(self.kept),
            "removed": list(self.removed),
        }
        if full:
            out["per_point"] = self.per_point.tolist()
            out["degenerate"] = self.degenerate.tolist()
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "SobolReport":
        n = len(d["param_names"])
        per_point = np.asarray(d.get("per_point", np.zeros((n, 0))), dtype=float).reshape(n, -1)
        return cls(
            list(d["param_names"]), per_point, np.asarray(d.get("degenerate", []), dtype=bool),
            np.asarray(d["per_test"], dtype=float), np.asarray(d["averaged"], dtype=float),
            np.asarray(d["bounds"], dtype=float), int(d["N"]), [], d.get("threshold"),
            list(d.get("kept", [])), list(d.get("removed", [])),
        )

    def write_json(self, path, full: bool = False) -> None:
        Path(path).write_text(json.dumps(self.to_dict(full), indent=2))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "parameter", "S_T_avg", "lower", "upper", "kept"])
            for i, name in enumerate(self.param_names):
                w.writerow([i, name, repr(float(self.averaged[i])), self.bounds[i, 0], self.bounds[i, 1], int(i in self.kept)])

    def write_curves(self, path, grid: FunctionGrid) -> None:
        """Deformation-resolved indices per function, one row per grid point."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["test", "component", "control"] + list(self.param_names))
            for _, _, sl, tg, comp in grid.block_info():
                for s, c in enumerate(tg.controls):
                    w.writerow([tg.test.id, comp, c] + [repr(float(v)) for v in self.per_point[:, sl.start + s]])


def deformation_resolved_indices(
    flow, forward_map, grid: FunctionGrid, N: int = 4096, n_bounds: int = 8192, rng=0
) -> SobolReport:
    """Per-point total-order indices with bounds from flow samples.

    Parameters are sampled uniformly and independently inside the
    per-parameter min/max of ``n_bounds`` flow samples.
    """
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    kappa, _ = flow.sample(n_bounds, rng)
    bounds = np.stack([kappa.min(axis=0), kappa.max(axis=0)], axis=1)
    b = _check_bounds(bounds)
    seed = int(rng.integers(2**32))
    A, B = _base_matrices(b, int(N), seed)
    fA, fB = forward_map(A), forward_map(B)
    n = len(b)
    S = np.empty((n, grid.n_s))
    degenerate = None
    for i in range(n):
        AB = A.copy()
        AB[:, i] = B[:, i]
        Si, degenerate = total_order_index(fA, fB, forward_map(AB)[None])
        S[i] = Si[0]
    avg, per_test = average_indices(S, grid)
    return SobolReport(list(forward_map.library.param_names), S, degenerate, per_test, avg, b, int(N), list(grid.layout))


def reduce_library(report: SobolReport, library: ModelLibrary, threshold: float) -> tuple[ModelLibrary, dict[int, int]]:
    """Drop terms whose outer coefficient falls below ``threshold``.

    Inner parameters of surviving terms are retained regardless of their
    own index.  Negative estimates count as 0.  Updates ``report`` in place.
    """
    if not threshold > 0:
        raise SobolError("threshold must be positive")
    score = np.maximum(report.averaged, 0.0)
    if len(score) != library.n_kappa:
        raise SobolError("report and library disagree on the number of parameters")
    keep = []
    for t in library.terms:
        if score[t.outer_index] >= threshold:
            keep.append(t.outer_index)
            if t.inner_index is not None:
                keep.append(t.inner_index)
    if not keep:
        raise SobolError(f"threshold {threshold} removes every parameter (max averaged index {score.max():.3g})")
    reduced, index_map = library.subset(keep)
    report.threshold = float(threshold)
    report.kept = sorted(index_map)
    report.removed = [i for i in range(library.n_kappa) if i not in index_map]
    return reduced, index_map
