"""Stress-deformation datasets, discretization grids and stacked functions."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from . import mechanics as mech

__all__ = [
    "DatasetError",
    "MechanicalTest",
    "GridTest",
    "FunctionGrid",
    "StackedFunction",
    "load_dataset",
    "save_dataset",
    "build_grid",
    "stack",
    "unstack",
    "synthesize_dataset",
    "clean_stresses",
    "TRELOAR_LAYOUT",
    "CARDIAC_LAYOUT",
]

DEFAULT_N_S = 32


class DatasetError(ValueError):
    pass


@dataclass
class MechanicalTest:
    """One mechanical test: controls (n_d,) and observed stresses (n_d, n_q)."""

    id: str
    protocol: str
    components: tuple[str, ...]
    controls: np.ndarray
    stresses: np.ndarray
    ratio: tuple[float, float] | None = None

    def __post_init__(self):
        self.controls = np.asarray(self.controls, dtype=float)
        self.stresses = np.asarray(self.stresses, dtype=float).reshape(len(self.controls), -1)
        self.components = tuple(self.components)
        if self.protocol not in mech.PROTOCOLS:
            raise DatasetError(f"test {self.id}: unknown protocol {self.protocol!r}")
        if len(self.components) < 1:
            raise DatasetError(f"test {self.id}: no observed components")
        if self.stresses.shape[1] != len(self.components):
            raise DatasetError(f"test {self.id}: {self.stresses.shape[1]} stress columns for {len(self.components)} components")
        if len(self.controls) < 1:
            raise DatasetError(f"test {self.id}: no measurements")
        if np.any(np.diff(self.controls) <= 0):
            raise DatasetError(f"test {self.id}: controls must be strictly increasing")
        if not np.all(np.isfinite(self.stresses)) or not np.all(np.isfinite(self.controls)):
            raise DatasetError(f"test {self.id}: non-finite controls or stresses")

    @property
    def n_d(self) -> int:
        return len(self.controls)

    @property
    def n_q(self) -> int:
        return len(self.components)

    def deformation(self, control: float) -> np.ndarray:
        return mech.protocol_deformation(self.protocol, control, self.ratio)


# Treloar: 3 tests, P11 only.  Cardiac: 6 shear + 5 biaxial tests.
TRELOAR_LAYOUT = [
    {"id": "UT", "protocol": "UT", "components": ["P11"]},
    {"id": "EBT", "protocol": "EBT", "components": ["P11"]},
    {"id": "PS", "protocol": "PS", "components": ["P11"]},
]
CARDIAC_LAYOUT = [
    {"id": p, "protocol": p, "components": list(mech.observed_components(p))}
    for p in ("SS_fs", "SS_fn", "SS_sf", "SS_sn", "SS_nf", "SS_ns")
] + [
    {"id": f"BT_{rf:g}:{rn:g}", "protocol": "BT", "components": ["sigma_ff", "sigma_nn"], "ratio": [rf, rn]}
    for rf, rn in ((1.0, 1.0), (1.0, 0.75), (0.75, 1.0), (1.0, 0.5), (0.5, 1.0))
]


def load_dataset(csv_path, sidecar_path=None) -> list[MechanicalTest]:
    """Read a CSV (``test_id, control, stress_<component>...``) plus JSON sidecar.

    The sidecar defaults to ``<csv stem>.json`` next to the CSV.
    """
    csv_path = Path(csv_path)
    sidecar_path = Path(sidecar_path) if sidecar_path else csv_path.with_suffix(".json")
    if not csv_path.exists():
        raise DatasetError(f"dataset file {csv_path} not found")
    if not sidecar_path.exists():
        raise DatasetError(f"sidecar {sidecar_path} not found")
    try:
        frame = pd.read_csv(csv_path, float_precision="round_trip")
    except pd.errors.EmptyDataError as exc:
        raise DatasetError(f"{csv_path} is empty") from exc
    if frame.empty:
        raise DatasetError(f"{csv_path} has no rows")
    meta = json.loads(sidecar_path.read_text())
    for col in ("test_id", "control"):
        if col not in frame.columns:
            raise DatasetError(f"{csv_path}: missing column {col!r}")
    frame["test_id"] = frame["test_id"].astype(str)
    tests = []
    for spec in meta.get("tests", []):
        rows = frame[frame["test_id"] == str(spec["id"])]
        if rows.empty:
            raise DatasetError(f"{csv_path}: no rows for test {spec['id']!r}")
        comps = spec.get("components") or list(mech.observed_components(spec["protocol"]))
        cols = [f"stress_{c}" for c in comps]
        missing = [c for c in cols if c not in frame.columns]
        if missing:
            raise DatasetError(f"{csv_path}: missing columns {missing}")
        stresses = rows[cols].to_numpy(dtype=float)
        if np.isnan(stresses).any():
            raise DatasetError(f"{csv_path}: NaN stress in test {spec['id']!r}")
        ratio = spec.get("ratio")
        tests.append(
            MechanicalTest(
                str(spec["id"]), spec["protocol"], comps,
                rows["control"].to_numpy(dtype=float), stresses,
                None if ratio is None else (float(ratio[0]), float(ratio[1])),
            )
        )
    if not tests:
        raise DatasetError(f"{sidecar_path}: no tests declared")
    return tests


def save_dataset(tests: list[MechanicalTest], csv_path, sidecar_path=None) -> None:
    csv_path = Path(csv_path)
    sidecar_path = Path(sidecar_path) if sidecar_path else csv_path.with_suffix(".json")
    comps = sorted({c for t in tests for c in t.components})
    rows = []
    for t in tests:
        for d in range(t.n_d):
            row = {"test_id": t.id, "control": t.controls[d]}
            for q, c in enumerate(t.components):
                row[f"stress_{c}"] = t.stresses[d, q]
            rows.append(row)
    pd.DataFrame(rows, columns=["test_id", "control"] + [f"stress_{c}" for c in comps]).to_csv(
        csv_path, index=False, float_format="%.17g"
    )
    meta = {"units": {"stress": "kPa", "control": "1"}, "tests": []}
    for t in tests:
        entry = {"id": t.id, "protocol": t.protocol, "components": list(t.components)}
        if t.ratio is not None:
            entry["ratio"] = list(t.ratio)
        meta["tests"].append(entry)
    sidecar_path.write_text(json.dumps(meta, indent=2))


@dataclass
class GridTest:
    test: MechanicalTest
    controls: np.ndarray
    F: np.ndarray  # (n_s, 3, 3)
    inputs: dict[str, np.ndarray]  # component -> (n_s, n_Lambda)

    @property
    def n_s(self) -> int:
        return len(self.controls)


@dataclass
class FunctionGrid:
    tests: list[GridTest]
    layout: list[tuple[int, int, slice]] = field(default_factory=list)

    def __post_init__(self):
        if not self.layout:
            start = 0
            for t, tg in enumerate(self.tests):
                for q in range(tg.test.n_q):
                    self.layout.append((t, q, slice(start, start + tg.n_s)))
                    start += tg.n_s

    @property
    def n_s(self) -> int:
        return sum(tg.test.n_q * tg.n_s for tg in self.tests)

    @property
    def n_f(self) -> int:
        return len(self.layout)

    @property
    def n_t(self) -> int:
        return len(self.tests)

    def block(self, t: int, q: int) -> slice:
        for tt, qq, sl in self.layout:
            if (tt, qq) == (t, q):
                return sl
        raise KeyError((t, q))

    def block_info(self):
        """Yield ``(t, q, slice, GridTest, component)`` in stacking order."""
        for t, q, sl in self.layout:
            tg = self.tests[t]
            yield t, q, sl, tg, tg.test.components[q]


def build_grid(tests: list[MechanicalTest], n_s=DEFAULT_N_S) -> FunctionGrid:
    """Evenly spaced grid between each test's min and max control.

    ``n_s`` is an int or a per-test sequence.
    """
    sizes = [n_s] * len(tests) if np.isscalar(n_s) else list(n_s)
    if len(sizes) != len(tests):
        raise DatasetError("one grid size per test required")
    grids = []
    for test, n in zip(tests, sizes):
        n = int(n)
        if n < 2:
            raise DatasetError(f"test {test.id}: need at least 2 grid points, got {n}")
        lo, hi = float(test.controls.min()), float(test.controls.max())
        controls = np.linspace(lo, hi, n)
        controls[0], controls[-1] = lo, hi
        Fs = np.stack([test.deformation(c) for c in controls])
        inputs = {c: np.stack([mech.deformation_filter(c, F) for F in Fs]) for c in test.components}
        grids.append(GridTest(test, controls, Fs, inputs))
    return FunctionGrid(grids)


@dataclass
class StackedFunction:
    values: np.ndarray
    layout: list[tuple[int, int, slice]]


def stack(values: dict[tuple[int, int], np.ndarray], grid: FunctionGrid) -> StackedFunction:
    """Stack per-(t, q) function values in test-major, component-minor order."""
    out = np.empty(grid.n_s)
    for t, q, sl in grid.layout:
        if (t, q) not in values:
            raise DatasetError(f"missing function values for (t={t}, q={q})")
        v = np.asarray(values[(t, q)], dtype=float)
        if v.shape != (sl.stop - sl.start,):
            raise DatasetError(f"function (t={t}, q={q}) has shape {v.shape}")
        out[sl] = v
    return StackedFunction(out, list(grid.layout))


def unstack(f: StackedFunction) -> dict[tuple[int, int], np.ndarray]:
    return {(t, q): f.values[sl] for t, q, sl in f.layout}


def clean_stresses(library, kappa, test: MechanicalTest, controls=None) -> np.ndarray:
    """Noise-free observed stresses (n, n_q) of a test under ``library``."""
    controls = test.controls if controls is None else np.asarray(controls, dtype=float)
    rule = mech.pressure_rule_for(test.protocol)
    out = np.empty((len(controls), test.n_q))
    for d, c in enumerate(controls):
        F = test.deformation(c)
        D = mech.energy_derivative(library, kappa, F)
        P, sigma, _ = mech.apply_pressure_rule(D, F, rule)
        for q, comp in enumerate(test.components):
            tensor, (i, j) = mech.COMPONENTS[comp]
            out[d, q] = (P if tensor == "P" else sigma)[i, j]
    return out


def synthesize_dataset(
    library,
    kappa,
    layout: list[dict],
    controls: dict[str, np.ndarray] | np.ndarray,
    sigma_min: float = 0.01,
    sigma_r: float = 0.05,
    seed: int = 0,
) -> list[MechanicalTest]:
    """Forward-model data with heteroskedastic Gaussian noise.

    Noise sd per point is ``max(sigma_min, sigma_r * |P*|)``.  ``controls``
    is one array shared by all tests or a dict keyed by test id.
    """
    rng = np.random.default_rng(seed)
    tests = []
    for spec in layout:
        ctrl = controls[spec["id"]] if isinstance(controls, dict) else controls
        ratio = spec.get("ratio")
        proto = MechanicalTest(
            spec["id"], spec["protocol"], spec["components"], ctrl,
            np.zeros((len(ctrl), len(spec["components"]))),
            None if ratio is None else tuple(ratio),
        )
        clean = clean_stresses(library, kappa, proto)
        sd = np.maximum(sigma_min, sigma_r * np.abs(clean))
        noisy = clean + sd * rng.standard_normal(clean.shape)
        proto.stresses = noisy
        tests.append(proto)
    return tests
