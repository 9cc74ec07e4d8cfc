"""Incompressible hyperelastic kinematics, model libraries and stresses.

Axes follow the (fiber, sheet, normal) convention of the anisotropic
library: index 0 = f, 1 = s, 2 = n.  For the isotropic tests the same
indices are the 1, 2, 3 principal directions.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

__all__ = [
    "EXP_CLAMP",
    "MechanicsError",
    "UnsupportedKinematicsError",
    "ConfigurationError",
    "ClampWarning",
    "Invariants",
    "TermSpec",
    "ModelLibrary",
    "PressureRule",
    "PROTOCOLS",
    "COMPONENTS",
    "invariants_of",
    "isotropic_library",
    "anisotropic_library",
    "generator_4term",
    "library_from_config",
    "sef_value",
    "energy_derivative",
    "stress_first_pk",
    "stress_cauchy",
    "apply_pressure_rule",
    "protocol_deformation",
    "pressure_rule_for",
    "observed_components",
    "observation_map",
    "deformation_filter",
    "term_arguments",
]

#: Upper bound applied to exp() arguments of exponential terms.
EXP_CLAMP = 30.0

AXES = {"f": 0, "s": 1, "n": 2}


class MechanicsError(ValueError):
    """Invalid mechanical input (shape, finiteness, dimension)."""


class UnsupportedKinematicsError(MechanicsError):
    pass


class ConfigurationError(MechanicsError):
    """Unknown protocol, component or pressure rule."""


class ClampWarning(RuntimeWarning):
    pass


# ---------------------------------------------------------------------------
# invariants


@dataclass(frozen=True)
class Invariants:
    F: np.ndarray
    C: np.ndarray
    I1: float
    I2: float
    stretches: np.ndarray
    I4f: float
    I4s: float
    I4n: float
    I8fs: float
    I8fn: float
    I8sn: float
    directions: np.ndarray  # rows f0, s0, n0

    @property
    def structural_tensors(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return tuple(np.outer(a, a) for a in self.directions)

    def get(self, name: str) -> float:
        return getattr(self, name)


def _check_F(F) -> np.ndarray:
    F = np.asarray(F, dtype=float)
    if F.shape != (3, 3):
        raise MechanicsError(f"deformation gradient must be 3x3, got {F.shape}")
    if not np.all(np.isfinite(F)):
        raise MechanicsError("deformation gradient has non-finite entries")
    return F


def invariants_of(F, directions=None) -> Invariants:
    """Isotropic and anisotropic invariants of ``C = F^T F``.

    ``directions`` is an optional orthonormal frame (rows f0, s0, n0);
    the canonical basis is used when omitted.
    """
    F = _check_F(F)
    if np.linalg.det(F) <= 0.0:
        raise MechanicsError("det F must be positive")
    if directions is None:
        D = np.eye(3)
    else:
        D = np.asarray(directions, dtype=float)
        if D.shape != (3, 3) or not np.allclose(D @ D.T, np.eye(3), atol=1e-10):
            raise MechanicsError("anisotropy frame must be 3 orthonormal vectors")
    C = F.T @ F
    trC = np.trace(C)
    I2 = 0.5 * (trC**2 - np.trace(C @ C))
    f0, s0, n0 = D
    stretches = np.linalg.svd(F, compute_uv=False)
    return Invariants(
        F=F,
        C=C,
        I1=float(trC),
        I2=float(I2),
        stretches=np.sort(stretches)[::-1],
        I4f=float(f0 @ C @ f0),
        I4s=float(s0 @ C @ s0),
        I4n=float(n0 @ C @ n0),
        I8fs=float(f0 @ C @ s0),
        I8fn=float(f0 @ C @ n0),
        I8sn=float(s0 @ C @ n0),
        directions=D,
    )


def _invariant_gradient(name: str, inv: Invariants) -> np.ndarray:
    """d(invariant)/dF for an invariant name."""
    F, C = inv.F, inv.C
    if name == "I1":
        return 2.0 * F
    if name == "I2":
        return 2.0 * (inv.I1 * F - F @ C)
    if name.startswith("I4"):
        a = inv.directions[AXES[name[2]]]
        return 2.0 * F @ np.outer(a, a)
    if name.startswith("I8"):
        a = inv.directions[AXES[name[2]]]
        b = inv.directions[AXES[name[3]]]
        return F @ (np.outer(a, b) + np.outer(b, a))
    raise ConfigurationError(f"unknown invariant {name!r}")


# ---------------------------------------------------------------------------
# model libraries


@dataclass(frozen=True)
class TermSpec:
    """One library term ``c * phi(F; w)``.

    ``form`` is one of:

    * ``"mr"``    : (I1-3)^m (I2-3)^k, ``exponents=(m, k)``
    * ``"ogden"`` : sum_i lambda_i^alpha - 3, ``exponents=(alpha,)``
    * ``"power"`` : x^p with x the shifted invariant, ``exponents=(p,)``
    * ``"exp"``   : exp(w x^p) - 1, ``exponents=(p,)``

    The shifted invariant ``x`` is I1-3, I2-3, max(I4,1)-1 or I8.
    """

    identifier: str
    form: str
    outer_index: int
    inner_index: int | None = None
    invariant: str | None = None
    exponents: tuple = ()


@dataclass(frozen=True)
class ModelLibrary:
    kind: str
    terms: tuple[TermSpec, ...]
    param_names: tuple[str, ...]

    @property
    def n_kappa(self) -> int:
        return len(self.param_names)

    def __post_init__(self):
        slots = []
        for t in self.terms:
            slots.append(t.outer_index)
            if t.inner_index is not None:
                slots.append(t.inner_index)
        if sorted(slots) != list(range(len(self.param_names))):
            raise MechanicsError("every parameter index must map to exactly one term slot")

    @property
    def has_ogden(self) -> bool:
        return any(t.form == "ogden" for t in self.terms)

    def subset(self, keep: Sequence[int]) -> tuple["ModelLibrary", dict[int, int]]:
        """Library restricted to terms whose parameters are all in ``keep``.

        Returns the new library and the old -> new index map.
        """
        keep = set(int(i) for i in keep)
        terms = [
            t for t in self.terms
            if t.outer_index in keep and (t.inner_index is None or t.inner_index in keep)
        ]
        old = sorted(
            i for t in terms for i in ([t.outer_index] + ([t.inner_index] if t.inner_index is not None else []))
        )
        index_map = {o: n for n, o in enumerate(old)}
        new_terms = tuple(
            replace(
                t,
                outer_index=index_map[t.outer_index],
                inner_index=None if t.inner_index is None else index_map[t.inner_index],
            )
            for t in terms
        )
        names = tuple(self.param_names[o] for o in old)
        return ModelLibrary(self.kind, new_terms, names), index_map

    def to_config(self) -> dict:
        return {
            "kind": self.kind,
            "param_names": list(self.param_names),
            "terms": [
                {
                    "identifier": t.identifier,
                    "form": t.form,
                    "outer_index": t.outer_index,
                    "inner_index": t.inner_index,
                    "invariant": t.invariant,
                    "exponents": list(t.exponents),
                }
                for t in self.terms
            ],
        }


OGDEN_EXPONENTS = (-5, -4, -3, -1, 1, 3, 4, 5)


def isotropic_library(mr_degree: int = 3, ogden_exponents=OGDEN_EXPONENTS) -> ModelLibrary:
    """Generalized Mooney-Rivlin plus Ogden library.

    Parameter order: MR coefficients by total degree, then the Ogden
    coefficients in the given exponent order.
    """
    for a in ogden_exponents:
        if a in (-2, 2, 0):
            raise MechanicsError(f"Ogden exponent {a} duplicates an MR term or vanishes")
    terms, names = [], []
    for deg in range(1, mr_degree + 1):
        for m in range(0, deg + 1):
            k = deg - m
            terms.append(TermSpec(f"MR({m},{k})", "mr", len(names), exponents=(m, k)))
            names.append(f"c({m},{k})")
    for a in ogden_exponents:
        terms.append(TermSpec(f"Ogden({a})", "ogden", len(names), exponents=(float(a),)))
        names.append(f"c({a})")
    return ModelLibrary("isotropic-MR-Ogden", tuple(terms), tuple(names))


# (c index, invariant, power, exponential?) with the w index = c index for
# exponential terms, following the numbering of the published CANN library.
_CANN_TERMS = (
    (1, "I1", 1, False), (2, "I1", 1, True),
    (3, "I1", 2, False), (4, "I1", 2, True),
    (5, "I2", 1, False), (6, "I2", 1, True),
    (7, "I2", 2, False), (8, "I2", 2, True),
    (11, "I4f", 2, False), (12, "I4f", 2, True),
    (15, "I4s", 2, False), (16, "I4s", 2, True),
    (19, "I4n", 2, False), (20, "I4n", 2, True),
    (23, "I8fs", 2, False), (24, "I8fs", 2, True),
    (27, "I8fn", 2, False), (28, "I8fn", 2, True),
    (31, "I8sn", 2, False), (32, "I8sn", 2, True),
)


def _cann_label(inv: str, p: int, is_exp: bool) -> str:
    arg = {"I1": "[I1-3]", "I2": "[I2-3]"}.get(inv, f"[{inv}-1]" if inv.startswith("I4") else f"[{inv}]")
    body = arg if p == 1 else f"{arg}^2"
    return f"exp({body})" if is_exp else body


def anisotropic_library() -> ModelLibrary:
    """30-parameter CANN-type library: 20 outer coefficients, then 10 inner."""
    n_c = len(_CANN_TERMS)
    c_names = [f"c(2,{j})" for j, *_ in _CANN_TERMS]
    w_names = [f"w(1,{j})" for j, _, _, e in _CANN_TERMS if e]
    terms = []
    wi = n_c
    for ci, (j, inv, p, is_exp) in enumerate(_CANN_TERMS):
        if is_exp:
            terms.append(TermSpec(_cann_label(inv, p, True), "exp", ci, wi, inv, (p,)))
            wi += 1
        else:
            terms.append(TermSpec(_cann_label(inv, p, False), "power", ci, None, inv, (p,)))
    return ModelLibrary("anisotropic-CANN", tuple(terms), tuple(c_names + w_names))


#: Generating parameters of the four-term cardiac model, by parameter name.
GENERATOR_4TERM = {
    "c(2,7)": 5.162,
    "c(2,12)": 0.081,
    "w(1,12)": 21.151,
    "c(2,20)": 0.315,
    "w(1,20)": 4.371,
    "c(2,24)": 0.486,
    "w(1,24)": 0.508,
}


def generator_4term() -> tuple[ModelLibrary, np.ndarray]:
    """The four-term anisotropic generator as a reduced library and its kappa."""
    full = anisotropic_library()
    keep = [full.param_names.index(n) for n in GENERATOR_4TERM]
    lib, _ = full.subset(keep)
    kappa = np.array([GENERATOR_4TERM[n] for n in lib.param_names])
    return lib, kappa


def library_from_config(cfg) -> ModelLibrary:
    """Build a library from a preset name or a declarative dict.

    Accepted forms: ``"isotropic"``, ``"anisotropic"``, ``"generator-4term"``,
    ``{"kind": ..., "keep": [param names]}``, or the output of
    :meth:`ModelLibrary.to_config`.
    """
    if isinstance(cfg, str):
        cfg = {"kind": cfg}
    if "terms" in cfg:
        terms = tuple(
            TermSpec(
                t["identifier"], t["form"], int(t["outer_index"]),
                None if t.get("inner_index") is None else int(t["inner_index"]),
                t.get("invariant"), tuple(t.get("exponents", ())),
            )
            for t in cfg["terms"]
        )
        return ModelLibrary(cfg.get("kind", "custom"), terms, tuple(cfg["param_names"]))
    kind = cfg["kind"]
    if kind in ("isotropic", "isotropic-MR-Ogden"):
        lib = isotropic_library(int(cfg.get("mr_degree", 3)), tuple(cfg.get("ogden_exponents", OGDEN_EXPONENTS)))
    elif kind in ("anisotropic", "anisotropic-CANN"):
        lib = anisotropic_library()
    elif kind == "generator-4term":
        return generator_4term()[0]
    else:
        raise ConfigurationError(f"unknown library kind {kind!r}")
    keep = cfg.get("keep")
    if keep is not None:
        missing = [n for n in keep if n not in lib.param_names]
        if missing:
            raise ConfigurationError(f"unknown parameters {missing}")
        lib, _ = lib.subset([lib.param_names.index(n) for n in keep])
    return lib


# ---------------------------------------------------------------------------
# energy and stress


def _shifted(inv: Invariants, name: str) -> float:
    if name == "I1":
        return inv.I1 - 3.0
    if name == "I2":
        return inv.I2 - 3.0
    if name.startswith("I4"):
        return max(inv.get(name), 1.0) - 1.0
    return inv.get(name)


def _shifted_gradient(inv: Invariants, name: str) -> np.ndarray:
    if name.startswith("I4") and inv.get(name) <= 1.0:
        return np.zeros((3, 3))
    return _invariant_gradient(name, inv)


def _check_kappa(library: ModelLibrary, kappa) -> np.ndarray:
    kappa = np.asarray(kappa, dtype=float)
    if kappa.shape != (library.n_kappa,):
        raise MechanicsError(f"kappa must have length {library.n_kappa}, got shape {kappa.shape}")
    return kappa


def _clamped_exp(arg: float) -> float:
    if arg > EXP_CLAMP:
        warnings.warn(f"exponential argument {arg:.3g} clamped to {EXP_CLAMP}", ClampWarning, stacklevel=3)
        arg = EXP_CLAMP
    return float(np.exp(arg))


def sef_value(library: ModelLibrary, kappa, inv: Invariants) -> float:
    """Isochoric strain energy density (kPa)."""
    kappa = _check_kappa(library, kappa)
    W = 0.0
    for t in library.terms:
        c = kappa[t.outer_index]
        if t.form == "mr":
            m, k = t.exponents
            W += c * (inv.I1 - 3.0) ** m * (inv.I2 - 3.0) ** k
        elif t.form == "ogden":
            (a,) = t.exponents
            W += c * (np.sum(inv.stretches**a) - 3.0)
        elif t.form == "power":
            W += c * _shifted(inv, t.invariant) ** t.exponents[0]
        elif t.form == "exp":
            w = kappa[t.inner_index]
            W += c * (_clamped_exp(w * _shifted(inv, t.invariant) ** t.exponents[0]) - 1.0)
        else:
            raise ConfigurationError(f"unknown term form {t.form!r}")
    return float(W)


def term_arguments(library: ModelLibrary, inv: Invariants) -> list[tuple[float, np.ndarray]]:
    """Per-term ``(a, dA)`` such that each term's dW/dF is ``c * h * dA``.

    For non-exponential terms ``h = 1`` and ``dA`` is the full derivative
    of ``phi``; ``a`` is unused (0).  For exponential terms ``a = x^p`` and
    ``h = w exp(w a)``.
    """
    diagonal = not np.any(inv.F[~np.eye(3, dtype=bool)])
    out = []
    for t in library.terms:
        if t.form == "mr":
            m, k = t.exponents
            x1, x2 = inv.I1 - 3.0, inv.I2 - 3.0
            d = np.zeros((3, 3))
            if m:
                d = d + m * x1 ** (m - 1) * x2**k * _invariant_gradient("I1", inv)
            if k:
                d = d + k * x1**m * x2 ** (k - 1) * _invariant_gradient("I2", inv)
            out.append((0.0, d))
        elif t.form == "ogden":
            if not diagonal:
                raise UnsupportedKinematicsError("Ogden terms require a diagonal deformation gradient")
            (a,) = t.exponents
            lam = np.diag(inv.F)
            out.append((0.0, np.diag(a * lam ** (a - 1.0))))
        elif t.form in ("power", "exp"):
            (p,) = t.exponents
            x = _shifted(inv, t.invariant)
            dx = _shifted_gradient(inv, t.invariant)
            dA = p * x ** (p - 1) * dx if p != 1 else dx
            out.append((x**p if t.form == "exp" else 0.0, dA))
        else:
            raise ConfigurationError(f"unknown term form {t.form!r}")
    return out


def energy_derivative(library: ModelLibrary, kappa, F, directions=None) -> np.ndarray:
    """dW/dF by the invariant chain rule (no pressure)."""
    kappa = _check_kappa(library, kappa)
    inv = invariants_of(F, directions)
    D = np.zeros((3, 3))
    for t, (a, dA) in zip(library.terms, term_arguments(library, inv)):
        c = kappa[t.outer_index]
        if t.form == "exp":
            w = kappa[t.inner_index]
            D += c * w * _clamped_exp(w * a) * dA
        else:
            D += c * dA
    return D


@dataclass(frozen=True)
class PressureRule:
    """Traction-free condition eliminating the hydrostatic pressure.

    ``tensor`` is ``"P"`` or ``"sigma"``; the diagonal entry ``index`` of
    that tensor is set to zero.
    """

    tensor: str
    index: int
    protocol: str = ""


def apply_pressure_rule(D: np.ndarray, F: np.ndarray, rule: PressureRule) -> tuple[np.ndarray, np.ndarray, float]:
    """Return ``(P, sigma, p)`` for the energy derivative ``D``."""
    FinvT = np.linalg.inv(F).T
    i = rule.index
    if rule.tensor == "P":
        p = D[i, i] / FinvT[i, i]
    elif rule.tensor == "sigma":
        p = (D @ F.T)[i, i]
    else:
        raise ConfigurationError(f"unknown pressure-rule tensor {rule.tensor!r}")
    P = D - p * FinvT
    sigma = P @ F.T
    # exact zero on the designated entry; removes round-off
    if rule.tensor == "P":
        P[i, i] = 0.0
    else:
        sigma[i, i] = 0.0
    return P, sigma, float(p)


def _check_incompressible(F: np.ndarray, tol: float = 1e-8) -> None:
    if abs(np.linalg.det(F) - 1.0) > tol:
        raise MechanicsError(f"det F = {np.linalg.det(F):.12g} violates incompressibility")


def stress_first_pk(library, kappa, F, rule: PressureRule | None, directions=None) -> np.ndarray:
    """First Piola-Kirchhoff stress ``dW/dF - p F^{-T}`` (kPa)."""
    if rule is None:
        raise ConfigurationError("no pressure rule given")
    F = _check_F(F)
    _check_incompressible(F)
    D = energy_derivative(library, kappa, F, directions)
    return apply_pressure_rule(D, F, rule)[0]


def stress_cauchy(library, kappa, F, rule: PressureRule | None, directions=None) -> np.ndarray:
    """Cauchy stress ``dW/dF F^T - p I`` (kPa), with J = 1."""
    if rule is None:
        raise ConfigurationError("no pressure rule given")
    F = _check_F(F)
    _check_incompressible(F)
    D = energy_derivative(library, kappa, F, directions)
    return apply_pressure_rule(D, F, rule)[1]


# ---------------------------------------------------------------------------
# protocols, observation maps, deformation filters

SHEAR_PROTOCOLS = tuple(f"SS_{a}{b}" for a in "fsn" for b in "fsn" if a != b)
PROTOCOLS = ("UT", "EBT", "PS", "BT") + SHEAR_PROTOCOLS

#: component id -> (tensor, (row, col))
COMPONENTS = {"P11": ("P", (0, 0))}
for _a in "fsn":
    for _b in "fsn":
        COMPONENTS[f"sigma_{_a}{_b}"] = ("sigma", (AXES[_a], AXES[_b]))

#: component id -> entries of F fed to the GP
FILTERS = {
    "P11": ((0, 0), (1, 1)),
    "sigma_ff": ((0, 0), (2, 2)),
    "sigma_nn": ((0, 0), (2, 2)),
}
for _a in "fsn":
    for _b in "fsn":
        if _a != _b:
            # sigma_ba is observed in the SS_ab test with F_ab = gamma
            FILTERS[f"sigma_{_b}{_a}"] = ((AXES[_a], AXES[_b]),)


def protocol_deformation(protocol: str, control: float, ratio=None) -> np.ndarray:
    """Deformation gradient for a test protocol at a control value.

    ``ratio`` is ``(lambda_f*, lambda_n*)`` for biaxial tests.
    """
    control = float(control)
    if protocol == "UT":
        _positive(control)
        l2 = 1.0 / np.sqrt(control)
        return np.diag([control, l2, 1.0 / (control * l2)])
    if protocol == "EBT":
        _positive(control)
        return np.diag([control, control, 1.0 / (control * control)])
    if protocol == "PS":
        _positive(control)
        return np.diag([control, 1.0, 1.0 / control])
    if protocol == "BT":
        _positive(control)
        rf, rn = (1.0, 1.0) if ratio is None else (float(ratio[0]), float(ratio[1]))
        lf = 1.0 + rf * (control - 1.0)
        ln = 1.0 + rn * (control - 1.0)
        if lf <= 0 or ln <= 0:
            raise MechanicsError("biaxial stretches must be positive")
        return np.diag([lf, 1.0 / (lf * ln), ln])
    if protocol in SHEAR_PROTOCOLS:
        if not 0.0 <= control <= 0.5:
            raise MechanicsError(f"shear amount {control} outside [0, 0.5]")
        F = np.eye(3)
        F[AXES[protocol[3]], AXES[protocol[4]]] = control
        return F
    raise ConfigurationError(f"unknown protocol {protocol!r}")


def _positive(x: float) -> None:
    if not x > 0:
        raise MechanicsError(f"stretch must be positive, got {x}")


def pressure_rule_for(protocol: str) -> PressureRule:
    if protocol in ("UT", "EBT", "PS"):
        return PressureRule("P", 2, protocol)
    if protocol == "BT":
        return PressureRule("sigma", 1, protocol)
    if protocol in SHEAR_PROTOCOLS:
        third = ({0, 1, 2} - {AXES[protocol[3]], AXES[protocol[4]]}).pop()
        return PressureRule("sigma", third, protocol)
    raise ConfigurationError(f"no pressure rule for protocol {protocol!r}")


def observed_components(protocol: str) -> tuple[str, ...]:
    if protocol in ("UT", "EBT", "PS"):
        return ("P11",)
    if protocol == "BT":
        return ("sigma_ff", "sigma_nn")
    if protocol in SHEAR_PROTOCOLS:
        return (f"sigma_{protocol[4]}{protocol[3]}",)
    raise ConfigurationError(f"unknown protocol {protocol!r}")


def observation_map(protocol: str, q: int, stress: np.ndarray) -> float:
    """Observed scalar for component ``q`` (1-based) of a test.

    ``stress`` must be the tensor the component refers to (P for the
    isotropic tests, Cauchy stress otherwise).
    """
    comps = observed_components(protocol)
    if not 1 <= q <= len(comps):
        raise ConfigurationError(f"protocol {protocol} has no observed component {q}")
    _, (i, j) = COMPONENTS[comps[q - 1]]
    return float(np.asarray(stress)[i, j])


def deformation_filter(component: str, F) -> np.ndarray:
    if component not in FILTERS:
        raise ConfigurationError(f"no deformation filter for component {component!r}")
    F = np.asarray(F, dtype=float)
    return np.array([F[i, j] for i, j in FILTERS[component]])
