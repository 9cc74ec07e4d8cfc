"""Independent reference computations shared by the unit and acceptance tests.

Nothing here calls the analytic derivative code under test: stresses come
from central differences of the energy, Gaussian quantities from dense
linear algebra, and network gradients from perturbing parameters.
"""

from __future__ import annotations

import numpy as np

from gpdistill import gp
from gpdistill import mechanics as mech

# Shear states sit exactly on I4 = 1 where the fiber correction is only C1;
# a central difference straddling that kink carries an O(h) bias.
FD_STEP = 1e-7


def fd_energy_derivative(library, kappa, F, step=FD_STEP):
    """Central differences of the energy with respect to each entry of F."""
    F = np.asarray(F, dtype=float)
    D = np.zeros((3, 3))
    for i in range(3):
        for j in range(3):
            Fp, Fm = F.copy(), F.copy()
            Fp[i, j] += step
            Fm[i, j] -= step
            Wp = mech.sef_value(library, kappa, mech.invariants_of(Fp))
            Wm = mech.sef_value(library, kappa, mech.invariants_of(Fm))
            D[i, j] = (Wp - Wm) / (2.0 * step)
    return D


def fd_stresses(library, kappa, F, rule):
    """(P, sigma) with the pressure solved from the traction-free entry.

    The constrained entry is affine in p, so two evaluations fix it.
    """
    D = fd_energy_derivative(library, kappa, F)
    FinvT = np.linalg.inv(F).T

    def entry(p):
        P = D - p * FinvT
        T = P if rule.tensor == "P" else P @ F.T
        return T[rule.index, rule.index]

    e0, e1 = entry(0.0), entry(1.0)
    p = e0 / (e0 - e1)
    P = D - p * FinvT
    return P, P @ F.T


def random_stress_case(rng):
    """Random (library, kappa, protocol, control) with moderate values."""
    if rng.uniform() < 0.5:
        lib = mech.isotropic_library()
        protocol = str(rng.choice(["UT", "EBT", "PS"]))
        hi = {"UT": 3.0, "EBT": 2.0, "PS": 2.5}[protocol]
        control = rng.uniform(1.05, hi)
        kappa = rng.uniform(0.01, 1.0, lib.n_kappa)
        # strongly negative Ogden exponents dominate at large stretch
        kappa[9:] *= 0.05
        ratio = None
    else:
        lib = mech.anisotropic_library()
        protocol = str(rng.choice(["BT"] + list(mech.SHEAR_PROTOCOLS)))
        control = rng.uniform(1.02, 1.15) if protocol == "BT" else rng.uniform(0.05, 0.5)
        kappa = np.concatenate([rng.uniform(0.01, 1.0, 20), rng.uniform(0.05, 1.0, 10)])
        ratio = tuple(rng.choice([1.0, 0.75, 0.5], size=2)) if protocol == "BT" else None
    F = mech.protocol_deformation(protocol, control, ratio)
    return lib, kappa, protocol, F


def stress_relative_error(lib, kappa, protocol, F):
    rule = mech.pressure_rule_for(protocol)
    P = mech.stress_first_pk(lib, kappa, F, rule)
    sigma = mech.stress_cauchy(lib, kappa, F, rule)
    P_ref, s_ref = fd_stresses(lib, kappa, F, rule)
    scale_P = max(np.abs(P_ref).max(), 1e-8)
    scale_s = max(np.abs(s_ref).max(), 1e-8)
    return max(np.abs(P - P_ref).max() / scale_P, np.abs(sigma - s_ref).max() / scale_s)


def mvn_logpdf(y, cov):
    """Dense Gaussian log density via an explicit inverse and determinant."""
    y = np.asarray(y, dtype=float)
    n = len(y)
    sign, logdet = np.linalg.slogdet(cov)
    assert sign > 0
    return -0.5 * y @ np.linalg.inv(cov) @ y - 0.5 * logdet - 0.5 * n * np.log(2.0 * np.pi)


def se_kernel(X1, X2, ls, sigma):
    X1, X2 = np.atleast_2d(X1), np.atleast_2d(X2)
    out = np.empty((len(X1), len(X2)))
    for a in range(len(X1)):
        for b in range(len(X2)):
            out[a, b] = sigma**2 * np.exp(-0.5 * np.sum(((X1[a] - X2[b]) / ls) ** 2))
    return out


def random_gp_instance(rng, n=None, dim=None):
    """Random inputs, targets, kernel parameters and error model (n <= 6)."""
    n = n or int(rng.integers(1, 7))
    dim = dim or int(rng.integers(1, 3))
    X = rng.uniform(0, 1, (n, dim))
    params = gp.KernelParams(rng.uniform(0.2, 1.5, dim), float(rng.uniform(0.3, 3.0)))
    y = rng.normal(0, params.output_scale, n)
    em = gp.ErrorModel(float(rng.uniform(0.01, 0.3)), float(rng.uniform(0.0, 0.2)))
    return X, y, params, em


def jittered(K, params):
    """Add the jitter every GP factorization starts with."""
    return K + gp.JITTER_START * params.output_scale**2 * np.eye(len(K))


def gaussian_condition(K_tt, K_qt, K_qq, noise, y):
    """Posterior mean and covariance by explicit inversion."""
    A = np.linalg.inv(K_tt + np.diag(noise))
    return K_qt @ A @ y, K_qq - K_qt @ A @ K_qt.T


def fd_param_gradient(fn, params, step=1e-6):
    """Central-difference gradient of a scalar ``fn()`` w.r.t. Var params (in place)."""
    out = []
    for p in params:
        g = np.zeros_like(p.value)
        it = np.nditer(p.value, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = p.value[idx]
            p.value[idx] = old + step
            fp = fn()
            p.value[idx] = old - step
            fm = fn()
            p.value[idx] = old
            g[idx] = (fp - fm) / (2.0 * step)
        out.append(g)
    return out


def relative_gradient_error(g, g_ref):
    a = np.concatenate([x.ravel() for x in g])
    b = np.concatenate([x.ravel() for x in g_ref])
    return np.abs(a - b).max() / max(np.abs(b).max(), 1e-8)


def ishigami(X, a=7.0, b=0.1):
    return np.sin(X[:, 0]) + a * np.sin(X[:, 1]) ** 2 + b * X[:, 2] ** 4 * np.sin(X[:, 0])


def ishigami_totals(a=7.0, b=0.1):
    """Closed-form total-order indices on [-pi, pi]^3."""
    pi = np.pi
    V1 = 0.5 * (1 + b * pi**4 / 5) ** 2
    V2 = a**2 / 8
    V13 = b**2 * pi**8 * (1 / 18 - 1 / 50)
    V = V1 + V2 + V13
    return np.array([(V1 + V13) / V, V2 / V, V13 / V])


# -- networks -------------------------------------------------------------------


def dense_gradient_error(rng):
    """Backprop vs central differences for a random small network loss."""
    from gpdistill.diffnum import DenseNetwork, grad

    n_in = int(rng.integers(1, 5))
    hidden = [int(h) for h in rng.integers(2, 6, size=rng.integers(1, 3))]
    act = str(rng.choice(["tanh", "softplus"]))
    net = DenseNetwork([n_in] + hidden + [1], act, spectral_norm=bool(rng.uniform() < 0.5), seed=int(rng.integers(1 << 30)))
    for b in net.biases:
        b.value = rng.normal(0, 0.5, b.value.shape)
    x = rng.normal(size=(3, n_in))
    target = rng.normal(size=3)

    def loss():
        return ((net(x) - target) ** 2).mean()

    g = grad(loss(), net.params)
    g_ref = fd_param_gradient(lambda: float(loss().value), net.params)
    return relative_gradient_error(g, g_ref)


def penalty_gradient_error(rng):
    """Gradient of the input-gradient penalty vs central differences."""
    from gpdistill.diffnum import DenseNetwork, grad

    n_in = int(rng.integers(1, 4))
    hidden = [int(h) for h in rng.integers(2, 5, size=rng.integers(1, 3))]
    act = str(rng.choice(["tanh", "softplus"]))
    net = DenseNetwork([n_in] + hidden + [1], act, spectral_norm=bool(rng.uniform() < 0.5), seed=int(rng.integers(1 << 30)))
    for W in net.weights:
        W.value = W.value * 2.0
    x = rng.normal(size=(3, n_in))
    pen = lambda: net.gradient_penalty(x)[0]  # noqa: E731
    g = grad(pen(), net.params)
    g_ref = fd_param_gradient(lambda: float(pen().value), net.params, step=1e-5)
    return relative_gradient_error(g, g_ref)


def made_max_violation(rng):
    """Largest |d out_i / d in_j| over j >= i, by perturbing one input at a time."""
    from gpdistill.diffnum import MadeNetwork

    n = int(rng.integers(1, 7))
    hidden = [int(h) for h in rng.integers(n, 4 * n + 2, size=rng.integers(1, 3))]
    made = MadeNetwork(n, hidden, seed=int(rng.integers(1 << 30)), zero_final=False)
    for b in made.biases:
        b.value = rng.normal(size=b.value.shape)
    z = rng.normal(size=(4, n))
    loc0, s0 = made.numpy_forward(z)
    worst = 0.0
    for j in range(n):
        zp = z.copy()
        zp[:, j] += rng.normal() + 1.0
        loc, s = made.numpy_forward(zp)
        for i in range(j + 1):
            worst = max(worst, np.abs(loc[:, i] - loc0[:, i]).max(), np.abs(s[:, i] - s0[:, i]).max())
    return worst


def randomize_flow(flow, rng, scale=0.3):
    for p in flow.params:
        p.value = rng.normal(0, scale, p.value.shape)
    return flow


def layer_jacobian_check(flow, k, z, step=1e-5):
    """(max |upper-triangular entry|, |logdet(FD Jacobian) - reported logdet|)."""
    n = flow.n_kappa
    J = np.zeros((n, n))
    for j in range(n):
        e = np.zeros(n)
        e[j] = step
        yp = flow.layer_forward(k, (z + e)[None])[0][0]
        ym = flow.layer_forward(k, (z - e)[None])[0][0]
        J[:, j] = (yp - ym) / (2 * step)
    upper = np.abs(np.triu(J, 1)).max() if n > 1 else 0.0
    sign, logdet = np.linalg.slogdet(J)
    assert sign > 0
    return upper, abs(logdet - flow.jacobian_logdet(k, z[None])[0])
