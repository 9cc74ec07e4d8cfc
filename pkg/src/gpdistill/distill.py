"""Wasserstein-1 matching of a parameter flow to GP stress-function samples.

A Lipschitz critic (gradient penalty + spectral norm on hidden layers) is
trained for ``critic_iters`` steps, then the flow takes one step on
``E[f_LN(f_GP)] - E[f_LN(f_M)]`` where ``f_M`` is the stacked stress
response of flow samples under the model library.
"""

from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import mechanics as mech
from .dataset import FunctionGrid
from .diffnum import AdamW, DenseNetwork, RMSprop, Var, as_var, grad
from .flow import LOG_CLAMP, FlowModel
from .gp import sample_stacked

__all__ = [
    "DistillError",
    "DivergenceError",
    "ForwardMap",
    "CriticTerms",
    "critic_loss",
    "flow_loss",
    "DistillConfig",
    "TrainResult",
    "make_critic",
    "gp_sampler",
    "train",
    "write_history",
]


class DistillError(RuntimeError):
    pass


class DivergenceError(DistillError):
    def __init__(self, message, iteration, last_good_state, last_good_iteration):
        super().__init__(message)
        self.iteration = iteration
        self.last_good_state = last_good_state
        self.last_good_iteration = last_good_iteration


class ForwardMap:
    """Stacked observed stresses as a function of the parameter vector.

    Every observation is linear in dW/dF once the pressure is eliminated,
    so each term contributes ``c * b_j`` (or ``c w exp(w a_j) b_j`` for
    exponential terms) with per-point constants ``a_j, b_j`` computed once.
    """

    def __init__(self, library: mech.ModelLibrary, points):
        """``points`` is a sequence of ``(F, PressureRule, component)``."""
        self.library = library
        n_terms = len(library.terms)
        self.n_s = len(points)
        self.A = np.zeros((n_terms, self.n_s))
        self.B = np.zeros((n_terms, self.n_s))
        for s, (F, rule, comp) in enumerate(points):
            inv = mech.invariants_of(F)
            tensor, (i, j) = mech.COMPONENTS[comp]
            for k, (a, dA) in enumerate(mech.term_arguments(library, inv)):
                P, sigma, _ = mech.apply_pressure_rule(dA, F, rule)
                self.A[k, s] = a
                self.B[k, s] = (P if tensor == "P" else sigma)[i, j]
        self.lin = [k for k, t in enumerate(library.terms) if t.form != "exp"]
        self.exp = [k for k, t in enumerate(library.terms) if t.form == "exp"]
        self.lin_outer = np.array([library.terms[k].outer_index for k in self.lin], dtype=int)
        self.B_lin = self.B[self.lin]

    @classmethod
    def from_grid(cls, library, grid: FunctionGrid) -> "ForwardMap":
        points = []
        for _, _, _, tg, comp in grid.block_info():
            rule = mech.pressure_rule_for(tg.test.protocol)
            points += [(F, rule, comp) for F in tg.F]
        return cls(library, points)

    def balanced_log_kappa(self, target_scale: float) -> np.ndarray:
        """Log-parameters at which each term alone peaks at ``target_scale / n_terms``.

        Inner parameters start at 1; terms with no response keep log 0.
        """
        lib = self.library
        out = np.zeros(lib.n_kappa)
        for t in lib.terms:
            kappa = np.zeros((1, lib.n_kappa))
            kappa[0, t.outer_index] = 1.0
            if t.inner_index is not None:
                kappa[0, t.inner_index] = 1.0
            peak = float(np.abs(self(kappa)).max())
            if peak > 0 and target_scale > 0:
                out[t.outer_index] = np.log(target_scale / (len(lib.terms) * peak))
        return np.clip(out, *LOG_CLAMP)

    def __call__(self, kappa) -> np.ndarray:
        K = np.atleast_2d(np.asarray(kappa, dtype=float))
        if K.shape[1] != self.library.n_kappa:
            raise DistillError(f"kappa rows must have {self.library.n_kappa} entries")
        out = K[:, self.lin_outer] @ self.B_lin if self.lin else np.zeros((len(K), self.n_s))
        for k in self.exp:
            t = self.library.terms[k]
            c, w = K[:, [t.outer_index]], K[:, [t.inner_index]]
            arg = np.minimum(w * self.A[k], mech.EXP_CLAMP)
            out = out + c * w * np.exp(arg) * self.B[k]
        if not np.all(np.isfinite(out)):
            bad = np.flatnonzero(~np.all(np.isfinite(out), axis=1))
            raise DistillError(f"non-finite forward-map output for kappa rows {bad.tolist()}")
        return out

    def var(self, kappa: Var) -> Var:
        """Differentiable version of :meth:`__call__`."""
        kappa = as_var(kappa)
        out = None
        if self.lin:
            out = kappa[:, self.lin_outer] @ self.B_lin
        for k in self.exp:
            t = self.library.terms[k]
            c, w = kappa[:, [t.outer_index]], kappa[:, [t.inner_index]]
            term = (c * w) * (w * self.A[k][None, :]).minimum(mech.EXP_CLAMP).exp() * self.B[k][None, :]
            out = term if out is None else out + term
        if out is None:
            out = as_var(np.zeros((kappa.shape[0], self.n_s)))
        return out


@dataclass
class CriticTerms:
    wasserstein: Var
    penalty: Var
    objective: Var  # wasserstein - lambda * penalty, maximized by the critic
    grad_norms: np.ndarray


PENALTIES = ("two-sided", "one-sided")


def critic_loss(
    critic: DenseNetwork, gp_batch, model_batch, interpolants, lambda_L: float, penalty: str = "two-sided"
) -> CriticTerms:
    """Critic objective on one batch.

    ``W = mean f(gp) - mean f(model)``, ``penalty = mean (|grad f(f_hat)| - 1)^2``.
    The one-sided variant only penalises gradient norms above 1.
    """
    if penalty not in PENALTIES:
        raise DistillError(f"penalty must be one of {PENALTIES}")
    gp_batch, model_batch = np.asarray(gp_batch), np.asarray(model_batch)
    if gp_batch.shape[1:] != model_batch.shape[1:]:
        raise DistillError("GP and model batches differ in width")
    both = critic(np.concatenate([gp_batch, model_batch]))
    n = len(gp_batch)
    w = both[:n].mean() - both[n:].mean()
    pen, norms = critic.gradient_penalty(interpolants, one_sided=penalty == "one-sided")
    obj = w - lambda_L * pen
    if not np.isfinite(obj.value):
        raise DistillError("non-finite critic loss")
    return CriticTerms(w, pen, obj, norms)


def flow_loss(critic: DenseNetwork, flow: FlowModel, forward_map: ForwardMap, gp_batch, u, scale: float = 1.0) -> Var:
    """``mean f(gp) - mean f(scale * forward_map(flow(u)))``, differentiable in the flow.

    ``gp_batch`` is expected to be scaled already.
    """
    model = forward_map.var(flow.kappa_var(u))
    if scale != 1.0:
        model = model * scale
    return critic(np.asarray(gp_batch)).mean() - critic(model).mean()


def make_critic(n_s: int, hidden=None, activation="softplus", spectral_norm=True, seed=0) -> DenseNetwork:
    hidden = [2 * n_s] * 3 if hidden is None else list(hidden)
    return DenseNetwork([n_s] + hidden + [1], activation=activation, spectral_norm=spectral_norm, seed=seed)


def gp_sampler(posteriors, grid: FunctionGrid) -> Callable[[np.random.Generator, int], np.ndarray]:
    return lambda rng, count: sample_stacked(posteriors, grid, count, rng)


@dataclass
class DistillConfig:
    iterations: int = 20000
    critic_iters: int = 10
    critic_warmup: int = 0
    batch_size: int = 32
    lambda_L: float = 10.0
    penalty: str = "two-sided"
    input_scale: float = 1.0
    critic_lr: float = 1e-4
    critic_weight_decay: float = 0.01
    flow_lr: float = 5e-4
    flow_decay: float = 0.9999
    flow_warmup: int = 0
    resample_per_critic_step: bool = True
    log_every: int = 50
    checkpoint_every: int = 1000
    checkpoint_dir: str | None = None
    divergence_threshold: float = 1e8

    def __post_init__(self):
        if min(self.iterations, self.critic_warmup, self.flow_warmup) < 0 or self.critic_iters < 1 or self.batch_size < 1:
            raise DistillError("iterations, critic_warmup and flow_warmup >= 0, critic_iters and batch_size >= 1 required")
        if not self.lambda_L > 0:
            raise DistillError("lambda_L must be positive")
        if self.penalty not in PENALTIES:
            raise DistillError(f"penalty must be one of {PENALTIES}")
        if not (np.isfinite(self.input_scale) and self.input_scale > 0):
            raise DistillError("input_scale must be positive and finite")


@dataclass
class TrainResult:
    history: list[dict] = field(default_factory=list)
    critic_updates: int = 0
    flow_updates: int = 0
    checkpoints: list[str] = field(default_factory=list)


HISTORY_FIELDS = ["iteration", "L_W", "L_L", "wasserstein", "penalty", "lr", "critic_grad_norm", "flow_grad_norm", "wall_time"]


def _norm(gs):
    return float(np.sqrt(sum(float((g * g).sum()) for g in gs)))


def train(
    target: Callable[[np.random.Generator, int], np.ndarray],
    forward_map: ForwardMap,
    flow: FlowModel,
    critic: DenseNetwork,
    config: DistillConfig,
    rng,
    on_critic_step: Callable[[int], None] | None = None,
) -> TrainResult:
    """Alternate ``critic_iters`` critic steps and one flow step.

    ``target(rng, count)`` returns ``(count, n_s)`` target function samples
    (see :func:`gp_sampler`).  Both target and model functions are
    multiplied by ``input_scale`` before they reach the critic; logged
    ``L_W`` and ``wasserstein`` are divided by it again.  Raises :class:`DivergenceError` carrying the
    last good flow state when a loss is NaN or exceeds the threshold.
    """
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    cfg = config
    c_opt = AdamW(critic.params, lr=cfg.critic_lr, weight_decay=cfg.critic_weight_decay)
    f_opt = RMSprop(flow.params, lr=cfg.flow_lr, decay=cfg.flow_decay, warmup=cfg.flow_warmup)
    result = TrainResult()
    B = cfg.batch_size
    scale = cfg.input_scale
    start = time.perf_counter()
    last_good, last_good_it = flow.state(), 0
    ckpt_dir = Path(cfg.checkpoint_dir) if cfg.checkpoint_dir else None

    def check(value, name, it):
        if not np.isfinite(value) or abs(value) > cfg.divergence_threshold:
            if ckpt_dir is not None:
                flow.load_state(last_good)
                flow.save(ckpt_dir / "flow_last_good", {"iteration": last_good_it})
            raise DivergenceError(f"{name} = {value} at iteration {it}", it, last_good, last_good_it)

    def critic_step(it, lambda_L):
        nonlocal gp
        if cfg.resample_per_critic_step:
            gp = scale * target(rng, B)
        kappa, _ = flow.sample(B, rng)
        fm = scale * forward_map(kappa)
        alpha = rng.uniform(size=(B, 1))
        f_hat = alpha * fm + (1.0 - alpha) * gp
        critic.power_iteration(1)
        terms = critic_loss(critic, gp, fm, f_hat, lambda_L, cfg.penalty)
        check(terms.objective.value, "critic objective", it)
        c_grads = grad(-terms.objective, critic.params)
        c_opt.step(c_grads)
        result.critic_updates += 1
        if on_critic_step is not None:
            on_critic_step(it)
        return terms, c_grads

    gp = scale * target(rng, B)
    # Warm-up orients a fresh critic before the flow moves.  The penalty weight
    # ramps up from 0: with the full penalty from the start, a critic whose
    # initial slope has the wrong sign cannot flip it in one dimension, since
    # flipping passes through zero gradient where the penalty peaks.
    n_warm = cfg.critic_warmup if cfg.iterations else 0
    for k in range(n_warm):
        critic_step(0, cfg.lambda_L * ((k + 1) / n_warm) ** 2)
    for it in range(1, cfg.iterations + 1):
        for _ in range(cfg.critic_iters):
            terms, c_grads = critic_step(it, cfg.lambda_L)
        gp = scale * target(rng, B)
        u = rng.standard_normal((B, flow.n_kappa))
        for p in critic.params:
            p.requires_grad = False
        try:
            lw = flow_loss(critic, flow, forward_map, gp, u, scale)
        finally:
            for p in critic.params:
                p.requires_grad = True
        check(lw.value, "L_W", it)
        f_grads = grad(lw, flow.params)
        lr = f_opt.lr
        f_opt.step(f_grads)
        result.flow_updates += 1
        if it % cfg.log_every == 0 or it == cfg.iterations:
            w = float(terms.wasserstein.value) / scale
            pen = float(terms.penalty.value)
            result.history.append(
                {
                    "iteration": it,
                    "L_W": float(lw.value) / scale,
                    "L_L": w - cfg.lambda_L * pen,
                    "wasserstein": w,
                    "penalty": pen,
                    "lr": lr,
                    "critic_grad_norm": _norm(c_grads),
                    "flow_grad_norm": _norm(f_grads),
                    "wall_time": time.perf_counter() - start,
                }
            )
        if it % cfg.checkpoint_every == 0:
            last_good, last_good_it = flow.state(), it
            if ckpt_dir is not None:
                path = flow.save(ckpt_dir / f"flow_{it:06d}", {"iteration": it})
                result.checkpoints.append(str(path))
    return result


def write_history(history: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS)
        writer.writeheader()
        for row in history:
            writer.writerow(row)


def config_dict(cfg: DistillConfig) -> dict:
    return asdict(cfg)
